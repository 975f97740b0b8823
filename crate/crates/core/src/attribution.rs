// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-layer contribution scores on the residual stream.
//!
//! For a target token `y`, the attention contribution at layer `l` is
//! `log p(y | lres_l) - log p(y | lin_l)` and the FFN contribution is
//! `log p(y | lout_l) - log p(y | lres_l)`, where `log p(y | h)` reads `h`
//! out through the final layer norm and LM head. Because `lin_{l+1} = lout_l`
//! the scores telescope: their total equals
//! `log p(y | lout_{L-1}) - log p(y | lin_0)`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{MegaError, Result};
use crate::evaluation::EditCase;
use crate::model::{Model, ResidualTrace};

/// Residual component scored per layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Attn,
    Ffn,
}

impl Component {
    pub const ALL: [Component; 2] = [Component::Attn, Component::Ffn];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Attn => "attn",
            Self::Ffn => "ffn",
        }
    }

    fn index(self) -> usize {
        match self {
            Self::Attn => 0,
            Self::Ffn => 1,
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which of the two tracked answers a token stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenRole {
    TargetNew,
    GroundTruth,
}

impl TokenRole {
    pub const ALL: [TokenRole; 2] = [TokenRole::TargetNew, TokenRole::GroundTruth];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::TargetNew => "target_new",
            Self::GroundTruth => "ground_truth",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "target_new" => Some(Self::TargetNew),
            "ground_truth" => Some(Self::GroundTruth),
            _ => None,
        }
    }
}

impl fmt::Display for TokenRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `L x 2` matrix of contribution scores for one token.
#[derive(Debug, Clone, PartialEq)]
pub struct ContributionProfile {
    pub token_id: u32,
    pub role: TokenRole,
    /// `scores[l][c]`, `c` indexed by [`Component`] order (attn, ffn).
    pub scores: Vec<[f64; 2]>,
    /// `log p(y | lin_0)`.
    pub baseline_logprob: f64,
    /// `log p(y | lout_{L-1})`.
    pub final_logprob: f64,
}

impl ContributionProfile {
    pub fn n_layers(&self) -> usize {
        self.scores.len()
    }

    pub fn get(&self, layer: usize, component: Component) -> f64 {
        self.scores[layer][component.index()]
    }

    pub fn total(&self) -> f64 {
        self.scores.iter().flatten().sum()
    }
}

/// Scores for `y` read off an existing trace.
pub fn profile_from_trace(
    model: &Model,
    trace: &ResidualTrace,
    y: u32,
    role: TokenRole,
) -> Result<ContributionProfile> {
    let n = trace.n_layers();
    if n == 0 {
        return Err(MegaError::Input("trace has no layers".into()));
    }
    let mut scores = Vec::with_capacity(n);
    let baseline_logprob = model.logprob_from_state(&trace.lin[0], y)?;
    let mut before = baseline_logprob;
    for l in 0..n {
        let at_lres = model.logprob_from_state(&trace.lres[l], y)?;
        let at_lout = model.logprob_from_state(&trace.lout[l], y)?;
        let at_lin = if l == 0 {
            before
        } else {
            model.logprob_from_state(&trace.lin[l], y)?
        };
        scores.push([at_lres - at_lin, at_lout - at_lres]);
        before = at_lout;
    }
    Ok(ContributionProfile {
        token_id: y,
        role,
        scores,
        baseline_logprob,
        final_logprob: before,
    })
}

/// Contribution scores of every layer's attention and FFN output to `y`.
pub fn contribution_profile(
    model: &Model,
    tokens: &[u32],
    position: usize,
    y: u32,
    role: TokenRole,
) -> Result<ContributionProfile> {
    let trace = model.forward_trace(tokens, position)?;
    profile_from_trace(model, &trace, y, role)
}

// ---------------------------------------------------------------------------
// Deltas
// ---------------------------------------------------------------------------

/// `edited - base` contribution scores, keeping both operands for reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaProfile {
    pub token_id: u32,
    pub role: TokenRole,
    pub base: Vec<[f64; 2]>,
    pub edited: Vec<[f64; 2]>,
    pub delta: Vec<[f64; 2]>,
}

impl DeltaProfile {
    pub fn n_layers(&self) -> usize {
        self.delta.len()
    }

    pub fn get(&self, layer: usize, component: Component) -> f64 {
        self.delta[layer][component.index()]
    }

    pub fn base_at(&self, layer: usize, component: Component) -> f64 {
        self.base[layer][component.index()]
    }

    pub fn edited_at(&self, layer: usize, component: Component) -> f64 {
        self.edited[layer][component.index()]
    }
}

pub fn delta_profile(
    base: &ContributionProfile,
    edited: &ContributionProfile,
) -> Result<DeltaProfile> {
    if base.token_id != edited.token_id {
        return Err(MegaError::ProfileMismatch(format!(
            "token {} vs {}",
            base.token_id, edited.token_id
        )));
    }
    if base.role != edited.role {
        return Err(MegaError::ProfileMismatch(format!(
            "role {} vs {}",
            base.role, edited.role
        )));
    }
    if base.n_layers() != edited.n_layers() {
        return Err(MegaError::ProfileMismatch(format!(
            "{} vs {} layers",
            base.n_layers(),
            edited.n_layers()
        )));
    }
    let delta = base
        .scores
        .iter()
        .zip(&edited.scores)
        .map(|(b, e)| [e[0] - b[0], e[1] - b[1]])
        .collect();
    Ok(DeltaProfile {
        token_id: base.token_id,
        role: base.role,
        base: base.scores.clone(),
        edited: edited.scores.clone(),
        delta,
    })
}

/// Elementwise mean of the profiles matching `role` (all when `None`).
///
/// Returns the mean profile and the number of contributing profiles. The
/// mean keeps `token_id` of the first selected profile.
pub fn aggregate_deltas(
    profiles: &[DeltaProfile],
    role: Option<TokenRole>,
) -> Result<(DeltaProfile, usize)> {
    let chosen: Vec<&DeltaProfile> = profiles
        .iter()
        .filter(|p| role.is_none_or(|r| p.role == r))
        .collect();
    let first = *chosen
        .first()
        .ok_or_else(|| MegaError::Empty("no delta profiles to aggregate".into()))?;
    let n_layers = first.n_layers();
    if let Some(p) = chosen.iter().find(|p| p.n_layers() != n_layers) {
        return Err(MegaError::ProfileMismatch(format!(
            "{} vs {n_layers} layers",
            p.n_layers()
        )));
    }
    let count = chosen.len();
    let mean_of = |pick: fn(&DeltaProfile) -> &Vec<[f64; 2]>| -> Vec<[f64; 2]> {
        (0..n_layers)
            .map(|l| {
                let mut acc = [0.0f64; 2];
                for p in &chosen {
                    acc[0] += pick(p)[l][0];
                    acc[1] += pick(p)[l][1];
                }
                [acc[0] / count as f64, acc[1] / count as f64]
            })
            .collect()
    };
    Ok((
        DeltaProfile {
            token_id: first.token_id,
            role: role.unwrap_or(first.role),
            base: mean_of(|p| &p.base),
            edited: mean_of(|p| &p.edited),
            delta: mean_of(|p| &p.delta),
        },
        count,
    ))
}

// ---------------------------------------------------------------------------
// Outcome classification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Successful,
    Failed,
    Excluded,
}

impl Classification {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Successful => "successful",
            Self::Failed => "failed",
            Self::Excluded => "excluded",
        }
    }
}

/// Minimum post-edit accuracy for a successful edit.
pub const SUCCESS_ACCURACY: f64 = 0.9;

/// Excluded when the base model already predicts the target; otherwise
/// successful iff accuracy improved and reached [`SUCCESS_ACCURACY`].
pub fn classify_outcome(acc_pre: f64, acc_post: f64, pre_correct: bool) -> Classification {
    if pre_correct {
        Classification::Excluded
    } else if acc_post > acc_pre && acc_post >= SUCCESS_ACCURACY {
        Classification::Successful
    } else {
        Classification::Failed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditOutcome {
    pub case_id: String,
    pub acc_pre: f64,
    pub acc_post: f64,
    pub pre_correct: bool,
    pub classification: Classification,
}

impl EditOutcome {
    pub fn new(case_id: &str, acc_pre: f64, acc_post: f64, pre_correct: bool) -> Self {
        Self {
            case_id: case_id.to_string(),
            acc_pre,
            acc_post,
            pre_correct,
            classification: classify_outcome(acc_pre, acc_post, pre_correct),
        }
    }
}

// ---------------------------------------------------------------------------
// In-context edit prompt
// ---------------------------------------------------------------------------

/// Lines that precede the final `Prompt:` line: the demonstrations, one per
/// line as `"{prompt} {target}"`, then `New Fact: {prompt} {target}`.
pub fn ike_prefix(demos: &[(String, String)], case: &EditCase) -> Result<String> {
    if case.prompt.is_empty() {
        return Err(MegaError::malformed(&case.case_id, "empty prompt"));
    }
    if case.target_new.is_empty() {
        return Err(MegaError::malformed(&case.case_id, "empty target_new"));
    }
    let mut out = String::new();
    for (p, t) in demos {
        out.push_str(p);
        out.push(' ');
        out.push_str(t);
        out.push('\n');
    }
    out.push_str("New Fact: ");
    out.push_str(&case.prompt);
    out.push(' ');
    out.push_str(&case.target_new);
    out.push('\n');
    Ok(out)
}

/// `[demos] New Fact: {prompt} {target}\nPrompt: {query}`.
pub fn ike_context_for(demos: &[(String, String)], case: &EditCase, query: &str) -> Result<String> {
    Ok(format!("{}Prompt: {query}", ike_prefix(demos, case)?))
}

/// In-context edit prompt for the case's own rewrite prompt.
pub fn build_ike_context(demos: &[(String, String)], case: &EditCase) -> Result<String> {
    ike_context_for(demos, case, &case.prompt)
}
