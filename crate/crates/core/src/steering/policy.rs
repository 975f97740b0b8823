// SPDX-License-Identifier: MIT OR Apache-2.0

//! Fitting and applying per-edit steering policies.

use serde::{Deserialize, Serialize};

use super::activations::{augment_gaussian_stream, collect_window};
use super::detector::{ScopeDecision, ScopeDetector, ScopeSpace, TAU_COUNTERFACT};
use super::transport::{fit_transport, steer_transform, TransportMap};
use super::SteerComponent;
use crate::attribution::ike_context_for;
use crate::error::{MegaError, Result};
use crate::evaluation::EditCase;
use crate::model::{Engine, Model, ResidualHook};
use crate::numerics::{pca_fit, PcaOptions, PcaProjector, TensorF32};

/// Hyperparameters for [`fit_policy`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringConfig {
    /// Inclusive `[lo, hi]` layer window.
    pub window: [usize; 2],
    pub component: SteerComponent,
    /// Requested PCA dimension; capped at the pooled data's rank.
    pub k: usize,
    /// Covariance regularization added to both sides of the transport fit.
    pub lambda: f64,
    /// Standard deviation of the activation augmentation noise.
    pub sigma: f64,
    /// Noisy copies per activation row.
    pub per_sample: usize,
    /// Scope threshold on the Euclidean distance to the source centroid.
    pub tau: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Fit one projector and map on activations pooled across the window.
    #[serde(default)]
    pub shared_map: bool,
}

fn default_seed() -> u64 {
    42
}

impl Default for SteeringConfig {
    fn default() -> Self {
        Self {
            window: [0, 0],
            component: SteerComponent::AttnRes,
            k: 32,
            lambda: 1e-2,
            sigma: 0.1,
            per_sample: 4,
            tau: TAU_COUNTERFACT,
            seed: 42,
            shared_map: false,
        }
    }
}

impl SteeringConfig {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        let [lo, hi] = self.window;
        if lo > hi || hi >= n_layers {
            return Err(MegaError::Config(format!(
                "window [{lo}, {hi}] invalid for {n_layers} layers"
            )));
        }
        if self.k == 0 {
            return Err(MegaError::Config("k must be >= 1".into()));
        }
        if !(self.tau.is_finite() && self.tau >= 0.0) {
            return Err(MegaError::Config("tau must be >= 0".into()));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(MegaError::Config("lambda must be >= 0".into()));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(MegaError::Config("sigma must be >= 0".into()));
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<usize> {
        (self.window[0]..=self.window[1]).collect()
    }
}

/// Projector and map applied to one layer's component.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSteering {
    pub layer: usize,
    pub component: SteerComponent,
    pub projector: PcaProjector,
    pub map: TransportMap,
}

impl LayerSteering {
    pub fn transform(&self, h: &[f32]) -> Vec<f32> {
        steer_transform(h, &self.projector, &self.map)
    }
}

/// Fit parameters recorded alongside a policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyMetadata {
    pub case_id: String,
    pub window: [usize; 2],
    pub component: SteerComponent,
    /// Requested PCA dimension.
    pub k: usize,
    /// Dimension actually used (after capping at the data rank).
    pub k_effective: usize,
    pub lambda: f64,
    pub sigma: f64,
    pub per_sample: usize,
    pub tau: f64,
    pub shared_map: bool,
    pub n_source_prompts: usize,
}

/// Deployable single-edit steering: per-layer transforms behind a scope gate.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringPolicy {
    pub metadata: PolicyMetadata,
    pub detector: ScopeDetector,
    /// Sorted by layer, no duplicates.
    pub entries: Vec<LayerSteering>,
    pub seed: u64,
}

impl SteeringPolicy {
    pub fn new(
        metadata: PolicyMetadata,
        detector: ScopeDetector,
        entries: Vec<LayerSteering>,
        seed: u64,
    ) -> Result<Self> {
        if entries.windows(2).any(|w| w[0].layer >= w[1].layer) {
            return Err(MegaError::Policy(
                "entries must be sorted by layer without duplicates".into(),
            ));
        }
        for e in &entries {
            if e.projector.k() != e.map.k() || e.projector.dim() != detector.reference.len() {
                return Err(MegaError::Policy(format!(
                    "entry for layer {} has inconsistent dimensions",
                    e.layer
                )));
            }
        }
        Ok(Self {
            metadata,
            detector,
            entries,
            seed,
        })
    }

    /// Validate layer indices and widths against a model.
    pub fn check_model(&self, model: &Model) -> Result<()> {
        let cfg = model.config();
        for e in &self.entries {
            if e.layer >= cfg.n_layers || e.projector.dim() != cfg.d_model {
                return Err(MegaError::Policy(format!(
                    "entry for layer {} does not fit a model with {} layers of width {}",
                    e.layer, cfg.n_layers, cfg.d_model
                )));
            }
        }
        if self.detector.space.layer >= cfg.n_layers {
            return Err(MegaError::Policy("detector layer out of range".into()));
        }
        Ok(())
    }

    pub fn hook(&self) -> PolicyHook<'_> {
        PolicyHook::new(self)
    }

    pub fn scope(&self, model: &Model, tokens: &[u32]) -> Result<ScopeDecision> {
        self.detector.check_tokens(model, tokens)
    }
}

// ---------------------------------------------------------------------------
// fitting
// ---------------------------------------------------------------------------

/// Prompts whose activations form the source distribution: the rewrite
/// prompt, its paraphrases and any implication prompts, deduplicated in that
/// order.
pub fn source_prompts(case: &EditCase) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let all = std::iter::once(&case.prompt)
        .chain(&case.paraphrase_prompts)
        .chain(&case.implication_prompts);
    for p in all {
        if !p.is_empty() && !out.contains(p) {
            out.push(p.clone());
        }
    }
    out
}

fn pca_and_map(
    src: &TensorF32,
    tgt: &TensorF32,
    k: usize,
    lambda: f64,
) -> Result<(PcaProjector, TransportMap)> {
    let pooled = TensorF32::vstack(&[src, tgt])?;
    let max_k = (pooled.rows() - 1).min(pooled.cols());
    let probe = pca_fit(
        &pooled,
        max_k.min(k),
        PcaOptions {
            allow_zero_variance: true,
        },
    )?;
    let k_eff = k.min(probe.rank).max(1).min(max_k);
    let fit = if k_eff == probe.projector.k() {
        probe
    } else {
        pca_fit(
            &pooled,
            k_eff,
            PcaOptions {
                allow_zero_variance: true,
            },
        )?
    };
    let projector = fit.projector;
    let map = fit_transport(
        &projector.project_rows(src)?,
        &projector.project_rows(tgt)?,
        lambda,
    )?;
    Ok((projector, map))
}

/// Fit a steering policy for one edit.
///
/// Source activations come from [`source_prompts`] on the unmodified model;
/// target activations from the same prompts behind the in-context edit
/// prefix. Both sides are Gaussian-augmented, reduced with PCA fitted on their
/// union, and aligned with a transport map per window layer. The detector
/// centroid is the mean augmented source activation at the first window
/// layer.
pub fn fit_policy(engine: &Engine, case: &EditCase, config: &SteeringConfig) -> Result<SteeringPolicy> {
    config.validate(engine.model.n_layers())?;
    case.validate()?;
    if case.paraphrase_prompts.is_empty() {
        return Err(MegaError::malformed(&case.case_id, "no paraphrase prompts"));
    }
    let sources = source_prompts(case);
    let targets = sources
        .iter()
        .map(|q| ike_context_for(&[], case, q))
        .collect::<Result<Vec<_>>>()?;
    let layers = config.layers();
    let src_acts = collect_window(engine, &sources, &layers, config.component)?;
    let tgt_acts = collect_window(engine, &targets, &layers, config.component)?;

    let mut src_aug = Vec::with_capacity(layers.len());
    let mut tgt_aug = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let stream = 2 * *layer as u64;
        src_aug.push(augment_gaussian_stream(
            &src_acts[i],
            config.per_sample,
            config.sigma,
            config.seed,
            stream,
        )?);
        tgt_aug.push(augment_gaussian_stream(
            &tgt_acts[i],
            config.per_sample,
            config.sigma,
            config.seed,
            stream + 1,
        )?);
    }

    let entries: Vec<LayerSteering> = if config.shared_map {
        let src_refs: Vec<&TensorF32> = src_aug.iter().collect();
        let tgt_refs: Vec<&TensorF32> = tgt_aug.iter().collect();
        let (projector, map) = pca_and_map(
            &TensorF32::vstack(&src_refs)?,
            &TensorF32::vstack(&tgt_refs)?,
            config.k,
            config.lambda,
        )?;
        layers
            .iter()
            .map(|layer| LayerSteering {
                layer: *layer,
                component: config.component,
                projector: projector.clone(),
                map: map.clone(),
            })
            .collect()
    } else {
        layers
            .iter()
            .zip(src_aug.iter().zip(&tgt_aug))
            .map(|(layer, (s, t))| {
                let (projector, map) = pca_and_map(s, t, config.k, config.lambda)?;
                Ok(LayerSteering {
                    layer: *layer,
                    component: config.component,
                    projector,
                    map,
                })
            })
            .collect::<Result<_>>()?
    };

    let centroid: Vec<f32> = src_aug[0]
        .column_means()
        .iter()
        .map(|v| *v as f32)
        .collect();
    let detector = ScopeDetector::new(
        centroid,
        config.tau,
        ScopeSpace {
            layer: layers[0],
            component: config.component,
        },
    )?;
    let k_effective = entries.iter().map(|e| e.projector.k()).min().unwrap_or(0);
    let metadata = PolicyMetadata {
        case_id: case.case_id.clone(),
        window: config.window,
        component: config.component,
        k: config.k,
        k_effective,
        lambda: config.lambda,
        sigma: config.sigma,
        per_sample: config.per_sample,
        tau: config.tau,
        shared_map: config.shared_map,
        n_source_prompts: sources.len(),
    };
    SteeringPolicy::new(metadata, detector, entries, config.seed)
}

// ---------------------------------------------------------------------------
// inference
// ---------------------------------------------------------------------------

/// Residual hook that applies a policy's per-layer transforms.
///
/// - `attn`: attention output replaced by its transform.
/// - `attn_res`: attention output replaced by `T(lin + attn) - lin`, so the
///   post-attention residual becomes `T(lres)`.
/// - `ffn`: FFN output replaced by its transform.
/// - `res`: layer output replaced by its transform after the FFN addition.
pub struct PolicyHook<'a> {
    by_layer: Vec<Option<&'a LayerSteering>>,
}

impl<'a> PolicyHook<'a> {
    pub fn new(policy: &'a SteeringPolicy) -> Self {
        let n = policy.entries.iter().map(|e| e.layer + 1).max().unwrap_or(0);
        let mut by_layer = vec![None; n];
        for e in &policy.entries {
            by_layer[e.layer] = Some(e);
        }
        Self { by_layer }
    }

    fn entry(&self, layer: usize, component: SteerComponent) -> Option<&'a LayerSteering> {
        self.by_layer
            .get(layer)
            .copied()
            .flatten()
            .filter(|e| e.component == component)
    }
}

impl ResidualHook for PolicyHook<'_> {
    fn on_attn(&self, layer: usize, lin: &[f32], attn: &mut [f32]) {
        if let Some(e) = self.entry(layer, SteerComponent::Attn) {
            let out = e.transform(attn);
            attn.copy_from_slice(&out);
        } else if let Some(e) = self.entry(layer, SteerComponent::AttnRes) {
            let lres: Vec<f32> = lin.iter().zip(attn.iter()).map(|(a, b)| a + b).collect();
            let steered = e.transform(&lres);
            for ((o, s), l) in attn.iter_mut().zip(&steered).zip(lin) {
                *o = s - l;
            }
        }
    }

    fn on_ffn(&self, layer: usize, _lres: &[f32], ffn: &mut [f32]) {
        if let Some(e) = self.entry(layer, SteerComponent::Ffn) {
            let out = e.transform(ffn);
            ffn.copy_from_slice(&out);
        }
    }

    fn on_out(&self, layer: usize, lout: &mut [f32]) {
        if let Some(e) = self.entry(layer, SteerComponent::Res) {
            let out = e.transform(lout);
            lout.copy_from_slice(&out);
        }
    }
}

/// Last-position logits and the scope verdict for one steered forward.
#[derive(Debug, Clone)]
pub struct SteeredLogits {
    pub logits: Vec<f32>,
    pub scope: ScopeDecision,
}

/// Forward pass under `policy`. Out-of-scope inputs take the unhooked path
/// and return exactly the base model's logits.
pub fn steered_forward(model: &Model, policy: &SteeringPolicy, tokens: &[u32]) -> Result<SteeredLogits> {
    let scope = policy.scope(model, tokens)?;
    let last = tokens.len() - 1;
    let logits = if scope.in_scope {
        let hook = policy.hook();
        model.forward_logits_hooked(tokens, Some(&hook as &dyn ResidualHook))?
    } else {
        model.forward_logits(tokens, last)?
    };
    Ok(SteeredLogits { logits, scope })
}

/// Greedy decoding under `policy`; scope is decided once on the prompt and
/// the transform is applied at the last position of every step.
pub fn steered_decode(
    model: &Model,
    policy: &SteeringPolicy,
    tokens: &[u32],
    max_new: usize,
) -> Result<(Vec<u32>, ScopeDecision)> {
    let scope = policy.scope(model, tokens)?;
    let hook = policy.hook();
    let out = if scope.in_scope {
        model.greedy_decode(tokens, max_new, Some(&hook as &dyn ResidualHook))?
    } else {
        model.greedy_decode(tokens, max_new, None)?
    };
    Ok((out, scope))
}
