// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation steering with a scope gate.
//!
//! A policy holds, for each layer in a window, a PCA projector and an affine
//! transport map fitted between last-token activations of the edit prompts
//! (source) and the same prompts behind an in-context edit prefix (target).
//! At inference a distance gate on the unmodified activations decides whether
//! the transforms fire; out-of-scope inputs follow the base computation
//! exactly.

mod activations;
mod detector;
mod format;
mod policy;
mod transport;

use serde::{Deserialize, Serialize};

use crate::model::ResidualTrace;

pub use activations::{augment_gaussian, augment_gaussian_stream, collect_activations, collect_window};
pub use detector::{in_scope, ScopeDecision, ScopeDetector, ScopeSpace, TAU_COUNTERFACT, TAU_POPULAR};
pub use format::{load_policy, save_policy, POLICY_FORMAT};
pub use policy::{
    fit_policy, source_prompts, steered_decode, steered_forward, LayerSteering, PolicyHook,
    PolicyMetadata, SteeredLogits, SteeringConfig, SteeringPolicy,
};
pub use transport::{fit_transport, steer_transform, TransportMap};

/// Residual-stream quantity a policy reads and rewrites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteerComponent {
    /// Attention output.
    Attn,
    /// Residual state after the attention addition.
    AttnRes,
    /// Feed-forward output.
    Ffn,
    /// Block output.
    Res,
}

impl SteerComponent {
    pub const ALL: [SteerComponent; 4] = [
        SteerComponent::Attn,
        SteerComponent::AttnRes,
        SteerComponent::Ffn,
        SteerComponent::Res,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SteerComponent::Attn => "attn",
            SteerComponent::AttnRes => "attn_res",
            SteerComponent::Ffn => "ffn",
            SteerComponent::Res => "res",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }

    /// This component's state at `layer` in a trace.
    pub fn state(self, trace: &ResidualTrace, layer: usize) -> &[f32] {
        match self {
            SteerComponent::Attn => &trace.attn[layer],
            SteerComponent::AttnRes => &trace.lres[layer],
            SteerComponent::Ffn => &trace.ffn[layer],
            SteerComponent::Res => &trace.lout[layer],
        }
    }
}

impl std::fmt::Display for SteerComponent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}
