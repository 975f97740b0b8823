// SPDX-License-Identifier: MIT OR Apache-2.0

//! Euclidean scope gate.

use serde::{Deserialize, Serialize};

use super::SteerComponent;
use crate::error::{MegaError, Result};
use crate::model::{Engine, Model};
use crate::numerics::distance;

/// Threshold used for CounterFact-style datasets.
pub const TAU_COUNTERFACT: f64 = 6.5;
/// Threshold used for the RippleEdits Popular subset.
pub const TAU_POPULAR: f64 = 5.0;

/// Where the detector reads its query vector: the component state at
/// `layer`, last token, on the unmodified model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScopeSpace {
    pub layer: usize,
    pub component: SteerComponent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScopeDetector {
    pub reference: Vec<f32>,
    pub tau: f64,
    pub space: ScopeSpace,
}

/// Distance to the reference and the gate verdict (`distance <= tau`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScopeDecision {
    pub distance: f64,
    pub in_scope: bool,
}

impl ScopeDetector {
    pub fn new(reference: Vec<f32>, tau: f64, space: ScopeSpace) -> Result<Self> {
        if !(tau.is_finite() && tau >= 0.0) {
            return Err(MegaError::Input(format!("threshold must be >= 0, got {tau}")));
        }
        Ok(Self {
            reference,
            tau,
            space,
        })
    }

    /// Gate a raw query vector. The boundary is inclusive.
    pub fn decide(&self, query: &[f32]) -> Result<ScopeDecision> {
        if query.len() != self.reference.len() {
            return Err(MegaError::Shape(format!(
                "query has {} entries, detector reference has {}",
                query.len(),
                self.reference.len()
            )));
        }
        let distance = distance(query, &self.reference);
        Ok(ScopeDecision {
            distance,
            in_scope: distance <= self.tau,
        })
    }

    /// Gate a tokenized prompt.
    pub fn check_tokens(&self, model: &Model, tokens: &[u32]) -> Result<ScopeDecision> {
        if tokens.is_empty() {
            return Err(MegaError::Input("empty token sequence".into()));
        }
        if self.space.layer >= model.n_layers() {
            return Err(MegaError::Input(format!(
                "detector layer {} out of range",
                self.space.layer
            )));
        }
        let trace = model.forward_trace(tokens, tokens.len() - 1)?;
        self.decide(self.space.component.state(&trace, self.space.layer))
    }
}

/// Whether `prompt` falls inside the detector's scope.
pub fn in_scope(detector: &ScopeDetector, engine: &Engine, prompt: &str) -> Result<ScopeDecision> {
    detector.check_tokens(&engine.model, &engine.encode_prompt(prompt)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space() -> ScopeSpace {
        ScopeSpace {
            layer: 0,
            component: SteerComponent::AttnRes,
        }
    }

    #[test]
    fn boundary_is_inclusive() {
        let det = ScopeDetector::new(vec![0.0, 0.0], 5.0, space()).unwrap();
        let d = det.decide(&[3.0, 4.0]).unwrap();
        assert_eq!(d.distance, 5.0);
        assert!(d.in_scope);
        assert!(!det.decide(&[3.0, 4.001]).unwrap().in_scope);
        assert!(det.decide(&[0.0, 0.0]).unwrap().in_scope);
    }

    #[test]
    fn rejects_negative_tau_and_bad_dims() {
        assert!(ScopeDetector::new(vec![0.0], -1.0, space()).is_err());
        let det = ScopeDetector::new(vec![0.0], TAU_COUNTERFACT, space()).unwrap();
        assert!(det.decide(&[0.0, 1.0]).is_err());
    }
}
