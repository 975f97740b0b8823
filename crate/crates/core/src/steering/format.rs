// SPDX-License-Identifier: MIT OR Apache-2.0

//! JSON serialization of steering policies.
//!
//! Float arrays are stored as base64 of their little-endian `f32` bytes next
//! to explicit dimensions, so a load reproduces the in-memory policy bit for
//! bit.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::detector::{ScopeDetector, ScopeSpace};
use super::policy::{LayerSteering, PolicyMetadata, SteeringPolicy};
use super::transport::TransportMap;
use super::SteerComponent;
use crate::error::{MegaError, Result};
use crate::numerics::{PcaProjector, TensorF32};

pub const POLICY_FORMAT: &str = "mega-policy/1";

#[derive(Serialize, Deserialize)]
struct Blob {
    dims: Vec<usize>,
    f32le: String,
}

impl Blob {
    fn encode(dims: Vec<usize>, data: &[f32]) -> Self {
        let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            dims,
            f32le: STANDARD.encode(bytes),
        }
    }

    fn decode(&self, what: &str) -> Result<Vec<f32>> {
        let bytes = STANDARD
            .decode(&self.f32le)
            .map_err(|e| MegaError::Policy(format!("{what}: {e}")))?;
        let expected: usize = self.dims.iter().product();
        if bytes.len() != expected * 4 {
            return Err(MegaError::Policy(format!(
                "{what}: {} bytes for dims {:?}",
                bytes.len(),
                self.dims
            )));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn tensor(&self, what: &str) -> Result<TensorF32> {
        TensorF32::new(self.dims.clone(), self.decode(what)?)
    }
}

#[derive(Serialize, Deserialize)]
struct EntryDoc {
    layer: usize,
    component: SteerComponent,
    k: usize,
    mean: Blob,
    basis: Blob,
    #[serde(rename = "A")]
    a: Blob,
    b: Blob,
    lambda: f64,
}

#[derive(Serialize, Deserialize)]
struct DetectorDoc {
    reference: Blob,
    tau: f64,
    space: ScopeSpace,
}

#[derive(Serialize, Deserialize)]
struct PolicyDoc {
    format: String,
    seed: u64,
    metadata: PolicyMetadata,
    detector: DetectorDoc,
    entries: Vec<EntryDoc>,
}

impl SteeringPolicy {
    pub fn to_json(&self) -> Result<String> {
        let doc = PolicyDoc {
            format: POLICY_FORMAT.into(),
            seed: self.seed,
            metadata: self.metadata.clone(),
            detector: DetectorDoc {
                reference: Blob::encode(vec![self.detector.reference.len()], &self.detector.reference),
                tau: self.detector.tau,
                space: self.detector.space,
            },
            entries: self
                .entries
                .iter()
                .map(|e| EntryDoc {
                    layer: e.layer,
                    component: e.component,
                    k: e.projector.k(),
                    mean: Blob::encode(vec![e.projector.dim()], e.projector.mean()),
                    basis: Blob::encode(e.projector.basis().shape().to_vec(), e.projector.basis().data()),
                    a: Blob::encode(e.map.a.shape().to_vec(), e.map.a.data()),
                    b: Blob::encode(vec![e.map.k()], &e.map.b),
                    lambda: e.map.lambda,
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: PolicyDoc = serde_json::from_str(text)?;
        if doc.format != POLICY_FORMAT {
            return Err(MegaError::Policy(format!(
                "unsupported policy format {:?}",
                doc.format
            )));
        }
        let detector = ScopeDetector::new(
            doc.detector.reference.decode("detector reference")?,
            doc.detector.tau,
            doc.detector.space,
        )?;
        let entries = doc
            .entries
            .iter()
            .map(|e| {
                let what = format!("layer {}", e.layer);
                let projector = PcaProjector::new(e.mean.decode(&what)?, e.basis.tensor(&what)?)?;
                let a = e.a.tensor(&what)?;
                let b = e.b.decode(&what)?;
                if a.shape() != [b.len(), b.len()] || projector.k() != e.k {
                    return Err(MegaError::Policy(format!("{what}: map shape mismatch")));
                }
                Ok(LayerSteering {
                    layer: e.layer,
                    component: e.component,
                    projector,
                    map: TransportMap {
                        a,
                        b,
                        lambda: e.lambda,
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        SteeringPolicy::new(doc.metadata, detector, entries, doc.seed)
    }
}

pub fn save_policy(policy: &SteeringPolicy, path: &Path) -> Result<()> {
    std::fs::write(path, policy.to_json()?).map_err(|e| MegaError::io(path, e))
}

pub fn load_policy(path: &Path) -> Result<SteeringPolicy> {
    let text = std::fs::read_to_string(path).map_err(|e| MegaError::io(path, e))?;
    SteeringPolicy::from_json(&text)
}
