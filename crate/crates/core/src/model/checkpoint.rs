use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mlp::HeadParameters;
use crate::dataset::write_file;
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeatureScaler};
use crate::hierarchy::Hierarchy;
use crate::scalar::Scalar;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Trained head plus what is needed to reuse it: the feature stage, the
/// feature scaler and the fingerprint of the hierarchy it was trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Checkpoint<T> {
    pub version: u32,
    pub hierarchy_fingerprint: String,
    pub feature_config: FeatureConfig,
    pub scaler: Option<FeatureScaler<T>>,
    pub params: HeadParameters<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(
        params: HeadParameters<T>,
        hierarchy: &Hierarchy<T>,
        feature_config: FeatureConfig,
        scaler: Option<FeatureScaler<T>>,
    ) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            hierarchy_fingerprint: hierarchy.fingerprint(),
            feature_config,
            scaler,
            params,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::format(format!(
                "checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        let p = &ck.params;
        let mut prev = None;
        for l in &p.layers {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::format("checkpoint layer shape mismatch"));
            }
            if prev.is_some_and(|o| o != l.inputs) {
                return Err(Error::format("checkpoint layers do not chain"));
            }
            prev = Some(l.outputs);
        }
        if p.layers.is_empty() {
            return Err(Error::format("checkpoint has no layers"));
        }
        Ok(ck)
    }

    /// Refuses a hierarchy other than the one the head was trained on.
    pub fn verify(&self, hierarchy: &Hierarchy<T>) -> Result<()> {
        let fp = hierarchy.fingerprint();
        if fp != self.hierarchy_fingerprint || self.params.output_dim() != hierarchy.len() {
            return Err(Error::Fingerprint {
                checkpoint: self.hierarchy_fingerprint.clone(),
                hierarchy: fp,
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_json()?)
    }

    pub fn load(path: &Path, hierarchy: &Hierarchy<T>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck = Self::from_json(&text)?;
        ck.verify(hierarchy)?;
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tree(names: &[&str]) -> Hierarchy<f64> {
        let names: Vec<String> = names.iter().map(|s| s.to_string()).collect();
        let k = names.len();
        let d: Vec<Vec<f64>> = (0..k)
            .map(|i| (0..k).map(|j| if i == j { 0.0 } else { (i + j) as f64 * 0.1 }).collect())
            .collect();
        Hierarchy::build_from_distances(&names, &d).unwrap()
    }

    #[test]
    fn roundtrip_and_fingerprint_check() {
        let h = tree(&["a", "b", "c"]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = HeadParameters::random(3, &[4], h.len(), 0.2, &mut rng).unwrap();
        let ck = Checkpoint::new(p, &h, FeatureConfig::default(), None);
        let back = Checkpoint::<f64>::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        back.verify(&h).unwrap();
        let other = tree(&["a", "b", "d"]);
        assert!(matches!(back.verify(&other), Err(Error::Fingerprint { .. })));
    }
}
