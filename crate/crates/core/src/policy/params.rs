//! Policy weights and their on-disk form: a little-endian `f64` blob with a
//! JSON metadata sidecar at `<path>.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::example::{FeatureSpec, FEATURE_SCHEMA_VERSION};
use super::PolicyError;
use crate::io::{read_json, sha256_hex, write_json, ArtifactError};

const MAGIC: &[u8; 8] = b"MRCPPOL1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsMeta {
    pub schema_version: u32,
    pub spec: FeatureSpec,
    pub seed: u64,
    /// Digest of the config that produced these weights, when known.
    #[serde(default)]
    pub config_digest: Option<String>,
    /// Digest of the weight blob, checked on load.
    #[serde(default)]
    pub weights_digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub weights: Vec<f64>,
    pub meta: ParamsMeta,
}

impl PolicyParams {
    pub fn zeros(spec: FeatureSpec, seed: u64) -> Self {
        PolicyParams {
            weights: vec![0.0; spec.dim],
            meta: ParamsMeta {
                schema_version: FEATURE_SCHEMA_VERSION,
                spec,
                seed,
                config_digest: None,
                weights_digest: None,
            },
        }
    }

    pub fn spec(&self) -> FeatureSpec {
        self.meta.spec
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    /// Bit-level equality of the weight vectors.
    pub fn bit_identical(&self, other: &PolicyParams) -> bool {
        self.weights.len() == other.weights.len()
            && self
                .weights
                .iter()
                .zip(&other.weights)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 8 * self.weights.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.meta.schema_version.to_le_bytes());
        out.extend_from_slice(&(self.weights.len() as u64).to_le_bytes());
        for w in &self.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    pub fn save(&self, path: &Path) -> Result<(), ArtifactError> {
        let bytes = self.to_bytes();
        let mut meta = self.meta.clone();
        meta.weights_digest = Some(sha256_hex(&bytes));
        fs::write(path, &bytes).map_err(|e| ArtifactError::io(path, e))?;
        write_json(&Self::sidecar_path(path), &meta)
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let bytes = fs::read(path).map_err(|e| ArtifactError::io(path, e))?;
        let meta: ParamsMeta = read_json(&Self::sidecar_path(path))?;
        let bad = |message: &str| {
            PolicyError::Artifact(ArtifactError::Format {
                path: path.display().to_string(),
                message: message.to_string(),
            })
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a policy parameter file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FEATURE_SCHEMA_VERSION || meta.schema_version != version {
            return Err(bad("feature schema version mismatch"));
        }
        let n = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        if bytes.len() != 20 + 8 * n || n != meta.spec.dim {
            return Err(bad("weight count does not match the declared dimension"));
        }
        if let Some(d) = &meta.weights_digest {
            if *d != sha256_hex(&bytes) {
                return Err(bad("weights digest mismatch"));
            }
        }
        let weights: Vec<f64> = bytes[20..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let params = PolicyParams { weights, meta };
        if !params.is_finite() {
            return Err(bad("non-finite weight"));
        }
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        let spec = FeatureSpec {
            dim: 64,
            ..FeatureSpec::default()
        };
        let mut p = PolicyParams::zeros(spec, 11);
        p.weights[3] = -1.25;
        p.weights[63] = f64::MIN_POSITIVE;
        p.save(&path).unwrap();
        let back = PolicyParams::load(&path).unwrap();
        assert!(back.bit_identical(&p));
        assert_eq!(back.meta.seed, 11);

        let mut bytes = fs::read(&path).unwrap();
        bytes[30] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(PolicyParams::load(&path).is_err());
    }
}
