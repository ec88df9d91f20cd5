//! Trained-model checkpoint.
//!
//! ```text
//! magic    8 bytes  "LOCENSM\0"
//! version  u32 LE
//! header   u32 LE length + JSON
//! p        u64 LE
//! params   p x f64 LE
//! ```

use std::path::Path;

use local_ensembles::harness::NormStat;
use local_ensembles::spectral::{model_digest, write_atomic};
use local_ensembles::train::HistoryEntry;
use local_ensembles::{Error, MlpSpec, ParamVector, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"LOCENSM\0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub spec: MlpSpec,
    pub train_config: TrainConfig,
    pub train_config_digest: String,
    pub config_digest: String,
    pub model_digest: String,
    pub feature_names: Vec<String>,
    pub target: String,
    pub norm_stats: Option<Vec<NormStat>>,
    pub target_stat: Option<NormStat>,
    pub best_step: usize,
    /// Absent for a diverged run.
    pub final_grad_norm: Option<f64>,
    pub history: Vec<HistoryEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamVector,
}

pub fn train_config_digest(c: &TrainConfig) -> String {
    let json = serde_json::to_string(c).expect("train config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> local_ensembles::Result<()> {
        let header = serde_json::to_vec(&self.header).map_err(|e| corrupt(path, e.to_string()))?;
        let mut buf = Vec::with_capacity(32 + header.len() + 8 * self.params.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header);
        buf.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for v in self.params.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        write_atomic(path, &buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> local_ensembles::Result<Checkpoint> {
        let buf = std::fs::read(path)?;
        let mut pos = 0;
        let mut take = |n: usize| -> local_ensembles::Result<&[u8]> {
            let end = pos + n;
            if end > buf.len() {
                return Err(corrupt(path, "truncated".into()));
            }
            let s = &buf[pos..end];
            pos = end;
            Ok(s)
        };
        if take(8)? != MAGIC {
            return Err(corrupt(path, "not a checkpoint".into()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        let len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let header: CheckpointHeader = serde_json::from_slice(take(len)?).map_err(|e| corrupt(path, e.to_string()))?;
        let p = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let params: Vec<f64> = take(8 * p)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if pos != buf.len() {
            return Err(corrupt(path, format!("{} trailing bytes", buf.len() - pos)));
        }
        let params = ParamVector(params);
        header.spec.check_params(&params)?;
        if model_digest(&header.spec, &params) != header.model_digest {
            return Err(corrupt(path, "parameters do not match the stored digest".into()));
        }
        Ok(Checkpoint { header, params })
    }
}

fn corrupt(path: &Path, reason: String) -> Error {
    Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use local_ensembles::{init_params, Activation, Head};

    fn sample() -> Checkpoint {
        let spec = MlpSpec::new(2, vec![3], Activation::Tanh, Head::ScalarRegression);
        let params = init_params(&spec, 1).unwrap();
        let train_config = TrainConfig::default();
        Checkpoint {
            header: CheckpointHeader {
                model_digest: model_digest(&spec, &params),
                spec,
                train_config_digest: train_config_digest(&train_config),
                train_config,
                config_digest: "abc".into(),
                feature_names: vec!["a".into(), "b".into()],
                target: "y".into(),
                norm_stats: Some(vec![NormStat { mean: 1.0, sd: 2.0 }; 2]),
                target_stat: None,
                best_step: 5,
                final_grad_norm: Some(0.1),
                history: vec![HistoryEntry {
                    step: 5,
                    train_loss: 1.0,
                    valid_loss: 2.0,
                }],
            },
            params,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = sample();
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
    }

    #[test]
    fn version_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        sample().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        match Checkpoint::load(&path) {
            Err(Error::Version { found: 7, expected }) => assert_eq!(expected, CHECKPOINT_FORMAT_VERSION),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        sample().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Corrupt { .. })));
        std::fs::write(&path, &bytes[..n - 3]).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Corrupt { .. })));
    }
}
