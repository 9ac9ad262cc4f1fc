//! Checkpoint files: `<stem>.json` metadata and `<stem>.bin` holding the
//! flat parameter vector (little-endian `f64`, encoder flatten order),
//! optionally followed by the Adam first and second moments.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{cine_paths, decode_f64le, encode_f64le, read_bytes, read_json};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::train::AdamState;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    encoder: EncoderConfig,
    seed: u64,
    iteration: usize,
    n_params: usize,
    dtype: String,
    has_adam_state: bool,
    adam_step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub seed: u64,
    pub iteration: usize,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn new(
        params: EncoderParams,
        seed: u64,
        iteration: usize,
        adam: Option<AdamState>,
    ) -> Self {
        Self {
            params,
            seed,
            iteration,
            adam,
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.params.config
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let (json_path, bin_path) = cine_paths(stem);
        if let Some(parent) = json_path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let flat = self.params.flatten();
        let header = CheckpointHeader {
            format_version: CHECKPOINT_FORMAT_VERSION,
            encoder: self.params.config,
            seed: self.seed,
            iteration: self.iteration,
            n_params: flat.len(),
            dtype: "f64le".into(),
            has_adam_state: self.adam.is_some(),
            adam_step: self.adam.as_ref().map_or(0, |a| a.step),
        };
        let mut payload = encode_f64le(&flat);
        if let Some(adam) = &self.adam {
            if adam.m.len() != flat.len() || adam.v.len() != flat.len() {
                return Err(Error::Shape(
                    "adam moments do not match parameter count".into(),
                ));
            }
            payload.extend(encode_f64le(&adam.m));
            payload.extend(encode_f64le(&adam.v));
        }
        let text = serde_json::to_string_pretty(&header)
            .map_err(|e| Error::json(json_path.display().to_string(), e))?;
        fs::write(&json_path, text)?;
        fs::write(&bin_path, payload)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (json_path, bin_path) = cine_paths(stem);
        let header: CheckpointHeader = read_json(&json_path)?;
        if header.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unknown checkpoint format version {}",
                header.format_version
            )));
        }
        if header.dtype != "f64le" {
            return Err(Error::Format(format!(
                "unsupported dtype {:?}",
                header.dtype
            )));
        }
        header.encoder.validate()?;
        let n = header.encoder.n_params();
        if header.n_params != n {
            return Err(Error::Shape(format!(
                "header declares {} parameters, config implies {n}",
                header.n_params
            )));
        }
        let mut values = decode_f64le(&read_bytes(&bin_path)?, &bin_path)?;
        let expected = if header.has_adam_state { 3 * n } else { n };
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "{}: expected {expected} values, found {}",
                bin_path.display(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{}", bin_path.display())));
        }
        let adam = if header.has_adam_state {
            let v = values.split_off(2 * n);
            let m = values.split_off(n);
            Some(AdamState {
                step: header.adam_step,
                m,
                v,
            })
        } else {
            None
        };
        let params = EncoderParams::unflatten(&header.encoder, &values)?;
        Ok(Self {
            params,
            seed: header.seed,
            iteration: header.iteration,
            adam,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_params;

    #[test]
    fn round_trip_with_adam_state() {
        let cfg = EncoderConfig {
            input_dim: 3,
            hidden_dim: 4,
            context: 3,
            agg_hidden: 4,
            embed_dim: 2,
            classifier_hidden1: 3,
            classifier_hidden2: 2,
        };
        let params = init_params(&cfg, 7).unwrap();
        let n = cfg.n_params();
        let adam = AdamState {
            step: 12,
            m: (0..n).map(|i| (i as f64).sin() * 1e-3).collect(),
            v: (0..n).map(|i| (i as f64).cos().powi(2) * 1e-7).collect(),
        };
        let ck = Checkpoint::new(params, 7, 12, Some(adam));
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ck");
        ck.save(&stem).unwrap();
        assert_eq!(Checkpoint::load(&stem).unwrap(), ck);

        let plain = Checkpoint { adam: None, ..ck };
        plain.save(&stem).unwrap();
        assert_eq!(Checkpoint::load(&stem).unwrap(), plain);

        fs::write(dir.path().join("ck.bin"), [0u8; 16]).unwrap();
        assert!(matches!(Checkpoint::load(&stem), Err(Error::Shape(_))));
    }
}
