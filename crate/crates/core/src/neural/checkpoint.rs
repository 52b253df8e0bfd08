//! JSON parameter files with a shape manifest.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::model::{Head, NetConfig, NlTsc};
use super::tape::ParamSet;
use crate::error::{Result, TscError};
use crate::network::RoadNetwork;

pub const CHECKPOINT_FORMAT: &str = "tsc-network-params";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: [usize; 2],
    /// Row-major values.
    pub data: Vec<f64>,
}

impl TensorRecord {
    pub fn from_params(names: &[String], values: &[Array2<f64>]) -> Vec<TensorRecord> {
        names
            .iter()
            .zip(values)
            .map(|(name, v)| TensorRecord {
                name: name.clone(),
                shape: [v.nrows(), v.ncols()],
                data: v.iter().copied().collect(),
            })
            .collect()
    }

    /// Rebuilds a parameter set laid out like `like`.
    pub fn to_params(records: &[TensorRecord], like: &ParamSet) -> Result<ParamSet> {
        let manifest_ok = records.len() == like.len()
            && records
                .iter()
                .zip(like.names.iter().zip(&like.values))
                .all(|(r, (n, v))| &r.name == n && r.shape == [v.nrows(), v.ncols()]);
        if !manifest_ok {
            let got = ParamSet {
                names: records.iter().map(|r| r.name.clone()).collect(),
                values: records.iter().map(|r| Array2::zeros((r.shape[0], r.shape[1]))).collect(),
            };
            return Err(TscError::Checkpoint(format!(
                "tensor manifest differs:\n{}",
                manifest_diff(like, &got)
            )));
        }
        let mut out = ParamSet::default();
        for r in records {
            let v = Array2::from_shape_vec((r.shape[0], r.shape[1]), r.data.clone())
                .map_err(|e| TscError::Checkpoint(format!("`{}`: {e}", r.name)))?;
            out.push(r.name.clone(), v);
        }
        Ok(out)
    }
}

/// One line per parameter whose name or shape differs, `expected` vs `found`.
pub fn manifest_diff(expected: &ParamSet, found: &ParamSet) -> String {
    let mut out = String::new();
    let n = expected.len().max(found.len());
    for k in 0..n {
        let e = expected.names.get(k).map(|name| (name, expected.values[k].shape()));
        let f = found.names.get(k).map(|name| (name, found.values[k].shape()));
        if e != f {
            let show = |x: Option<(&String, &[usize])>| x.map_or("-".to_string(), |(n, s)| format!("{n} {s:?}"));
            let _ = writeln!(out, "  #{k}: expected {}, found {}", show(e), show(f));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetCheckpoint {
    pub format: String,
    pub version: u32,
    pub head: Head,
    pub config: NetConfig,
    pub tensors: Vec<TensorRecord>,
}

impl NlTsc {
    pub fn to_checkpoint(&self) -> NetCheckpoint {
        NetCheckpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            head: self.head(),
            config: self.config().clone(),
            tensors: TensorRecord::from_params(&self.params().names, &self.params().values),
        }
    }

    /// Rebuilds a network; `expected`, when given, must match the stored configuration.
    pub fn from_checkpoint(ck: &NetCheckpoint, expected: Option<&NetConfig>, net: Option<&RoadNetwork>) -> Result<NlTsc> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(TscError::Checkpoint(format!(
                "unsupported checkpoint {} v{} (expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION})",
                ck.format, ck.version
            )));
        }
        if let Some(exp) = expected {
            if exp != &ck.config {
                return Err(TscError::Checkpoint(format!(
                    "configuration differs: expected {exp:?}, found {:?}",
                    ck.config
                )));
            }
        }
        let mut model = NlTsc::new(ck.config.clone(), ck.head, net, 0)?;
        let params = TensorRecord::to_params(&ck.tensors, model.params())?;
        model.set_params(params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, text).map_err(|e| TscError::io(path, e))
    }

    pub fn load(path: &Path, expected: Option<&NetConfig>, net: Option<&RoadNetwork>) -> Result<NlTsc> {
        let text = std::fs::read_to_string(path).map_err(|e| TscError::io(path, e))?;
        let ck: NetCheckpoint = serde_json::from_str(&text)?;
        NlTsc::from_checkpoint(&ck, expected, net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::model::MixingMode;

    #[test]
    fn round_trip_is_exact() {
        let model = NlTsc::new(NetConfig::new(3), Head::Value, None, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("value.json");
        model.save(&path).unwrap();
        let back = NlTsc::load(&path, Some(model.config()), None).unwrap();
        assert_eq!(back.params(), model.params());
    }

    #[test]
    fn mismatched_config_reports_diff() {
        let model = NlTsc::new(NetConfig::new(3), Head::Policy, None, 9).unwrap();
        let mut ck = model.to_checkpoint();
        let mut other = NetConfig::new(4);
        other.mixing = MixingMode::Learned;
        assert!(matches!(
            NlTsc::from_checkpoint(&ck, Some(&other), None),
            Err(TscError::Checkpoint(_))
        ));
        ck.tensors[0].shape = [1, 1];
        let err = NlTsc::from_checkpoint(&ck, None, None).unwrap_err().to_string();
        assert!(err.contains("embed.weight"), "{err}");
        ck.version = 99;
        assert!(NlTsc::from_checkpoint(&ck, None, None).is_err());
    }
}
