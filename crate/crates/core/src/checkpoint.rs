//! Backbone checkpoints: configuration, provenance and flat parameter arrays.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::container::{parse_json, to_canonical_json};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const CKPT_FORMAT_VERSION: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// `init`, `graphcl` or `simgrace`.
    pub method: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: BackboneConfig,
    pub params: ParamSet,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format_version: u64,
    config: BackboneConfig,
    provenance: Provenance,
    params: BTreeMap<String, Vec<f64>>,
}

impl Checkpoint {
    /// Freshly initialised backbone.
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            params: config.init(seed),
            config,
            provenance: Provenance {
                method: "init".into(),
                seed,
                notes: BTreeMap::new(),
            },
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let file = CheckpointFile {
            format_version: CKPT_FORMAT_VERSION,
            config: self.config.clone(),
            provenance: self.provenance.clone(),
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.data().to_vec()))
                .collect(),
        };
        to_canonical_json(&file)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = parse_json(text)?;
        if file.format_version != CKPT_FORMAT_VERSION {
            return Err(Error::Version {
                found: file.format_version,
                expected: CKPT_FORMAT_VERSION,
            });
        }
        file.config.validate()?;
        let shapes = file.config.param_shapes();
        let mut params = ParamSet::new();
        for (name, data) in file.params {
            let Some(shape) = shapes.get(&name) else {
                return Err(Error::Shape(format!(
                    "checkpoint array {name} does not belong to a {}-layer {} backbone",
                    file.config.layers, file.config.kind
                )));
            };
            let t = Tensor::new(shape.clone(), data)
                .map_err(|e| Error::Shape(format!("{name}: {e}")))?;
            params.insert(name, t);
        }
        file.config.check_params(&params)?;
        Ok(Self {
            config: file.config,
            params,
            provenance: file.provenance,
        })
    }
}

pub fn save_ckpt(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, ckpt.to_json()?)?;
    Ok(())
}

pub fn load_ckpt(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_json(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneKind;

    fn ckpt() -> Checkpoint {
        Checkpoint::init(BackboneConfig::new(BackboneKind::Gin, 2, 3, 4), 9).unwrap()
    }

    #[test]
    fn round_trip_bitwise() {
        let c = ckpt();
        let back = Checkpoint::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back.params.fingerprint(), c.params.fingerprint());
        assert_eq!(back.config, c.config);
    }

    #[test]
    fn truncated_is_parse_error() {
        let s = ckpt().to_json().unwrap();
        match Checkpoint::from_json(&s[..s.len() / 2]) {
            Err(Error::Parse { offset, .. }) => assert!(offset <= s.len() / 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn layer_count_mismatch() {
        let five = Checkpoint::init(BackboneConfig::new(BackboneKind::Gcn, 5, 3, 4), 0).unwrap();
        let mut two = five.clone();
        two.config.layers = 2;
        assert!(matches!(
            Checkpoint::from_json(&two.to_json().unwrap()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn version_checked() {
        let s = ckpt()
            .to_json()
            .unwrap()
            .replace("\"format_version\":1", "\"format_version\":7");
        assert!(matches!(
            Checkpoint::from_json(&s),
            Err(Error::Version { .. })
        ));
    }
}
