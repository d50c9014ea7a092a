//! Run configuration as flat JSON with dotted keys, e.g.
//!
//! ```json
//! { "preset": "voc", "model.head": "decoder+gat", "train.epochs": 30 }
//! ```
//!
//! Keys not given fall back to the preset (if any), then to the defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::backbone::Stage;
use crate::error::{Error, Result};
use crate::model::{HeadKind, LossConfig, LossKind, ModelConfig};
use crate::train::TrainConfig;

/// The one environment override: where run outputs go.
pub const OUT_DIR_ENV: &str = "MLC_OUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

pub const PRESETS: [&str; 6] = ["coco", "voc", "nus", "vg500", "asl", "reference"];

impl RunConfig {
    /// Per-dataset-style loss and learning-rate settings.
    pub fn preset(name: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        let (s, lr, gneg, gpos) = match name {
            "coco" => (23.0, 0.007, 1.0, 0.0),
            "voc" => (17.0, 0.005, 2.0, 1.0),
            "nus" => (23.0, 0.009, 2.0, 1.0),
            "vg500" => {
                // unnamed labels: no word vectors, so no graph head
                c.model.head = HeadKind::Decoder;
                (25.0, 0.005, 1.0, 0.0)
            }
            "reference" => return Ok(Self::reference()),
            "asl" => {
                c.loss.kind = LossKind::Asl;
                c.loss.asl.gamma_neg = 4.0;
                c.loss.asl.gamma_pos = 0.0;
                c.train.onecycle.max_lr = 1e-4;
                return Ok(c);
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?}; expected one of {PRESETS:?}"
                )))
            }
        };
        c.loss.aam.s = s;
        c.loss.aam.gamma_neg = gneg;
        c.loss.aam.gamma_pos = gpos;
        c.train.onecycle.max_lr = lr;
        Ok(c)
    }

    /// Desk-scale settings sized for the 8×8 synthetic reference data: a
    /// two-stage backbone, ten epochs and a short EMA horizon to match.
    pub fn reference() -> Self {
        let mut c = RunConfig::default();
        c.model.backbone.stages = vec![
            Stage {
                channels: 16,
                stride: 2,
            },
            Stage {
                channels: 32,
                stride: 1,
            },
        ];
        c.train.epochs = 10;
        c.train.ema_decay = 0.99;
        c.train.onecycle.max_lr = 0.05;
        c
    }

    /// Parses flat dotted-key JSON. A `"preset"` key selects the base.
    pub fn from_flat_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        let Value::Object(flat) = value else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        let mut flat = flat;
        let base = match flat.remove("preset") {
            None => RunConfig::default(),
            Some(Value::String(p)) => RunConfig::preset(&p)?,
            Some(other) => {
                return Err(Error::Config(format!(
                    "preset must be a string, got {other}"
                )))
            }
        };
        let mut tree = serde_json::to_value(&base)?;
        for (key, v) in flat {
            set_path(&mut tree, &key, v)?;
        }
        let cfg: RunConfig =
            serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_flat_json(&text)
    }

    /// Every setting as dotted keys, the inverse of [`Self::from_flat_json`].
    pub fn to_flat_json(&self) -> Result<String> {
        let mut flat = Map::new();
        flatten_into(&serde_json::to_value(self)?, String::new(), &mut flat);
        Ok(serde_json::to_string_pretty(&Value::Object(flat))? + "\n")
    }

    /// Output directory after the environment override.
    pub fn resolved_out_dir(&self) -> PathBuf {
        std::env::var_os(OUT_DIR_ENV).map_or_else(|| self.out_dir.clone(), PathBuf::from)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.model.backbone.validate()?;
        let t = &self.train;
        if !(0.0..=1.0).contains(&t.ema_decay) {
            return Err(Error::Config(format!(
                "train.ema_decay {} outside [0, 1]",
                t.ema_decay
            )));
        }
        if !(t.sam.rho >= 0.0) {
            return Err(Error::Config("train.sam.rho must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&t.early_stop.beta) {
            return Err(Error::Config(
                "train.early_stop.beta must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

fn set_path(tree: &mut Value, key: &str, v: Value) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            return Err(Error::Config(format!(
                "config key {key:?}: {:?} is not a section",
                parts[..i].join(".")
            )));
        };
        if i + 1 == parts.len() {
            // an empty map stands for a section that was `None`; serde checks those
            if !map.is_empty() && !map.contains_key(*part) {
                return Err(Error::Config(format!("unknown config key {key:?}")));
            }
            map.insert((*part).to_string(), v);
            return Ok(());
        }
        node = map
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        if node.is_null() {
            *node = Value::Object(Map::new());
        }
    }
    Err(Error::Config("empty config key".into()))
}

fn flatten_into(v: &Value, prefix: String, out: &mut Map<String, Value>) {
    match v {
        Value::Object(map) if !map.is_empty() => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_into(child, key, out);
            }
        }
        _ => {
            out.insert(prefix, v.clone());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_shared_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!(c.loss.aam.m, 0.0);
        assert_eq!(c.loss.aam.k, 0.7);
        assert_eq!(c.train.ema_decay, 0.9997);
        assert_eq!(c.train.sam.rho, 0.05);
        assert_eq!(c.train.early_stop.patience, 5);
        assert_eq!(c.model.decoder.groups, None);
    }

    #[test]
    fn presets_cover_three_scales() {
        let scales: Vec<f64> = ["coco", "voc", "vg500"]
            .iter()
            .map(|p| RunConfig::preset(p).unwrap().loss.aam.s)
            .collect();
        assert_eq!(scales, vec![23.0, 17.0, 25.0]);
        let voc = RunConfig::preset("voc").unwrap();
        assert_eq!((voc.loss.aam.gamma_neg, voc.loss.aam.gamma_pos), (2.0, 1.0));
        assert_eq!(RunConfig::preset("asl").unwrap().loss.kind, LossKind::Asl);
        assert!(RunConfig::preset("imagenet").is_err());
    }

    #[test]
    fn unknown_keys_are_named_in_full() {
        for key in ["bogus", "train.epochz", "loss.aam.sigma"] {
            let err = RunConfig::from_flat_json(&format!("{{\"{key}\": 1}}")).unwrap_err();
            assert_eq!(err.kind(), "config");
            assert!(err.to_string().contains(key), "{err}");
        }
    }

    #[test]
    fn flat_keys_override_preset() {
        let c = RunConfig::from_flat_json(
            r#"{"preset": "voc", "model.head": "decoder+gat", "train.epochs": 7,
                "model.decoder.groups": 3, "loss.aam.pairing": "swapped"}"#,
        )
        .unwrap();
        assert_eq!(c.loss.aam.s, 17.0);
        assert_eq!(c.model.head, HeadKind::DecoderGat);
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.model.decoder.groups, Some(3));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in [
            r#"{"train.epochz": 3}"#,
            r#"{"model.decoder.dim.x": 3}"#,
            r#"{"loss.aam.q": 1}"#,
        ] {
            let err = RunConfig::from_flat_json(bad).unwrap_err();
            assert_eq!(err.kind(), "config", "{bad}: {err}");
        }
    }

    #[test]
    fn reference_preset_fits_reference_data() {
        let c =
            RunConfig::from_flat_json(r#"{"preset": "reference", "model.head": "plain"}"#).unwrap();
        assert_eq!(c.model.backbone.output_hw(8, 8).unwrap(), (4, 4));
        assert_eq!(c.model.head, HeadKind::Plain);
        assert_eq!(c.train.epochs, 10);
    }

    #[test]
    fn flat_round_trip() {
        let mut c = RunConfig::preset("nus").unwrap();
        c.model.decoder.groups = Some(4);
        let back = RunConfig::from_flat_json(&c.to_flat_json().unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
