//! Flat `key = value` run configuration.
//!
//! Grammar: one `key = value` pair per line; `#` starts a comment; blank
//! lines are ignored; keys are dotted names from [`KEYS`]. Keys starting
//! with `manifest.` are skipped, so a written manifest can be fed back in as
//! a config. Unknown keys are errors.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::ShiftSpec;
use crate::error::{Error, Result};
use crate::nn::{DropoutSpec, DropoutVariant};
use crate::objectives::{ObjectiveConfig, Variant};
use crate::train::{ModelConfig, TrainConfig};

/// Every recognised key with its default value and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("run.name", "afn", "output directory name under run/ when --out is absent"),
    ("seed", "0", "training seed (initialization, batch order, dropout, subsampling)"),
    ("data.source", "", "source CSV; empty means generate from shift.*"),
    ("data.target", "", "target CSV; empty means generate from shift.*"),
    ("data.keep", "", "comma list of target classes to keep (partial setting); empty keeps all"),
    ("shift.n_classes", "4", "number of Gaussian blobs"),
    ("shift.dim", "16", "input dimension"),
    ("shift.samples", "2000", "samples per domain"),
    ("shift.radius", "4", "radius of the circle holding the class means"),
    ("shift.noise", "1.2", "per-coordinate standard deviation"),
    ("shift.angle_deg", "30", "target rotation in the first coordinate plane, degrees"),
    ("shift.scale", "0.5", "target scale factor"),
    ("shift.translation", "", "comma list of target offsets; empty means zero"),
    ("shift.seed", "0", "generator seed"),
    ("model.hidden", "64,64", "backbone widths"),
    ("model.embedding", "64", "bottleneck feature size E"),
    ("model.bottleneck_blocks", "1", "linear+BN+ReLU+dropout blocks"),
    ("model.dropout", "0.5", "dropout probability"),
    ("model.dropout_variant", "l2", "l1 or l2 norm-preserving dropout scaling"),
    ("model.num_classes", "", "output width; empty means from the source labels"),
    ("objective.variant", "safn", "source_only, hafn, safn or safn_capped"),
    ("objective.lambda", "0.05", "norm penalty weight"),
    ("objective.radius", "25", "hafn target norm / safn_capped floor"),
    ("objective.delta_r", "1.0", "safn per-iteration norm step"),
    ("objective.ent", "false", "add target entropy minimization"),
    ("objective.ent_weight", "0.1", "entropy term weight"),
    ("train.lr", "0.001", "SGD learning rate"),
    ("train.momentum", "0.9", "SGD momentum"),
    ("train.epochs", "200", "passes over the larger domain"),
    ("train.batch_size", "32", "samples per domain per iteration"),
    ("train.max_iterations", "", "optional iteration cap"),
    ("robustness.l_percent", "5", "labeled target percentage for the supervised regime"),
    ("eval.checkpoint", "", "checkpoint to load; empty means <out>/checkpoint"),
    ("selfcheck.fault", "none", "none or flip_matmul (corrupts a backward rule)"),
];

const MANIFEST_PREFIX: &str = "manifest.";

/// Effective configuration: defaults overlaid with file values, then flags.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.trim().to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key `{key}`"))),
        }
    }

    /// Applies a `key=value` flag.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{pair}`")))?;
        self.set(k.trim(), v)
    }

    pub fn merge_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected `key = value`", i + 1)))?;
            let k = k.trim();
            if k.starts_with(MANIFEST_PREFIX) {
                continue;
            }
            self.set(k, v)
                .map_err(|e| Error::Config(format!("{origin}:{}: {}", i + 1, strip(&e))))?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.merge_text(&text, &path.display().to_string())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("registered key")
    }

    /// All keys with effective values, sorted, one `key = value` per line.
    pub fn snapshot(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key);
        raw.parse()
            .map_err(|_| Error::Config(format!("{key}: cannot parse `{raw}`")))
    }

    fn optional<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        if self.get(key).is_empty() {
            Ok(None)
        } else {
            self.parse(key).map(Some)
        }
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let raw = self.get(key);
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|w| {
                w.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{key}: cannot parse `{w}` in `{raw}`")))
            })
            .collect()
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let raw = self.get(key);
        (!raw.is_empty()).then(|| PathBuf::from(raw))
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("seed")
    }

    pub fn run_name(&self) -> &str {
        self.get("run.name")
    }

    pub fn data_paths(&self) -> Result<Option<(PathBuf, PathBuf)>> {
        match (self.path("data.source"), self.path("data.target")) {
            (Some(s), Some(t)) => Ok(Some((s, t))),
            (None, None) => Ok(None),
            _ => Err(Error::Config("data.source and data.target must be given together".into())),
        }
    }

    pub fn keep(&self) -> Result<Option<Vec<usize>>> {
        let keep: Vec<usize> = self.list("data.keep")?;
        Ok((!keep.is_empty()).then_some(keep))
    }

    pub fn shift_spec(&self) -> Result<ShiftSpec> {
        let spec = ShiftSpec {
            n_classes: self.parse("shift.n_classes")?,
            dim: self.parse("shift.dim")?,
            samples: self.parse("shift.samples")?,
            radius: self.parse("shift.radius")?,
            noise: self.parse("shift.noise")?,
            angle: self.parse::<f64>("shift.angle_deg")?.to_radians(),
            scale: self.parse("shift.scale")?,
            translation: self.list("shift.translation")?,
            seed: self.parse("shift.seed")?,
        };
        spec.validate().map_err(|e| Error::Config(format!("shift.*: {}", strip(&e))))?;
        Ok(spec)
    }

    pub fn objective(&self) -> Result<ObjectiveConfig> {
        let variant = Variant::parse(self.get("objective.variant"))?;
        let radius = Some(self.parse("objective.radius")?);
        let delta_r = Some(self.parse("objective.delta_r")?);
        let cfg = ObjectiveConfig {
            variant,
            lambda: match variant {
                Variant::SourceOnly => 0.0,
                _ => self.parse("objective.lambda")?,
            },
            radius: matches!(variant, Variant::Hafn | Variant::SafnCapped).then_some(radius).flatten(),
            delta_r: matches!(variant, Variant::Safn | Variant::SafnCapped).then_some(delta_r).flatten(),
            ent: self.parse("objective.ent")?,
            ent_weight: self.parse("objective.ent_weight")?,
        };
        cfg.validate().map_err(|e| Error::Config(format!("objective.*: {}", strip(&e))))?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let variant = DropoutVariant::parse(self.get("model.dropout_variant"))?;
        let dropout = DropoutSpec::new(self.parse("model.dropout")?, variant)
            .map_err(|e| Error::Config(format!("model.dropout: {}", strip(&e))))?;
        let cfg = TrainConfig {
            objective: self.objective()?,
            learning_rate: self.parse("train.lr")?,
            momentum: self.parse("train.momentum")?,
            epochs: self.parse("train.epochs")?,
            batch_size: self.parse("train.batch_size")?,
            seed: self.seed()?,
            model: ModelConfig {
                hidden: self.list("model.hidden")?,
                embedding_size: self.parse("model.embedding")?,
                bottleneck_blocks: self.parse("model.bottleneck_blocks")?,
                dropout,
                num_classes: self.optional("model.num_classes")?,
                ..ModelConfig::default()
            },
            max_iterations: self.optional("train.max_iterations")?,
            last_good_path: None,
        };
        cfg.validate().map_err(|e| Error::Config(format!("train.*: {}", strip(&e))))?;
        Ok(cfg)
    }

    pub fn l_percent(&self) -> Result<f64> {
        self.parse("robustness.l_percent")
    }

    pub fn checkpoint(&self) -> Option<PathBuf> {
        self.path("eval.checkpoint")
    }

    pub fn fault(&self) -> Result<Option<crate::autograd::BackwardFault>> {
        match self.get("selfcheck.fault") {
            "none" | "" => Ok(None),
            "flip_matmul" => Ok(Some(crate::autograd::BackwardFault::FlipMatMulSign)),
            other => Err(Error::Config(format!(
                "selfcheck.fault: unknown fault `{other}` (expected none or flip_matmul)"
            ))),
        }
    }
}

/// Message of a config error without its `config:` display prefix.
fn strip(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_build_the_canned_setup() {
        let c = Config::default();
        assert_eq!(c.shift_spec().unwrap(), ShiftSpec::canned());
        let t = c.train_config().unwrap();
        assert_eq!(t.objective, ObjectiveConfig::safn());
        assert_eq!(t.learning_rate, 1e-3);
        assert_eq!(t.epochs, 200);
        assert_eq!(t.model, ModelConfig::default());
    }

    #[test]
    fn file_then_flags() {
        let mut c = Config::default();
        c.merge_text("# comment\nobjective.variant = hafn  # trailing\n\ntrain.epochs=3\n", "x")
            .unwrap();
        c.set_pair("train.epochs=7").unwrap();
        let t = c.train_config().unwrap();
        assert_eq!(t.objective, ObjectiveConfig::hafn());
        assert_eq!(t.epochs, 7);
    }

    #[test]
    fn unknown_keys_are_errors_with_location() {
        let mut c = Config::default();
        let e = c.merge_text("train.epocs = 3\n", "cfg.txt").unwrap_err().to_string();
        assert!(e.contains("cfg.txt:1") && e.contains("train.epocs"), "{e}");
        assert!(c.set_pair("nope=1").is_err());
        assert!(c.set_pair("missing-equals").is_err());
    }

    #[test]
    fn bad_values_name_the_key() {
        let mut c = Config::default();
        c.set("train.lr", "fast").unwrap();
        let e = c.train_config().unwrap_err().to_string();
        assert!(e.contains("train.lr"), "{e}");
        let mut c = Config::default();
        c.set("shift.scale", "-1").unwrap();
        assert!(c.shift_spec().unwrap_err().to_string().contains("shift"));
    }

    #[test]
    fn snapshot_reloads_to_the_same_config() {
        let mut c = Config::default();
        c.set("objective.variant", "safn_capped").unwrap();
        c.set("data.keep", "0,1").unwrap();
        let text = format!("{}manifest.command = train\nmanifest.artifact.x = abc\n", c.snapshot());
        let mut back = Config::default();
        back.merge_text(&text, "manifest").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.keep().unwrap(), Some(vec![0, 1]));
    }

    #[test]
    fn source_only_ignores_lambda() {
        let mut c = Config::default();
        c.set("objective.variant", "source_only").unwrap();
        assert_eq!(c.objective().unwrap(), ObjectiveConfig::source_only());
    }
}
