//! Run configuration: TOML sections `model`, `objective`, `reg`, `data`,
//! `train`, `output`, with `section.key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::modreg::RegWeights;
use crate::nn::{Arch, ModelConfig};
use crate::objectives::{Base, ObjectiveConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelSection,
    pub objective: ObjectiveSection,
    pub reg: RegWeights,
    pub data: DataConfig,
    pub train: TrainSection,
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub arch: Arch,
    /// Dense hidden widths; `[256, 256]` for the MLP, `[128]` for the CNN.
    pub hidden: Option<Vec<usize>>,
    /// CNN conv widths, `[16, 32]` by default.
    pub conv_channels: Option<Vec<usize>>,
    pub kernel_size: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            arch: Arch::Mlp,
            hidden: None,
            conv_channels: None,
            kernel_size: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveSection {
    pub base: Base,
    pub irm_lambda: f64,
    pub irm_anneal_steps: u64,
    pub weight_decay: f64,
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        let d = ObjectiveConfig::default();
        ObjectiveSection {
            base: d.base,
            irm_lambda: d.irm_lambda,
            irm_anneal_steps: d.irm_anneal_steps,
            weight_decay: d.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: u64,
    /// Examples per training environment per step.
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate of the mask logits. Adam moves a parameter by about
    /// `lr` per step, so logits starting at 2.2 need a faster rate than the
    /// weights to cross 0 within a run.
    pub mask_lr: f64,
    pub tau0: f64,
    pub tau_min: f64,
    /// Length of the temperature anneal; half of `steps` when unset.
    pub tau_anneal_steps: Option<u64>,
    pub seed: u64,
    pub eval_interval: u64,
    /// Examples per environment used for intermediate metrics rows; 0 means
    /// all. The final row always uses every example.
    pub eval_limit: usize,
    pub eval_batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: 700,
            batch_size: 128,
            lr: 1e-3,
            mask_lr: 1e-2,
            tau0: 5.0,
            tau_min: 0.5,
            tau_anneal_steps: None,
            seed: 0,
            eval_interval: 100,
            eval_limit: 2000,
            eval_batch_size: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("runs/latest"),
        }
    }
}

impl TrainConfig {
    /// Parses TOML text, applies `key=value` overrides in order (the last one
    /// for a key wins) and validates the result.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: TrainConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("config key `{path}`: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    /// TOML echo of the fully resolved configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?.layer_plan()?;
        self.objective_config().validate()?;
        self.data.validate()?;
        let t = &self.train;
        if t.steps == 0 || t.batch_size == 0 || t.eval_interval == 0 || t.eval_batch_size == 0 {
            return Err(Error::Config(
                "train.steps, train.batch_size, train.eval_interval and train.eval_batch_size must be >= 1".into(),
            ));
        }
        for (name, v) in [("train.lr", t.lr), ("train.mask_lr", t.mask_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(t.tau_min > 0.0 && t.tau0 >= t.tau_min && t.tau0.is_finite()) {
            return Err(Error::Config(format!(
                "temperatures need tau0 >= tau_min > 0, got tau0 = {}, tau_min = {}",
                t.tau0, t.tau_min
            )));
        }
        Ok(())
    }

    /// Model shape with input and class count taken from the data suite.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let (input_shape, classes) = self.data.input_signature();
        let m = &self.model;
        let mut cfg = match m.arch {
            Arch::Mlp => ModelConfig::mlp(&input_shape, m.hidden.as_deref().unwrap_or(&[256, 256]), classes),
            Arch::Cnn => ModelConfig::cnn(
                &input_shape,
                m.conv_channels.as_deref().unwrap_or(&[16, 32]),
                m.hidden.as_deref().unwrap_or(&[128]),
                classes,
            ),
        };
        if m.arch == Arch::Mlp && m.conv_channels.as_ref().is_some_and(|c| !c.is_empty()) {
            return Err(Error::Config("model.conv_channels only applies to arch = \"cnn\"".into()));
        }
        cfg.kernel_size = m.kernel_size;
        Ok(cfg)
    }

    pub fn objective_config(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            base: self.objective.base,
            irm_lambda: self.objective.irm_lambda,
            irm_anneal_steps: self.objective.irm_anneal_steps,
            reg: self.reg,
            weight_decay: self.objective.weight_decay,
        }
    }

    pub fn tau_anneal_steps(&self) -> u64 {
        self.train.tau_anneal_steps.unwrap_or(self.train.steps / 2)
    }
}

/// Applies one `a.b.c=value` override. The value is read as a TOML value when
/// it parses as one, otherwise as a bare string. Bare `seed` and `steps` are
/// shorthands for their `train.` keys.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let key = match key.trim() {
        "seed" => "train.seed",
        "steps" => "train.steps",
        other => other,
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let value = parse_value(raw.trim());
    let (last, parents) = parts.split_last().expect("non-empty");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
