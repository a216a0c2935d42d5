//! Run configuration: a TOML file with `[model]`, `[train]`, `[data]` and
//! `[inference]` sections, plus `section.key=value` command-line overrides.
//!
//! Unknown keys are rejected. [`RunConfig::canonical`] is the exact text
//! stored in checkpoints and output manifests.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub levels: usize,
    pub steps_per_level: usize,
    /// Layer kinds making up one flow step, looked up in the layer registry.
    pub step_layers: Vec<String>,
    pub coupling_hidden: usize,
    pub encoder_blocks: usize,
    pub encoder_dense_layers: usize,
    pub encoder_growth: usize,
    pub encoder_width: usize,
    pub encoder_residual_scale: f64,
    /// Upper bound `M` of the encoder color map, produced as `M·sigmoid(.)`.
    pub color_map_range: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            levels: 2,
            steps_per_level: 4,
            step_layers: vec!["actnorm".into(), "inv1x1".into(), "affine-coupling".into()],
            coupling_hidden: 32,
            encoder_blocks: 4,
            encoder_dense_layers: 3,
            encoder_growth: 16,
            encoder_width: 32,
            encoder_residual_scale: 0.2,
            color_map_range: 2.0,
        }
    }
}

impl ModelConfig {
    /// Three levels of twelve steps.
    pub fn paper_scale() -> Self {
        ModelConfig {
            levels: 3,
            steps_per_level: 12,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.steps_per_level == 0 {
            return Err(Error::invalid("model.levels and model.steps_per_level must be >= 1"));
        }
        if self.encoder_dense_layers == 0 || self.encoder_width == 0 || self.encoder_growth == 0 {
            return Err(Error::invalid("encoder widths and layer counts must be >= 1"));
        }
        if !(self.encoder_residual_scale > 0.0 && self.encoder_residual_scale <= 1.0) {
            return Err(Error::invalid("model.encoder_residual_scale must lie in (0, 1]"));
        }
        if self.color_map_range <= 0.0 {
            return Err(Error::invalid("model.color_map_range must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub patch_size: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub total_iters: u64,
    /// Learning-rate milestones as fractions of `total_iters`.
    pub milestones: Vec<f64>,
    pub lr_decay: f64,
    /// Probability of taking the reference color map as the prior mean.
    pub selector_p: f64,
    pub seed: u64,
    /// Name of the training objective (`nll` or `l1-baseline`).
    pub loss_mode: String,
    /// In `l1-baseline` mode, iterations trained with NLL before switching.
    pub nll_warmup_iters: u64,
    /// Laplace scale used to report the l1 objective in nats.
    pub laplace_b: f64,
    /// Checkpoint cadence in iterations; 0 saves only at the end.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            patch_size: 32,
            batch_size: 8,
            lr: 5e-4,
            total_iters: 2000,
            milestones: vec![0.5, 0.75, 0.9, 0.95],
            lr_decay: 0.5,
            selector_p: 0.2,
            seed: 0,
            loss_mode: "nll".into(),
            nll_warmup_iters: 1000,
            laplace_b: 0.1,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Paired dataset root with `low/` and `high/` subdirectories.
    pub train_root: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub mode: String,
    pub samples: usize,
    pub temperature: f64,
    pub z_offset: f64,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            mode: "mean".into(),
            samples: 1,
            temperature: 1.0,
            z_offset: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub inference: InferenceConfig,
}

impl RunConfig {
    /// Parses config text, applies `key=value` overrides, and validates.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        // Parse the file on its own first so errors point into it.
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| toml_error(text, &e))?;
        if !overrides.is_empty() {
            let mut table: toml::Table = toml::from_str(text).map_err(|e| toml_error(text, &e))?;
            for ov in overrides {
                apply_override(&mut table, ov)?;
            }
            cfg = RunConfig::deserialize(toml::Value::Table(table)).map_err(|e| Error::Config {
                message: format!("in --set overrides: {}", e.message()),
                line: 0,
                column: 0,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, overrides)
    }

    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        let f = 1usize << self.model.levels;
        if t.patch_size == 0 || t.patch_size % f != 0 {
            return Err(Error::invalid(format!(
                "train.patch_size {} is not divisible by 2^levels = {f}",
                t.patch_size
            )));
        }
        if !(0.0..=1.0).contains(&t.selector_p) {
            return Err(Error::invalid("train.selector_p must lie in [0, 1]"));
        }
        if t.batch_size == 0 {
            return Err(Error::invalid("train.batch_size must be >= 1"));
        }
        if t.lr <= 0.0 || t.laplace_b <= 0.0 {
            return Err(Error::invalid("train.lr and train.laplace_b must be positive"));
        }
        if t.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::invalid("train.milestones are fractions in [0, 1]"));
        }
        let inf = &self.inference;
        if inf.samples == 0 {
            return Err(Error::invalid("inference.samples must be >= 1"));
        }
        if inf.temperature < 0.0 {
            return Err(Error::invalid("inference.temperature must be >= 0"));
        }
        Ok(())
    }
}

fn apply_override(table: &mut toml::Table, ov: &str) -> Result<()> {
    let (key, raw) = ov
        .split_once('=')
        .ok_or_else(|| Error::invalid(format!("override `{ov}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let (last, parents) = path.split_last().expect("split yields one part");
    let mut cur = table;
    for p in parents {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::invalid(format!("override `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn toml_error(text: &str, e: &toml::de::Error) -> Error {
    let (line, column) = match e.span() {
        Some(span) => {
            let before = &text[..span.start.min(text.len())];
            let line = before.matches('\n').count() + 1;
            let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
            (line, column)
        }
        None => (0, 0),
    };
    Error::Config {
        message: e.message().to_string(),
        line,
        column,
    }
}
