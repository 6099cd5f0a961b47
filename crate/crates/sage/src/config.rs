//! Flat `key = value` run configuration.
//!
//! One UTF-8 text file covers the model, the training plan, loss weights,
//! dataset location and output directory. `#` starts a comment, unknown
//! keys are rejected, and relative paths resolve against the config
//! file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Result, SageError};
use crate::model::ModelConfig;
use crate::train::TrainPlan;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub plan: TrainPlan,
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Directory paths resolve against this.
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            plan: TrainPlan::default(),
            data_dir: None,
            out_dir: PathBuf::from("out"),
            base_dir: PathBuf::from("."),
        }
    }
}

impl RunConfig {
    /// Parse a config file. Overrides may still be applied afterwards;
    /// call [`RunConfig::finish`] exactly once before use.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| {
            SageError::config(format!("cannot read config '{}': {e}", path.display()))
        })?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut cfg = RunConfig { base_dir: base, ..RunConfig::default() };
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                SageError::config(format!(
                    "{} line {}: expected 'key = value', got '{raw}'",
                    path.display(),
                    lineno + 1
                ))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Load with no further overrides.
    pub fn load_final(path: &Path) -> Result<RunConfig> {
        let mut cfg = Self::load(path)?;
        cfg.finish()?;
        Ok(cfg)
    }

    /// Apply one override (also the `--set KEY=VALUE` path).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let parse_f64 = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| SageError::config(format!("bad number '{v}' for {key}")))
        };
        let parse_usize = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| SageError::config(format!("bad integer '{v}' for {key}")))
        };
        match key {
            // Model keys delegate; `seed` feeds both model and plan.
            "in_channels" | "height" | "width" | "conv_channels" | "token_dim"
            | "router_key_dim" | "shared_experts" | "top_k" | "gating" | "num_classes" => {
                self.model.set(key, value)?;
            }
            "seed" => {
                self.model.set("seed", value)?;
                self.plan.seed = self.model.seed;
            }
            "epochs" => self.plan.epochs = parse_usize(value)?,
            "stage2_epochs" => self.plan.stage2_epochs = parse_usize(value)?,
            "batch_size" => self.plan.batch_size = parse_usize(value)?,
            "lr" => self.plan.lr = parse_f64(value)?,
            "weight_decay" => self.plan.weight_decay = parse_f64(value)?,
            "lambda_ce" => self.plan.weights.ce = parse_f64(value)?,
            "lambda_dice" => self.plan.weights.dice = parse_f64(value)?,
            "lambda_lb" => self.plan.weights.lb = parse_f64(value)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = PathBuf::from(value),
            other => return Err(SageError::config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Validate and resolve paths against the config directory.
    pub fn finish(&mut self) -> Result<()> {
        self.model.validate()?;
        if self.plan.weights.ce < 0.0 || self.plan.weights.dice < 0.0 || self.plan.weights.lb < 0.0
        {
            return Err(SageError::config("loss weights must be nonnegative"));
        }
        if let Some(d) = &self.data_dir {
            if d.is_relative() {
                self.data_dir = Some(self.base_dir.join(d));
            }
        }
        if self.out_dir.is_relative() {
            self.out_dir = self.base_dir.join(&self.out_dir);
        }
        Ok(())
    }
}
