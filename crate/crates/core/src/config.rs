//! Run configuration as a plain `key = value` file.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MsfError, Result};
use crate::eval::Combiner;
use crate::losses::{LossConfig, LossWeights, OccTiming, ReliableParams, TermWeights};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub iterations: usize,
    pub zeta: f64,
    pub lambda_occ: f64,
    pub lambda_sf: f64,
    pub theta: f64,
    pub occ_timing: OccTiming,
    /// Fraction of training after which the occlusion term switches on.
    pub occ_activation: f64,
    pub combiner: Combiner,
    pub model: ModelConfig,
    pub terms: TermWeights,
    pub seed: u64,
    pub steps: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr`.
    pub lr_min_ratio: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub clip: f64,
    pub augment: bool,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            iterations: w.iterations,
            zeta: w.zeta,
            lambda_occ: w.lambda_occ,
            lambda_sf: w.lambda_sf,
            theta: ReliableParams::default().theta,
            occ_timing: OccTiming::Final,
            occ_activation: 0.5,
            combiner: Combiner::And,
            model: ModelConfig::default(),
            terms: TermWeights::default(),
            seed: 0,
            steps: 300,
            lr: 4e-4,
            lr_min_ratio: 0.05,
            warmup: 10,
            weight_decay: 1e-4,
            clip: 1.0,
            augment: false,
            log_every: 1,
            checkpoint_every: 100,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| MsfError::Config(format!("invalid value '{value}' for '{key}'")))
}

fn parse_widths(key: &str, value: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = value.split(',').map(|p| parse(key, p.trim())).collect::<Result<_>>()?;
    parts.try_into().map_err(|_| MsfError::Config(format!("'{key}' needs three comma-separated widths")))
}

impl RunConfig {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            weights: LossWeights {
                zeta: self.zeta,
                lambda_occ: self.lambda_occ,
                lambda_sf: self.lambda_sf,
                iterations: self.iterations,
                timing: self.occ_timing,
            },
            terms: self.terms,
            reliable: ReliableParams { theta: self.theta, ..ReliableParams::default() },
            ..LossConfig::default()
        }
    }

    /// Sets one key; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "iterations" => self.iterations = parse(key, v)?,
            "zeta" => self.zeta = parse(key, v)?,
            "lambda_occ" => self.lambda_occ = parse(key, v)?,
            "lambda_sf" => self.lambda_sf = parse(key, v)?,
            "theta" => self.theta = parse(key, v)?,
            "occ_timing" => self.occ_timing = v.parse()?,
            "occ_activation" => self.occ_activation = parse(key, v)?,
            "combiner" => self.combiner = v.parse()?,
            "model" => {
                self.model = match v {
                    "default" => ModelConfig::default(),
                    "tiny" => ModelConfig::tiny(),
                    other => return Err(MsfError::Config(format!("unknown model preset '{other}'"))),
                }
            }
            "encoder_widths" => self.model.encoder_widths = parse_widths(key, v)?,
            "corr_radius" => self.model.corr_radius = parse(key, v)?,
            "disparity_smooth" => self.terms.disparity_smooth = parse(key, v)?,
            "point_weight" => self.terms.point = parse(key, v)?,
            "flow_smooth" => self.terms.flow_smooth = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "lr_min_ratio" => self.lr_min_ratio = parse(key, v)?,
            "warmup" => self.warmup = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "clip" => self.clip = parse(key, v)?,
            "augment" => self.augment = parse(key, v)?,
            "log_every" => self.log_every = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            other => return Err(MsfError::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| MsfError::Config(format!("line {}: expected 'key = value'", n + 1)))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse_text(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_config().weights.validate()?;
        let bad = |m: &str| Err(MsfError::Config(m.into()));
        if !(self.theta > 0.0) {
            return bad("theta must be positive");
        }
        if !(0.0..=1.0).contains(&self.occ_activation) {
            return bad("occ_activation must lie in [0, 1]");
        }
        if !(self.lr > 0.0) || !(self.clip > 0.0) {
            return bad("lr and clip must be positive");
        }
        if self.log_every == 0 || self.checkpoint_every == 0 {
            return bad("log_every and checkpoint_every must be at least 1");
        }
        Ok(())
    }

    /// Serializes every key, readable by [`RunConfig::parse_text`].
    pub fn to_text(&self) -> String {
        let w = self.model.encoder_widths;
        let timing = match self.occ_timing {
            OccTiming::Final => "final",
            OccTiming::All => "all",
        };
        let combiner = match self.combiner {
            Combiner::And => "and",
            Combiner::Or => "or",
        };
        let preset = if self.model == ModelConfig::tiny() { "tiny" } else { "default" };
        let mut s = String::new();
        let pairs: Vec<(&str, String)> = vec![
            ("iterations", self.iterations.to_string()),
            ("zeta", self.zeta.to_string()),
            ("lambda_occ", self.lambda_occ.to_string()),
            ("lambda_sf", self.lambda_sf.to_string()),
            ("theta", self.theta.to_string()),
            ("occ_timing", timing.into()),
            ("occ_activation", self.occ_activation.to_string()),
            ("combiner", combiner.into()),
            ("model", preset.into()),
            ("encoder_widths", format!("{},{},{}", w[0], w[1], w[2])),
            ("corr_radius", self.model.corr_radius.to_string()),
            ("disparity_smooth", self.terms.disparity_smooth.to_string()),
            ("point_weight", self.terms.point.to_string()),
            ("flow_smooth", self.terms.flow_smooth.to_string()),
            ("seed", self.seed.to_string()),
            ("steps", self.steps.to_string()),
            ("lr", self.lr.to_string()),
            ("lr_min_ratio", self.lr_min_ratio.to_string()),
            ("warmup", self.warmup.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("clip", self.clip.to_string()),
            ("augment", self.augment.to_string()),
            ("log_every", self.log_every.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
