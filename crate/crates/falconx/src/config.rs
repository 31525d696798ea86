//! Flat `key = value` run configuration. Blank lines and `#` comments are
//! ignored; unspecified keys keep their defaults.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use falconx_core::eval::{EvalConfig, InferenceMode};
use falconx_core::head::QuantileSet;
use falconx_core::optim::LrPolicy;
use falconx_core::preprocess::NormMode;
use falconx_core::train::TrainConfig;
use falconx_core::ModelConfig;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Optimizer steps between checkpoints.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let train = TrainConfig::desk(model.patch_len);
        Self {
            model,
            train,
            eval: EvalConfig {
                max_context: 64,
                ..EvalConfig::default()
            },
            checkpoint_every: 500,
        }
    }
}

fn list<T: Display>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse_num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn parse_list(v: &str) -> Vec<&str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
}

impl RunConfig {
    pub fn tiny() -> Self {
        let model = ModelConfig::tiny();
        let mut train = TrainConfig::desk(model.patch_len);
        train.sampler.min_context = 2 * model.patch_len;
        train.sampler.context_cap = 4 * model.patch_len;
        train.sampler.max_horizon = 2 * model.patch_len;
        Self {
            model,
            train,
            ..Self::default()
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fail = |message: String| Error::Config { line: i + 1, message };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| fail(format!("expected key = value, got {line:?}")))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|m| fail(format!("{}: {m}", key.trim())))?;
        }
        cfg.train.sampler.patch_len = cfg.model.patch_len;
        cfg.train.schedule.total_steps = cfg.train.steps;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: falconx_core::Error| Error::Config {
            line: 0,
            message: e.to_string(),
        };
        self.model.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        self.eval.validate().map_err(wrap)?;
        if self.train.sampler.patch_len != self.model.patch_len {
            return Err(Error::Config {
                line: 0,
                message: "sampler and model patch lengths differ".into(),
            });
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        let t = &mut self.train;
        let s = &mut t.sampler;
        let e = &mut self.eval;
        match key {
            "d_model" => m.d_model = parse_num(v)?,
            "patch_len" => m.patch_len = parse_num(v)?,
            "time_layers" => m.time_layers = parse_num(v)?,
            "lea_layers" => m.lea_layers = parse_num(v)?,
            "heads" => m.heads = parse_num(v)?,
            "prototypes" => m.prototypes = parse_num(v)?,
            "alpha" => m.alpha = parse_num(v)?,
            "lambda_init" => m.lambda_init = parse_num(v)?,
            "feed_forward" => m.feed_forward = parse_bool(v)?,
            "norm_mode" => m.norm_mode = NormMode::parse(v).ok_or_else(|| format!("unknown mode {v:?}"))?,
            "quantiles" => {
                let levels = parse_list(v).into_iter().map(parse_num).collect::<std::result::Result<Vec<f64>, _>>()?;
                m.quantiles = QuantileSet::new(&levels).map_err(|e| e.to_string())?;
            }
            "steps" => t.steps = parse_num(v)?,
            "peak_lr" => t.schedule.peak_lr = parse_num(v)?,
            "final_lr" => t.schedule.final_lr = parse_num(v)?,
            "warmup_fraction" => t.schedule.warmup_fraction = parse_num(v)?,
            "lr_policy" => {
                t.schedule.policy = match v {
                    "cosine" => LrPolicy::WarmupCosine,
                    "constant" => LrPolicy::Constant,
                    _ => return Err(format!("expected cosine or constant, got {v:?}")),
                }
            }
            "beta1" => t.adamw.beta1 = parse_num(v)?,
            "beta2" => t.adamw.beta2 = parse_num(v)?,
            "weight_decay" => t.adamw.weight_decay = parse_num(v)?,
            "adam_eps" => t.adamw.eps = parse_num(v)?,
            "clip_norm" => t.clip_norm = parse_num(v)?,
            "frozen" => t.frozen = parse_list(v).into_iter().map(String::from).collect(),
            "two_stage" => t.two_stage = parse_bool(v)?,
            "warm_fraction" => t.warm_fraction = parse_num(v)?,
            "replay_prob" => t.replay_prob = parse_num(v)?,
            "min_context" => s.min_context = parse_num(v)?,
            "context_cap" => s.context_cap = parse_num(v)?,
            "max_horizon" => s.max_horizon = parse_num(v)?,
            "max_variates" => s.max_variates = parse_num(v)?,
            "variate_budget" => s.variate_budget = parse_num(v)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(v)?,
            "eval_horizon" => e.horizon = parse_num(v)?,
            "eval_windows" => e.windows = parse_num(v)?,
            "eval_max_context" => e.max_context = parse_num(v)?,
            "seasonality" => e.seasonality = parse_num(v)?,
            "eval_modes" => {
                e.modes = parse_list(v)
                    .into_iter()
                    .map(|x| InferenceMode::parse(x).ok_or_else(|| format!("unknown mode {x:?}")))
                    .collect::<std::result::Result<_, _>>()?;
            }
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    pub fn entries(&self) -> BTreeMap<&'static str, String> {
        let m = &self.model;
        let t = &self.train;
        let s = &t.sampler;
        let e = &self.eval;
        let policy = match t.schedule.policy {
            LrPolicy::WarmupCosine => "cosine",
            LrPolicy::Constant => "constant",
        };
        let modes: Vec<&str> = e.modes.iter().map(|x| x.as_str()).collect();
        BTreeMap::from([
            ("d_model", m.d_model.to_string()),
            ("patch_len", m.patch_len.to_string()),
            ("time_layers", m.time_layers.to_string()),
            ("lea_layers", m.lea_layers.to_string()),
            ("heads", m.heads.to_string()),
            ("prototypes", m.prototypes.to_string()),
            ("alpha", m.alpha.to_string()),
            ("lambda_init", m.lambda_init.to_string()),
            ("feed_forward", m.feed_forward.to_string()),
            ("norm_mode", m.norm_mode.as_str().to_string()),
            ("quantiles", list(m.quantiles.levels())),
            ("steps", t.steps.to_string()),
            ("peak_lr", t.schedule.peak_lr.to_string()),
            ("final_lr", t.schedule.final_lr.to_string()),
            ("warmup_fraction", t.schedule.warmup_fraction.to_string()),
            ("lr_policy", policy.to_string()),
            ("beta1", t.adamw.beta1.to_string()),
            ("beta2", t.adamw.beta2.to_string()),
            ("weight_decay", t.adamw.weight_decay.to_string()),
            ("adam_eps", t.adamw.eps.to_string()),
            ("clip_norm", t.clip_norm.to_string()),
            ("frozen", t.frozen.join(",")),
            ("two_stage", t.two_stage.to_string()),
            ("warm_fraction", t.warm_fraction.to_string()),
            ("replay_prob", t.replay_prob.to_string()),
            ("min_context", s.min_context.to_string()),
            ("context_cap", s.context_cap.to_string()),
            ("max_horizon", s.max_horizon.to_string()),
            ("max_variates", s.max_variates.to_string()),
            ("variate_budget", s.variate_budget.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("eval_horizon", e.horizon.to_string()),
            ("eval_windows", e.windows.to_string()),
            ("eval_max_context", e.max_context.to_string()),
            ("seasonality", e.seasonality.to_string()),
            ("eval_modes", modes.join(",")),
        ])
    }

    /// One `key = value` line per setting in sorted key order.
    pub fn render(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
