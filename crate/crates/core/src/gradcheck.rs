//! Whole-model finite-difference check on a small synthetic batch.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::grad_check;
use crate::model::{param_group, FalconX, ModelConfig, PARAM_GROUPS};
use crate::preprocess::{ForecastWindow, PreparedBatch};
use crate::Result;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Largest relative error accepted per group.
pub const FD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub group: String,
    pub max_rel_error: f64,
    /// Parameter holding the worst scalar.
    pub worst: String,
    pub skipped: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelGradReport {
    pub groups: Vec<GroupCheck>,
}

impl ModelGradReport {
    /// Checked groups whose error exceeds `tolerance`.
    pub fn failures(&self, tolerance: f64) -> Vec<&GroupCheck> {
        self.groups
            .iter()
            .filter(|g| !g.skipped && !(g.max_rel_error < tolerance))
            .collect()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.groups
            .iter()
            .filter(|g| !g.skipped)
            .map(|g| g.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// Two entities with one and two variates: two history patches and one
/// horizon patch each, with one missing observation.
pub fn check_batch(config: &ModelConfig, seed: u64) -> Result<PreparedBatch> {
    let lp = config.patch_len;
    let (context, horizon) = (2 * lp, lp);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut series = |v: usize| -> Vec<Vec<f64>> {
        (0..v)
            .map(|_| {
                let phase: f64 = rng.random_range(0.0..6.0);
                (0..context + horizon)
                    .map(|t| libm::sin(0.5 * t as f64 + phase) + rng.random_range(-0.3..0.3))
                    .collect()
            })
            .collect()
    };
    let split = |id: &str, v: Vec<Vec<f64>>| {
        let history = v.iter().map(|x| x[..context].to_vec()).collect();
        let future = v.iter().map(|x| x[context..].to_vec()).collect();
        ForecastWindow::new(id, history, future)
    };
    let mut a = split("a", series(1));
    let b = split("b", series(2));
    a.history[0][1] = f64::NAN;
    PreparedBatch::build(&[a, b], context, horizon, lp, config.norm_mode)
}

/// Compares analytic and central-difference gradients of the joint loss for
/// every parameter outside the `frozen` groups.
pub fn grad_check_model(config: &ModelConfig, seed: u64, frozen: &[String], step: f64) -> Result<ModelGradReport> {
    let mut model = FalconX::new(config.clone(), seed)?;
    let batch = check_batch(config, seed)?;
    let mut store = core::mem::take(&mut model.store);
    let is_frozen = |name: &str| frozen.iter().any(|f| f == param_group(name));
    let checks = grad_check(&mut store, step, |n| !is_frozen(n), |g, s| {
        let out = model.forward_with(g, s, &batch)?;
        model.loss(g, s, &batch, out.pred)
    })?;
    model.store = store;

    let mut report = ModelGradReport::default();
    for group in PARAM_GROUPS {
        let members: Vec<&str> = model
            .store
            .iter()
            .map(|(_, p)| p.name.as_str())
            .filter(|n| param_group(n) == group)
            .collect();
        if members.is_empty() {
            continue;
        }
        if frozen.iter().any(|f| f == group) {
            report.groups.push(GroupCheck {
                group: group.to_string(),
                max_rel_error: 0.0,
                worst: String::new(),
                skipped: true,
            });
            continue;
        }
        let mut entry = GroupCheck {
            group: group.to_string(),
            max_rel_error: 0.0,
            worst: String::new(),
            skipped: false,
        };
        for c in checks.params.iter().filter(|c| param_group(&c.name) == group) {
            if c.max_rel_error >= entry.max_rel_error {
                entry.max_rel_error = c.max_rel_error;
                entry.worst = c.name.clone();
            }
        }
        report.groups.push(entry);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_groups_are_skipped() {
        let cfg = ModelConfig::tiny();
        let r = grad_check_model(&cfg, 1, &["head".into()], FD_STEP).unwrap();
        let head = r.groups.iter().find(|g| g.group == "head").unwrap();
        assert!(head.skipped);
        assert!(r.failures(FD_TOLERANCE).iter().all(|g| g.group != "head"));
    }
}
