//! Training driver: runs the core trainer, writes the loss trace and
//! periodic checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use falconx_core::train::{StepRecord, Trainer};
use falconx_core::{EntitySeries, FalconX};
use serde::Serialize;

use crate::checkpoint::save_checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const LOSS_TRACE: &str = "loss.csv";
pub const FINAL_CHECKPOINT: &str = "model.flcx";
pub const FAILED_BATCH: &str = "failed_batch.json";

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: FalconX,
    pub trace: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Serialize)]
struct Dump<'a> {
    step: usize,
    error: String,
    samples: Vec<DumpRef<'a>>,
}

#[derive(Serialize)]
struct DumpRef<'a> {
    entity: &'a str,
    start: usize,
    context: usize,
    horizon: usize,
    variates: &'a [usize],
}

/// Trailing mean over the last `window` losses ending at each step.
pub fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    (0..losses.len())
        .map(|i| {
            let from = (i + 1).saturating_sub(window);
            losses[from..=i].iter().sum::<f64>() / (i + 1 - from) as f64
        })
        .collect()
}

fn trace_line(r: &StepRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{}\n",
        r.step, r.lr, r.loss, r.quantile_loss, r.orth_loss, r.grad_norm, r.entities, r.variates
    )
}

/// Trains from scratch on `corpus`. With `out` set, the loss trace, the
/// checkpoints and any failure dump are written there.
pub fn run_training(config: &RunConfig, corpus: &[EntitySeries], seed: u64, out: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let model = FalconX::new(config.model.clone(), seed)?;
    let mut trainer = Trainer::new(model, corpus, config.train.clone(), seed)?;
    let mut trace_file = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOSS_TRACE);
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            f.write_all(b"step,lr,loss,quantile_loss,orth_loss,grad_norm,entities,variates\n")
                .map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    let mut trace = Vec::with_capacity(config.train.steps);
    let mut checkpoints = Vec::new();
    while !trainer.is_finished() {
        let record = match trainer.step() {
            Ok(r) => r,
            Err(e) => return Err(halt(&trainer, e, out)),
        };
        if record.step % 50 == 0 || record.step == 1 {
            log::info!(
                "step {} loss {:.6} quantile {:.6} orth {:.6} lr {:.3e} grad {:.3}",
                record.step,
                record.loss,
                record.quantile_loss,
                record.orth_loss,
                record.lr,
                record.grad_norm
            );
        }
        if let Some((f, path)) = trace_file.as_mut() {
            f.write_all(trace_line(&record).as_bytes()).map_err(|e| Error::io(&*path, e))?;
        }
        let step = record.step;
        trace.push(record);
        if let Some(dir) = out {
            if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 && step < config.train.steps {
                let path = dir.join(format!("step_{step:06}.flcx"));
                save_checkpoint(&trainer.model, config, &path)?;
                checkpoints.push(path);
            }
        }
    }
    if trainer.skipped() > 0 {
        log::warn!("sampler skipped {} draws on short or empty entities", trainer.skipped());
    }
    if let Some(dir) = out {
        let path = dir.join(FINAL_CHECKPOINT);
        save_checkpoint(&trainer.model, config, &path)?;
        checkpoints.push(path);
    }
    Ok(TrainOutcome {
        model: trainer.model,
        trace,
        checkpoints,
    })
}

fn halt(trainer: &Trainer<'_>, err: falconx_core::Error, out: Option<&Path>) -> Error {
    if !matches!(err, falconx_core::Error::NonFinite { .. }) {
        return err.into();
    }
    let step = trainer.steps_done() + 1;
    let dump = Dump {
        step,
        error: err.to_string(),
        samples: trainer
            .last_batch()
            .iter()
            .map(|r| DumpRef {
                entity: &r.entity_id,
                start: r.start,
                context: r.context,
                horizon: r.horizon,
                variates: &r.variates,
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&dump).unwrap_or_default();
    let path = out.map_or_else(|| PathBuf::from(FAILED_BATCH), |d| d.join(FAILED_BATCH));
    if let Err(e) = fs::write(&path, text) {
        log::error!("cannot write {}: {e}", path.display());
    }
    Error::TrainHalted {
        step,
        message: err.to_string(),
        dump: path,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_is_trailing_mean() {
        let s = smoothed(&[1.0, 2.0, 3.0, 4.0], 2);
        assert_eq!(s, vec![1.0, 1.5, 2.5, 3.5]);
    }
}
