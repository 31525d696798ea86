//! Training window sampling, variate permutation/capping and variate-budget
//! batch assembly.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::preprocess::{ForecastWindow, NormMode, PreparedBatch};
use crate::series::EntitySeries;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub min_context: usize,
    pub context_cap: usize,
    pub max_horizon: usize,
    pub patch_len: usize,
    pub max_variates: usize,
    pub variate_budget: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            min_context: 32,
            context_cap: 512,
            max_horizon: 64,
            patch_len: 16,
            max_variates: 8,
            variate_budget: 64,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.patch_len == 0 {
            return fail("patch_len must be positive");
        }
        if self.max_horizon < self.patch_len {
            return fail("max_horizon must be at least one patch");
        }
        if self.context_cap < self.min_context {
            return fail("context_cap must be at least min_context");
        }
        if self.max_variates == 0 || self.variate_budget < self.max_variates {
            return fail("need 1 <= max_variates <= variate_budget");
        }
        Ok(())
    }

    /// Shortest entity that can produce a window.
    pub fn required_length(&self) -> usize {
        self.min_context.max(1) + self.patch_len
    }
}

/// A sampled context/horizon window over selected variates of one entity.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    pub entity: usize,
    pub entity_id: String,
    pub start: usize,
    pub context: usize,
    pub horizon: usize,
    /// Source variate indices, in model row order.
    pub variates: Vec<usize>,
    pub history: Vec<Vec<f64>>,
    pub future: Vec<Vec<f64>>,
}

impl WindowSample {
    pub fn variate_count(&self) -> usize {
        self.variates.len()
    }

    pub fn window(&self) -> ForecastWindow {
        ForecastWindow::new(self.entity_id.clone(), self.history.clone(), self.future.clone())
    }
}

/// Draws `L` uniformly from `[L_min, min(L_cap, len - L_p)]`, then `T` among
/// the multiples of `L_p` in `[L_p, min(T_max, len - L)]`, then a uniform
/// start. All variates are selected.
pub fn sample_window<R: Rng + ?Sized>(
    series: &EntitySeries,
    entity: usize,
    rng: &mut R,
    cfg: &SamplerConfig,
) -> Result<WindowSample> {
    let len = series.len();
    let lp = cfg.patch_len;
    let required = cfg.required_length();
    if len < required {
        return Err(Error::TooShort {
            entity: series.id.clone(),
            length: len,
            required,
        });
    }
    let lo = cfg.min_context.max(1);
    let context = rng.random_range(lo..=cfg.context_cap.min(len - lp));
    let max_k = cfg.max_horizon.min(len - context) / lp;
    let horizon = lp * rng.random_range(1..=max_k);
    let start = rng.random_range(0..=len - context - horizon);
    let variates: Vec<usize> = (0..series.variates()).collect();
    let split = start + context;
    Ok(WindowSample {
        entity,
        entity_id: series.id.clone(),
        start,
        context,
        horizon,
        history: series.slice(&variates, start, split),
        future: series.slice(&variates, split, split + horizon),
        variates,
    })
}

/// Drops variates with no observed history, shuffles the rest and keeps at
/// most `max_variates`.
pub fn permute_and_cap<R: Rng + ?Sized>(
    mut sample: WindowSample,
    rng: &mut R,
    max_variates: usize,
) -> Result<WindowSample> {
    if max_variates == 0 {
        return Err(Error::Config("max_variates must be positive".into()));
    }
    let mut keep: Vec<usize> = (0..sample.variates.len())
        .filter(|&k| sample.history[k].iter().any(|v| v.is_finite()))
        .collect();
    if keep.is_empty() {
        return Err(Error::AllMissing {
            entity: sample.entity_id,
            variate: 0,
        });
    }
    keep.shuffle(rng);
    keep.truncate(max_variates);
    sample.variates = keep.iter().map(|&k| sample.variates[k]).collect();
    sample.history = keep.iter().map(|&k| sample.history[k].clone()).collect();
    sample.future = keep.iter().map(|&k| sample.future[k].clone()).collect();
    Ok(sample)
}

/// Infinite stream of capped samples drawn from a corpus with uniform entity
/// choice. Entities that are too short or empty are skipped and counted.
#[derive(Debug)]
pub struct SampleStream<'a, R> {
    corpus: &'a [EntitySeries],
    rng: R,
    cfg: SamplerConfig,
    univariate_prob: f64,
    pub skipped: usize,
}

impl<'a, R: Rng> SampleStream<'a, R> {
    pub fn new(corpus: &'a [EntitySeries], rng: R, cfg: SamplerConfig) -> Result<Self> {
        cfg.validate()?;
        if !corpus.iter().any(|e| e.len() >= cfg.required_length()) {
            return Err(Error::Input("no entity is long enough to sample".into()));
        }
        Ok(Self {
            corpus,
            rng,
            cfg,
            univariate_prob: 0.0,
            skipped: 0,
        })
    }

    /// With probability `p` a sample is capped to a single variate.
    pub fn with_univariate_prob(mut self, p: f64) -> Self {
        self.univariate_prob = p.clamp(0.0, 1.0);
        self
    }

    pub fn set_univariate_prob(&mut self, p: f64) {
        self.univariate_prob = p.clamp(0.0, 1.0);
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    pub fn into_rng(self) -> R {
        self.rng
    }
}

impl<R: Rng> Iterator for SampleStream<'_, R> {
    type Item = WindowSample;

    fn next(&mut self) -> Option<WindowSample> {
        loop {
            let idx = self.rng.random_range(0..self.corpus.len());
            let Ok(sample) = sample_window(&self.corpus[idx], idx, &mut self.rng, &self.cfg) else {
                self.skipped += 1;
                continue;
            };
            let cap = if self.univariate_prob > 0.0 && self.rng.random_bool(self.univariate_prob) {
                1
            } else {
                self.cfg.max_variates
            };
            match permute_and_cap(sample, &mut self.rng, cap) {
                Ok(s) => return Some(s),
                Err(_) => self.skipped += 1,
            }
        }
    }
}

/// Groups samples greedily until the next one would exceed the variate
/// budget; that sample opens the following group.
#[derive(Debug)]
pub struct BatchAssembler<I: Iterator<Item = WindowSample>> {
    inner: I,
    budget: usize,
    carry: Option<WindowSample>,
}

impl<I: Iterator<Item = WindowSample>> BatchAssembler<I> {
    pub fn new(inner: I, budget: usize) -> Self {
        Self {
            inner,
            budget,
            carry: None,
        }
    }

    pub fn into_inner(self) -> I {
        self.inner
    }

    pub fn inner(&self) -> &I {
        &self.inner
    }

    pub fn inner_mut(&mut self) -> &mut I {
        &mut self.inner
    }
}

impl<I: Iterator<Item = WindowSample>> Iterator for BatchAssembler<I> {
    type Item = Vec<WindowSample>;

    fn next(&mut self) -> Option<Vec<WindowSample>> {
        let mut group = Vec::new();
        let mut used = 0;
        loop {
            let Some(s) = self.carry.take().or_else(|| self.inner.next()) else {
                break;
            };
            if !group.is_empty() && used + s.variate_count() > self.budget {
                self.carry = Some(s);
                break;
            }
            used += s.variate_count();
            group.push(s);
            if used >= self.budget {
                break;
            }
        }
        (!group.is_empty()).then_some(group)
    }
}

/// Samples padded to a common context and horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct AssembledBatch {
    pub samples: Vec<WindowSample>,
    pub context: usize,
    pub horizon: usize,
    pub batch: PreparedBatch,
}

impl AssembledBatch {
    /// Left-pads contexts to the longest one (rounded up so context plus
    /// horizon is a multiple of `patch_len`) and right-pads targets to the
    /// longest horizon.
    pub fn new(samples: Vec<WindowSample>, patch_len: usize, mode: NormMode) -> Result<Self> {
        let horizon = samples.iter().map(|s| s.horizon).max().unwrap_or(0);
        let longest = samples.iter().map(|s| s.context).max().unwrap_or(0);
        if patch_len == 0 || horizon % patch_len != 0 {
            return Err(Error::Divisibility {
                total: horizon,
                patch_len,
            });
        }
        let context = (longest + horizon).div_ceil(patch_len) * patch_len - horizon;
        let windows: Vec<ForecastWindow> = samples.iter().map(WindowSample::window).collect();
        let batch = PreparedBatch::build(&windows, context, horizon, patch_len, mode)?;
        Ok(Self {
            samples,
            context,
            horizon,
            batch,
        })
    }

    pub fn total_variates(&self) -> usize {
        self.samples.iter().map(WindowSample::variate_count).sum()
    }
}
