//! Full forecasting model: patch embedding, time encoder, prototype
//! diff-attention, latent entity attention, router, gate and quantile head.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::Encoder;
use crate::autodiff::{Graph, Var};
use crate::head::{total_loss, QuantileForecast, QuantileHead, QuantileSet};
use crate::params::ParamStore;
use crate::preprocess::{ForecastWindow, NormMode, PreparedBatch, ResPatchEmbed};
use crate::tensor::Tensor;
use crate::variate::{Gate, Lea, Upda, Vrr, LAMBDA_INIT};
use crate::{Error, Result};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub patch_len: usize,
    pub time_layers: usize,
    pub lea_layers: usize,
    pub heads: usize,
    pub prototypes: usize,
    pub alpha: f64,
    pub lambda_init: f64,
    pub quantiles: QuantileSet,
    pub feed_forward: bool,
    pub norm_mode: NormMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            patch_len: 16,
            time_layers: 2,
            lea_layers: 2,
            heads: 4,
            prototypes: 4,
            alpha: 0.1,
            lambda_init: LAMBDA_INIT,
            quantiles: QuantileSet::default(),
            feed_forward: false,
            norm_mode: NormMode::Asinh,
        }
    }
}

impl ModelConfig {
    /// The smallest configuration used for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            d_model: 8,
            patch_len: 4,
            time_layers: 1,
            lea_layers: 1,
            heads: 2,
            prototypes: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.patch_len == 0 || self.prototypes == 0 {
            return fail("d_model, patch_len and prototypes must be positive".into());
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return fail(format!("alpha must be a non-negative number, got {}", self.alpha));
        }
        if !self.lambda_init.is_finite() {
            return fail("lambda_init must be finite".into());
        }
        Ok(())
    }
}

/// Parameter group of a parameter name, as reported by gradient checks and
/// used for freezing.
pub fn param_group(name: &str) -> &str {
    match name {
        "upda.k_pos" | "upda.k_neg" | "upda.lambda" => name,
        _ if name.starts_with("upda.") => "upda.proj",
        _ => name.split('.').next().unwrap_or(name),
    }
}

/// Names of every parameter group in model order.
pub const PARAM_GROUPS: [&str; 10] = [
    "embed",
    "time",
    "upda.k_pos",
    "upda.k_neg",
    "upda.lambda",
    "upda.proj",
    "lea",
    "vrr",
    "gate",
    "head",
];

/// Intermediate activations of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutputs {
    /// `[M, P, D]`.
    pub embedded: Var,
    /// `[M, P, D]`.
    pub time: Var,
    /// `[P, N*C, D]` before the latent attention.
    pub latent: Var,
    /// `[P, N*C, D]` after the latent attention.
    pub mixed: Var,
    /// `[M, P, C]`.
    pub diff_weights: Var,
    /// `[P, M, N*C]`.
    pub routing: Var,
    /// `[M, P, D]`.
    pub routed: Var,
    /// `[M, P, D]`.
    pub fused: Var,
    /// `[M, T, |Q|]`, normalized scale.
    pub pred: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FalconX {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embed: ResPatchEmbed,
    pub time: Encoder,
    pub upda: Upda,
    pub lea: Lea,
    pub vrr: Vrr,
    pub gate: Gate,
    pub head: QuantileHead,
}

impl FalconX {
    /// Initializes every parameter from a ChaCha stream seeded with `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let embed = ResPatchEmbed::new(&mut store, c.patch_len, c.d_model, &mut rng)?;
        let time = Encoder::new(
            &mut store,
            "time",
            c.time_layers,
            c.d_model,
            c.heads,
            c.feed_forward,
            &mut rng,
        )?;
        let upda = Upda::new(&mut store, c.prototypes, c.d_model, c.lambda_init, &mut rng)?;
        let lea = Lea::new(&mut store, c.lea_layers, c.d_model, c.heads, c.feed_forward, &mut rng)?;
        let vrr = Vrr::new(&mut store, c.d_model, &mut rng)?;
        let gate = Gate::new(&mut store, c.d_model, &mut rng)?;
        let head = QuantileHead::new(&mut store, c.d_model, c.patch_len, c.quantiles.len(), &mut rng)?;
        Ok(Self {
            config,
            store,
            embed,
            time,
            upda,
            lea,
            vrr,
            gate,
            head,
        })
    }

    /// Forward pass using the model's own parameter store.
    pub fn forward(&self, g: &mut Graph, batch: &PreparedBatch) -> Result<ModelOutputs> {
        self.forward_with(g, &self.store, batch)
    }

    /// Forward pass with an external parameter store of the same layout.
    pub fn forward_with(&self, g: &mut Graph, store: &ParamStore, batch: &PreparedBatch) -> Result<ModelOutputs> {
        let c = &self.config;
        if batch.patch_len != c.patch_len {
            return Err(Error::Input(format!(
                "batch patch length {} differs from model patch length {}",
                batch.patch_len, c.patch_len
            )));
        }
        if !batch.horizon.is_multiple_of(c.patch_len) {
            return Err(Error::Divisibility {
                total: batch.horizon,
                patch_len: c.patch_len,
            });
        }
        let patches = batch.patches();
        let x = g.constant(batch.patch_input());
        let embedded = self.embed.forward(g, store, x)?;
        let time = self.time.forward(g, store, embedded, Some(&batch.key_valid))?;

        let up = self.upda.forward(g, store, time, &batch.layout)?;
        let latent_valid = latent_key_valid(batch, c.prototypes, patches);
        let mixed = self.lea.forward(g, store, up.latent, Some(&latent_valid))?;
        let route = self
            .vrr
            .forward(g, store, time, mixed, &batch.layout, c.prototypes)?;
        let fused = self.gate.forward(g, store, time, route.routed)?;
        let pred = self.head.forward(g, store, fused, batch.horizon_patches())?;
        Ok(ModelOutputs {
            embedded,
            time,
            latent: up.latent,
            mixed,
            diff_weights: up.weights,
            routing: route.weights,
            routed: route.routed,
            fused,
            pred,
        })
    }

    /// Joint objective on a batch with targets.
    pub fn loss(&self, g: &mut Graph, store: &ParamStore, batch: &PreparedBatch, pred: Var) -> Result<Var> {
        total_loss(
            g,
            store,
            pred,
            &batch.targets,
            &batch.target_valid,
            &self.config.quantiles,
            &self.upda.bank,
            self.config.alpha,
        )
    }

    /// Normalized predictions `[M, T, |Q|]`.
    pub fn predict(&self, batch: &PreparedBatch) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, batch)?;
        Ok(g.value(out.pred).clone())
    }

    /// Physical-scale quantile forecast for every row of the batch.
    pub fn forecast_batch(&self, batch: &PreparedBatch) -> Result<QuantileForecast> {
        let pred = self.predict(batch)?;
        QuantileForecast::from_normalized(&pred, &batch.stats, batch.mode, &self.config.quantiles)
    }

    /// Forecasts `horizon` steps for each window. Lengths are aligned to the
    /// patch grid by left padding the context and extending the horizon.
    pub fn forecast(&self, windows: &[ForecastWindow], horizon: usize) -> Result<Vec<QuantileForecast>> {
        if horizon == 0 {
            return Err(Error::Input("horizon must be positive".into()));
        }
        let lp = self.config.patch_len;
        let padded_horizon = horizon.div_ceil(lp) * lp;
        let longest = windows.iter().map(ForecastWindow::context_len).max().unwrap_or(0);
        let context = (longest + padded_horizon).div_ceil(lp) * lp - padded_horizon;
        let stripped: Vec<ForecastWindow> = windows
            .iter()
            .map(|w| ForecastWindow::new(w.entity_id.clone(), w.history.clone(), Vec::new()))
            .collect();
        let batch = PreparedBatch::build(&stripped, context, padded_horizon, lp, self.config.norm_mode)?;
        let full = self.forecast_batch(&batch)?;
        let q = self.config.quantiles.len();
        let mut out = Vec::with_capacity(windows.len());
        for i in 0..windows.len() {
            let span = batch.layout.span(i);
            let mut data = Vec::with_capacity(span.len() * horizon * q);
            for row in span.clone() {
                for t in 0..horizon {
                    data.extend_from_slice(full.cell(row, t));
                }
            }
            out.push(QuantileForecast {
                values: Tensor::new(alloc::vec![span.len(), horizon, q], data)?,
                quantiles: self.config.quantiles.clone(),
            });
        }
        Ok(out)
    }
}

/// A prototype token is a valid key at patch `p` when its entity has any
/// context there. Patches with no valid token at all stay fully open.
fn latent_key_valid(batch: &PreparedBatch, prototypes: usize, patches: usize) -> Vec<bool> {
    let layout = &batch.layout;
    let n = layout.entities();
    let mut valid = alloc::vec![false; patches * n * prototypes];
    for p in 0..patches {
        let row = &mut valid[p * n * prototypes..(p + 1) * n * prototypes];
        for i in 0..n {
            let first = layout.span(i).start;
            if batch.key_valid[first * patches + p] {
                row[i * prototypes..(i + 1) * prototypes].fill(true);
            }
        }
        if !row.iter().any(|&v| v) {
            row.fill(true);
        }
    }
    valid
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window(id: &str, v: usize, len: usize, horizon: usize, phase: f64) -> ForecastWindow {
        let f = |i: usize, t: usize| libm::sin(0.3 * t as f64 + phase + i as f64);
        ForecastWindow::new(
            id,
            (0..v).map(|i| (0..len).map(|t| f(i, t)).collect()).collect(),
            (0..v).map(|i| (len..len + horizon).map(|t| f(i, t)).collect()).collect(),
        )
    }

    #[test]
    fn groups_cover_all_parameters() {
        let model = FalconX::new(ModelConfig::tiny(), 0).unwrap();
        for (_, p) in model.store.iter() {
            assert!(PARAM_GROUPS.contains(&param_group(&p.name)), "{}", p.name);
        }
        assert_eq!(param_group("upda.q.w"), "upda.proj");
        assert_eq!(param_group("time.0.q.w"), "time");
    }

    #[test]
    fn forward_shapes_and_finite_loss() {
        let model = FalconX::new(ModelConfig::tiny(), 3).unwrap();
        let ws = [window("a", 2, 8, 4, 0.0), window("b", 1, 8, 4, 1.0)];
        let batch = PreparedBatch::build(&ws, 8, 4, 4, NormMode::Asinh).unwrap();
        let mut g = Graph::new();
        let out = model.forward(&mut g, &batch).unwrap();
        assert_eq!(g.shape(out.pred), &[3, 4, 9]);
        assert_eq!(g.shape(out.mixed), &[3, 4, 8]);
        let loss = model.loss(&mut g, &model.store, &batch, out.pred).unwrap();
        assert!(g.scalar(loss).is_finite());
    }

    #[test]
    fn extra_left_padding_changes_nothing() {
        let model = FalconX::new(ModelConfig::tiny(), 4).unwrap();
        let w = window("a", 2, 8, 4, 0.2);
        let a = PreparedBatch::build(core::slice::from_ref(&w), 8, 4, 4, NormMode::Asinh).unwrap();
        let b = PreparedBatch::build(core::slice::from_ref(&w), 16, 4, 4, NormMode::Asinh).unwrap();
        let (pa, pb) = (model.predict(&a).unwrap(), model.predict(&b).unwrap());
        assert!(pa.max_abs_diff(&pb) < 1e-10);
    }

    #[test]
    fn forecast_trims_to_requested_horizon() {
        let model = FalconX::new(ModelConfig::tiny(), 5).unwrap();
        let ws = [window("a", 2, 7, 0, 0.0)];
        let f = model.forecast(&ws, 3).unwrap();
        assert_eq!(f[0].values.shape(), &[2, 3, 9]);
        assert!(f[0].values.all_finite());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = ModelConfig {
            heads: 3,
            ..ModelConfig::tiny()
        };
        assert!(matches!(FalconX::new(cfg, 0), Err(Error::Config(_))));
        let cfg = ModelConfig {
            alpha: -1.0,
            ..ModelConfig::tiny()
        };
        assert!(FalconX::new(cfg, 0).is_err());
    }
}
