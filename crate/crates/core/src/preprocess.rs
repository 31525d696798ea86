//! Instance normalization, timestamps, observation masks, patching and the
//! residual patch embedding. Also the inverse map applied to forecasts.

use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::layers::Linear;
use crate::math;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Lower bound applied to the per-variate standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-8;

/// Compressive map applied to z-scores.
///
/// `Asinh` is total and invertible (`sinh` undoes it). `Arcsin` clamps the
/// z-score to `[-1, 1]` first and is inverted by `sin`, so it only round-trips
/// for `|z| <= 1`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NormMode {
    #[default]
    Asinh,
    Arcsin,
}

impl NormMode {
    #[inline]
    pub fn compress(self, z: f64) -> f64 {
        match self {
            NormMode::Asinh => math::asinh(z),
            NormMode::Arcsin => math::asin(z.clamp(-1.0, 1.0)),
        }
    }

    #[inline]
    pub fn expand(self, y: f64) -> f64 {
        match self {
            NormMode::Asinh => math::sinh(y),
            NormMode::Arcsin => math::sin(y),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NormMode::Asinh => "asinh",
            NormMode::Arcsin => "arcsin",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "asinh" => Some(NormMode::Asinh),
            "arcsin" => Some(NormMode::Arcsin),
            _ => None,
        }
    }
}

/// Mean and (floored) population standard deviation of one variate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InstanceStats {
    pub mu: f64,
    pub sigma: f64,
}

impl Default for InstanceStats {
    fn default() -> Self {
        Self { mu: 0.0, sigma: 1.0 }
    }
}

impl InstanceStats {
    /// Statistics over the finite entries only; `None` when there are none.
    pub fn from_observed(values: &[f64]) -> Option<Self> {
        let (mut n, mut sum) = (0usize, 0.0);
        for &v in values.iter().filter(|v| v.is_finite()) {
            n += 1;
            sum += v;
        }
        if n == 0 {
            return None;
        }
        let mu = sum / n as f64;
        let var = values
            .iter()
            .filter(|v| v.is_finite())
            .map(|v| (v - mu) * (v - mu))
            .sum::<f64>()
            / n as f64;
        Some(Self {
            mu,
            sigma: math::sqrt(var).max(SIGMA_FLOOR),
        })
    }

    #[inline]
    pub fn normalize(&self, x: f64, mode: NormMode) -> f64 {
        mode.compress((x - self.mu) / self.sigma)
    }

    #[inline]
    pub fn denormalize(&self, y: f64, mode: NormMode) -> f64 {
        self.sigma * mode.expand(y) + self.mu
    }
}

/// Normalizes one variate. Missing (`NaN`) entries stay missing. Supplied
/// `stats` are reused as-is; otherwise they are computed from the observed
/// entries, and `None` is returned if there are none.
pub fn normalize_instance(
    values: &[f64],
    stats: Option<InstanceStats>,
    mode: NormMode,
) -> Option<(Vec<f64>, InstanceStats)> {
    let stats = match stats {
        Some(s) => s,
        None => InstanceStats::from_observed(values)?,
    };
    let out = values
        .iter()
        .map(|&v| {
            if v.is_finite() {
                stats.normalize(v, mode)
            } else {
                f64::NAN
            }
        })
        .collect();
    Some((out, stats))
}

/// Maps normalized forecasts back to physical scale. Row `j` of the leading
/// axis uses `stats[j]`.
pub fn denormalize_forecast(y: &Tensor, stats: &[InstanceStats], mode: NormMode) -> Result<Tensor> {
    let rows = y.shape()[0];
    if rows != stats.len() {
        return Err(Error::LengthMismatch {
            left: rows,
            right: stats.len(),
        });
    }
    let per_row = y.len() / rows;
    let mut out = y.clone();
    for (row, s) in out.data_mut().chunks_mut(per_row).zip(stats) {
        row.iter_mut().for_each(|v| *v = s.denormalize(*v, mode));
    }
    Ok(out)
}

/// Relative position `k / (L + T)` for `k = -L ..= T - 1`.
pub fn build_timestamps(context: usize, horizon: usize) -> Result<Vec<f64>> {
    let total = context + horizon;
    if total == 0 {
        return Err(Error::Input("context + horizon must be positive".into()));
    }
    Ok((0..total).map(|i| relative_time(i, context, total)).collect())
}

#[inline]
fn relative_time(pos: usize, anchor: usize, span: usize) -> f64 {
    (pos as f64 - anchor as f64) / span as f64
}

/// History (and optionally the realized future) of one entity.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastWindow {
    pub entity_id: String,
    /// `history[v][t]`, all variates the same length; `NaN` = missing.
    pub history: Vec<Vec<f64>>,
    /// `future[v][t]` targets; may be empty (inference) or shorter than the
    /// batch horizon (right padding).
    pub future: Vec<Vec<f64>>,
}

impl ForecastWindow {
    pub fn new(entity_id: impl Into<String>, history: Vec<Vec<f64>>, future: Vec<Vec<f64>>) -> Self {
        Self {
            entity_id: entity_id.into(),
            history,
            future,
        }
    }

    pub fn context_len(&self) -> usize {
        self.history.first().map_or(0, Vec::len)
    }

    pub fn variates(&self) -> usize {
        self.history.len()
    }
}

/// Which entity each variate row belongs to, and which rows are padding.
#[derive(Clone, Debug, PartialEq)]
pub struct EntityLayout {
    entity_of_row: Vec<usize>,
    padded: Vec<bool>,
    entities: usize,
}

impl EntityLayout {
    /// `counts[i]` rows for entity `i`, laid out contiguously.
    pub fn new(counts: &[usize], padded: Vec<bool>) -> Result<Self> {
        let entity_of_row: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(i, &m)| core::iter::repeat_n(i, m))
            .collect();
        if padded.len() != entity_of_row.len() {
            return Err(Error::LengthMismatch {
                left: padded.len(),
                right: entity_of_row.len(),
            });
        }
        let layout = Self {
            entity_of_row,
            padded,
            entities: counts.len(),
        };
        for i in 0..layout.entities {
            if !layout.span(i).any(|r| !layout.padded[r]) {
                return Err(Error::EmptyEntity { entity: i });
            }
        }
        Ok(layout)
    }

    /// Every row real.
    pub fn dense(counts: &[usize]) -> Result<Self> {
        let m = counts.iter().sum();
        Self::new(counts, vec![false; m])
    }

    pub fn rows(&self) -> usize {
        self.entity_of_row.len()
    }

    pub fn entities(&self) -> usize {
        self.entities
    }

    pub fn entity_of(&self, row: usize) -> usize {
        self.entity_of_row[row]
    }

    pub fn is_padded(&self, row: usize) -> bool {
        self.padded[row]
    }

    pub fn padded(&self) -> &[bool] {
        &self.padded
    }

    /// Row range of entity `i`.
    pub fn span(&self, i: usize) -> Range<usize> {
        let start = self.entity_of_row.partition_point(|&e| e < i);
        let end = self.entity_of_row.partition_point(|&e| e <= i);
        start..end
    }

    pub fn counts(&self) -> Vec<usize> {
        (0..self.entities).map(|i| self.span(i).len()).collect()
    }

    /// Entity per row with padded rows removed, for the prototype scatter.
    pub fn scatter_rows(&self) -> Rc<[Option<usize>]> {
        self.entity_of_row
            .iter()
            .zip(&self.padded)
            .map(|(&e, &p)| if p { None } else { Some(e) })
            .collect()
    }

    /// `[P, M, N*C]` mask: row `j` may route only to its own entity's
    /// `C` prototypes.
    pub fn routing_mask(&self, patches: usize, prototypes: usize) -> Vec<bool> {
        let m = self.rows();
        let nc = self.entities * prototypes;
        let mut mask = vec![false; patches * m * nc];
        for p in 0..patches {
            for (j, &e) in self.entity_of_row.iter().enumerate() {
                let base = (p * m + j) * nc + e * prototypes;
                mask[base..base + prototypes].iter_mut().for_each(|v| *v = true);
            }
        }
        mask
    }
}

/// Normalized, masked and aligned model input for a batch of entities.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedBatch {
    pub entity_ids: Vec<String>,
    /// Padded context length shared by the batch.
    pub context: usize,
    pub horizon: usize,
    pub patch_len: usize,
    pub mode: NormMode,
    /// `[M, L+T]`, zeros at missing, padded and future positions.
    pub x_norm: Tensor,
    /// `[M, L+T]`, relative time per row, anchored at 0 on the first future step.
    pub timestamps: Tensor,
    /// `[M, L+T]`, 1 where a genuine observation is present.
    pub obs_mask: Tensor,
    /// `[M * P]`, false for patches lying entirely in left padding.
    pub key_valid: Vec<bool>,
    pub layout: EntityLayout,
    pub stats: Vec<InstanceStats>,
    /// Per-entity unpadded context length.
    pub context_lens: Vec<usize>,
    /// `[M * T]` normalized targets (0 where invalid).
    pub targets: Vec<f64>,
    /// `[M * T]`, true for genuine target cells.
    pub target_valid: Vec<bool>,
}

impl PreparedBatch {
    /// Left-pads every window's history to `context`, right-pads targets to
    /// `horizon`, normalizes each variate by its observed history and builds
    /// the three input channels. Variates with no observed history are kept
    /// as padded rows.
    pub fn build(
        windows: &[ForecastWindow],
        context: usize,
        horizon: usize,
        patch_len: usize,
        mode: NormMode,
    ) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        if patch_len == 0 || horizon == 0 {
            return Err(Error::Input("patch length and horizon must be positive".into()));
        }
        let span = context + horizon;
        if !span.is_multiple_of(patch_len) {
            return Err(Error::Divisibility {
                total: span,
                patch_len,
            });
        }
        let patches = span / patch_len;
        let m: usize = windows.iter().map(ForecastWindow::variates).sum();

        let mut x_norm = Vec::with_capacity(m * span);
        let mut ts = Vec::with_capacity(m * span);
        let mut obs = Vec::with_capacity(m * span);
        let mut key_valid = Vec::with_capacity(m * patches);
        let mut stats = Vec::with_capacity(m);
        let mut padded = Vec::with_capacity(m);
        let mut targets = Vec::with_capacity(m * horizon);
        let mut target_valid = Vec::with_capacity(m * horizon);
        let mut counts = Vec::with_capacity(windows.len());
        let mut context_lens = Vec::with_capacity(windows.len());

        for w in windows {
            let len = w.context_len();
            if w.variates() == 0 {
                return Err(Error::Input(alloc::format!("window {:?} has no variates", w.entity_id)));
            }
            if len > context {
                return Err(Error::Input(alloc::format!(
                    "window {:?} context {len} exceeds batch context {context}",
                    w.entity_id
                )));
            }
            if w.history.iter().any(|h| h.len() != len) {
                return Err(Error::Input(alloc::format!(
                    "window {:?} has ragged variates",
                    w.entity_id
                )));
            }
            if w.future.iter().any(|f| f.len() > horizon) {
                return Err(Error::Input(alloc::format!(
                    "window {:?} targets exceed horizon {horizon}",
                    w.entity_id
                )));
            }
            let pad = context - len;
            let mut any_real = false;
            for (v, hist) in w.history.iter().enumerate() {
                let (st, is_pad) = match InstanceStats::from_observed(hist) {
                    Some(s) => (s, false),
                    None => (InstanceStats::default(), true),
                };
                any_real |= !is_pad;
                for pos in 0..span {
                    let raw = if pos >= pad && pos < context {
                        hist[pos - pad]
                    } else {
                        f64::NAN
                    };
                    let seen = raw.is_finite() && !is_pad;
                    x_norm.push(if seen { st.normalize(raw, mode) } else { 0.0 });
                    obs.push(if seen { 1.0 } else { 0.0 });
                    ts.push(relative_time(pos, context, len + horizon));
                }
                for p in 0..patches {
                    key_valid.push((p + 1) * patch_len > pad);
                }
                let fut = w.future.get(v);
                for t in 0..horizon {
                    let y = fut.and_then(|f| f.get(t)).copied().unwrap_or(f64::NAN);
                    let ok = y.is_finite() && !is_pad;
                    targets.push(if ok { st.normalize(y, mode) } else { 0.0 });
                    target_valid.push(ok);
                }
                stats.push(st);
                padded.push(is_pad);
            }
            if !any_real {
                return Err(Error::AllMissing {
                    entity: w.entity_id.clone(),
                    variate: 0,
                });
            }
            counts.push(w.variates());
            context_lens.push(len);
        }

        Ok(Self {
            entity_ids: windows.iter().map(|w| w.entity_id.clone()).collect(),
            context,
            horizon,
            patch_len,
            mode,
            x_norm: Tensor::new(vec![m, span], x_norm)?,
            timestamps: Tensor::new(vec![m, span], ts)?,
            obs_mask: Tensor::new(vec![m, span], obs)?,
            key_valid,
            layout: EntityLayout::new(&counts, padded)?,
            stats,
            context_lens,
            targets,
            target_valid,
        })
    }

    pub fn rows(&self) -> usize {
        self.layout.rows()
    }

    /// Number of patches `P = (L + T) / L_p`.
    pub fn patches(&self) -> usize {
        (self.context + self.horizon) / self.patch_len
    }

    /// Number of trailing patches covering the horizon.
    pub fn horizon_patches(&self) -> usize {
        self.horizon / self.patch_len
    }

    /// `[M, P, 3 * L_p]`: per time step the (value, timestamp, mask) triple,
    /// steps in order within each patch.
    pub fn patch_input(&self) -> Tensor {
        let m = self.rows();
        let span = self.context + self.horizon;
        let lp = self.patch_len;
        let (x, t, o) = (self.x_norm.data(), self.timestamps.data(), self.obs_mask.data());
        let mut data = Vec::with_capacity(m * span * 3);
        for idx in 0..m * span {
            data.push(x[idx]);
            data.push(t[idx]);
            data.push(o[idx]);
        }
        Tensor::new(vec![m, span / lp, 3 * lp], data).expect("consistent sizes")
    }
}

/// Single-window input: `L` history steps plus `T` placeholder steps.
/// `L + T` must be a multiple of the patch length.
pub fn build_model_input(
    window: &ForecastWindow,
    context: usize,
    horizon: usize,
    patch_len: usize,
    mode: NormMode,
) -> Result<PreparedBatch> {
    PreparedBatch::build(core::slice::from_ref(window), context, horizon, patch_len, mode)
}

/// Residual patch embedding: a linear branch plus a one-hidden-layer GELU MLP
/// over each flattened patch, summed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResPatchEmbed {
    pub linear: Linear,
    pub hidden: Linear,
    pub out: Linear,
}

impl ResPatchEmbed {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        patch_len: usize,
        d_model: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let width = 3 * patch_len;
        Ok(Self {
            linear: Linear::new(store, "embed.lin", width, d_model, true, rng)?,
            hidden: Linear::new(store, "embed.mlp1", width, d_model, true, rng)?,
            out: Linear::new(store, "embed.mlp2", d_model, d_model, true, rng)?,
        })
    }

    /// `patches: [M, P, 3 L_p]` to `[M, P, D]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, patches: Var) -> Result<Var> {
        let lin = self.linear.forward(g, store, patches)?;
        let h = self.hidden.forward(g, store, patches)?;
        let h = g.gelu(h);
        let mlp = self.out.forward(g, store, h)?;
        g.add(lin, mlp)
    }
}
