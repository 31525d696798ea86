//! Forecast metrics, the seasonal-naive baseline and rolling-window
//! evaluation in multivariate and channel-independent modes.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::head::QuantileForecast;
use crate::math;
use crate::model::FalconX;
use crate::preprocess::ForecastWindow;
use crate::series::EntitySeries;
use crate::{Error, Result};

/// Mean absolute error over the horizon divided by the in-sample mean
/// absolute seasonal difference. Missing actuals are skipped.
pub fn mase(forecast: &[f64], actual: &[f64], insample: &[f64], seasonality: usize) -> Result<f64> {
    if forecast.len() != actual.len() {
        return Err(Error::LengthMismatch {
            left: forecast.len(),
            right: actual.len(),
        });
    }
    let m = seasonality.max(1);
    if insample.len() <= m {
        return Err(Error::Metric(format!(
            "history of {} steps too short for seasonality {m}",
            insample.len()
        )));
    }
    let scale = mean(
        (m..insample.len())
            .map(|t| insample[t] - insample[t - m])
            .filter(|d| d.is_finite())
            .map(math::abs),
    )
    .filter(|&s| s > 0.0)
    .ok_or_else(|| Error::Metric("constant in-sample history".into()))?;
    let err = mean(
        forecast
            .iter()
            .zip(actual)
            .filter(|(_, y)| y.is_finite())
            .map(|(f, y)| math::abs(y - f)),
    )
    .ok_or_else(|| Error::Metric("no observed actuals".into()))?;
    Ok(err / scale)
}

/// Quantile-approximated CRPS.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Crps {
    pub value: f64,
    /// False when every actual is zero and the raw value is reported.
    pub normalized: bool,
}

/// `2 * mean pinball / mean |y|` with `pred` laid out `[T, |Q|]`.
pub fn crps_quantile(pred: &[f64], quantiles: &[f64], actual: &[f64]) -> Result<Crps> {
    let q = quantiles.len();
    if q == 0 || pred.len() != actual.len() * q {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: actual.len() * q,
        });
    }
    let mut acc = 0.0;
    let mut cells = 0usize;
    let mut abs_sum = 0.0;
    for (t, &y) in actual.iter().enumerate() {
        if !y.is_finite() {
            continue;
        }
        for (k, &level) in quantiles.iter().enumerate() {
            acc += math::pinball(level, y - pred[t * q + k]);
        }
        cells += 1;
        abs_sum += math::abs(y);
    }
    if cells == 0 {
        return Err(Error::Metric("no observed actuals".into()));
    }
    let raw = 2.0 * acc / (cells * q) as f64;
    let scale = abs_sum / cells as f64;
    Ok(if scale > 0.0 {
        Crps {
            value: raw / scale,
            normalized: true,
        }
    } else {
        Crps {
            value: raw,
            normalized: false,
        }
    })
}

/// Geometric mean of the positive finite ratios; the indices of the others.
#[derive(Clone, Debug, PartialEq)]
pub struct GeoMean {
    pub value: f64,
    pub excluded: Vec<usize>,
}

pub fn aggregate_geomean(ratios: &[f64]) -> Result<GeoMean> {
    let mut excluded = Vec::new();
    let mut logs = 0.0;
    let mut n = 0usize;
    for (i, &r) in ratios.iter().enumerate() {
        if r > 0.0 && r.is_finite() {
            logs += math::ln(r);
            n += 1;
        } else {
            excluded.push(i);
        }
    }
    if n == 0 {
        return Err(Error::Metric("no positive ratios to aggregate".into()));
    }
    Ok(GeoMean {
        value: math::exp(logs / n as f64),
        excluded,
    })
}

/// Repeats the last observed season.
pub fn seasonal_naive(history: &[f64], horizon: usize, seasonality: usize) -> Result<Vec<f64>> {
    let m = seasonality.max(1);
    if history.len() < m {
        return Err(Error::Metric("history shorter than one season".into()));
    }
    let base = history.len() - m;
    Ok((0..horizon).map(|h| history[base + h % m]).collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InferenceMode {
    #[default]
    Multivariate,
    ChannelIndependent,
}

impl InferenceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InferenceMode::Multivariate => "multivariate",
            InferenceMode::ChannelIndependent => "channel-independent",
        }
    }

    /// Accepts the full names and the short forms `mv` and `ci`.
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "multivariate" | "mv" => Some(InferenceMode::Multivariate),
            "channel-independent" | "ci" => Some(InferenceMode::ChannelIndependent),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub horizon: usize,
    pub windows: usize,
    pub seasonality: usize,
    /// Most recent history steps handed to the model.
    pub max_context: usize,
    pub modes: Vec<InferenceMode>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            horizon: 16,
            windows: 1,
            seasonality: 1,
            max_context: 512,
            modes: alloc::vec![InferenceMode::Multivariate, InferenceMode::ChannelIndependent],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.windows == 0 || self.seasonality == 0 || self.max_context == 0 {
            return Err(Error::Config("horizon, windows, seasonality and max_context must be positive".into()));
        }
        Ok(())
    }
}

/// Metrics of one entity in one mode, averaged over windows and variates.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub entity: String,
    pub mode: InferenceMode,
    pub horizon: usize,
    pub windows: usize,
    pub mase: f64,
    pub crps: f64,
    pub naive_mase: f64,
    pub naive_crps: f64,
    /// Mean MASE per variate over windows.
    pub variate_mase: Vec<f64>,
}

impl EvalRow {
    pub fn mase_ratio(&self) -> f64 {
        self.mase / self.naive_mase
    }

    pub fn crps_ratio(&self) -> f64 {
        self.crps / self.naive_crps
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// `(entity, reason)` for entities that could not be evaluated.
    pub skipped: Vec<(String, String)>,
}

impl EvalReport {
    pub fn rows_for(&self, mode: InferenceMode) -> impl Iterator<Item = &EvalRow> {
        self.rows.iter().filter(move |r| r.mode == mode)
    }

    /// Mean MASE over the entities evaluated in `mode`.
    pub fn mean_mase(&self, mode: InferenceMode) -> Option<f64> {
        mean(self.rows_for(mode).map(|r| r.mase))
    }

    pub fn mean_crps(&self, mode: InferenceMode) -> Option<f64> {
        mean(self.rows_for(mode).map(|r| r.crps))
    }

    pub fn geomean_mase_ratio(&self, mode: InferenceMode) -> Result<GeoMean> {
        let r: Vec<f64> = self.rows_for(mode).map(EvalRow::mase_ratio).collect();
        aggregate_geomean(&r)
    }

    pub fn geomean_crps_ratio(&self, mode: InferenceMode) -> Result<GeoMean> {
        let r: Vec<f64> = self.rows_for(mode).map(EvalRow::crps_ratio).collect();
        aggregate_geomean(&r)
    }
}

/// Forecasts one window of `series` (history `..start`) in the given mode.
/// Channel-independent mode runs every variate through its own forward pass.
pub fn forecast_window(
    model: &FalconX,
    series: &EntitySeries,
    start: usize,
    horizon: usize,
    max_context: usize,
    mode: InferenceMode,
) -> Result<QuantileForecast> {
    let from = start.saturating_sub(max_context);
    let all: Vec<usize> = (0..series.variates()).collect();
    match mode {
        InferenceMode::Multivariate => {
            let w = ForecastWindow::new(series.id.clone(), series.slice(&all, from, start), Vec::new());
            let mut f = model.forecast(&[w], horizon)?;
            Ok(f.remove(0))
        }
        InferenceMode::ChannelIndependent => {
            let q = model.config.quantiles.len();
            let mut data = Vec::with_capacity(series.variates() * horizon * q);
            for v in 0..series.variates() {
                let w = ForecastWindow::new(
                    format!("{}#{v}", series.id),
                    series.slice(&[v], from, start),
                    Vec::new(),
                );
                let f = model.forecast(&[w], horizon)?;
                data.extend_from_slice(f[0].values.data());
            }
            Ok(QuantileForecast {
                values: crate::Tensor::new(alloc::vec![series.variates(), horizon, q], data)?,
                quantiles: model.config.quantiles.clone(),
            })
        }
    }
}

/// Evaluates `windows` non-overlapping horizons at the end of every series.
pub fn rolling_eval(model: &FalconX, entities: &[EntitySeries], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let mut report = EvalReport::default();
    let h = cfg.horizon;
    let levels = model.config.quantiles.levels();
    for series in entities {
        let test = cfg.windows * h;
        if series.len() < test + cfg.seasonality + 1 {
            report.skipped.push((
                series.id.clone(),
                format!("length {} too short for {} windows of {h}", series.len(), cfg.windows),
            ));
            continue;
        }
        let first = series.len() - test;
        for &mode in &cfg.modes {
            match evaluate_entity(model, series, cfg, first, mode, levels) {
                Ok(row) => report.rows.push(row),
                Err(e) => report.skipped.push((series.id.clone(), format!("{}: {e}", mode.as_str()))),
            }
        }
    }
    Ok(report)
}

fn evaluate_entity(
    model: &FalconX,
    series: &EntitySeries,
    cfg: &EvalConfig,
    first: usize,
    mode: InferenceMode,
    levels: &[f64],
) -> Result<EvalRow> {
    let h = cfg.horizon;
    let v_count = series.variates();
    let (mut mases, mut crpss, mut naive_mases, mut naive_crpss) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut per_variate: Vec<Vec<f64>> = alloc::vec![Vec::new(); v_count];
    for w in 0..cfg.windows {
        let start = first + w * h;
        let forecast = forecast_window(model, series, start, h, cfg.max_context, mode)?;
        for (v, values) in series.values.iter().enumerate() {
            let history = &values[..start];
            let actual = &values[start..start + h];
            let median = forecast.median(v);
            let Ok(score) = mase(&median, actual, history, cfg.seasonality) else {
                continue;
            };
            let qs: Vec<f64> = (0..h).flat_map(|t| forecast.cell(v, t).to_vec()).collect();
            let crps = crps_quantile(&qs, levels, actual)?;
            let observed: Vec<f64> = history.iter().copied().filter(|x| x.is_finite()).collect();
            let naive = seasonal_naive(&observed, h, cfg.seasonality)?;
            let naive_q: Vec<f64> = naive.iter().flat_map(|&x| core::iter::repeat_n(x, levels.len())).collect();
            mases.push(score);
            per_variate[v].push(score);
            crpss.push(crps.value);
            naive_mases.push(mase(&naive, actual, history, cfg.seasonality)?);
            naive_crpss.push(crps_quantile(&naive_q, levels, actual)?.value);
        }
    }
    let none = || Error::Metric(format!("no variate of {} could be scored", series.id));
    Ok(EvalRow {
        entity: series.id.clone(),
        mode,
        horizon: h,
        windows: cfg.windows,
        mase: mean(mases.iter().copied()).ok_or_else(none)?,
        crps: mean(crpss.iter().copied()).ok_or_else(none)?,
        naive_mase: mean(naive_mases.iter().copied()).ok_or_else(none)?,
        naive_crps: mean(naive_crpss.iter().copied()).ok_or_else(none)?,
        variate_mase: per_variate
            .iter()
            .map(|s| mean(s.iter().copied()).unwrap_or(f64::NAN))
            .collect(),
    })
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in it {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}
