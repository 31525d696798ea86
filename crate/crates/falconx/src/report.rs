//! CSV tables for evaluation results and quantile forecasts.

use std::path::Path;

use falconx_core::eval::{EvalReport, InferenceMode};
use falconx_core::head::QuantileForecast;

use crate::error::{Error, Result};

pub const SUMMARY_ENTITY: &str = "ALL";

fn num(x: f64) -> String {
    if x.is_finite() {
        x.to_string()
    } else {
        String::new()
    }
}

/// Per-entity rows followed by one summary row per mode holding the mean
/// MASE and CRPS and the geometric-mean ratios to the seasonal-naive
/// baseline.
pub fn eval_table(dataset: &str, report: &EvalReport, modes: &[InferenceMode]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::io("eval table", e.into());
    w.write_record(["dataset", "entity", "mode", "H", "W", "MASE", "CRPS", "MASE_ratio", "CRPS_ratio"])
        .map_err(err)?;
    for r in &report.rows {
        w.write_record([
            dataset,
            &r.entity,
            r.mode.as_str(),
            &r.horizon.to_string(),
            &r.windows.to_string(),
            &num(r.mase),
            &num(r.crps),
            &num(r.mase_ratio()),
            &num(r.crps_ratio()),
        ])
        .map_err(err)?;
    }
    for &mode in modes {
        let Some(first) = report.rows_for(mode).next() else {
            continue;
        };
        let geo = |g: falconx_core::Result<falconx_core::eval::GeoMean>| g.map(|g| g.value).unwrap_or(f64::NAN);
        w.write_record([
            dataset,
            SUMMARY_ENTITY,
            mode.as_str(),
            &first.horizon.to_string(),
            &first.windows.to_string(),
            &num(report.mean_mase(mode).unwrap_or(f64::NAN)),
            &num(report.mean_crps(mode).unwrap_or(f64::NAN)),
            &num(geo(report.geomean_mase_ratio(mode))),
            &num(geo(report.geomean_crps_ratio(mode))),
        ])
        .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io("eval table", e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// One row per `(entity, variate, step)` with a column per quantile level.
pub fn forecast_table(forecasts: &[(String, QuantileForecast)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::io("forecast table", e.into());
    let Some((_, first)) = forecasts.first() else {
        return Ok(String::new());
    };
    let mut header = vec!["entity".to_string(), "variate".into(), "step".into()];
    header.extend(first.quantiles.levels().iter().map(|q| format!("q{q}")));
    w.write_record(&header).map_err(err)?;
    for (id, f) in forecasts {
        for v in 0..f.variates() {
            for t in 0..f.horizon() {
                let mut row = vec![id.clone(), v.to_string(), t.to_string()];
                row.extend(f.cell(v, t).iter().map(|x| num(*x)));
                w.write_record(&row).map_err(err)?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::io("forecast table", e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
