//! MAPE, temperature slices, basis-point deltas and the comparison report.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::domain::{Dataset, Route, Split};
use crate::error::{CoreError, Result};
use crate::models::{Estimator, ModelKind};

/// Pairs whose actual value is at or below this many Wh are skipped.
pub const NEAR_ZERO_WH: f64 = 1.0;
pub const HOT_THRESHOLD_C: f64 = 35.0;
pub const COLD_THRESHOLD_C: f64 = 0.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapeResult {
    pub mape_pct: f64,
    pub used: usize,
    pub skipped: usize,
}

pub fn mape_counted(preds: &[f64], actuals: &[f64]) -> Result<MapeResult> {
    if preds.len() != actuals.len() || preds.is_empty() {
        return Err(CoreError::Validation(format!(
            "mape needs equal non-empty inputs, got {} predictions and {} actuals",
            preds.len(),
            actuals.len()
        )));
    }
    let mut sum = 0.0;
    let mut used = 0;
    for (&p, &a) in preds.iter().zip(actuals) {
        if a > NEAR_ZERO_WH {
            sum += (p - a).abs() / a;
            used += 1;
        }
    }
    let skipped = preds.len() - used;
    if used == 0 {
        return Err(CoreError::EmptyEvaluation { skipped, threshold: NEAR_ZERO_WH });
    }
    Ok(MapeResult { mape_pct: 100.0 * sum / used as f64, used, skipped })
}

/// Mean absolute percentage error in percent.
pub fn mape(preds: &[f64], actuals: &[f64]) -> Result<f64> {
    Ok(mape_counted(preds, actuals)?.mape_pct)
}

/// `(reference − model) × 100`; positive means the model is more accurate.
pub fn bps_delta(reference_mape: f64, model_mape: f64) -> f64 {
    (reference_mape - model_mape) * 100.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slice {
    Overall,
    Hot,
    Cold,
}

pub fn in_slice(route: &Route, slice: Slice) -> bool {
    match slice {
        Slice::Overall => true,
        Slice::Hot => route.mean_temperature() >= HOT_THRESHOLD_C,
        Slice::Cold => route.mean_temperature() <= COLD_THRESHOLD_C,
    }
}

/// Test-split routes belonging to `slice`.
pub fn slice_routes(dataset: &Dataset, slice: Slice) -> Vec<&Route> {
    dataset.routes_in(Split::Test).into_iter().filter(|r| in_slice(r, slice)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    /// Summed route prediction against summed route actuals.
    #[default]
    Route,
    Segment,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::Route => "route",
            Level::Segment => "segment",
        }
    }
}

impl FromStr for Level {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "route" => Ok(Level::Route),
            "segment" => Ok(Level::Segment),
            _ => Err(CoreError::Validation(format!("level must be `route` or `segment`, got `{s}`"))),
        }
    }
}

/// MAPE of per-segment predictions against the routes' measured energies.
pub fn mape_at_level(routes: &[&Route], predictions: &[Vec<f64>], level: Level) -> Result<MapeResult> {
    let mut preds = Vec::new();
    let mut actuals = Vec::new();
    for (r, p) in routes.iter().zip(predictions) {
        let e = r
            .actual_energy
            .as_ref()
            .ok_or_else(|| CoreError::Validation(format!("route `{}` has no measured energy", r.route_id)))?;
        match level {
            Level::Route => {
                preds.push(p.iter().sum());
                actuals.push(e.iter().sum());
            }
            Level::Segment => {
                preds.extend_from_slice(p);
                actuals.extend_from_slice(e);
            }
        }
    }
    mape_counted(&preds, &actuals)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub model: ModelKind,
    pub level: Level,
    pub n_routes: usize,
    pub mape_pct: f64,
    pub bps_vs_ffn: Option<f64>,
    pub mape_cold_pct: Option<f64>,
    pub bps_cold: Option<f64>,
    pub mape_hot_pct: Option<f64>,
    pub bps_hot: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub level: Level,
    pub rows: Vec<ReportRow>,
    pub n_cold: usize,
    pub n_hot: usize,
    /// Pairs dropped by the near-zero rule, summed over models and slices.
    pub skipped_pairs: usize,
}

pub const REPORT_HEADER: &str = "model,level,n_routes,mape_pct,bps_vs_ffn,mape_cold_pct,bps_cold,mape_hot_pct,bps_hot";

/// Per-model MAPE on the overall, cold and hot test slices.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelScores {
    pub model: ModelKind,
    pub n_routes: usize,
    pub overall: f64,
    pub cold: Option<f64>,
    pub hot: Option<f64>,
    pub skipped: usize,
}

pub fn score_predictions(model: ModelKind, routes: &[&Route], predictions: &[Vec<f64>], level: Level) -> Result<ModelScores> {
    let overall = mape_at_level(routes, predictions, level)?;
    let mut skipped = overall.skipped;
    let mut slice = |s: Slice| -> Result<Option<f64>> {
        let (r, p): (Vec<&Route>, Vec<Vec<f64>>) =
            routes.iter().zip(predictions).filter(|(r, _)| in_slice(r, s)).map(|(r, p)| (*r, p.clone())).unzip();
        if r.is_empty() {
            return Ok(None);
        }
        let m = mape_at_level(&r, &p, level)?;
        skipped += m.skipped;
        Ok(Some(m.mape_pct))
    };
    let cold = slice(Slice::Cold)?;
    let hot = slice(Slice::Hot)?;
    Ok(ModelScores { model, n_routes: routes.len(), overall: overall.mape_pct, cold, hot, skipped })
}

/// Orders rows for the report and attaches deltas against the FFN row.
pub fn assemble_report(mut scores: Vec<ModelScores>, level: Level, with_bps: bool, n_cold: usize, n_hot: usize) -> Result<EvalReport> {
    scores.sort_by_key(|s| s.model.rank());
    let reference = scores.iter().find(|s| s.model == ModelKind::Ffn).cloned();
    if with_bps && reference.is_none() {
        return Err(CoreError::ReferenceMissing);
    }
    let delta = |r: Option<f64>, m: Option<f64>| match (with_bps, r, m) {
        (true, Some(r), Some(m)) => Some(bps_delta(r, m)),
        _ => None,
    };
    let rows = scores
        .iter()
        .map(|s| {
            let r = reference.as_ref();
            ReportRow {
                model: s.model,
                level,
                n_routes: s.n_routes,
                mape_pct: s.overall,
                bps_vs_ffn: delta(r.map(|r| r.overall), Some(s.overall)),
                mape_cold_pct: s.cold,
                bps_cold: delta(r.and_then(|r| r.cold), s.cold),
                mape_hot_pct: s.hot,
                bps_hot: delta(r.and_then(|r| r.hot), s.hot),
            }
        })
        .collect();
    if n_cold == 0 {
        log::warn!("cold slice is empty; its columns are left blank");
    }
    if n_hot == 0 {
        log::warn!("hot slice is empty; its columns are left blank");
    }
    Ok(EvalReport { level, rows, n_cold, n_hot, skipped_pairs: scores.iter().map(|s| s.skipped).sum() })
}

/// Scores every model on the test split. Deltas are taken against the FFN
/// row when `with_bps` is set.
pub fn build_report(models: &[&Estimator], dataset: &Dataset, level: Level, with_bps: bool) -> Result<EvalReport> {
    let test = slice_routes(dataset, Slice::Overall);
    if test.is_empty() {
        return Err(CoreError::Validation("test split is empty".into()));
    }
    let mut scores = Vec::with_capacity(models.len());
    for m in models {
        let preds = m.predict_segments(&test, &dataset.schema)?;
        scores.push(score_predictions(m.kind(), &test, &preds, level)?);
    }
    let n_cold = test.iter().filter(|r| in_slice(r, Slice::Cold)).count();
    let n_hot = test.iter().filter(|r| in_slice(r, Slice::Hot)).count();
    assemble_report(scores, level, with_bps, n_cold, n_hot)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.model,
                r.level.as_str(),
                r.n_routes,
                r.mape_pct,
                opt(r.bps_vs_ffn),
                opt(r.mape_cold_pct),
                opt(r.bps_cold),
                opt(r.mape_hot_pct),
                opt(r.bps_hot)
            )
            .expect("string write");
        }
        out
    }
}

/// Reads rows written by [`EvalReport::to_csv`].
pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == REPORT_HEADER => {}
        other => return Err(CoreError::Parse { line: 1, msg: format!("expected header `{REPORT_HEADER}`, got {other:?}") }),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(CoreError::Parse { line: n, msg: format!("expected 9 fields, got {}", f.len()) });
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| CoreError::Parse { line: n, msg: format!("`{s}`: {e}") });
        let opt_num = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        rows.push(ReportRow {
            model: f[0].parse().map_err(|e: CoreError| CoreError::Parse { line: n, msg: e.to_string() })?,
            level: f[1].parse().map_err(|e: CoreError| CoreError::Parse { line: n, msg: e.to_string() })?,
            n_routes: f[2].parse().map_err(|e| CoreError::Parse { line: n, msg: format!("n_routes: {e}") })?,
            mape_pct: num(f[3])?,
            bps_vs_ffn: opt_num(f[4])?,
            mape_cold_pct: opt_num(f[5])?,
            bps_cold: opt_num(f[6])?,
            mape_hot_pct: opt_num(f[7])?,
            bps_hot: opt_num(f[8])?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mape_hand_values() {
        assert_eq!(mape(&[3.0, 7.0], &[3.0, 7.0]).unwrap(), 0.0);
        assert!((mape(&[90.0, 110.0], &[100.0, 100.0]).unwrap() - 10.0).abs() < 1e-12);
        assert!((mape(&[100.0], &[80.0]).unwrap() - 25.0).abs() < 1e-12);
    }

    #[test]
    fn near_zero_actuals_are_skipped() {
        let r = mape_counted(&[5.0, 110.0], &[0.5, 100.0]).unwrap();
        assert_eq!((r.used, r.skipped), (1, 1));
        assert!((r.mape_pct - 10.0).abs() < 1e-12);
        assert!(matches!(mape(&[1.0], &[0.0]), Err(CoreError::EmptyEvaluation { skipped: 1, .. })));
        assert!(mape(&[1.0], &[]).is_err());
    }

    #[test]
    fn bps_hand_values() {
        assert_eq!(bps_delta(10.0, 10.0), 0.0);
        assert!((bps_delta(10.0, 7.831) - 216.9).abs() < 1e-9);
        assert!((bps_delta(10.0, 21.178) - -1117.8).abs() < 1e-9);
    }

    #[test]
    fn reference_is_required() {
        let s = ModelScores { model: ModelKind::Rnn, n_routes: 3, overall: 5.0, cold: None, hot: None, skipped: 0 };
        assert!(matches!(assemble_report(vec![s.clone()], Level::Route, true, 0, 0), Err(CoreError::ReferenceMissing)));
        let r = assemble_report(vec![s], Level::Route, false, 0, 0).unwrap();
        assert_eq!(r.rows[0].bps_vs_ffn, None);
    }

    #[test]
    fn rows_follow_report_order_and_round_trip() {
        let mk = |model, overall| ModelScores { model, n_routes: 10, overall, cold: Some(overall + 1.0), hot: None, skipped: 0 };
        let scores = vec![mk(ModelKind::Rnn, 9.5), mk(ModelKind::Ffn, 10.0), mk(ModelKind::Distance, 21.178)];
        let report = assemble_report(scores, Level::Route, true, 2, 0).unwrap();
        let order: Vec<ModelKind> = report.rows.iter().map(|r| r.model).collect();
        assert_eq!(order, vec![ModelKind::Distance, ModelKind::Ffn, ModelKind::Rnn]);
        assert_eq!(report.rows[1].bps_vs_ffn, Some(0.0));
        assert_eq!(report.rows[1].bps_cold, Some(0.0));
        assert!((report.rows[2].bps_vs_ffn.unwrap() - 50.0).abs() < 1e-9);
        assert_eq!(parse_report_csv(&report.to_csv()).unwrap(), report.rows);
    }
}
