//! Compute-optimal model size from data volume, and preset selection.
//!
//! `log10(N) = 0.51·log10(D) + 0.0617`, with `D` counted in segments.

use std::fmt::Write as _;

use crate::error::{CoreError, Result};
use crate::models::{NetConfig, RetPreset};

pub const SLOPE: f64 = 0.51;
pub const INTERCEPT: f64 = 0.0617;

/// Parameter count quoted as optimal for the 48M-segment production data.
pub const QUOTED_OPTIMUM: f64 = 3.0e6;

/// Presets may exceed the budget by this factor.
pub const BUDGET_SLACK: f64 = 1.25;

pub fn log10_optimal_params(segments: f64) -> Result<f64> {
    if !(segments >= 1.0) || !segments.is_finite() {
        return Err(CoreError::Domain(format!("data size must be a finite D >= 1, got {segments}")));
    }
    Ok(SLOPE * segments.log10() + INTERCEPT)
}

/// `N` before rounding.
pub fn optimal_params_exact(segments: f64) -> Result<f64> {
    Ok(10f64.powf(log10_optimal_params(segments)?))
}

pub fn optimal_params(segments: f64) -> Result<u64> {
    Ok(optimal_params_exact(segments)?.round() as u64)
}

/// Data size for which `params` is optimal.
pub fn data_for_params(params: f64) -> Result<f64> {
    if !(params > 0.0) || !params.is_finite() {
        return Err(CoreError::Domain(format!("parameter count must be finite and > 0, got {params}")));
    }
    Ok(10f64.powf((params.log10() - INTERCEPT) / SLOPE))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PresetChoice {
    pub preset: RetPreset,
    pub param_count: usize,
    /// No preset fits; the smallest was returned anyway.
    pub undersized: bool,
}

/// Largest preset with `param_count <= 1.25·budget` at feature width `input`.
pub fn preset_for_budget(budget: f64, input: usize) -> Result<PresetChoice> {
    if !(budget > 0.0) || !budget.is_finite() {
        return Err(CoreError::Domain(format!("parameter budget must be finite and > 0, got {budget}")));
    }
    let count = |p: RetPreset| NetConfig::Ret(p.config(input)).param_count();
    let fit = RetPreset::ALL.into_iter().rev().find(|&p| count(p) as f64 <= BUDGET_SLACK * budget);
    Ok(match fit {
        Some(p) => PresetChoice { preset: p, param_count: count(p), undersized: false },
        None => {
            let p = RetPreset::Ret20k;
            log::warn!("budget of {budget} parameters is below every preset; using {p}");
            PresetChoice { preset: p, param_count: count(p), undersized: true }
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SizingReport {
    pub segments: f64,
    pub log10_segments: f64,
    pub log10_params: f64,
    pub params_exact: f64,
    pub params: u64,
    pub choice: PresetChoice,
    /// Data size at which the quoted 3M optimum would follow from the line.
    pub segments_for_quoted: f64,
}

pub fn sizing_report(segments: f64, input: usize) -> Result<SizingReport> {
    let log10_params = log10_optimal_params(segments)?;
    let params_exact = 10f64.powf(log10_params);
    let params = params_exact.round() as u64;
    Ok(SizingReport {
        segments,
        log10_segments: segments.log10(),
        log10_params,
        params_exact,
        params,
        choice: preset_for_budget(params_exact, input)?,
        segments_for_quoted: data_for_params(QUOTED_OPTIMUM)?,
    })
}

impl SizingReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let w = &mut s;
        writeln!(w, "D = {} segments", self.segments).unwrap();
        writeln!(w, "log10(N) = {SLOPE} * log10(D) + {INTERCEPT}").unwrap();
        writeln!(w, "         = {SLOPE} * {:.4} + {INTERCEPT} = {:.4}", self.log10_segments, self.log10_params).unwrap();
        writeln!(w, "N = 10^{:.4} = {:.3} -> {}", self.log10_params, self.params_exact, self.params).unwrap();
        write!(w, "preset: {} ({} parameters)", self.choice.preset, self.choice.param_count).unwrap();
        if self.choice.undersized {
            write!(w, " [warning: budget is below the smallest preset]").unwrap();
        }
        writeln!(w).unwrap();
        writeln!(
            w,
            "note: a {:.0e}-parameter optimum is also quoted for 4.8e7 segments, but this line gives N = {} there; \
             reaching {:.0e} would need D = {:.3e}. The unit behind D is unstated, so both figures are reported as is.",
            QUOTED_OPTIMUM,
            optimal_params(4.8e7).expect("valid D"),
            QUOTED_OPTIMUM,
            self.segments_for_quoted
        )
        .unwrap();
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_values() {
        // 10^0.0617 evaluated independently: 1.15265675567
        assert!((optimal_params_exact(1.0).unwrap() - 1.152_656_755_67).abs() < 1e-10);
        assert_eq!(format!("{:.3}", optimal_params_exact(1.0).unwrap()), "1.153");
        assert_eq!(optimal_params(1.0).unwrap(), 1);
        let n = optimal_params(48_000_000.0).unwrap();
        assert!((9530..=9532).contains(&n), "{n}");
        let d = data_for_params(3.0e6).unwrap();
        assert!((d / 3.79e12 - 1.0).abs() < 0.01, "{d:e}");
        assert!(optimal_params(0.5).is_err());
        assert!(data_for_params(0.0).is_err());
    }

    #[test]
    fn presets_by_budget() {
        assert_eq!(preset_for_budget(3.0e6, 9).unwrap().preset, RetPreset::Ret3m);
        assert_eq!(preset_for_budget(25_000.0, 9).unwrap(), PresetChoice { preset: RetPreset::Ret20k, param_count: 21313, undersized: false });
        let small = preset_for_budget(500.0, 9).unwrap();
        assert!(small.undersized && small.preset == RetPreset::Ret20k);
        assert_eq!(preset_for_budget(300_000.0, 9).unwrap().preset, RetPreset::Ret300k);
        let at_48m = preset_for_budget(optimal_params_exact(4.8e7).unwrap(), 9).unwrap();
        assert!(at_48m.undersized);
    }

    #[test]
    fn render_mentions_both_numbers() {
        let text = sizing_report(4.8e7, 9).unwrap().render();
        assert!(text.contains("9531"));
        assert!(text.contains("ret-20k"));
        assert!(text.contains("3.79"));
    }
}
