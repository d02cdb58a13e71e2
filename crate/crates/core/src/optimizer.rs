//! The outer alternating loop: zero-point optimization against `W - UV`,
//! then a truncated SVD of the new residual, until the windowed error
//! stops improving.

use serde::{Deserialize, Serialize};

use crate::error::{MiloError, Result};
use crate::lowrank::{self, Compensator, DEFAULT_SVD_TOL};
use crate::quant::{self, QuantConfig, QuantizedMatrix};
use crate::tensor_store::WeightMatrix;

/// Consecutive windowed increases that end a run as diverged.
pub const DIVERGENCE_WINDOWS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiloConfig {
    pub quant: QuantConfig,
    pub rank: usize,
    pub max_outer_iters: usize,
    pub window: usize,
    pub rel_tol: f64,
    pub quantize_compensator: bool,
}

impl Default for MiloConfig {
    fn default() -> Self {
        MiloConfig {
            quant: QuantConfig::default(),
            rank: 0,
            max_outer_iters: 20,
            window: 3,
            rel_tol: 1e-4,
            quantize_compensator: true,
        }
    }
}

impl MiloConfig {
    pub fn with_rank(rank: usize) -> Self {
        MiloConfig {
            rank,
            ..MiloConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.quant.validate()?;
        if self.max_outer_iters == 0 || self.window == 0 || !(self.rel_tol > 0.0) {
            return Err(MiloError::Config(
                "max_outer_iters and window must be >= 1 and rel_tol > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Converged,
    EarlyStop,
    Diverged,
}

#[derive(Clone, Debug)]
pub struct MiloResult {
    pub quantized: QuantizedMatrix,
    pub compensator: Compensator,
    /// `eps_t` per outer iteration. When the compensator is quantized after
    /// the loop, the last entry is recomputed with the stored factors.
    pub error_trace: Vec<f64>,
    pub iterations_run: usize,
    pub stop_reason: StopReason,
    /// Last-iteration error with the real-valued compensator.
    pub real_compensator_error: f64,
}

impl MiloResult {
    pub fn final_error(&self) -> f64 {
        *self.error_trace.last().expect("at least one iteration runs")
    }
}

/// `||W - W_dq - UV||_F`, accumulated in `f64`.
pub fn error_trace_metric(w: &WeightMatrix, quantized: &QuantizedMatrix, compensator: &Compensator) -> Result<f64> {
    if (quantized.rows, quantized.cols) != w.shape() || (compensator.rows(), compensator.cols()) != w.shape() {
        return Err(MiloError::Shape("error metric operands disagree in shape".into()));
    }
    let dq = quant::dequantize(quantized);
    let uv = lowrank::compensator_apply(compensator);
    Ok(w.data()
        .iter()
        .zip(dq.data())
        .zip(uv.data())
        .map(|((&a, &b), &c)| {
            let d = a as f64 - b as f64 - c as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt())
}

fn window_mean(trace: &[f64], end: usize, window: usize) -> f64 {
    let start = end.saturating_sub(window);
    let slice = &trace[start..end];
    slice.iter().sum::<f64>() / slice.len() as f64
}

/// Decides whether to stop after `trace.len()` iterations.
///
/// With `w_t` the mean of the last `window` errors (fewer while the trace is
/// short), the run converges once `|w_{t-1} - w_t| / w_{t-1} < rel_tol` or
/// `w_{t-1} = 0`. Windowed increases beyond the tolerance are counted and
/// [`DIVERGENCE_WINDOWS`] in a row end the run as diverged.
fn stop_check(trace: &[f64], window: usize, rel_tol: f64, increases: &mut usize) -> Option<StopReason> {
    let t = trace.len();
    if t < 2 {
        return None;
    }
    let prev = window_mean(trace, t - 1, window);
    let cur = window_mean(trace, t, window);
    if prev == 0.0 {
        return Some(StopReason::Converged);
    }
    let ratio = (prev - cur) / prev;
    if ratio.abs() < rel_tol {
        return Some(StopReason::Converged);
    }
    if ratio < 0.0 {
        *increases += 1;
        if *increases >= DIVERGENCE_WINDOWS {
            return Some(StopReason::Diverged);
        }
    } else {
        *increases = 0;
    }
    None
}

/// Compresses one matrix: `b`-bit grouped codes plus a rank-`r` compensator.
///
/// Scales come from min-max initialization on `W` and stay fixed; each outer
/// iteration warm-starts the zero-points from the previous one.
pub fn milo_compress(w: &WeightMatrix, cfg: &MiloConfig) -> Result<MiloResult> {
    cfg.validate()?;
    let (rows, cols) = w.shape();
    if cfg.rank > rows.min(cols) {
        return Err(MiloError::Rank(format!("rank {} exceeds min({rows}, {cols})", cfg.rank)));
    }
    let mut params = quant::init_quant_params(w, &cfg.quant)?;
    let mut compensator = Compensator::zero(rows, cols);
    let mut trace = Vec::with_capacity(cfg.max_outer_iters);
    let mut increases = 0usize;
    let mut stop_reason = StopReason::EarlyStop;
    let mut quantized = None;

    for _ in 0..cfg.max_outer_iters {
        let target = if compensator.rank() == 0 {
            w.clone()
        } else {
            w.sub(&lowrank::compensator_apply(&compensator))?
        };
        let q = quant::hqq_solve(&target, &cfg.quant, &params)?;
        params.zeros.clone_from(&q.zeros);
        let residual = w.sub(&quant::dequantize(&q))?;
        compensator = lowrank::truncated_svd(&residual, cfg.rank, DEFAULT_SVD_TOL)?;
        let eps = lowrank::residual_norm(&residual, &compensator);
        if !eps.is_finite() {
            return Err(MiloError::Numeric("error became non-finite".into()));
        }
        trace.push(eps);
        quantized = Some(q);
        if let Some(reason) = stop_check(&trace, cfg.window, cfg.rel_tol, &mut increases) {
            stop_reason = reason;
            break;
        }
    }

    let quantized = quantized.expect("max_outer_iters >= 1");
    let real_compensator_error = *trace.last().expect("non-empty trace");
    if cfg.quantize_compensator && compensator.rank() > 0 {
        compensator = compensator.to_symm_int3();
        let last = trace.last_mut().expect("non-empty trace");
        *last = error_trace_metric(w, &quantized, &compensator)?;
    }
    Ok(MiloResult {
        quantized,
        compensator,
        iterations_run: trace.len(),
        error_trace: trace,
        stop_reason,
        real_compensator_error,
    })
}

/// Per-matrix JSON run report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub rank: usize,
    pub iterations_run: usize,
    pub stop_reason: StopReason,
    pub error_trace: Vec<f64>,
    pub final_rel_error: f64,
    /// Change in final error caused by storing the compensator as INT3.
    pub compensator_quant_delta: f64,
}

impl RunReport {
    pub fn new(name: &str, w: &WeightMatrix, result: &MiloResult) -> Self {
        let norm = w.frobenius_norm();
        let final_error = result.final_error();
        RunReport {
            name: name.to_string(),
            rank: result.compensator.rank(),
            iterations_run: result.iterations_run,
            stop_reason: result.stop_reason,
            error_trace: result.error_trace.clone(),
            final_rel_error: if norm > 0.0 { final_error / norm } else { 0.0 },
            compensator_quant_delta: final_error - result.real_compensator_error,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_mean_uses_partial_windows() {
        let t = [4.0, 2.0, 3.0, 1.0];
        assert_eq!(window_mean(&t, 1, 3), 4.0);
        assert_eq!(window_mean(&t, 2, 3), 3.0);
        assert_eq!(window_mean(&t, 4, 3), 2.0);
    }

    #[test]
    fn stop_rule_cases() {
        let mut inc = 0;
        assert_eq!(stop_check(&[1.0], 3, 1e-4, &mut inc), None);
        assert_eq!(stop_check(&[0.0, 0.0], 3, 1e-4, &mut inc), Some(StopReason::Converged));
        assert_eq!(stop_check(&[1.0, 0.5], 3, 1e-4, &mut inc), None);
        assert_eq!(stop_check(&[1.0, 1.0], 3, 1e-4, &mut inc), Some(StopReason::Converged));
        let mut inc = 0;
        let rising = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(stop_check(&rising[..2], 3, 1e-4, &mut inc), None);
        assert_eq!(stop_check(&rising[..3], 3, 1e-4, &mut inc), None);
        assert_eq!(stop_check(&rising[..4], 3, 1e-4, &mut inc), Some(StopReason::Diverged));
    }

    #[test]
    fn grid_exact_matrix_converges_at_second_iteration() {
        // Each 64-wide group spans codes 0..7 with s = 0.5, z = 2.
        let w = WeightMatrix::from_fn("g", 4, 64, |i, j| 0.5 * (((i + j) % 8) as f32 - 2.0)).unwrap();
        let res = milo_compress(&w, &MiloConfig::with_rank(0)).unwrap();
        assert_eq!(res.error_trace[0], 0.0);
        assert_eq!(res.iterations_run, 2);
        assert_eq!(res.stop_reason, StopReason::Converged);
    }

    #[test]
    fn rank_above_dims_rejected() {
        let w = WeightMatrix::zeros("z", 4, 64);
        assert!(matches!(milo_compress(&w, &MiloConfig::with_rank(5)), Err(MiloError::Rank(_))));
    }

    #[test]
    fn metric_shape_check() {
        let w = WeightMatrix::zeros("z", 2, 4);
        let cfg = QuantConfig {
            group_size: 4,
            ..QuantConfig::default()
        };
        let q = quant::quantize(&w, &quant::init_quant_params(&w, &cfg).unwrap(), &cfg).unwrap();
        assert!(error_trace_metric(&w, &q, &Compensator::zero(2, 5)).is_err());
        assert_eq!(error_trace_metric(&w, &q, &Compensator::zero(2, 4)).unwrap(), 0.0);
    }
}
