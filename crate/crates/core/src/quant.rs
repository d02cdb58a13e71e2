//! Grouped asymmetric quantization and the half-quadratic zero-point solver.
//!
//! Groups are `group_size` consecutive elements of one row, so with a
//! row-major layout group `g` covers the flat range
//! `g * group_size .. (g + 1) * group_size`.

use serde::{Deserialize, Serialize};

use crate::error::{MiloError, Result};
use std::path::Path;

use crate::tensor_store::{self, ContainerHeader, WeightMatrix};

/// Lower bound applied to every scale so degenerate groups stay invertible.
pub const SCALE_FLOOR: f32 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rounding {
    #[default]
    HalfAwayFromZero,
}

impl Rounding {
    pub fn round(self, x: f32) -> f32 {
        match self {
            // f32::round ties away from zero.
            Rounding::HalfAwayFromZero => x.round(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantConfig {
    pub bits: u32,
    pub group_size: usize,
    /// Exponent of the l_p loss, in (0, 1).
    pub p: f32,
    pub beta0: f64,
    pub beta_growth: f64,
    pub inner_iters: usize,
    pub rounding: Rounding,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            bits: 3,
            group_size: 64,
            p: 0.7,
            beta0: 1e4,
            beta_growth: 1.01,
            inner_iters: 20,
            rounding: Rounding::HalfAwayFromZero,
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.bits) {
            return Err(MiloError::Config(format!("bits must be in 2..=8, got {}", self.bits)));
        }
        if self.group_size == 0 {
            return Err(MiloError::Config("group_size must be positive".into()));
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(MiloError::Config(format!("p must be in (0, 1), got {}", self.p)));
        }
        if !(self.beta0 > 0.0) || !(self.beta_growth >= 1.0) {
            return Err(MiloError::Config("beta0 must be positive and beta_growth >= 1".into()));
        }
        Ok(())
    }

    pub fn max_code(&self) -> f32 {
        ((1u32 << self.bits) - 1) as f32
    }

    fn check_target(&self, target: &WeightMatrix) -> Result<usize> {
        if target.is_empty() {
            return Err(MiloError::Shape("cannot quantize an empty matrix".into()));
        }
        if target.cols() % self.group_size != 0 {
            return Err(MiloError::Shape(format!(
                "group size {} does not divide {} columns",
                self.group_size,
                target.cols()
            )));
        }
        Ok(target.len() / self.group_size)
    }
}

/// Per-group scale and zero-point.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantParams {
    pub scales: Vec<f32>,
    pub zeros: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedMatrix {
    pub rows: usize,
    pub cols: usize,
    pub bits: u32,
    pub group_size: usize,
    pub codes: Vec<u8>,
    pub scales: Vec<f32>,
    pub zeros: Vec<f32>,
}

impl QuantizedMatrix {
    pub fn groups(&self) -> usize {
        self.codes.len() / self.group_size
    }

    pub fn params(&self) -> QuantParams {
        QuantParams {
            scales: self.scales.clone(),
            zeros: self.zeros.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.rows * self.cols;
        if self.codes.len() != n || self.group_size == 0 || n % self.group_size != 0 {
            return Err(MiloError::Shape("code buffer does not match shape".into()));
        }
        if self.scales.len() != n / self.group_size || self.zeros.len() != self.scales.len() {
            return Err(MiloError::Shape("scale/zero vectors do not match group count".into()));
        }
        let max = (1u32 << self.bits) - 1;
        if self.codes.iter().any(|&c| c as u32 > max) {
            return Err(MiloError::Range(format!("code outside [0, {max}]")));
        }
        if self.scales.iter().any(|&s| !(s > 0.0)) {
            return Err(MiloError::Data("scales must be strictly positive".into()));
        }
        Ok(())
    }
}

/// Min-max initialization: `s = (max - min) / (2^b - 1)` floored at
/// [`SCALE_FLOOR`], `z = -min / s`.
pub fn init_quant_params(target: &WeightMatrix, cfg: &QuantConfig) -> Result<QuantParams> {
    cfg.validate()?;
    let groups = cfg.check_target(target)?;
    let mut scales = Vec::with_capacity(groups);
    let mut zeros = Vec::with_capacity(groups);
    for group in target.data().chunks_exact(cfg.group_size) {
        let (lo, hi) = group
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let s = ((hi - lo) / cfg.max_code()).max(SCALE_FLOOR);
        scales.push(s);
        zeros.push(-lo / s);
    }
    Ok(QuantParams { scales, zeros })
}

#[inline]
fn code_of(x: f32, s: f32, z: f32, max_code: f32, rounding: Rounding) -> f32 {
    rounding.round(x / s + z).clamp(0.0, max_code)
}

fn check_params(target: &WeightMatrix, params: &QuantParams, cfg: &QuantConfig) -> Result<usize> {
    let groups = cfg.check_target(target)?;
    if params.scales.len() != groups || params.zeros.len() != groups {
        return Err(MiloError::Shape(format!(
            "expected {groups} scale/zero pairs, got {}/{}",
            params.scales.len(),
            params.zeros.len()
        )));
    }
    Ok(groups)
}

/// `codes = clamp(round(target / s + z), 0, 2^b - 1)`.
pub fn quantize(target: &WeightMatrix, params: &QuantParams, cfg: &QuantConfig) -> Result<QuantizedMatrix> {
    cfg.validate()?;
    check_params(target, params, cfg)?;
    let max_code = cfg.max_code();
    let mut codes = Vec::with_capacity(target.len());
    for ((group, &s), &z) in target
        .data()
        .chunks_exact(cfg.group_size)
        .zip(&params.scales)
        .zip(&params.zeros)
    {
        codes.extend(group.iter().map(|&x| code_of(x, s, z, max_code, cfg.rounding) as u8));
    }
    Ok(QuantizedMatrix {
        rows: target.rows(),
        cols: target.cols(),
        bits: cfg.bits,
        group_size: cfg.group_size,
        codes,
        scales: params.scales.clone(),
        zeros: params.zeros.clone(),
    })
}

/// `W_dq = s * (code - z)` per group.
pub fn dequantize(q: &QuantizedMatrix) -> WeightMatrix {
    let mut data = Vec::with_capacity(q.codes.len());
    for ((codes, &s), &z) in q.codes.chunks_exact(q.group_size).zip(&q.scales).zip(&q.zeros) {
        data.extend(codes.iter().map(|&c| s * (c as f32 - z)));
    }
    WeightMatrix::from_trusted("dequantized", q.rows, q.cols, data)
}

/// Generalized soft-thresholding for the l_p norm:
/// `sign(x) * relu(|x| - |x|^(p-1) / beta)`, with 0 mapped to 0.
#[inline]
pub fn shrink_lp_scalar(x: f32, beta: f32, p: f32) -> f32 {
    if x == 0.0 {
        return 0.0;
    }
    let a = x.abs();
    let mag = (a - a.powf(p - 1.0) / beta).max(0.0);
    mag.copysign(x)
}

pub fn shrink_lp(x: &[f32], beta: f32, p: f32) -> Vec<f32> {
    x.iter().map(|&v| shrink_lp_scalar(v, beta, p)).collect()
}

fn group_sq_error(target: &[f32], s: f32, z: f32, max_code: f32, rounding: Rounding) -> f64 {
    target
        .iter()
        .map(|&x| {
            let dq = s * (code_of(x, s, z, max_code, rounding) - z);
            let d = (x - dq) as f64;
            d * d
        })
        .sum()
}

/// Result of [`hqq_solve_traced`]: the quantized matrix plus the Frobenius
/// reconstruction error after initialization and after each inner iteration.
#[derive(Clone, Debug)]
pub struct HqqSolution {
    pub quantized: QuantizedMatrix,
    pub error_trace: Vec<f64>,
}

/// Zero-point optimization with scales held fixed. See [`hqq_solve_traced`].
pub fn hqq_solve(target: &WeightMatrix, cfg: &QuantConfig, params: &QuantParams) -> Result<QuantizedMatrix> {
    hqq_solve_traced(target, cfg, params).map(|s| s.quantized)
}

/// Half-quadratic zero-point solver.
///
/// Each inner iteration rounds with the current zero-point, shrinks the
/// residual with the l_p proximal operator and moves `z` to the group mean of
/// `W_q - (target - M) / s`; `beta` grows geometrically. Every group keeps the
/// best zero-point seen so far in Frobenius error, so the returned error is
/// never worse than plain round-to-nearest with the initial `z`.
pub fn hqq_solve_traced(target: &WeightMatrix, cfg: &QuantConfig, params: &QuantParams) -> Result<HqqSolution> {
    cfg.validate()?;
    let groups = check_params(target, params, cfg)?;
    let gs = cfg.group_size;
    let max_code = cfg.max_code();
    let data = target.data();

    let mut z = params.zeros.clone();
    let mut best_z = z.clone();
    let mut best_err: Vec<f64> = (0..groups)
        .map(|g| group_sq_error(&data[g * gs..(g + 1) * gs], params.scales[g], z[g], max_code, cfg.rounding))
        .collect();
    let mut trace = Vec::with_capacity(cfg.inner_iters + 1);
    trace.push(best_err.iter().sum::<f64>().sqrt());

    let mut beta = cfg.beta0;
    for _ in 0..cfg.inner_iters {
        let beta_f = beta as f32;
        for g in 0..groups {
            let group = &data[g * gs..(g + 1) * gs];
            let s = params.scales[g];
            let zg = z[g];
            let mut acc = 0.0f64;
            for &x in group {
                let code = code_of(x, s, zg, max_code, cfg.rounding);
                let dq = s * (code - zg);
                let m = shrink_lp_scalar(x - dq, beta_f, cfg.p);
                acc += (code - (x - m) / s) as f64;
            }
            let z_new = (acc / gs as f64) as f32;
            if !z_new.is_finite() {
                return Err(MiloError::Numeric(format!("zero-point of group {g} became non-finite")));
            }
            z[g] = z_new;
            let err = group_sq_error(group, s, z_new, max_code, cfg.rounding);
            if err < best_err[g] {
                best_err[g] = err;
                best_z[g] = z_new;
            }
        }
        beta *= cfg.beta_growth;
        trace.push(best_err.iter().sum::<f64>().sqrt());
    }

    let quantized = quantize(
        target,
        &QuantParams {
            scales: params.scales.clone(),
            zeros: best_z,
        },
        cfg,
    )?;
    Ok(HqqSolution {
        quantized,
        error_trace: trace,
    })
}

/// Container with dtype `q-codes`: one byte per code, then f32 scales, then
/// f32 zero-points.
pub fn encode_quantized(q: &QuantizedMatrix, name: &str) -> Result<Vec<u8>> {
    q.validate()?;
    let mut h = ContainerHeader::new(name, q.rows, q.cols, "q-codes");
    h.bits = Some(q.bits);
    h.group_size = Some(q.group_size);
    let mut payload = q.codes.clone();
    payload.extend(tensor_store::f32s_to_le(&q.scales));
    payload.extend(tensor_store::f32s_to_le(&q.zeros));
    tensor_store::encode_container(&h, &payload)
}

pub fn decode_quantized(bytes: &[u8]) -> Result<(String, QuantizedMatrix)> {
    let (h, payload) = tensor_store::decode_container(bytes)?;
    if h.dtype != "q-codes" {
        return Err(MiloError::Format(format!("expected dtype q-codes, got {}", h.dtype)));
    }
    let bits = h.bits.ok_or_else(|| MiloError::Format("q-codes header lacks bits".into()))?;
    let gs = h.group_size.ok_or_else(|| MiloError::Format("q-codes header lacks group_size".into()))?;
    let n = h.rows * h.cols;
    if gs == 0 || n % gs != 0 || !(2..=8).contains(&bits) {
        return Err(MiloError::Format("q-codes header is inconsistent".into()));
    }
    let groups = n / gs;
    if payload.len() != n + 8 * groups {
        return Err(MiloError::Format(format!(
            "q-codes payload is {} bytes, expected {}",
            payload.len(),
            n + 8 * groups
        )));
    }
    let q = QuantizedMatrix {
        rows: h.rows,
        cols: h.cols,
        bits,
        group_size: gs,
        codes: payload[..n].to_vec(),
        scales: tensor_store::le_to_f32s(&payload[n..n + 4 * groups]),
        zeros: tensor_store::le_to_f32s(&payload[n + 4 * groups..]),
    };
    q.validate().map_err(|e| MiloError::Format(e.to_string()))?;
    Ok((h.name, q))
}

pub fn save_quantized(q: &QuantizedMatrix, name: &str, path: &Path) -> Result<()> {
    tensor_store::write_atomic(path, &encode_quantized(q, name)?)
}

pub fn load_quantized(path: &Path) -> Result<(String, QuantizedMatrix)> {
    let bytes = std::fs::read(path).map_err(|e| MiloError::io(path, e))?;
    decode_quantized(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(group_size: usize) -> QuantConfig {
        QuantConfig {
            group_size,
            ..QuantConfig::default()
        }
    }

    #[test]
    fn init_symmetric_range() {
        let mut vals = vec![0.0f32; 8];
        vals[0] = -1.0;
        vals[1] = 1.0;
        let w = WeightMatrix::new("g", 1, 8, vals).unwrap();
        let p = init_quant_params(&w, &cfg(8)).unwrap();
        assert!((p.scales[0] - 2.0 / 7.0).abs() < 1e-7);
        assert!((p.zeros[0] - 3.5).abs() < 1e-6);
    }

    #[test]
    fn init_unit_grid() {
        let w = WeightMatrix::new("g", 1, 8, (0..8).map(|v| v as f32).collect()).unwrap();
        let p = init_quant_params(&w, &cfg(8)).unwrap();
        assert_eq!(p.scales[0], 1.0);
        assert_eq!(p.zeros[0], 0.0);
    }

    #[test]
    fn constant_group_uses_floor() {
        let w = WeightMatrix::new("c", 1, 4, vec![0.3; 4]).unwrap();
        let c = cfg(4);
        let p = init_quant_params(&w, &c).unwrap();
        assert_eq!(p.scales[0], SCALE_FLOOR);
        let q = quantize(&w, &p, &c).unwrap();
        assert!(q.codes.iter().all(|&k| k == q.codes[0]));
    }

    #[test]
    fn empty_matrix_is_shape_error() {
        let w = WeightMatrix::new("e", 0, 0, vec![]).unwrap();
        assert!(matches!(init_quant_params(&w, &cfg(4)), Err(MiloError::Shape(_))));
    }

    #[test]
    fn quantize_and_dequantize_single_value() {
        let c = cfg(1);
        let w = WeightMatrix::new("x", 1, 1, vec![0.5]).unwrap();
        let p = QuantParams {
            scales: vec![0.25],
            zeros: vec![2.0],
        };
        let q = quantize(&w, &p, &c).unwrap();
        assert_eq!(q.codes, vec![4]);
        assert_eq!(dequantize(&q).data(), &[0.5]);
    }

    #[test]
    fn clamps_below_grid() {
        let c = cfg(1);
        let w = WeightMatrix::new("x", 1, 2, vec![-100.0, 100.0]).unwrap();
        let p = QuantParams {
            scales: vec![0.25, 0.25],
            zeros: vec![2.0, 2.0],
        };
        let q = quantize(&w, &p, &c).unwrap();
        assert_eq!(q.codes, vec![0, 7]);
    }

    #[test]
    fn code_equal_to_zero_point_dequantizes_to_zero() {
        let q = QuantizedMatrix {
            rows: 1,
            cols: 2,
            bits: 3,
            group_size: 2,
            codes: vec![3, 3],
            scales: vec![0.7],
            zeros: vec![3.0],
        };
        assert_eq!(dequantize(&q).data(), &[0.0, 0.0]);
    }

    #[test]
    fn group_mismatch_is_shape_error() {
        let w = WeightMatrix::zeros("x", 2, 8);
        let p = QuantParams {
            scales: vec![1.0],
            zeros: vec![0.0],
        };
        assert!(matches!(quantize(&w, &p, &cfg(4)), Err(MiloError::Shape(_))));
        assert!(matches!(quantize(&w, &p, &cfg(3)), Err(MiloError::Shape(_))));
    }

    #[test]
    fn shrink_examples() {
        assert_eq!(shrink_lp_scalar(0.0, 10.0, 0.7), 0.0);
        assert!((shrink_lp_scalar(1.0, 10.0, 0.7) - 0.9).abs() < 1e-6);
        assert_eq!(shrink_lp_scalar(-0.05, 10.0, 0.7), 0.0);
        assert_eq!(shrink_lp(&[0.0, 1.0], 10.0, 0.7).len(), 2);
    }

    #[test]
    fn hqq_grid_fixed_point() {
        // s = 0.25 and z = 3 make every grid value exactly representable.
        let c = cfg(8);
        let vals: Vec<f32> = (0..8).map(|k| 0.25 * (k as f32 - 3.0)).collect();
        let w = WeightMatrix::new("g", 1, 8, vals).unwrap();
        let p = init_quant_params(&w, &c).unwrap();
        assert_eq!((p.scales[0], p.zeros[0]), (0.25, 3.0));
        let sol = hqq_solve_traced(&w, &c, &p).unwrap();
        assert_eq!(sol.quantized.zeros, vec![3.0]);
        assert_eq!(dequantize(&sol.quantized).data(), w.data());
        assert!(sol.error_trace.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn hqq_constant_matrix() {
        let c = cfg(4);
        let w = WeightMatrix::new("c", 2, 4, vec![-0.4; 8]).unwrap();
        let p = init_quant_params(&w, &c).unwrap();
        let q = hqq_solve(&w, &c, &p).unwrap();
        for row in q.codes.chunks(4) {
            assert!(row.iter().all(|&k| k == row[0]));
        }
        let dq = dequantize(&q);
        for (a, b) in dq.data().iter().zip(w.data()) {
            assert!((a - b).abs() <= 1e-6 * b.abs());
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let w = WeightMatrix::zeros("x", 1, 4);
        let mut c = cfg(4);
        c.p = 1.0;
        assert!(matches!(init_quant_params(&w, &c), Err(MiloError::Config(_))));
        c.p = 0.7;
        c.bits = 9;
        assert!(matches!(init_quant_params(&w, &c), Err(MiloError::Config(_))));
    }
}
