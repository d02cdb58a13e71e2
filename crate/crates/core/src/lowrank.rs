//! Truncated-SVD residual compensation and symmetric INT3 storage of the
//! factor pair.
//!
//! A compensator of rank `r` for an `m x n` residual holds `U: m x r` and
//! `V: r x n` with `U = U_hat * sqrt(S)` and `V = sqrt(S) * V_hat^T`. In
//! symmetric INT3 storage both factors are grouped along the rank axis in
//! slices of [`COMP_GROUP`] (the last slice may be shorter).

use std::path::Path;

use nalgebra::{DMatrix, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{MiloError, Result};
use crate::quant::SCALE_FLOOR;
use crate::tensor_store::{self, ContainerHeader, WeightMatrix};

pub const COMP_GROUP: usize = 64;
pub const DEFAULT_SVD_TOL: f64 = 1e-4;

// Convergence threshold for the bidiagonal QR sweeps. Tighter values make
// nalgebra stop on spurious small off-diagonals and return wrong vectors.
const SVD_EPS: f64 = 1e-14;
const SVD_MAX_ITERS: usize = 10_000;
const SYMM_MID: i32 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompensatorStorage {
    Real,
    SymmInt3,
}

impl CompensatorStorage {
    pub fn as_str(self) -> &'static str {
        match self {
            CompensatorStorage::Real => "real",
            CompensatorStorage::SymmInt3 => "symm-int3",
        }
    }
}

/// Which way quantization groups run through a row-major factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupAxis {
    /// Groups are consecutive elements of a row.
    Row,
    /// Groups are consecutive elements of a column.
    Col,
}

/// Symmetric INT3 codes of one factor, stored in the factor's row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct SymmInt3Factor {
    pub rows: usize,
    pub cols: usize,
    pub axis: GroupAxis,
    pub group_size: usize,
    pub codes: Vec<u8>,
    /// One scale per group, lane-major: all groups of lane 0 first.
    pub scales: Vec<f32>,
}

impl SymmInt3Factor {
    fn lanes(&self) -> (usize, usize) {
        match self.axis {
            GroupAxis::Row => (self.rows, self.cols),
            GroupAxis::Col => (self.cols, self.rows),
        }
    }

    fn index(&self, lane: usize, pos: usize) -> usize {
        match self.axis {
            GroupAxis::Row => lane * self.cols + pos,
            GroupAxis::Col => pos * self.cols + lane,
        }
    }
}

/// Quantizes one group: `s = max|w|` (floored), `code = clamp(round(7w / 2s) + 4, 0, 7)`.
pub fn symm_int3_quantize_group(values: &[f32]) -> (Vec<u8>, f32) {
    let s = values.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(SCALE_FLOOR);
    (symm_int3_codes(values, s), s)
}

/// Codes of `values` on the grid of a given scale `s`.
pub fn symm_int3_codes(values: &[f32], s: f32) -> Vec<u8> {
    // In f64 so that `w = -s` lands exactly on the -3.5 tie.
    let s = s as f64;
    values
        .iter()
        .map(|&w| ((7.0 * w as f64 / (2.0 * s)).round() as i32 + SYMM_MID).clamp(0, 7) as u8)
        .collect()
}

/// `w = (code - 4) * 2s / 7`.
#[inline]
pub fn symm_int3_dequantize_value(code: u8, s: f32) -> f32 {
    (code as i32 - SYMM_MID) as f32 * 2.0 * s / 7.0
}

/// Symmetric INT3 quantization of a row-major `rows x cols` matrix with
/// groups of `group_size` running along `axis`.
pub fn symm_int3_quantize(
    data: &[f32],
    rows: usize,
    cols: usize,
    axis: GroupAxis,
    group_size: usize,
) -> Result<SymmInt3Factor> {
    if data.len() != rows * cols {
        return Err(MiloError::Shape(format!("{} values for {rows}x{cols}", data.len())));
    }
    if group_size == 0 {
        return Err(MiloError::Config("group size must be positive".into()));
    }
    let mut out = SymmInt3Factor {
        rows,
        cols,
        axis,
        group_size,
        codes: vec![0; data.len()],
        scales: Vec::new(),
    };
    let (lanes, lane_len) = out.lanes();
    let mut buf = Vec::with_capacity(group_size);
    for lane in 0..lanes {
        for start in (0..lane_len).step_by(group_size) {
            let end = (start + group_size).min(lane_len);
            buf.clear();
            buf.extend((start..end).map(|pos| data[out.index(lane, pos)]));
            let (codes, s) = symm_int3_quantize_group(&buf);
            for (pos, c) in (start..end).zip(codes) {
                let idx = out.index(lane, pos);
                out.codes[idx] = c;
            }
            out.scales.push(s);
        }
    }
    Ok(out)
}

pub fn symm_int3_dequantize(f: &SymmInt3Factor) -> Vec<f32> {
    let (lanes, lane_len) = f.lanes();
    let groups_per_lane = lane_len.div_ceil(f.group_size);
    let mut out = vec![0.0; f.codes.len()];
    for lane in 0..lanes {
        for pos in 0..lane_len {
            let s = f.scales[lane * groups_per_lane + pos / f.group_size];
            let idx = f.index(lane, pos);
            out[idx] = symm_int3_dequantize_value(f.codes[idx], s);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
enum Factors {
    Real { u: Vec<f32>, v: Vec<f32> },
    SymmInt3 { u: SymmInt3Factor, v: SymmInt3Factor },
}

/// Rank-`r` factor pair approximating a quantization residual.
#[derive(Clone, Debug, PartialEq)]
pub struct Compensator {
    rows: usize,
    cols: usize,
    rank: usize,
    factors: Factors,
}

impl Compensator {
    pub fn zero(rows: usize, cols: usize) -> Self {
        Compensator {
            rows,
            cols,
            rank: 0,
            factors: Factors::Real {
                u: Vec::new(),
                v: Vec::new(),
            },
        }
    }

    /// Real-storage compensator from `U` (`rows x rank`) and `V` (`rank x cols`).
    pub fn from_factors(rows: usize, cols: usize, rank: usize, u: Vec<f32>, v: Vec<f32>) -> Result<Self> {
        if rank > rows.min(cols) {
            return Err(MiloError::Rank(format!("rank {rank} exceeds min({rows}, {cols})")));
        }
        if u.len() != rows * rank || v.len() != rank * cols {
            return Err(MiloError::Shape("factor sizes do not match rank".into()));
        }
        Ok(Compensator {
            rows,
            cols,
            rank,
            factors: Factors::Real { u, v },
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn storage(&self) -> CompensatorStorage {
        match self.factors {
            Factors::Real { .. } => CompensatorStorage::Real,
            Factors::SymmInt3 { .. } => CompensatorStorage::SymmInt3,
        }
    }

    /// Working-precision `(U, V)`, dequantizing when stored as INT3.
    pub fn factors(&self) -> (Vec<f32>, Vec<f32>) {
        match &self.factors {
            Factors::Real { u, v } => (u.clone(), v.clone()),
            Factors::SymmInt3 { u, v } => (symm_int3_dequantize(u), symm_int3_dequantize(v)),
        }
    }

    pub fn int3_factors(&self) -> Option<(&SymmInt3Factor, &SymmInt3Factor)> {
        match &self.factors {
            Factors::SymmInt3 { u, v } => Some((u, v)),
            Factors::Real { .. } => None,
        }
    }

    /// Quantizes both factors to symmetric INT3, grouping along the rank axis.
    /// Already-quantized compensators are returned unchanged.
    pub fn to_symm_int3(&self) -> Compensator {
        let Factors::Real { u, v } = &self.factors else {
            return self.clone();
        };
        let group = COMP_GROUP.min(self.rank.max(1));
        let uq = symm_int3_quantize(u, self.rows, self.rank, GroupAxis::Row, group)
            .expect("factor shapes are consistent");
        let vq = symm_int3_quantize(v, self.rank, self.cols, GroupAxis::Col, group)
            .expect("factor shapes are consistent");
        Compensator {
            rows: self.rows,
            cols: self.cols,
            rank: self.rank,
            factors: Factors::SymmInt3 { u: uq, v: vq },
        }
    }

    /// Materializes `U * V`.
    pub fn apply(&self) -> WeightMatrix {
        compensator_apply(self)
    }
}

/// Materializes `U * V` as a dense matrix (zero when the rank is 0).
pub fn compensator_apply(c: &Compensator) -> WeightMatrix {
    let mut out = vec![0.0f32; c.rows * c.cols];
    if c.rank > 0 {
        let (u, v) = c.factors();
        let mut acc = vec![0.0f64; c.cols];
        for i in 0..c.rows {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for k in 0..c.rank {
                let uik = u[i * c.rank + k] as f64;
                if uik == 0.0 {
                    continue;
                }
                for (a, &vkj) in acc.iter_mut().zip(&v[k * c.cols..(k + 1) * c.cols]) {
                    *a += uik * vkj as f64;
                }
            }
            for (o, a) in out[i * c.cols..(i + 1) * c.cols].iter_mut().zip(&acc) {
                *o = *a as f32;
            }
        }
    }
    WeightMatrix::from_trusted("compensator", c.rows, c.cols, out)
}

pub(crate) fn to_dmatrix(m: &WeightMatrix) -> DMatrix<f64> {
    DMatrix::from_row_iterator(m.rows(), m.cols(), m.data().iter().map(|&v| v as f64))
}

/// Singular values in descending order.
pub fn singular_values(m: &WeightMatrix) -> Result<Vec<f64>> {
    if m.is_empty() {
        return Ok(Vec::new());
    }
    let svd = SVD::try_new(to_dmatrix(m), false, false, SVD_EPS, SVD_MAX_ITERS)
        .ok_or_else(|| MiloError::Numeric("singular value decomposition did not converge".into()))?;
    let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

/// Best rank-`r` approximation of `e` in Frobenius norm.
///
/// After factorization the residual `||E - UV||_F` is checked against the
/// discarded tail `sqrt(sum_{i>r} sigma_i^2)`; a relative disagreement above
/// `tol` (measured against at least `1e-5 * ||E||_F`, the resolution of `f32`
/// factors) is reported as a numeric failure.
pub fn truncated_svd(e: &WeightMatrix, r: usize, tol: f64) -> Result<Compensator> {
    let (rows, cols) = e.shape();
    if r > rows.min(cols) {
        return Err(MiloError::Rank(format!("rank {r} exceeds min({rows}, {cols})")));
    }
    if r == 0 {
        return Ok(Compensator::zero(rows, cols));
    }
    let svd = SVD::try_new(to_dmatrix(e), true, true, SVD_EPS, SVD_MAX_ITERS)
        .ok_or_else(|| MiloError::Numeric("singular value decomposition did not converge".into()))?;
    let u_hat = svd.u.as_ref().expect("left vectors requested");
    let vt_hat = svd.v_t.as_ref().expect("right vectors requested");
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));

    let mut u = vec![0.0f32; rows * r];
    let mut v = vec![0.0f32; r * cols];
    for (k, &idx) in order.iter().take(r).enumerate() {
        let root = sv[idx].sqrt();
        for i in 0..rows {
            u[i * r + k] = (u_hat[(i, idx)] * root) as f32;
        }
        for j in 0..cols {
            v[k * cols + j] = (vt_hat[(idx, j)] * root) as f32;
        }
    }
    if u.iter().chain(&v).any(|x| !x.is_finite()) {
        return Err(MiloError::Numeric("non-finite compensator factor".into()));
    }
    let comp = Compensator::from_factors(rows, cols, r, u, v)?;

    let tail = order[r..].iter().map(|&i| sv[i] * sv[i]).sum::<f64>().sqrt();
    let norm = e.frobenius_norm();
    let residual = residual_norm(e, &comp);
    // Slack for rounding the factors to f32.
    let allowed = tol * tail + 1e-5 * norm + f64::MIN_POSITIVE;
    if (residual - tail).abs() > allowed {
        return Err(MiloError::Numeric(format!(
            "truncated factorization residual {residual:.6e} disagrees with spectral tail {tail:.6e}"
        )));
    }
    Ok(comp)
}

/// `||E - UV||_F` accumulated in `f64`.
pub fn residual_norm(e: &WeightMatrix, c: &Compensator) -> f64 {
    let uv = compensator_apply(c);
    e.data()
        .iter()
        .zip(uv.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn factor_header(name: &str, role: &str, rows: usize, cols: usize, c: &Compensator) -> ContainerHeader {
    let dtype = match c.storage() {
        CompensatorStorage::Real => "f32",
        CompensatorStorage::SymmInt3 => "symm-i3",
    };
    let mut h = ContainerHeader::new(name, rows, cols, dtype);
    h.role = Some(role.to_string());
    h.rank = Some(c.rank);
    h.storage = Some(c.storage().as_str().to_string());
    h
}

fn int3_payload(f: &SymmInt3Factor) -> Vec<u8> {
    let mut payload = f.codes.clone();
    payload.extend(tensor_store::f32s_to_le(&f.scales));
    payload
}

/// Writes the factors as two containers tagged `compensator-U` / `compensator-V`.
pub fn save_compensator(c: &Compensator, name: &str, u_path: &Path, v_path: &Path) -> Result<()> {
    let mut hu = factor_header(name, "compensator-U", c.rows, c.rank, c);
    let mut hv = factor_header(name, "compensator-V", c.rank, c.cols, c);
    let (pu, pv) = match &c.factors {
        Factors::Real { u, v } => (tensor_store::f32s_to_le(u), tensor_store::f32s_to_le(v)),
        Factors::SymmInt3 { u, v } => {
            hu.group_size = Some(u.group_size);
            hv.group_size = Some(v.group_size);
            (int3_payload(u), int3_payload(v))
        }
    };
    tensor_store::write_container(u_path, &hu, &pu)?;
    tensor_store::write_container(v_path, &hv, &pv)
}

fn read_factor(path: &Path, role: &str, axis: GroupAxis) -> Result<(ContainerHeader, FactorData)> {
    let (h, payload) = tensor_store::read_container(path)?;
    if h.role.as_deref() != Some(role) {
        return Err(MiloError::Format(format!("{}: expected role {role}", path.display())));
    }
    let n = h.rows * h.cols;
    let data = match h.dtype.as_str() {
        "f32" => {
            if payload.len() != n * 4 {
                return Err(MiloError::Format(format!("{}: payload size mismatch", path.display())));
            }
            FactorData::Real(tensor_store::le_to_f32s(&payload))
        }
        "symm-i3" => {
            let group_size = h
                .group_size
                .filter(|&g| g > 0)
                .ok_or_else(|| MiloError::Format("symm-i3 factor without group_size".into()))?;
            let lane_len = if axis == GroupAxis::Row { h.cols } else { h.rows };
            let lanes = if axis == GroupAxis::Row { h.rows } else { h.cols };
            let groups = lanes * lane_len.div_ceil(group_size);
            if payload.len() != n + groups * 4 {
                return Err(MiloError::Format(format!("{}: payload size mismatch", path.display())));
            }
            let codes = payload[..n].to_vec();
            if codes.iter().any(|&c| c > 7) {
                return Err(MiloError::Range("symmetric INT3 code above 7".into()));
            }
            FactorData::Int3(SymmInt3Factor {
                rows: h.rows,
                cols: h.cols,
                axis,
                group_size,
                codes,
                scales: tensor_store::le_to_f32s(&payload[n..]),
            })
        }
        other => return Err(MiloError::Format(format!("unexpected compensator dtype {other}"))),
    };
    Ok((h, data))
}

enum FactorData {
    Real(Vec<f32>),
    Int3(SymmInt3Factor),
}

pub fn load_compensator(u_path: &Path, v_path: &Path) -> Result<Compensator> {
    let (hu, u) = read_factor(u_path, "compensator-U", GroupAxis::Row)?;
    let (hv, v) = read_factor(v_path, "compensator-V", GroupAxis::Col)?;
    let rank = hu.cols;
    if hv.rows != rank || hu.rank != Some(rank) || hv.rank != Some(rank) {
        return Err(MiloError::Format("compensator factor ranks disagree".into()));
    }
    let factors = match (u, v) {
        (FactorData::Real(u), FactorData::Real(v)) => Factors::Real { u, v },
        (FactorData::Int3(u), FactorData::Int3(v)) => Factors::SymmInt3 { u, v },
        _ => return Err(MiloError::Format("compensator factors use different storage".into())),
    };
    Ok(Compensator {
        rows: hu.rows,
        cols: hv.cols,
        rank,
        factors,
    })
}
