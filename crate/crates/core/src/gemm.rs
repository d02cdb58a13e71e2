//! Tiled W3A16 GeMM reference: binary16 activations times packed INT3
//! weights, dequantized block by block with the fast path and accumulated in
//! f32, plus an optional low-rank compensator.
//!
//! `Wp` is `k x n` with scale groups of 64 along `n`. Output tiles are
//! `m x tile.1` column strips, one per worker; each strip walks its `k / tile.0`
//! reduction tiles in stages of [`PIPELINE_DEPTH`].

use half::f16;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MiloError, Result};
use crate::lowrank::Compensator;
use crate::pack::{self, DequantMode, Layout, PackedInt3Matrix, CODES_PER_GROUP};
use crate::tensor_store::WeightMatrix;

pub const ALLOWED_TILE_SHAPES: [(usize, usize); 3] = [(64, 256), (128, 128), (256, 64)];
pub const GEMM_GROUP_SIZE: usize = 64;
pub const PIPELINE_DEPTH: usize = 4;
pub const BATCH_MULTIPLE: usize = 16;
pub const REL_ERROR_GATE: f64 = 0.005;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GemmConfig {
    pub tile_shape: (usize, usize),
    pub group_size: usize,
    pub mode: DequantMode,
    pub pipeline_depth: usize,
    /// Add `UV` into the weight blocks instead of computing `(AU)V`.
    pub materialize_compensator: bool,
}

impl GemmConfig {
    pub fn new(tile_shape: (usize, usize), mode: DequantMode) -> Self {
        GemmConfig {
            tile_shape,
            group_size: GEMM_GROUP_SIZE,
            mode,
            pipeline_depth: PIPELINE_DEPTH,
            materialize_compensator: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !ALLOWED_TILE_SHAPES.contains(&self.tile_shape) {
            return Err(MiloError::Config(format!(
                "tile shape {:?} not in {ALLOWED_TILE_SHAPES:?}",
                self.tile_shape
            )));
        }
        if self.group_size != GEMM_GROUP_SIZE {
            return Err(MiloError::Config(format!(
                "group size must be {GEMM_GROUP_SIZE}, got {}",
                self.group_size
            )));
        }
        if self.pipeline_depth == 0 {
            return Err(MiloError::Config("pipeline depth must be positive".into()));
        }
        Ok(())
    }
}

/// Reduction-tile indices grouped into pipeline stages.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Schedule {
    pub k_tiles: usize,
    pub stages: Vec<Vec<usize>>,
}

impl Schedule {
    pub fn has_short_tail(&self) -> bool {
        self.stages.last().is_some_and(|s| s.len() < self.stages[0].len())
    }
}

pub fn pipeline_tail_check(k: usize, cfg: &GemmConfig) -> Result<Schedule> {
    cfg.validate()?;
    let t0 = cfg.tile_shape.0;
    if k == 0 || k % t0 != 0 {
        return Err(MiloError::Shape(format!("k = {k} is not a multiple of tile rows {t0}")));
    }
    let k_tiles = k / t0;
    let tiles: Vec<usize> = (0..k_tiles).collect();
    Ok(Schedule {
        k_tiles,
        stages: tiles.chunks(cfg.pipeline_depth).map(<[usize]>::to_vec).collect(),
    })
}

/// Zero-pads the batch to a multiple of 16 rows; returns the original row count.
pub fn pad_batch(a: &WeightMatrix) -> Result<(WeightMatrix, usize)> {
    let (m, k) = a.shape();
    if m == 0 {
        return Err(MiloError::Shape("empty activation batch".into()));
    }
    let padded = m.div_ceil(BATCH_MULTIPLE) * BATCH_MULTIPLE;
    let mut data = a.data().to_vec();
    data.resize(padded * k, 0.0);
    Ok((WeightMatrix::new(a.name().to_string(), padded, k, data)?, m))
}

fn check_problem(a: &WeightMatrix, wp: &PackedInt3Matrix, comp: Option<&Compensator>, cfg: &GemmConfig) -> Result<()> {
    cfg.validate()?;
    if wp.group_size != GEMM_GROUP_SIZE {
        return Err(MiloError::Config(format!(
            "packed weights use group size {}, need {GEMM_GROUP_SIZE}",
            wp.group_size
        )));
    }
    let (k, n) = (wp.rows, wp.cols);
    let (t0, t1) = cfg.tile_shape;
    if k % t0 != 0 || n % t1 != 0 {
        return Err(MiloError::Shape(format!("(k, n) = ({k}, {n}) is not a multiple of tile {:?}", cfg.tile_shape)));
    }
    if a.cols() != k {
        return Err(MiloError::Shape(format!("activations have {} columns, weights {k} rows", a.cols())));
    }
    if comp.is_some_and(|c| (c.rows(), c.cols()) != (k, n)) {
        return Err(MiloError::Shape("compensator shape differs from weights".into()));
    }
    if cfg.mode == DequantMode::Asymmetric && wp.zeros.is_none() {
        return Err(MiloError::Config("asymmetric mode needs zero-points".into()));
    }
    Ok(())
}

/// Fast-path dequantization of the `rows x cols` block at `(i0, j0)`.
fn dequant_block(wp: &PackedInt3Matrix, mode: DequantMode, i0: usize, j0: usize, rows: usize, cols: usize, out: &mut [f32]) -> Result<()> {
    for i in 0..rows {
        for jc in (0..cols).step_by(CODES_PER_GROUP) {
            let (gi, gj) = (i0 + i, j0 + jc);
            let g = wp.layout.index(gi, gj, wp.cols) / CODES_PER_GROUP;
            let scale = wp.group_scale((gi * wp.cols + gj) / wp.group_size, mode)?;
            let values = pack::fast_dequant_group(wp.group_words(g), mode);
            let dst = &mut out[i * cols + jc..i * cols + jc + CODES_PER_GROUP];
            for (d, v) in dst.iter_mut().zip(values) {
                *d = scale.apply(v).to_f32();
            }
        }
    }
    Ok(())
}

fn round_to_half(values: &[f32]) -> Vec<f32> {
    values.iter().map(|&x| f16::from_f32(x).to_f32()).collect()
}

/// `C = A (dequant(Wp) + UV)`, `m x n`.
pub fn gemm_w3a16(
    a: &WeightMatrix,
    wp: &PackedInt3Matrix,
    comp: Option<&Compensator>,
    cfg: &GemmConfig,
) -> Result<WeightMatrix> {
    check_problem(a, wp, comp, cfg)?;
    let (k, n) = (wp.rows, wp.cols);
    let (t0, t1) = cfg.tile_shape;
    let schedule = pipeline_tail_check(k, cfg)?;
    let (padded, m) = pad_batch(a)?;
    let mp = padded.rows();
    let a_h = round_to_half(padded.data());

    let comp = comp.filter(|c| c.rank() > 0);
    let materialized = match comp {
        Some(c) if cfg.materialize_compensator => Some(crate::lowrank::compensator_apply(c)),
        _ => None,
    };
    // (A U), m_pad x r, for the thin-multiply form.
    let thin = match comp {
        Some(c) if !cfg.materialize_compensator => {
            let (u, v) = c.factors();
            let r = c.rank();
            let mut au = vec![0.0f32; mp * r];
            for row in 0..mp {
                for (kk, &av) in a_h[row * k..(row + 1) * k].iter().enumerate() {
                    for (dst, &uv) in au[row * r..(row + 1) * r].iter_mut().zip(&u[kk * r..(kk + 1) * r]) {
                        *dst += av * uv;
                    }
                }
            }
            Some((au, v, r))
        }
        _ => None,
    };

    let strips: Vec<Vec<f32>> = (0..n / t1)
        .into_par_iter()
        .map(|nt| -> Result<Vec<f32>> {
            let j0 = nt * t1;
            let mut c = vec![0.0f32; mp * t1];
            let mut w = vec![0.0f32; t0 * t1];
            for stage in &schedule.stages {
                for &kt in stage {
                    let i0 = kt * t0;
                    dequant_block(wp, cfg.mode, i0, j0, t0, t1, &mut w)?;
                    if let Some(uv) = &materialized {
                        for i in 0..t0 {
                            let src = &uv.row(i0 + i)[j0..j0 + t1];
                            for (d, &s) in w[i * t1..(i + 1) * t1].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    for row in 0..mp {
                        let a_row = &a_h[row * k + i0..row * k + i0 + t0];
                        let c_row = &mut c[row * t1..(row + 1) * t1];
                        for (kk, &av) in a_row.iter().enumerate() {
                            if av == 0.0 {
                                continue;
                            }
                            for (cv, &wv) in c_row.iter_mut().zip(&w[kk * t1..(kk + 1) * t1]) {
                                *cv += av * wv;
                            }
                        }
                    }
                }
            }
            if let Some((au, v, r)) = &thin {
                for row in 0..mp {
                    let c_row = &mut c[row * t1..(row + 1) * t1];
                    for (q, &x) in au[row * r..(row + 1) * r].iter().enumerate() {
                        for (cv, &vv) in c_row.iter_mut().zip(&v[q * n + j0..q * n + j0 + t1]) {
                            *cv += x * vv;
                        }
                    }
                }
            }
            Ok(c)
        })
        .collect::<Result<_>>()?;

    let mut out = vec![0.0f32; m * n];
    for (nt, strip) in strips.iter().enumerate() {
        for row in 0..m {
            out[row * n + nt * t1..row * n + (nt + 1) * t1].copy_from_slice(&strip[row * t1..(row + 1) * t1]);
        }
    }
    WeightMatrix::new("gemm", m, n, out)
}

/// Dense f64 reference `A (W_naive + UV)` using unrounded activations and the
/// unpack-then-convert dequantization. Row-major `m x n`.
pub fn gemm_reference(
    a: &WeightMatrix,
    wp: &PackedInt3Matrix,
    comp: Option<&Compensator>,
    mode: DequantMode,
) -> Result<Vec<f64>> {
    let (k, n) = (wp.rows, wp.cols);
    if a.cols() != k {
        return Err(MiloError::Shape(format!("activations have {} columns, weights {k} rows", a.cols())));
    }
    let m = a.rows();
    let factors = comp.filter(|c| c.rank() > 0).map(|c| (c.factors(), c.rank()));
    let mut out = vec![0.0f64; m * n];
    let mut w_row = vec![0.0f64; n];
    let mut codes = [0u8; CODES_PER_GROUP];
    for i in 0..k {
        for j0 in (0..n).step_by(CODES_PER_GROUP) {
            let g = wp.layout.index(i, j0, n) / CODES_PER_GROUP;
            let scale = wp.group_scale((i * n + j0) / wp.group_size, mode)?;
            codes.copy_from_slice(&pack::unpack32(wp.group_words(g)));
            for (d, &c) in w_row[j0..j0 + CODES_PER_GROUP].iter_mut().zip(&codes) {
                *d = scale.apply(pack::naive_code_value(c, mode)).to_f64();
            }
        }
        if let Some(((u, v), r)) = &factors {
            for q in 0..*r {
                let uq = u[i * r + q] as f64;
                for (d, &vv) in w_row.iter_mut().zip(&v[q * n..(q + 1) * n]) {
                    *d += uq * vv as f64;
                }
            }
        }
        for row in 0..m {
            let av = a.get(row, i) as f64;
            if av == 0.0 {
                continue;
            }
            for (c, &wv) in out[row * n..(row + 1) * n].iter_mut().zip(&w_row) {
                *c += av * wv;
            }
        }
    }
    Ok(out)
}

/// `||C - C_ref||_F / ||C_ref||_F` over the first `rows` rows.
pub fn rel_error_rows(c: &[f32], c_ref: &[f64], n: usize, rows: usize) -> f64 {
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (&x, &y) in c[..rows * n].iter().zip(&c_ref[..rows * n]) {
        num += (x as f64 - y) * (x as f64 - y);
        den += y * y;
    }
    if den == 0.0 {
        return if num == 0.0 { 0.0 } else { f64::INFINITY };
    }
    (num / den).sqrt()
}

/// Random tiled weights with group-64 scales (and zero-points in asymmetric mode).
pub fn random_packed(k: usize, n: usize, mode: DequantMode, seed: u64) -> Result<PackedInt3Matrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let codes: Vec<u8> = (0..k * n).map(|_| rng.random_range(0..8u8)).collect();
    let groups = k * n / GEMM_GROUP_SIZE;
    let scales: Vec<f32> = (0..groups).map(|_| rng.random_range(0.005f32..0.05)).collect();
    let zeros: Vec<f32> = (0..groups).map(|_| rng.random_range(2.0f32..5.0)).collect();
    let zeros = (mode == DequantMode::Asymmetric).then_some(zeros.as_slice());
    PackedInt3Matrix::from_codes(k, n, &codes, GEMM_GROUP_SIZE, &scales, zeros, Layout::Tiled16x64)
}

pub fn random_activations(m: usize, k: usize, seed: u64) -> Result<WeightMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a11c);
    let data = (0..m * k).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    WeightMatrix::new("activations", m, k, data)
}

/// Outcome of one shape under the correctness suite.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GemmCheckReport {
    pub shape: (usize, usize),
    pub tile_shapes: Vec<(usize, usize)>,
    pub modes: Vec<DequantMode>,
    pub seeds: Vec<u64>,
    pub batches: (usize, usize),
    pub max_rel_error: f64,
    pub pass: bool,
}

/// Runs every tile shape, mode and seed on one `(k, n)` shape for batches
/// `1..=max_batch`.
///
/// Output rows depend only on their own activation row, so one product with
/// `max_batch` rows yields every smaller batch as a prefix. The batches in
/// `direct_batches` are recomputed on their own and must match that prefix
/// bit for bit.
pub fn gemm_check(
    shape: (usize, usize),
    tile_shapes: &[(usize, usize)],
    modes: &[DequantMode],
    seeds: &[u64],
    max_batch: usize,
    direct_batches: &[usize],
) -> Result<GemmCheckReport> {
    let (k, n) = shape;
    let mut max_rel_error = 0.0f64;
    for &mode in modes {
        for &seed in seeds {
            let wp = random_packed(k, n, mode, seed)?;
            let a = random_activations(max_batch, k, seed)?;
            let c_ref = gemm_reference(&a, &wp, None, mode)?;
            for &tile in tile_shapes {
                let cfg = GemmConfig::new(tile, mode);
                let c = gemm_w3a16(&a, &wp, None, &cfg)?;
                for rows in 1..=max_batch {
                    max_rel_error = max_rel_error.max(rel_error_rows(c.data(), &c_ref, n, rows));
                }
                for &rows in direct_batches.iter().filter(|&&b| b >= 1 && b <= max_batch) {
                    let prefix = WeightMatrix::new("a", rows, k, a.data()[..rows * k].to_vec())?;
                    let direct = gemm_w3a16(&prefix, &wp, None, &cfg)?;
                    if direct.data() != &c.data()[..rows * n] {
                        return Err(MiloError::Numeric(format!(
                            "batch {rows} differs from the prefix of batch {max_batch}"
                        )));
                    }
                }
            }
        }
    }
    Ok(GemmCheckReport {
        shape,
        tile_shapes: tile_shapes.to_vec(),
        modes: modes.to_vec(),
        seeds: seeds.to_vec(),
        batches: (1, max_batch),
        max_rel_error,
        pass: max_rel_error < REL_ERROR_GATE,
    })
}

/// One named case of the error-handling or boundary suite.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteCase {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

fn expect_error(name: &str, got: Result<WeightMatrix>, want: &str) -> SuiteCase {
    let (pass, detail) = match got {
        Err(e) => (e.code() == want, format!("{}: {e}", e.code())),
        Ok(_) => (false, "succeeded".to_string()),
    };
    SuiteCase {
        name: name.to_string(),
        pass,
        detail,
    }
}

/// The rejected configurations: group size other than 64, `(k, n)` not a
/// multiple of the tile, and a tile shape outside the allowed set.
pub fn error_suite(seed: u64) -> Result<Vec<SuiteCase>> {
    let mode = DequantMode::Asymmetric;
    let a = random_activations(16, 256, seed)?;
    let wp = random_packed(256, 256, mode, seed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let codes: Vec<u8> = (0..256 * 256).map(|_| rng.random_range(0..8u8)).collect();
    let groups = 256 * 256 / 128;
    let g128 = PackedInt3Matrix::from_codes(
        256,
        256,
        &codes,
        128,
        &vec![0.01; groups],
        Some(&vec![3.0; groups]),
        Layout::Tiled16x64,
    )?;
    let mut cfg_g = GemmConfig::new((128, 128), mode);
    cfg_g.group_size = 128;

    let wp_k = random_packed(96, 256, mode, seed)?;
    let a_k = random_activations(16, 96, seed)?;
    let wp_n = random_packed(256, 192, mode, seed)?;
    let tile = |t| GemmConfig::new(t, mode);
    Ok(vec![
        expect_error("weights_group_128", gemm_w3a16(&a, &g128, None, &tile((128, 128))), "CONFIG"),
        expect_error("config_group_128", gemm_w3a16(&a, &wp, None, &cfg_g), "CONFIG"),
        expect_error("k_not_tile_multiple", gemm_w3a16(&a_k, &wp_k, None, &tile((64, 256))), "SHAPE"),
        expect_error("n_not_tile_multiple", gemm_w3a16(&a, &wp_n, None, &tile((64, 256))), "SHAPE"),
        expect_error("tile_128x64", gemm_w3a16(&a, &wp, None, &tile((128, 64))), "CONFIG"),
        expect_error("tile_32x512", gemm_w3a16(&a, &wp, None, &tile((32, 512))), "CONFIG"),
    ])
}

/// Batches that are not a multiple of 16 must equal the padded product's
/// leading rows, and reductions whose tile count is not a multiple of the
/// pipeline depth must equal a single-stage run. Both must also meet the
/// relative-error gate against the reference.
pub fn boundary_suite(seed: u64) -> Result<Vec<SuiteCase>> {
    let mut cases = Vec::new();
    for mode in [DequantMode::Symmetric, DequantMode::Asymmetric] {
        let wp = random_packed(256, 256, mode, seed)?;
        let cfg = GemmConfig::new((128, 128), mode);
        for m in [1, 5, 17, 33] {
            let a = random_activations(m, 256, seed)?;
            let (padded, _) = pad_batch(&a)?;
            let c = gemm_w3a16(&a, &wp, None, &cfg)?;
            let c_pad = gemm_w3a16(&padded, &wp, None, &cfg)?;
            let err = rel_error_rows(c.data(), &gemm_reference(&a, &wp, None, mode)?, 256, m);
            let same = c.data() == &c_pad.data()[..m * 256];
            cases.push(SuiteCase {
                name: format!("batch_{m}_{}", mode.as_str()),
                pass: same && err < REL_ERROR_GATE,
                detail: format!("matches padded: {same}, rel error {err:.3e}"),
            });
        }
        for (tile, k, n) in [((64, 256), 320, 256), ((128, 128), 768, 128), ((256, 64), 1536, 64)] {
            let cfg = GemmConfig::new(tile, mode);
            let schedule = pipeline_tail_check(k, &cfg)?;
            let wp = random_packed(k, n, mode, seed)?;
            let a = random_activations(16, k, seed)?;
            let c = gemm_w3a16(&a, &wp, None, &cfg)?;
            let mono = GemmConfig {
                pipeline_depth: schedule.k_tiles,
                ..cfg
            };
            let c_mono = gemm_w3a16(&a, &wp, None, &mono)?;
            let err = rel_error_rows(c.data(), &gemm_reference(&a, &wp, None, mode)?, n, 16);
            let same = c.data() == c_mono.data();
            cases.push(SuiteCase {
                name: format!("k_tiles_{}_tile_{}x{}_{}", schedule.k_tiles, tile.0, tile.1, mode.as_str()),
                pass: schedule.has_short_tail() && same && err < REL_ERROR_GATE,
                detail: format!("matches single stage: {same}, rel error {err:.3e}"),
            });
        }
    }
    Ok(cases)
}
