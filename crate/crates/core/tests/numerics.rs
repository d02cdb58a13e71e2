use milo::lowrank::{self, Compensator, GroupAxis};
use milo::optimizer::error_trace_metric;
use milo::quant::{self, QuantConfig};
use milo::rank_policy;
use milo::WeightMatrix;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

fn gaussian(rows: usize, cols: usize, seed: u64) -> WeightMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
    WeightMatrix::new("g", rows, cols, data).unwrap()
}

fn matrix_strategy() -> impl Strategy<Value = WeightMatrix> {
    (1usize..4, 1usize..3, prop::collection::vec(-4.0f32..4.0, 12 * 128)).prop_map(|(r, c, v)| {
        let (rows, cols) = (r * 4, c * 64);
        WeightMatrix::new("w", rows, cols, v[..rows * cols].to_vec()).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quantize_is_idempotent_on_codes(w in matrix_strategy(), bits in 2u32..=4) {
        let cfg = QuantConfig { bits, ..QuantConfig::default() };
        let params = quant::init_quant_params(&w, &cfg).unwrap();
        let q = quant::quantize(&w, &params, &cfg).unwrap();
        let again = quant::quantize(&quant::dequantize(&q), &params, &cfg).unwrap();
        prop_assert_eq!(q.codes, again.codes);
    }

    #[test]
    fn symm_int3_is_idempotent_on_codes(v in prop::collection::vec(-3.0f32..3.0, 64)) {
        let f = lowrank::symm_int3_quantize(&v, 4, 16, GroupAxis::Row, 16).unwrap();
        let dq = lowrank::symm_int3_dequantize(&f);
        for ((group, codes), &s) in dq.chunks(16).zip(f.codes.chunks(16)).zip(&f.scales) {
            prop_assert_eq!(lowrank::symm_int3_codes(group, s), codes.to_vec());
        }
    }
}

#[test]
fn hqq_beats_round_to_nearest() {
    for seed in 0..5 {
        let w = gaussian(64, 64, seed);
        let cfg = QuantConfig::default();
        let params = quant::init_quant_params(&w, &cfg).unwrap();
        let rtn = quant::dequantize(&quant::quantize(&w, &params, &cfg).unwrap());
        let hqq = quant::dequantize(&quant::hqq_solve(&w, &cfg, &params).unwrap());
        let err = |d: &WeightMatrix| w.sub(d).unwrap().frobenius_norm();
        assert!(err(&hqq) <= err(&rtn), "seed {seed}: {} > {}", err(&hqq), err(&rtn));
    }
}

/// Tail of the spectrum from the eigenvalues of `E^T E`, an independent
/// route to the singular values.
fn eigen_tail(e: &WeightMatrix, r: usize) -> f64 {
    let m = DMatrix::from_row_slice(e.rows(), e.cols(), &e.data().iter().map(|&x| x as f64).collect::<Vec<_>>());
    let mut eig: Vec<f64> = (m.transpose() * &m).symmetric_eigen().eigenvalues.iter().map(|&l| l.max(0.0)).collect();
    eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
    eig[r.min(eig.len())..].iter().sum::<f64>().sqrt()
}

#[test]
fn truncated_svd_meets_eckart_young() {
    for (seed, (rows, cols, r)) in [(64, 32, 4), (96, 96, 16), (128, 80, 1), (200, 120, 40)].into_iter().enumerate() {
        let e = gaussian(rows, cols, seed as u64);
        let c = lowrank::truncated_svd(&e, r, lowrank::DEFAULT_SVD_TOL).unwrap();
        let got = lowrank::residual_norm(&e, &c);
        let want = eigen_tail(&e, r);
        assert!((got - want).abs() <= 1e-4 * want, "{rows}x{cols} r={r}: {got} vs {want}");
    }
}

#[test]
fn diagonal_residual_is_the_dropped_value() {
    let e = WeightMatrix::from_fn("e", 3, 3, |i, j| if i == j { [3.0, 2.0, 1.0][i] } else { 0.0 }).unwrap();
    let c = lowrank::truncated_svd(&e, 2, lowrank::DEFAULT_SVD_TOL).unwrap();
    assert!((lowrank::residual_norm(&e, &c) - 1.0).abs() < 1e-6);
}

/// Symmetric INT3 grid applied by hand: `s = max|w|` per group, codes
/// `clamp(round(7w / 2s) + 4, 0, 7)`, values `(code - 4) 2s / 7`.
fn symm_oracle(group: &[f32]) -> Vec<f64> {
    let s = group.iter().fold(0.0f64, |m, &x| m.max(x.abs() as f64));
    group
        .iter()
        .map(|&w| {
            let code = ((7.0 * w as f64 / (2.0 * s)).round() + 4.0).clamp(0.0, 7.0);
            (code - 4.0) * 2.0 * s / 7.0
        })
        .collect()
}

#[test]
fn symm_int3_compensator_error_on_gaussian_factors() {
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u: Vec<f32> = (0..64 * 8).map(|_| normal.sample(&mut rng)).collect();
        let v: Vec<f32> = (0..8 * 64).map(|_| normal.sample(&mut rng)).collect();
        let c = Compensator::from_factors(64, 64, 8, u.clone(), v.clone()).unwrap();
        let q = c.to_symm_int3();

        // U is grouped along its rows (the rank axis), V along its columns.
        let (qu, qv) = q.factors();
        let u_want: Vec<f64> = u.chunks(8).flat_map(symm_oracle).collect();
        for (a, b) in qu.iter().zip(&u_want) {
            assert!((*a as f64 - b).abs() < 1e-6, "{a} vs {b}");
        }
        for j in 0..64 {
            let col: Vec<f32> = (0..8).map(|k| v[k * 64 + j]).collect();
            for (k, want) in symm_oracle(&col).into_iter().enumerate() {
                assert!((qv[k * 64 + j] as f64 - want).abs() < 1e-6);
            }
        }

        let real = c.apply();
        let rel = real.sub(&q.apply()).unwrap().frobenius_norm() / real.frobenius_norm();
        worst = worst.max(rel);
    }
    // Measured envelope of the 3-bit grid on 8-entry groups: median 0.242,
    // maximum 0.260 over 500 seeds.
    assert!(worst <= 0.27, "{worst}");
}

#[test]
fn error_metric_matches_elementwise_oracle() {
    let w = gaussian(32, 64, 11);
    let cfg = QuantConfig::default();
    let q = quant::quantize(&w, &quant::init_quant_params(&w, &cfg).unwrap(), &cfg).unwrap();
    let u: Vec<f32> = gaussian(32, 3, 12).data().iter().map(|x| x * 0.1).collect();
    let v: Vec<f32> = gaussian(3, 64, 13).data().to_vec();
    let c = Compensator::from_factors(32, 64, 3, u.clone(), v.clone()).unwrap();

    let mut sum = 0.0f64;
    for i in 0..32 {
        for j in 0..64 {
            let g = (i * 64 + j) / 64;
            let dq = q.scales[g] as f64 * (q.codes[i * 64 + j] as f64 - q.zeros[g] as f64);
            let uv: f64 = (0..3).map(|k| u[i * 3 + k] as f64 * v[k * 64 + j] as f64).sum();
            sum += (w.get(i, j) as f64 - dq - uv).powi(2);
        }
    }
    let got = error_trace_metric(&w, &q, &c).unwrap();
    assert!((got - sum.sqrt()).abs() <= 1e-6 * sum.sqrt());
    let plain = w.sub(&quant::dequantize(&q)).unwrap().frobenius_norm();
    assert!((error_trace_metric(&w, &q, &Compensator::zero(32, 64)).unwrap() - plain).abs() <= 1e-6 * plain);
}

#[test]
fn rel_quant_error_matches_oracle() {
    let w = gaussian(16, 64, 14);
    let d = gaussian(16, 64, 15);
    let (num, den) = w.data().iter().zip(d.data()).fold((0.0f64, 0.0f64), |(n, dd), (&a, &b)| {
        (n + (a as f64 - b as f64).powi(2), dd + (a as f64).powi(2))
    });
    let got = rank_policy::rel_quant_error(&w, &d).unwrap();
    assert!((got - (num / den).sqrt()).abs() <= 1e-6 * got);
    assert_eq!(rank_policy::rel_quant_error(&w, &w).unwrap(), 0.0);
    assert_eq!(rank_policy::rel_quant_error(&w, &WeightMatrix::zeros("z", 16, 64)).unwrap(), 1.0);
}

#[test]
fn tensor_containers_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    for (rows, cols, seed) in [(64, 128, 1), (4096, 64, 2)] {
        let mut w = gaussian(rows, cols, seed);
        w.set_name("layers.0.w");
        let path = dir.path().join("t.milo");
        milo::tensor_store::save_tensor(&w, &path).unwrap();
        let back = milo::tensor_store::load_tensor(&path).unwrap();
        assert_eq!(back.name(), "layers.0.w");
        let bits = |m: &WeightMatrix| m.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&w));
    }
}

#[test]
fn quantized_and_compensator_containers_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let w = gaussian(32, 128, 3);
    let cfg = QuantConfig::default();
    let q = quant::hqq_solve(&w, &cfg, &quant::init_quant_params(&w, &cfg).unwrap()).unwrap();
    let path = dir.path().join("q.milo");
    quant::save_quantized(&q, "w", &path).unwrap();
    assert_eq!(quant::load_quantized(&path).unwrap(), ("w".to_string(), q));

    let e = gaussian(32, 128, 4);
    let c = lowrank::truncated_svd(&e, 5, lowrank::DEFAULT_SVD_TOL).unwrap();
    for comp in [c.clone(), c.to_symm_int3()] {
        let (u, v) = (dir.path().join("u.milo"), dir.path().join("v.milo"));
        lowrank::save_compensator(&comp, "w", &u, &v).unwrap();
        assert_eq!(lowrank::load_compensator(&u, &v).unwrap(), comp);
    }
    // A tensor container is not a quantized one.
    milo::tensor_store::save_tensor(&w, &path).unwrap();
    assert!(matches!(quant::load_quantized(&path), Err(milo::MiloError::Format(_))));
}
