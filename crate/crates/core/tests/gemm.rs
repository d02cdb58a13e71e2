use milo::gemm::{self, GemmConfig, ALLOWED_TILE_SHAPES, REL_ERROR_GATE};
use milo::lowrank::Compensator;
use milo::{DequantMode, WeightMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rel(a: &[f32], b: &[f32]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    let den: f64 = b.iter().map(|&y| (y as f64).powi(2)).sum();
    (num / den).sqrt()
}

#[test]
fn all_tile_shapes_agree_with_reference() {
    let (k, n) = (512, 512);
    for mode in [DequantMode::Symmetric, DequantMode::Asymmetric] {
        let wp = gemm::random_packed(k, n, mode, 21).unwrap();
        let a = gemm::random_activations(16, k, 21).unwrap();
        let c_ref = gemm::gemm_reference(&a, &wp, None, mode).unwrap();
        let outs: Vec<WeightMatrix> = ALLOWED_TILE_SHAPES
            .iter()
            .map(|&t| gemm::gemm_w3a16(&a, &wp, None, &GemmConfig::new(t, mode)).unwrap())
            .collect();
        for c in &outs {
            assert!(gemm::rel_error_rows(c.data(), &c_ref, n, 16) < REL_ERROR_GATE);
            assert!(rel(c.data(), outs[0].data()) < REL_ERROR_GATE);
        }
    }
}

#[test]
fn linear_in_the_activations() {
    let (k, n) = (256, 256);
    let mode = DequantMode::Asymmetric;
    let wp = gemm::random_packed(k, n, mode, 22).unwrap();
    let a1 = gemm::random_activations(16, k, 1).unwrap();
    let a2 = gemm::random_activations(16, k, 2).unwrap();
    let (alpha, beta) = (0.75f32, -1.5f32);
    let mix: Vec<f32> = a1.data().iter().zip(a2.data()).map(|(&x, &y)| alpha * x + beta * y).collect();
    let mix = WeightMatrix::new("mix", 16, k, mix).unwrap();
    let cfg = GemmConfig::new((128, 128), mode);
    let c = gemm::gemm_w3a16(&mix, &wp, None, &cfg).unwrap();
    let c1 = gemm::gemm_w3a16(&a1, &wp, None, &cfg).unwrap();
    let c2 = gemm::gemm_w3a16(&a2, &wp, None, &cfg).unwrap();
    let combined: Vec<f32> = c1.data().iter().zip(c2.data()).map(|(&x, &y)| alpha * x + beta * y).collect();
    assert!(rel(c.data(), &combined) < 1e-3);
}

#[test]
fn compensator_paths_match_reference() {
    let (k, n, r) = (256, 512, 8);
    let mode = DequantMode::Asymmetric;
    let wp = gemm::random_packed(k, n, mode, 23).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let u: Vec<f32> = (0..k * r).map(|_| rng.random_range(-0.05f32..0.05)).collect();
    let v: Vec<f32> = (0..r * n).map(|_| rng.random_range(-0.05f32..0.05)).collect();
    for comp in [Compensator::from_factors(k, n, r, u, v).unwrap()].iter().flat_map(|c| [c.clone(), c.to_symm_int3()]) {
        let a = gemm::random_activations(21, k, 23).unwrap();
        let c_ref = gemm::gemm_reference(&a, &wp, Some(&comp), mode).unwrap();
        let thin = gemm::gemm_w3a16(&a, &wp, Some(&comp), &GemmConfig::new((64, 256), mode)).unwrap();
        let cfg = GemmConfig {
            materialize_compensator: true,
            ..GemmConfig::new((64, 256), mode)
        };
        let full = gemm::gemm_w3a16(&a, &wp, Some(&comp), &cfg).unwrap();
        assert!(gemm::rel_error_rows(thin.data(), &c_ref, n, 21) < REL_ERROR_GATE);
        assert!(gemm::rel_error_rows(full.data(), &c_ref, n, 21) < REL_ERROR_GATE);
    }
}

#[test]
fn rows_are_independent_of_the_batch() {
    let report = gemm::gemm_check((256, 256), &[(128, 128)], &[DequantMode::Symmetric], &[4], 40, &[1, 5, 16, 17, 40])
        .unwrap();
    assert!(report.pass, "{report:?}");
}

#[test]
fn error_and_boundary_suites() {
    for c in gemm::error_suite(3).unwrap().iter().chain(&gemm::boundary_suite(3).unwrap()) {
        assert!(c.pass, "{}: {}", c.name, c.detail);
    }
}
