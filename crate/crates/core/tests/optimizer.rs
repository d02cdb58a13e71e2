use milo::quant::{self, QuantConfig};
use milo::rank_policy::{self, MatrixStats};
use milo::synth::{self, Distribution, SynthSpec};
use milo::tensor_store;
use milo::{milo_compress, MemoryModel, MiloConfig, PolicySpec, WeightMatrix};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Exp, StandardNormal};

fn student_t(seed: u64) -> WeightMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    synth::sample_matrix("w", 128, 128, Distribution::StudentT { df: 3.0 }, 0.02, &mut rng).unwrap()
}

fn hqq_only_error(w: &WeightMatrix, cfg: &QuantConfig) -> f64 {
    let params = quant::init_quant_params(w, cfg).unwrap();
    let dq = quant::dequantize(&quant::hqq_solve(w, cfg, &params).unwrap());
    w.sub(&dq).unwrap().frobenius_norm()
}

#[test]
fn compensated_error_beats_quantization_alone() {
    for seed in 0..4 {
        let w = student_t(seed);
        let cfg = MiloConfig::with_rank(16);
        let r = milo_compress(&w, &cfg).unwrap();
        let base = hqq_only_error(&w, &cfg.quant);
        assert!(r.final_error() < base, "seed {seed}: {} vs {base}", r.final_error());
        assert!(r.iterations_run <= cfg.max_outer_iters);
        assert_eq!(r.error_trace.len(), r.iterations_run);
    }
}

#[test]
fn rank_zero_reduces_to_quantization() {
    let w = student_t(9);
    let cfg = MiloConfig {
        max_outer_iters: 1,
        ..MiloConfig::with_rank(0)
    };
    let r = milo_compress(&w, &cfg).unwrap();
    assert_eq!(r.compensator.rank(), 0);
    let base = hqq_only_error(&w, &cfg.quant);
    assert!((r.final_error() - base).abs() <= 1e-9 * base);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn every_run_terminates_within_the_budget(seed in any::<u64>(), iters in 1usize..8, rank in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = synth::sample_matrix("w", 16, 64, Distribution::Gaussian, 1.0, &mut rng).unwrap();
        let cfg = MiloConfig { max_outer_iters: iters, ..MiloConfig::with_rank(rank) };
        let r = milo_compress(&w, &cfg).unwrap();
        prop_assert!(r.iterations_run >= 1 && r.iterations_run <= iters);
    }
}

#[test]
fn kurtosis_of_reference_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let normal: Vec<f32> = (0..1_000_000).map(|_| StandardNormal.sample(&mut rng)).collect();
    let k = rank_policy::kurtosis_of(&normal).unwrap();
    assert!(k.abs() <= 0.05, "{k}");

    // Laplace as an exponential magnitude with a random sign.
    let exp = Exp::new(1.0).unwrap();
    let laplace: Vec<f32> = (0..1_000_000)
        .map(|i| {
            let m: f64 = exp.sample(&mut rng);
            (if i % 2 == 0 { m } else { -m }) as f32
        })
        .collect();
    let k = rank_policy::kurtosis_of(&laplace).unwrap();
    assert!((k - 3.0).abs() <= 0.2, "{k}");

    let shifted: Vec<f32> = normal[..10_000].iter().map(|x| 2.5 * x - 7.0).collect();
    let a = rank_policy::kurtosis_of(&normal[..10_000]).unwrap();
    let b = rank_policy::kurtosis_of(&shifted).unwrap();
    assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
}

#[test]
fn plans_on_a_synthetic_model_account_memory_exactly() {
    let model = synth::generate(&SynthSpec::default(), 2).unwrap();
    let freq = rank_policy::expert_frequency_by_matrix(&model.manifest, &model.stats).unwrap();
    let stats: Vec<MatrixStats> = model
        .manifest
        .matrices()
        .zip(&model.tensors)
        .map(|((l, m), w)| rank_policy::matrix_stats(l, m, w, freq.get(&m.name).copied(), &QuantConfig::default()).unwrap())
        .collect();
    let mm = MemoryModel::default();
    for policy in ["Uniform-0", "Uniform-28", "Dense-512+Kurtosis-16", "Frequency-8", "Sparse-4"] {
        let plan = rank_policy::plan_ranks(&model.manifest, &stats, &policy.parse::<PolicySpec>().unwrap(), &mm).unwrap();
        let bytes = tensor_store::quantized_memory_bytes(&model.manifest, &plan, 3, 64, 3).unwrap();
        assert_eq!(plan.memory_bytes, bytes, "{policy}");
    }
    let dense = stats.iter().filter(|s| s.structure_tag.is_dense());
    let experts = stats.iter().filter(|s| !s.structure_tag.is_dense());
    let mean = |it: &mut dyn Iterator<Item = &MatrixStats>| {
        let v: Vec<f64> = it.map(|s| s.kurtosis).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(mean(&mut dense.into_iter()) > mean(&mut experts.into_iter()));
}
