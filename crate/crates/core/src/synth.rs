//! Synthetic mixture-of-experts models for desk-scale experiments.
//!
//! Attention matrices are Student-t; expert matrices are generalized normal
//! with a per-matrix shape parameter drawn from `expert_shape`, which is
//! Gaussian at shape 2 and lighter- or heavier-tailed on either side. Expert
//! activation counts grow geometrically from `base_count` to
//! `base_count * imbalance` and are shuffled within each layer.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Gamma, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{MiloError, Result};
use crate::pack::{TILE_COLS, TILE_ROWS};
use crate::tensor_store::{
    self, ExpertFrequencyStats, LayerCounts, LayerEntry, MatrixEntry, ModelManifest, StructureTag, WeightMatrix,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const EXPERT_STATS_FILE: &str = "expert_stats.json";
pub const TENSOR_DIR: &str = "tensors";

const ATTENTION: [&str; 4] = ["q_proj", "k_proj", "v_proj", "o_proj"];
const FFN: [&str; 3] = ["w1", "w2", "w3"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Distribution {
    Gaussian,
    StudentT { df: f64 },
    /// Density proportional to `exp(-|x|^shape)`; 2 is Gaussian.
    GeneralizedNormal { shape: f64 },
}

impl Distribution {
    /// One draw with unit variance.
    fn sample<R: Rng>(&self, rng: &mut R) -> Result<f64> {
        match *self {
            Distribution::Gaussian => Ok(rng.sample::<f64, _>(StandardNormal)),
            Distribution::StudentT { df } => {
                let t = StudentT::new(df).map_err(|e| MiloError::Config(format!("student-t: {e}")))?;
                // Unit variance where it exists.
                let norm = if df > 2.0 { ((df - 2.0) / df).sqrt() } else { 1.0 };
                Ok(t.sample(rng) * norm)
            }
            Distribution::GeneralizedNormal { shape } => {
                let g = Gamma::new(1.0 / shape, 1.0).map_err(|e| MiloError::Config(format!("gamma: {e}")))?;
                let magnitude = g.sample(rng).powf(1.0 / shape);
                // Var = Gamma(3/b) / Gamma(1/b) at unit scale.
                let var = (libm::lgamma(3.0 / shape) - libm::lgamma(1.0 / shape)).exp();
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                Ok(sign * magnitude / var.sqrt())
            }
        }
    }
}

/// `rows x cols` matrix of i.i.d. draws with standard deviation `std`.
pub fn sample_matrix(
    name: &str,
    rows: usize,
    cols: usize,
    dist: Distribution,
    std: f64,
    rng: &mut ChaCha8Rng,
) -> Result<WeightMatrix> {
    let data = (0..rows * cols)
        .map(|_| dist.sample(rng).map(|x| (x * std) as f32))
        .collect::<Result<Vec<_>>>()?;
    WeightMatrix::new(name, rows, cols, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub layers: usize,
    pub experts: usize,
    pub rows: usize,
    pub cols: usize,
    pub shared_expert: bool,
    pub attention_df: f64,
    /// Range of generalized-normal shapes for expert matrices.
    pub expert_shape: (f64, f64),
    pub weight_std: f64,
    pub base_count: u64,
    pub imbalance: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            layers: 2,
            experts: 4,
            rows: 128,
            cols: 256,
            shared_expert: false,
            attention_df: 3.0,
            expert_shape: (1.6, 3.0),
            weight_std: 0.02,
            base_count: 1000,
            imbalance: 11.7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(MiloError::Config(msg));
        if self.layers == 0 || self.experts == 0 {
            return bad("need at least one layer and one expert".into());
        }
        if self.rows == 0 || self.rows % TILE_ROWS != 0 || self.cols == 0 || self.cols % TILE_COLS != 0 {
            return bad(format!(
                "dims {}x{} must be positive multiples of {TILE_ROWS}x{TILE_COLS}",
                self.rows, self.cols
            ));
        }
        if !(self.attention_df > 2.0) {
            return bad("attention_df must exceed 2".into());
        }
        let (lo, hi) = self.expert_shape;
        if !(lo > 0.0 && hi >= lo) {
            return bad("expert_shape must be a positive, ordered range".into());
        }
        if !(self.weight_std > 0.0) || self.base_count == 0 || !(self.imbalance >= 1.0) {
            return bad("weight_std, base_count and imbalance must be positive (imbalance >= 1)".into());
        }
        Ok(())
    }

    pub fn matrices_per_layer(&self) -> usize {
        ATTENTION.len() + FFN.len() * (self.experts + usize::from(self.shared_expert))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticModel {
    pub manifest: ModelManifest,
    /// In manifest order.
    pub tensors: Vec<WeightMatrix>,
    pub stats: ExpertFrequencyStats,
}

fn expert_counts(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<u64> {
    let e = spec.experts;
    let mut counts: Vec<u64> = (0..e)
        .map(|i| {
            let t = if e > 1 { i as f64 / (e - 1) as f64 } else { 0.0 };
            (spec.base_count as f64 * spec.imbalance.powf(t)).round() as u64
        })
        .collect();
    counts.shuffle(rng);
    counts
}

pub fn generate(spec: &SynthSpec, seed: u64) -> Result<SyntheticModel> {
    spec.validate()?;
    let mut layers = Vec::with_capacity(spec.layers);
    let mut plan: Vec<(MatrixEntry, Distribution)> = Vec::new();
    let mut count_rng = ChaCha8Rng::seed_from_u64(seed);
    count_rng.set_stream(u64::MAX);
    let mut shape_rng = ChaCha8Rng::seed_from_u64(seed);
    shape_rng.set_stream(u64::MAX - 1);
    let mut counts = Vec::with_capacity(spec.layers);
    let entry = |name: String, tag: StructureTag, expert_index: Option<usize>| MatrixEntry {
        name,
        rows: spec.rows,
        cols: spec.cols,
        structure_tag: tag,
        expert_index,
    };

    for l in 0..spec.layers {
        let mut matrices = Vec::with_capacity(spec.matrices_per_layer());
        let attention = Distribution::StudentT { df: spec.attention_df };
        for a in ATTENTION {
            let m = entry(format!("layers.{l}.attn.{a}"), StructureTag::Attention, None);
            plan.push((m.clone(), attention));
            matrices.push(m);
        }
        if spec.shared_expert {
            for f in FFN {
                let m = entry(format!("layers.{l}.shared_expert.{f}"), StructureTag::SharedExpert, None);
                plan.push((m.clone(), attention));
                matrices.push(m);
            }
        }
        for e in 0..spec.experts {
            for f in FFN {
                let (lo, hi) = spec.expert_shape;
                let shape = if hi > lo { shape_rng.random_range(lo..=hi) } else { lo };
                let m = entry(format!("layers.{l}.experts.{e}.{f}"), StructureTag::Expert, Some(e));
                plan.push((m.clone(), Distribution::GeneralizedNormal { shape }));
                matrices.push(m);
            }
        }
        layers.push(LayerEntry {
            layer_index: l,
            matrices,
        });
        counts.push(LayerCounts {
            layer_index: l,
            counts: expert_counts(spec, &mut count_rng),
        });
    }

    let tensors = plan
        .iter()
        .enumerate()
        .map(|(idx, (m, dist))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(idx as u64);
            sample_matrix(&m.name, m.rows, m.cols, *dist, spec.weight_std, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    // Top-2 routing: each token activates two experts per layer.
    let total_tokens = counts.iter().map(|c| c.counts.iter().sum::<u64>()).max().unwrap_or(0) / 2;
    Ok(SyntheticModel {
        manifest: ModelManifest { layers },
        tensors,
        stats: ExpertFrequencyStats {
            layers: counts,
            total_tokens,
        },
    })
}

pub fn tensor_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(TENSOR_DIR).join(format!("{name}.milo"))
}

/// Writes `manifest.json`, `expert_stats.json` and one container per matrix.
pub fn write_model(model: &SyntheticModel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join(TENSOR_DIR)).map_err(|e| MiloError::io(dir, e))?;
    model.manifest.save(&dir.join(MANIFEST_FILE))?;
    model.stats.save(&dir.join(EXPERT_STATS_FILE))?;
    for t in &model.tensors {
        tensor_store::save_tensor(t, &tensor_path(dir, t.name()))?;
    }
    Ok(())
}

/// Loads every tensor of a manifest from `dir`, checking shapes.
pub fn load_tensors(manifest: &ModelManifest, dir: &Path) -> Result<Vec<WeightMatrix>> {
    manifest
        .matrices()
        .map(|(_, m)| {
            let t = tensor_store::load_tensor(&tensor_path(dir, &m.name))?;
            if t.shape() != (m.rows, m.cols) {
                return Err(MiloError::Shape(format!(
                    "{}: stored {:?}, manifest {}x{}",
                    m.name,
                    t.shape(),
                    m.rows,
                    m.cols
                )));
            }
            Ok(t)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_span_the_imbalance() {
        let m = generate(&SynthSpec::default(), 1).unwrap();
        for l in &m.stats.layers {
            let max = *l.counts.iter().max().unwrap() as f64;
            let min = *l.counts.iter().min().unwrap() as f64;
            assert_eq!(max / min, 11.7);
        }
    }

    #[test]
    fn matrix_count() {
        let m = generate(&SynthSpec::default(), 1).unwrap();
        assert_eq!(m.manifest.matrix_count(), 2 * (4 * 3 + 4));
        assert_eq!(m.tensors.len(), 32);
        let spec = SynthSpec {
            shared_expert: true,
            ..SynthSpec::default()
        };
        assert_eq!(generate(&spec, 1).unwrap().manifest.matrix_count(), 2 * (5 * 3 + 4));
    }

    #[test]
    fn indivisible_dims_rejected() {
        let spec = SynthSpec {
            cols: 100,
            ..SynthSpec::default()
        };
        assert!(matches!(generate(&spec, 0), Err(MiloError::Config(_))));
    }

    #[test]
    fn unit_variance_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for dist in [
            Distribution::Gaussian,
            Distribution::GeneralizedNormal { shape: 1.6 },
            Distribution::GeneralizedNormal { shape: 3.0 },
        ] {
            let n = 200_000;
            let var = (0..n).map(|_| dist.sample(&mut rng).unwrap().powi(2)).sum::<f64>() / n as f64;
            assert!((var - 1.0).abs() < 0.02, "{dist:?}: {var}");
        }
    }
}
