use std::path::{Path, PathBuf};

use milo::pack::Layout;
use milo::synth::SynthSpec;
use milo::{DequantMode, MemoryModel, MiloConfig, MiloError, PolicySpec, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PackConfig {
    pub layout: Layout,
    /// Store the two word planes separately.
    pub split: bool,
}

impl Default for PackConfig {
    fn default() -> Self {
        PackConfig {
            layout: Layout::Tiled16x64,
            split: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GemmSuiteConfig {
    /// `(k, n)` weight shapes.
    pub shapes: Vec<(usize, usize)>,
    pub seeds: Vec<u64>,
    pub max_batch: usize,
    pub tile_shapes: Vec<(usize, usize)>,
    pub modes: Vec<DequantMode>,
    /// Batches recomputed on their own and compared with the prefix.
    pub direct_batches: Vec<usize>,
}

impl Default for GemmSuiteConfig {
    fn default() -> Self {
        GemmSuiteConfig {
            shapes: vec![(2048, 11008), (4096, 14336)],
            seeds: (0..5).collect(),
            max_batch: 64,
            tile_shapes: milo::gemm::ALLOWED_TILE_SHAPES.to_vec(),
            modes: vec![DequantMode::Symmetric, DequantMode::Asymmetric],
            direct_batches: vec![1, 15, 33],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Directory holding `manifest.json`, `expert_stats.json` and `tensors/`.
    /// Defaults to `<out>/model`.
    pub model_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub policy: String,
    pub milo: MiloConfig,
    pub memory: MemoryModel,
    pub synth: SynthSpec,
    pub pack: PackConfig,
    pub gemm: GemmSuiteConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model_dir: None,
            out: None,
            seed: 0,
            policy: "Dense-64+Kurtosis-8".to_string(),
            milo: MiloConfig::default(),
            memory: MemoryModel::default(),
            synth: SynthSpec::default(),
            pack: PackConfig::default(),
            gemm: GemmSuiteConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(MiloError::Config(format!("config file {} not found", path.display())));
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| MiloError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| MiloError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.milo.validate()?;
        self.policy.parse::<PolicySpec>()?;
        if self.memory.bits != self.milo.quant.bits || self.memory.group_size != self.milo.quant.group_size {
            return Err(MiloError::Config(
                "memory.bits and memory.group_size must match milo.quant".into(),
            ));
        }
        if self.gemm.max_batch == 0 || self.gemm.seeds.is_empty() || self.gemm.modes.is_empty() {
            return Err(MiloError::Config("gemm suite needs a batch, a seed and a mode".into()));
        }
        Ok(())
    }
}
