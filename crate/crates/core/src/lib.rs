//! Training-free compression of mixture-of-experts weights: 3-bit grouped
//! quantization with a low-rank compensator, INT3 packing and a W3A16
//! GeMM reference.

pub mod error;
pub mod gemm;
pub mod lowrank;
pub mod optimizer;
pub mod pack;
pub mod quant;
pub mod rank_policy;
pub mod synth;
pub mod tensor_store;

pub use error::{MiloError, Result};
pub use gemm::{gemm_w3a16, GemmConfig};
pub use lowrank::{Compensator, CompensatorStorage};
pub use optimizer::{milo_compress, MiloConfig, MiloResult, RunReport, StopReason};
pub use pack::{DequantMode, Layout, PackedInt3Matrix};
pub use quant::{QuantConfig, QuantParams, QuantizedMatrix};
pub use rank_policy::{PolicyFamily, PolicySpec, RankPlan};
pub use tensor_store::{MemoryModel, ModelManifest, WeightMatrix};
