//! Weight matrices, the `MILO1` tensor container, MoE manifests and
//! memory accounting for quantized artifacts.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! b"MILO1" | u32 header_len | header_len bytes of UTF-8 JSON | payload
//! ```
//!
//! The JSON header always carries `name`, `rows`, `cols` and `dtype`. A dense
//! tensor uses `dtype = "f32"` and a payload of `rows * cols` IEEE-754 values.
//! Other dtypes (`q-codes`, `symm-i3`, `packed-i3`) add their own header
//! fields and are written by the modules that own them.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{MiloError, Result};
use crate::rank_policy::RankPlan;

pub const MAGIC: &[u8; 5] = b"MILO1";

/// Dense row-major matrix of finite `f32` values.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMatrix {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl WeightMatrix {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(MiloError::Shape(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(MiloError::Data(format!(
                "non-finite value {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(WeightMatrix {
            name: name.into(),
            rows,
            cols,
            data,
        })
    }

    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        WeightMatrix {
            name: name.into(),
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        mut f: impl FnMut(usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(name, rows, cols, data)
    }

    /// Builds a matrix from computed values, reporting non-finite results as
    /// numeric failures rather than bad input.
    pub(crate) fn from_computed(name: impl Into<String>, rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        debug_assert_eq!(data.len(), rows * cols);
        if data.iter().any(|v| !v.is_finite()) {
            return Err(MiloError::Numeric("non-finite intermediate value".into()));
        }
        Ok(WeightMatrix {
            name: name.into(),
            rows,
            cols,
            data,
        })
    }

    /// For values produced from already-validated finite inputs.
    pub(crate) fn from_trusted(name: impl Into<String>, rows: usize, cols: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        WeightMatrix {
            name: name.into(),
            rows,
            cols,
            data,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Frobenius norm accumulated in `f64`.
    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| {
                let v = v as f64;
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn sub(&self, other: &WeightMatrix) -> Result<WeightMatrix> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        WeightMatrix::from_computed(self.name.clone(), self.rows, self.cols, data)
    }

    pub fn add(&self, other: &WeightMatrix) -> Result<WeightMatrix> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        WeightMatrix::from_computed(self.name.clone(), self.rows, self.cols, data)
    }

    pub fn transpose(&self) -> WeightMatrix {
        let mut data = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        WeightMatrix {
            name: self.name.clone(),
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    pub(crate) fn check_same_shape(&self, other: &WeightMatrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(MiloError::Shape(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

/// JSON header of a `MILO1` container. Optional fields are omitted when unset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub storage: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bits: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
}

impl ContainerHeader {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, dtype: impl Into<String>) -> Self {
        ContainerHeader {
            name: name.into(),
            rows,
            cols,
            dtype: dtype.into(),
            ..Default::default()
        }
    }
}

pub fn encode_container(header: &ContainerHeader, payload: &[u8]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header).map_err(|e| MiloError::Format(e.to_string()))?;
    let len = u32::try_from(json.len()).map_err(|_| MiloError::Format("header too large".into()))?;
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    Ok(out)
}

pub fn decode_container(bytes: &[u8]) -> Result<(ContainerHeader, &[u8])> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(MiloError::Format("missing MILO1 magic".into()));
    }
    let len_bytes: [u8; 4] = bytes[5..9].try_into().expect("slice of length 4");
    let len = u32::from_le_bytes(len_bytes) as usize;
    let header_end = 9usize
        .checked_add(len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| MiloError::Format("header length exceeds file size".into()))?;
    let header: ContainerHeader = serde_json::from_slice(&bytes[9..header_end])
        .map_err(|e| MiloError::Format(format!("malformed header: {e}")))?;
    Ok((header, &bytes[header_end..]))
}

pub fn write_container(path: &Path, header: &ContainerHeader, payload: &[u8]) -> Result<()> {
    let bytes = encode_container(header, payload)?;
    write_atomic(path, &bytes)
}

pub fn read_container(path: &Path) -> Result<(ContainerHeader, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| MiloError::io(path, e))?;
    let (header, payload) = decode_container(&bytes)?;
    Ok((header, payload.to_vec()))
}

/// Writes to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| MiloError::Config(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| MiloError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| MiloError::io(&tmp, e))?;
    f.sync_all().map_err(|e| MiloError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| MiloError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| MiloError::Format(e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| MiloError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| MiloError::Format(format!("{}: {e}", path.display())))
}

pub(crate) fn f32s_to_le(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(crate) fn le_to_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn encode_tensor(m: &WeightMatrix) -> Result<Vec<u8>> {
    let header = ContainerHeader::new(m.name(), m.rows(), m.cols(), "f32");
    encode_container(&header, &f32s_to_le(m.data()))
}

pub fn decode_tensor(bytes: &[u8]) -> Result<WeightMatrix> {
    let (header, payload) = decode_container(bytes)?;
    tensor_from_parts(&header, payload)
}

pub(crate) fn tensor_from_parts(header: &ContainerHeader, payload: &[u8]) -> Result<WeightMatrix> {
    if header.dtype != "f32" {
        return Err(MiloError::Format(format!("expected dtype f32, found {}", header.dtype)));
    }
    let expected = header
        .rows
        .checked_mul(header.cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| MiloError::Format("header shape overflows".into()))?;
    if payload.len() != expected {
        return Err(MiloError::Format(format!(
            "payload is {} bytes, header declares {}x{} f32 ({expected} bytes)",
            payload.len(),
            header.rows,
            header.cols
        )));
    }
    WeightMatrix::new(header.name.clone(), header.rows, header.cols, le_to_f32s(payload))
}

pub fn save_tensor(m: &WeightMatrix, path: &Path) -> Result<()> {
    write_atomic(path, &encode_tensor(m)?)
}

pub fn load_tensor(path: &Path) -> Result<WeightMatrix> {
    let bytes = fs::read(path).map_err(|e| MiloError::io(path, e))?;
    decode_tensor(&bytes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureTag {
    Attention,
    SharedExpert,
    DenseFfn,
    Expert,
}

impl StructureTag {
    /// Dense structures are activated for every token.
    pub fn is_dense(self) -> bool {
        !matches!(self, StructureTag::Expert)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StructureTag::Attention => "attention",
            StructureTag::SharedExpert => "shared_expert",
            StructureTag::DenseFfn => "dense_ffn",
            StructureTag::Expert => "expert",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub structure_tag: StructureTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert_index: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub layer_index: usize,
    pub matrices: Vec<MatrixEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub layers: Vec<LayerEntry>,
}

impl ModelManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for layer in &self.layers {
            for m in &layer.matrices {
                if !seen.insert(m.name.as_str()) {
                    return Err(MiloError::Config(format!("duplicate matrix name {}", m.name)));
                }
                let is_expert = m.structure_tag == StructureTag::Expert;
                if is_expert != m.expert_index.is_some() {
                    return Err(MiloError::Config(format!(
                        "matrix {}: expert_index must be present exactly for expert matrices",
                        m.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Matrices in manifest order, paired with their layer index.
    pub fn matrices(&self) -> impl Iterator<Item = (usize, &MatrixEntry)> {
        self.layers
            .iter()
            .flat_map(|l| l.matrices.iter().map(move |m| (l.layer_index, m)))
    }

    pub fn matrix_count(&self) -> usize {
        self.layers.iter().map(|l| l.matrices.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<(usize, &MatrixEntry)> {
        self.matrices().find(|(_, m)| m.name == name)
    }

    /// Number of distinct experts referenced by a layer.
    pub fn experts_in_layer(&self, layer: &LayerEntry) -> usize {
        layer
            .matrices
            .iter()
            .filter_map(|m| m.expert_index)
            .max()
            .map_or(0, |e| e + 1)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: ModelManifest = read_json(path)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCounts {
    pub layer_index: usize,
    pub counts: Vec<u64>,
}

/// Per-layer expert activation counts from a routing trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertFrequencyStats {
    pub layers: Vec<LayerCounts>,
    pub total_tokens: u64,
}

impl ExpertFrequencyStats {
    pub fn layer(&self, layer_index: usize) -> Option<&LayerCounts> {
        self.layers.iter().find(|l| l.layer_index == layer_index)
    }

    /// Checks that every manifest layer with experts has one count per expert.
    pub fn validate_against(&self, manifest: &ModelManifest) -> Result<()> {
        for layer in &manifest.layers {
            let experts = manifest.experts_in_layer(layer);
            if experts == 0 {
                continue;
            }
            let counts = self.layer(layer.layer_index).ok_or_else(|| {
                MiloError::Config(format!("no frequency counts for layer {}", layer.layer_index))
            })?;
            if counts.counts.len() != experts {
                return Err(MiloError::Config(format!(
                    "layer {}: {} counts for {experts} experts",
                    layer.layer_index,
                    counts.counts.len()
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Bit widths used by the memory accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryModel {
    pub bits: u32,
    pub group_size: usize,
    pub comp_bits: u32,
}

impl Default for MemoryModel {
    fn default() -> Self {
        MemoryModel {
            bits: 3,
            group_size: 64,
            comp_bits: 3,
        }
    }
}

/// Scale and zero-point metadata is accounted at two bytes per value.
const META_BYTES: u64 = 2;

fn bits_to_bytes(bits: u64) -> u64 {
    bits.div_ceil(8)
}

/// Code bytes of a rank-`rank` compensator (both factors) at `comp_bits`.
pub fn compensator_code_bytes(rows: usize, cols: usize, rank: usize, comp_bits: u32) -> u64 {
    bits_to_bytes(((rows + cols) * rank) as u64 * comp_bits as u64)
}

/// Bytes of one quantized matrix: codes, scale/zero pairs, and an optional
/// compensator whose factors carry one scale per `group_size` slice along
/// the rank axis.
pub fn matrix_memory_bytes(rows: usize, cols: usize, rank: usize, mm: &MemoryModel) -> Result<u64> {
    if ![3, 4, 8].contains(&mm.bits) {
        return Err(MiloError::Config(format!("unsupported weight bits {}", mm.bits)));
    }
    if ![3, 8].contains(&mm.comp_bits) {
        return Err(MiloError::Config(format!("unsupported compensator bits {}", mm.comp_bits)));
    }
    if mm.group_size == 0 || cols % mm.group_size != 0 {
        return Err(MiloError::Shape(format!(
            "group size {} does not divide {cols} columns",
            mm.group_size
        )));
    }
    if rank > rows.min(cols) {
        return Err(MiloError::Plan(format!("rank {rank} exceeds min({rows}, {cols})")));
    }
    let n = (rows * cols) as u64;
    let codes = bits_to_bytes(n * mm.bits as u64);
    let meta = 2 * (n / mm.group_size as u64) * META_BYTES;
    let comp = if rank == 0 {
        0
    } else {
        let scale_groups = ((rows + cols) * rank.div_ceil(mm.group_size)) as u64;
        compensator_code_bytes(rows, cols, rank, mm.comp_bits) + scale_groups * META_BYTES
    };
    Ok(codes + meta + comp)
}

/// Total bytes of a model compressed under `plan`.
pub fn quantized_memory_bytes(
    manifest: &ModelManifest,
    plan: &RankPlan,
    bits: u32,
    group_size: usize,
    comp_bits: u32,
) -> Result<u64> {
    let mm = MemoryModel {
        bits,
        group_size,
        comp_bits,
    };
    let ranks: HashMap<&str, usize> = plan.entries.iter().map(|e| (e.name.as_str(), e.rank)).collect();
    let mut total = 0u64;
    for (_, m) in manifest.matrices() {
        let rank = *ranks
            .get(m.name.as_str())
            .ok_or_else(|| MiloError::Plan(format!("plan has no rank for {}", m.name)))?;
        total += matrix_memory_bytes(m.rows, m.cols, rank, &mm)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_round_trip() {
        let m = WeightMatrix::new("w", 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode_tensor(&m).unwrap();
        let back = decode_tensor(&bytes).unwrap();
        assert_eq!(back.row(0), &[1.0, 2.0]);
        assert_eq!(back.row(1), &[3.0, 4.0]);
    }

    #[test]
    fn short_payload_is_format_error() {
        let header = ContainerHeader::new("w", 2, 2, "f32");
        let bytes = encode_container(&header, &f32s_to_le(&[1.0, 2.0, 3.0])).unwrap();
        assert!(matches!(decode_tensor(&bytes), Err(MiloError::Format(_))));
    }

    #[test]
    fn bad_magic_and_header() {
        assert!(matches!(decode_tensor(b"NOPE1\0\0\0\0"), Err(MiloError::Format(_))));
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(b"{x}");
        assert!(matches!(decode_tensor(&bytes), Err(MiloError::Format(_))));
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&100u32.to_le_bytes());
        assert!(matches!(decode_tensor(&bytes), Err(MiloError::Format(_))));
    }

    #[test]
    fn non_finite_payload_is_data_error() {
        let header = ContainerHeader::new("w", 1, 2, "f32");
        let bytes = encode_container(&header, &f32s_to_le(&[1.0, f32::NAN])).unwrap();
        assert!(matches!(decode_tensor(&bytes), Err(MiloError::Data(_))));
    }

    #[test]
    fn single_zero_file_size() {
        let m = WeightMatrix::new("z", 1, 1, vec![0.0]).unwrap();
        let bytes = encode_tensor(&m).unwrap();
        let header_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 5 + 4 + header_len + 4);
    }

    #[test]
    fn negative_values_keep_signs() {
        let m = WeightMatrix::new("n", 2, 3, vec![-1.5, -0.0, -3.25, -1e-30, -7.0, -2.0]).unwrap();
        let back = decode_tensor(&encode_tensor(&m).unwrap()).unwrap();
        for (a, b) in m.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn memory_of_single_int3_matrix() {
        let mm = MemoryModel::default();
        assert_eq!(matrix_memory_bytes(64, 64, 0, &mm).unwrap(), 1536 + 256);
    }

    #[test]
    fn memory_code_byte_ratio_int8_vs_int3() {
        let mm3 = MemoryModel { bits: 3, ..MemoryModel::default() };
        let mm8 = MemoryModel { bits: 8, ..MemoryModel::default() };
        let meta = 2 * (64 * 64 / 64) * 2;
        let c3 = matrix_memory_bytes(64, 64, 0, &mm3).unwrap() - meta;
        let c8 = matrix_memory_bytes(64, 64, 0, &mm8).unwrap() - meta;
        assert_eq!(c8 * 3, c3 * 8);
        assert_eq!(compensator_code_bytes(4096, 4096, 32, 3) * 8, compensator_code_bytes(4096, 4096, 32, 8) * 3);
    }

    #[test]
    fn rank_above_min_dim_is_plan_error() {
        let mm = MemoryModel::default();
        assert!(matches!(matrix_memory_bytes(64, 128, 65, &mm), Err(MiloError::Plan(_))));
    }

    #[test]
    fn manifest_validation() {
        let entry = |name: &str, tag, expert| MatrixEntry {
            name: name.into(),
            rows: 16,
            cols: 64,
            structure_tag: tag,
            expert_index: expert,
        };
        let mut m = ModelManifest {
            layers: vec![LayerEntry {
                layer_index: 0,
                matrices: vec![entry("a", StructureTag::Attention, None), entry("e", StructureTag::Expert, Some(0))],
            }],
        };
        m.validate().unwrap();
        m.layers[0].matrices[1].expert_index = None;
        assert!(m.validate().is_err());
        m.layers[0].matrices[1] = entry("a", StructureTag::Attention, None);
        assert!(m.validate().is_err());
    }
}
