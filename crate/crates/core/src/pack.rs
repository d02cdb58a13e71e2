//! Zero-waste INT3 packing and the binary16 fast-dequantization path.
//!
//! Canonical layout of one group of 32 codes `e_0..e_31` in three words:
//! word `j` holds `e_{8j+k}` at bits `[3k, 3k+3)` for `k = 0..8`, and its top
//! byte holds rest fragment `r_j`. The 24-bit value `r_0 | r_1 << 8 | r_2 << 16`
//! carries `e_24..e_31` in the same 3-bit order.
//!
//! Tiled layout: codes are visited tile by tile over a grid of 16x64 tiles
//! (row-major over the grid, row-major inside a tile) before packing, so each
//! tile occupies 32 consecutive groups.
//!
//! Fast dequantization works on a 24-bit payload (a word or the reassembled
//! rest bits) holding eight codes `c_0..c_7`. Each 32-bit register carries two
//! binary16 lanes with exponent pattern `0x6400` (1024.0); a code masked into
//! mantissa bits `[0, 3)` reads as `1024 + c` ("direct" lane) and one masked
//! into bits `[3, 6)` reads as `1024 + 8c` ("x8" lane). Pairs `(c_6, c_7)` and
//! `(c_2, c_3)` use direct lanes, `(c_4, c_5)` and `(c_0, c_1)` use x8 lanes;
//! the low pairs come out of the payload shifted left by 12.

use std::path::Path;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{MiloError, Result};
use crate::lowrank::{GroupAxis, SymmInt3Factor};
use crate::quant::QuantizedMatrix;
use crate::tensor_store::{self, ContainerHeader, WeightMatrix};

pub const CODES_PER_GROUP: usize = 32;
pub const WORDS_PER_GROUP: usize = 3;
pub const TILE_ROWS: usize = 16;
pub const TILE_COLS: usize = 64;

const HALF_1024: u32 = 0x6400_6400;
const PAYLOAD_MASK: u32 = 0x00FF_FFFF;

/// Packs 32 codes into three words.
pub fn pack32(codes: &[u8]) -> Result<[u32; 3]> {
    if codes.len() != CODES_PER_GROUP {
        return Err(MiloError::Shape(format!("pack32 needs 32 codes, got {}", codes.len())));
    }
    if let Some(c) = codes.iter().find(|&&c| c > 7) {
        return Err(MiloError::Range(format!("code {c} outside [0, 7]")));
    }
    let field = |chunk: &[u8]| {
        chunk
            .iter()
            .enumerate()
            .fold(0u32, |acc, (k, &c)| acc | (c as u32) << (3 * k))
    };
    let rest = field(&codes[24..]);
    let mut words = [0u32; 3];
    for (j, w) in words.iter_mut().enumerate() {
        *w = field(&codes[8 * j..8 * j + 8]) | ((rest >> (8 * j)) & 0xFF) << 24;
    }
    Ok(words)
}

/// The 24-bit payload carrying `e_24..e_31`.
#[inline]
pub fn rest_payload(words: [u32; 3]) -> u32 {
    (words[0] >> 24) | (words[1] >> 24) << 8 | (words[2] >> 24) << 16
}

/// Inverse of [`pack32`]. Every 96-bit pattern decodes.
pub fn unpack32(words: [u32; 3]) -> [u8; 32] {
    let mut out = [0u8; 32];
    let payloads = [words[0], words[1], words[2], rest_payload(words)];
    for (p, payload) in payloads.into_iter().enumerate() {
        for k in 0..8 {
            out[8 * p + k] = ((payload >> (3 * k)) & 7) as u8;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DequantMode {
    /// `w = s * (code - 4) * 2/7`.
    Symmetric,
    /// `w = s * (code - z)`.
    Asymmetric,
}

impl DequantMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DequantMode::Symmetric => "symmetric",
            DequantMode::Asymmetric => "asymmetric",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "symmetric" => Ok(DequantMode::Symmetric),
            "asymmetric" => Ok(DequantMode::Asymmetric),
            other => Err(MiloError::Format(format!("unknown dequant mode {other:?}"))),
        }
    }

    /// Value subtracted from a direct lane and the fma addend of an x8 lane.
    fn offsets(self) -> (f16, f16) {
        match self {
            DequantMode::Symmetric => (f16::from_f32(1028.0), f16::from_f32(-132.0)),
            DequantMode::Asymmetric => (f16::from_f32(1024.0), f16::from_f32(-128.0)),
        }
    }
}

/// Which pair of a payload's eight codes to extract.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LanePair {
    E0E1,
    E2E3,
    E4E5,
    E6E7,
}

impl LanePair {
    pub const ALL: [LanePair; 4] = [LanePair::E0E1, LanePair::E2E3, LanePair::E4E5, LanePair::E6E7];
}

// binary16 arithmetic. Sums and products of two binary16 values are computed
// in f32 and fma in f64, each followed by one rounding to binary16; both wide
// formats hold enough bits that the result is the correctly rounded one.
#[inline]
fn hsub(a: f16, b: f16) -> f16 {
    f16::from_f32(a.to_f32() - b.to_f32())
}

#[inline]
fn hmul(a: f16, b: f16) -> f16 {
    f16::from_f32(a.to_f32() * b.to_f32())
}

#[inline]
fn hfma(a: f16, b: f16, c: f16) -> f16 {
    f16::from_f64(a.to_f64().mul_add(b.to_f64(), c.to_f64()))
}

#[inline]
fn lanes(reg: u32) -> (f16, f16) {
    (f16::from_bits(reg as u16), f16::from_bits((reg >> 16) as u16))
}

/// Extracts one code pair from a 24-bit payload as binary16 values: `code - 4`
/// in symmetric mode, the raw code in asymmetric mode.
#[inline]
pub fn fast_dequant_pair(payload: u32, pair: LanePair, mode: DequantMode) -> [f16; 2] {
    let (direct_off, x8_add) = mode.offsets();
    let eighth = f16::from_f32(0.125);
    let (p, direct) = match pair {
        LanePair::E6E7 => (payload, true),
        LanePair::E4E5 => (payload, false),
        LanePair::E2E3 => (payload << 12, true),
        LanePair::E0E1 => (payload << 12, false),
    };
    if direct {
        let reg = ((p >> 18) & 0x7) | ((p >> 5) & 0x7_0000) | HALF_1024;
        let (lo, hi) = lanes(reg);
        [hsub(lo, direct_off), hsub(hi, direct_off)]
    } else {
        let reg = ((p >> 9) & 0x38) | ((p << 4) & 0x38_0000) | HALF_1024;
        let (lo, hi) = lanes(reg);
        [hfma(lo, eighth, x8_add), hfma(hi, eighth, x8_add)]
    }
}

/// All 32 codes of a group through the fast path, in code order.
pub fn fast_dequant_group(words: [u32; 3], mode: DequantMode) -> [f16; 32] {
    let mut out = [f16::ZERO; 32];
    let payloads = [words[0] & PAYLOAD_MASK, words[1] & PAYLOAD_MASK, words[2] & PAYLOAD_MASK, rest_payload(words)];
    for (p, payload) in payloads.into_iter().enumerate() {
        for (k, pair) in LanePair::ALL.into_iter().enumerate() {
            let [a, b] = fast_dequant_pair(payload, pair, mode);
            out[8 * p + 2 * k] = a;
            out[8 * p + 2 * k + 1] = b;
        }
    }
    out
}

/// The reference conversion the fast path must match: integer code to binary16.
#[inline]
pub fn naive_code_value(code: u8, mode: DequantMode) -> f16 {
    match mode {
        DequantMode::Symmetric => f16::from_f32(code as f32 - 4.0),
        DequantMode::Asymmetric => f16::from_f32(code as f32),
    }
}

/// Per-group binary16 scaling applied to the extracted code values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GroupScale {
    /// Holds `half(s * 2/7)`; `w = hmul(code - 4, factor)`.
    Symmetric(f16),
    /// `w = hmul(hsub(code, z), s)`.
    Asymmetric { scale: f16, zero: f16 },
}

impl GroupScale {
    pub fn symmetric(scale: f16) -> Self {
        GroupScale::Symmetric(f16::from_f32(scale.to_f32() * 2.0 / 7.0))
    }

    #[inline]
    pub fn apply(self, v: f16) -> f16 {
        match self {
            GroupScale::Symmetric(factor) => hmul(v, factor),
            GroupScale::Asymmetric { scale, zero } => hmul(hsub(v, zero), scale),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    Linear,
    Tiled16x64,
}

impl Layout {
    pub fn as_str(self) -> &'static str {
        match self {
            Layout::Linear => "linear",
            Layout::Tiled16x64 => "tiled16x64",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Layout::Linear),
            "tiled16x64" => Ok(Layout::Tiled16x64),
            other => Err(MiloError::Format(format!("unknown layout {other:?}"))),
        }
    }

    /// Row-major `(i, j)` of the code at packed position `p`.
    #[inline]
    pub fn position(self, p: usize, cols: usize) -> (usize, usize) {
        match self {
            Layout::Linear => (p / cols, p % cols),
            Layout::Tiled16x64 => {
                let tile = p / (TILE_ROWS * TILE_COLS);
                let within = p % (TILE_ROWS * TILE_COLS);
                let tiles_per_row = cols / TILE_COLS;
                (
                    (tile / tiles_per_row) * TILE_ROWS + within / TILE_COLS,
                    (tile % tiles_per_row) * TILE_COLS + within % TILE_COLS,
                )
            }
        }
    }

    /// Packed position of row-major `(i, j)`; inverse of [`Layout::position`].
    #[inline]
    pub fn index(self, i: usize, j: usize, cols: usize) -> usize {
        match self {
            Layout::Linear => i * cols + j,
            Layout::Tiled16x64 => {
                let tiles_per_row = cols / TILE_COLS;
                let tile = (i / TILE_ROWS) * tiles_per_row + j / TILE_COLS;
                tile * TILE_ROWS * TILE_COLS + (i % TILE_ROWS) * TILE_COLS + j % TILE_COLS
            }
        }
    }
}

/// Splits interleaved groups into plane A (words 0 and 1) and plane B (word 2).
pub fn split_planes(words: &[u32]) -> (Vec<u32>, Vec<u32>) {
    let mut a = Vec::with_capacity(words.len() / 3 * 2);
    let mut b = Vec::with_capacity(words.len() / 3);
    for g in words.chunks_exact(3) {
        a.extend_from_slice(&g[..2]);
        b.push(g[2]);
    }
    (a, b)
}

pub fn merge_planes(a: &[u32], b: &[u32]) -> Result<Vec<u32>> {
    if a.len() != 2 * b.len() {
        return Err(MiloError::Shape(format!("plane A has {} words, plane B {}", a.len(), b.len())));
    }
    let mut out = Vec::with_capacity(a.len() + b.len());
    for (pa, &pb) in a.chunks_exact(2).zip(b) {
        out.extend_from_slice(pa);
        out.push(pb);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub enum PackedWords {
    Interleaved(Vec<u32>),
    Split { a: Vec<u32>, b: Vec<u32> },
}

/// Packed INT3 codes with binary16 scales (and zeros in asymmetric mode).
/// Scale groups are `group_size` consecutive row-major elements.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedInt3Matrix {
    pub rows: usize,
    pub cols: usize,
    pub group_size: usize,
    pub layout: Layout,
    pub words: PackedWords,
    pub scales: Vec<f16>,
    pub zeros: Option<Vec<f16>>,
}

impl PackedInt3Matrix {
    /// Packs row-major codes. Zeros select asymmetric mode.
    pub fn from_codes(
        rows: usize,
        cols: usize,
        codes: &[u8],
        group_size: usize,
        scales: &[f32],
        zeros: Option<&[f32]>,
        layout: Layout,
    ) -> Result<Self> {
        if codes.len() != rows * cols {
            return Err(MiloError::Shape(format!("{} codes for {rows}x{cols}", codes.len())));
        }
        if cols % CODES_PER_GROUP != 0 {
            return Err(MiloError::Shape(format!("cols {cols} not a multiple of 32")));
        }
        if layout == Layout::Tiled16x64 && (rows % TILE_ROWS != 0 || cols % TILE_COLS != 0) {
            return Err(MiloError::Shape(format!("{rows}x{cols} is not divisible into 16x64 tiles")));
        }
        if group_size == 0 || cols % group_size != 0 {
            return Err(MiloError::Shape(format!("group size {group_size} does not divide cols {cols}")));
        }
        let groups = rows * cols / group_size;
        if scales.len() != groups || zeros.is_some_and(|z| z.len() != groups) {
            return Err(MiloError::Shape(format!("expected {groups} scale groups")));
        }
        let mut words = Vec::with_capacity(rows * cols * 3 / 32);
        let mut buf = [0u8; 32];
        for start in (0..rows * cols).step_by(CODES_PER_GROUP) {
            for (k, b) in buf.iter_mut().enumerate() {
                let (i, j) = layout.position(start + k, cols);
                *b = codes[i * cols + j];
            }
            words.extend_from_slice(&pack32(&buf)?);
        }
        Ok(PackedInt3Matrix {
            rows,
            cols,
            group_size,
            layout,
            words: PackedWords::Interleaved(words),
            scales: scales.iter().map(|&s| f16::from_f32(s)).collect(),
            zeros: zeros.map(|z| z.iter().map(|&v| f16::from_f32(v)).collect()),
        })
    }

    /// Asymmetric packing of a 3-bit quantized matrix.
    pub fn from_quantized(q: &QuantizedMatrix, layout: Layout) -> Result<Self> {
        if q.bits != 3 {
            return Err(MiloError::Config(format!("INT3 packing needs 3-bit codes, got {}", q.bits)));
        }
        q.validate()?;
        Self::from_codes(q.rows, q.cols, &q.codes, q.group_size, &q.scales, Some(&q.zeros), layout)
    }

    /// Symmetric packing of codes grouped along rows.
    pub fn from_symm(f: &SymmInt3Factor, layout: Layout) -> Result<Self> {
        if f.axis != GroupAxis::Row || f.cols % f.group_size != 0 {
            return Err(MiloError::Shape("symmetric packing needs full row-wise groups".into()));
        }
        Self::from_codes(f.rows, f.cols, &f.codes, f.group_size, &f.scales, None, layout)
    }

    pub fn mode(&self) -> DequantMode {
        if self.zeros.is_some() {
            DequantMode::Asymmetric
        } else {
            DequantMode::Symmetric
        }
    }

    pub fn groups(&self) -> usize {
        self.rows * self.cols / CODES_PER_GROUP
    }

    pub fn is_split(&self) -> bool {
        matches!(self.words, PackedWords::Split { .. })
    }

    pub fn word_count(&self) -> usize {
        match &self.words {
            PackedWords::Interleaved(w) => w.len(),
            PackedWords::Split { a, b } => a.len() + b.len(),
        }
    }

    /// Words of packed group `g`, whichever storage is in use.
    #[inline]
    pub fn group_words(&self, g: usize) -> [u32; 3] {
        match &self.words {
            PackedWords::Interleaved(w) => [w[3 * g], w[3 * g + 1], w[3 * g + 2]],
            PackedWords::Split { a, b } => [a[2 * g], a[2 * g + 1], b[g]],
        }
    }

    pub fn into_split(self) -> Self {
        let words = match self.words {
            PackedWords::Interleaved(w) => {
                let (a, b) = split_planes(&w);
                PackedWords::Split { a, b }
            }
            split => split,
        };
        PackedInt3Matrix { words, ..self }
    }

    pub fn into_merged(self) -> Result<Self> {
        let words = match self.words {
            PackedWords::Split { a, b } => PackedWords::Interleaved(merge_planes(&a, &b)?),
            merged => merged,
        };
        Ok(PackedInt3Matrix { words, ..self })
    }

    /// Binary16 scaling of scale group `g` under `mode`.
    #[inline]
    pub fn group_scale(&self, g: usize, mode: DequantMode) -> Result<GroupScale> {
        match (mode, &self.zeros) {
            (DequantMode::Symmetric, _) => Ok(GroupScale::symmetric(self.scales[g])),
            (DequantMode::Asymmetric, Some(z)) => Ok(GroupScale::Asymmetric {
                scale: self.scales[g],
                zero: z[g],
            }),
            (DequantMode::Asymmetric, None) => {
                Err(MiloError::Config("asymmetric dequantization needs zero-points".into()))
            }
        }
    }

    /// Row-major codes, undoing the layout permutation.
    pub fn unpack_codes(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.rows * self.cols];
        for g in 0..self.groups() {
            for (k, c) in unpack32(self.group_words(g)).into_iter().enumerate() {
                let (i, j) = self.layout.position(g * CODES_PER_GROUP + k, self.cols);
                out[i * self.cols + j] = c;
            }
        }
        out
    }

    fn validate(&self) -> Result<()> {
        let groups = self.rows * self.cols / self.group_size;
        let words_ok = match &self.words {
            PackedWords::Interleaved(w) => w.len() == self.groups() * 3,
            PackedWords::Split { a, b } => a.len() == self.groups() * 2 && b.len() == self.groups(),
        };
        if !words_ok || self.scales.len() != groups || self.zeros.as_ref().is_some_and(|z| z.len() != groups) {
            return Err(MiloError::Shape("packed buffers do not match shape".into()));
        }
        Ok(())
    }
}

fn dequant_with(p: &PackedInt3Matrix, mode: DequantMode, fast: bool) -> Result<Vec<f16>> {
    let scales = (0..p.scales.len())
        .map(|g| p.group_scale(g, mode))
        .collect::<Result<Vec<_>>>()?;
    let mut out = vec![f16::ZERO; p.rows * p.cols];
    for g in 0..p.groups() {
        let words = p.group_words(g);
        let values = if fast {
            fast_dequant_group(words, mode)
        } else {
            unpack32(words).map(|c| naive_code_value(c, mode))
        };
        for (k, v) in values.into_iter().enumerate() {
            let (i, j) = p.layout.position(g * CODES_PER_GROUP + k, p.cols);
            let idx = i * p.cols + j;
            out[idx] = scales[idx / p.group_size].apply(v);
        }
    }
    Ok(out)
}

/// Row-major binary16 weights through the fast path.
pub fn dequant_packed_f16(p: &PackedInt3Matrix, mode: DequantMode) -> Result<Vec<f16>> {
    dequant_with(p, mode, true)
}

/// Row-major binary16 weights through unpack-then-convert.
pub fn dequant_naive_f16(p: &PackedInt3Matrix, mode: DequantMode) -> Result<Vec<f16>> {
    dequant_with(p, mode, false)
}

pub fn dequant_packed(p: &PackedInt3Matrix, mode: DequantMode) -> Result<WeightMatrix> {
    let values = dequant_packed_f16(p, mode)?;
    WeightMatrix::new("dequantized", p.rows, p.cols, values.iter().map(|v| v.to_f32()).collect())
}

fn f16s_to_le(values: &[f16]) -> impl Iterator<Item = u8> + '_ {
    values.iter().flat_map(|v| v.to_bits().to_le_bytes())
}

fn le_to_f16s(bytes: &[u8]) -> Vec<f16> {
    bytes
        .chunks_exact(2)
        .map(|c| f16::from_bits(u16::from_le_bytes([c[0], c[1]])))
        .collect()
}

pub fn encode_packed(p: &PackedInt3Matrix, name: &str) -> Result<Vec<u8>> {
    let mut h = ContainerHeader::new(name, p.rows, p.cols, "packed-i3");
    h.bits = Some(3);
    h.group_size = Some(p.group_size);
    h.layout = Some(p.layout.as_str().to_string());
    h.split = Some(p.is_split());
    h.mode = Some(p.mode().as_str().to_string());
    let mut payload = Vec::with_capacity(p.word_count() * 4 + p.scales.len() * 4);
    let words: Box<dyn Iterator<Item = &u32>> = match &p.words {
        PackedWords::Interleaved(w) => Box::new(w.iter()),
        PackedWords::Split { a, b } => Box::new(a.iter().chain(b)),
    };
    payload.extend(words.flat_map(|w| w.to_le_bytes()));
    payload.extend(f16s_to_le(&p.scales));
    if let Some(z) = &p.zeros {
        payload.extend(f16s_to_le(z));
    }
    tensor_store::encode_container(&h, &payload)
}

pub fn decode_packed(bytes: &[u8]) -> Result<(String, PackedInt3Matrix)> {
    let (h, payload) = tensor_store::decode_container(bytes)?;
    if h.dtype != "packed-i3" {
        return Err(MiloError::Format(format!("expected dtype packed-i3, got {}", h.dtype)));
    }
    let missing = |f: &str| MiloError::Format(format!("packed header lacks {f}"));
    let group_size = h.group_size.ok_or_else(|| missing("group_size"))?;
    let layout = Layout::parse(h.layout.as_deref().ok_or_else(|| missing("layout"))?)?;
    let split = h.split.ok_or_else(|| missing("split"))?;
    let mode = DequantMode::parse(h.mode.as_deref().ok_or_else(|| missing("mode"))?)?;
    let n = h.rows * h.cols;
    if group_size == 0 || n % CODES_PER_GROUP != 0 || n % group_size != 0 {
        return Err(MiloError::Format("packed shape is not group-aligned".into()));
    }
    let n_words = n * 3 / CODES_PER_GROUP;
    let groups = n / group_size;
    let zero_groups = if mode == DequantMode::Asymmetric { groups } else { 0 };
    let expected = n_words * 4 + (groups + zero_groups) * 2;
    if payload.len() != expected {
        return Err(MiloError::Format(format!(
            "packed payload is {} bytes, expected {expected}",
            payload.len()
        )));
    }
    let (word_bytes, rest) = payload.split_at(n_words * 4);
    let words: Vec<u32> = word_bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let (scale_bytes, zero_bytes) = rest.split_at(groups * 2);
    let words = if split {
        let b = words[n_words / 3 * 2..].to_vec();
        let mut a = words;
        a.truncate(n_words / 3 * 2);
        PackedWords::Split { a, b }
    } else {
        PackedWords::Interleaved(words)
    };
    let p = PackedInt3Matrix {
        rows: h.rows,
        cols: h.cols,
        group_size,
        layout,
        words,
        scales: le_to_f16s(scale_bytes),
        zeros: (mode == DequantMode::Asymmetric).then(|| le_to_f16s(zero_bytes)),
    };
    p.validate()?;
    Ok((h.name, p))
}

pub fn save_packed(p: &PackedInt3Matrix, name: &str, path: &Path) -> Result<()> {
    tensor_store::write_atomic(path, &encode_packed(p, name)?)
}

pub fn load_packed(path: &Path) -> Result<(String, PackedInt3Matrix)> {
    let bytes = std::fs::read(path).map_err(|e| MiloError::io(path, e))?;
    decode_packed(&bytes)
}
