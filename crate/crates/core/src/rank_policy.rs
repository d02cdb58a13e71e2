//! Weight statistics and rank-assignment policies.
//!
//! Policy strings follow a fixed grammar:
//!
//! ```text
//! Uniform-<r> | Dense-<r> | Sparse-<r> | Frequency-<r> | Kurtosis-<r>
//!   | Dense-<a>+Frequency-<b> | Dense-<a>+Kurtosis-<b>
//! ```
//!
//! Frequency and Kurtosis policies score expert matrices only; dense
//! matrices get rank 0 unless a `Dense-<a>+` prefix is present. Every
//! assigned rank is clamped to `min(rows, cols)` of its matrix.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{MiloError, Result};
use crate::lowrank;
use crate::quant::{self, QuantConfig};
use crate::tensor_store::{self, ExpertFrequencyStats, MatrixEntry, MemoryModel, ModelManifest, StructureTag, WeightMatrix};

/// Residual-rank threshold used throughout the analysis.
pub const DEFAULT_TAU: f64 = 0.5;

/// Excess kurtosis `E[(X - mu)^4] / sigma^4 - 3` over all entries.
pub fn kurtosis(w: &WeightMatrix) -> Result<f64> {
    kurtosis_of(w.data())
}

/// One-pass excess kurtosis using the stable incremental central-moment
/// updates, accumulated in `f64`.
pub fn kurtosis_of(values: &[f32]) -> Result<f64> {
    if values.len() < 4 {
        return Err(MiloError::Stat(format!("kurtosis needs at least 4 values, got {}", values.len())));
    }
    let (mut n, mut mean, mut m2, mut m3, mut m4) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for &x in values {
        let n1 = n;
        n += 1.0;
        let delta = x as f64 - mean;
        let dn = delta / n;
        let dn2 = dn * dn;
        let term1 = delta * dn * n1;
        mean += dn;
        m4 += term1 * dn2 * (n * n - 3.0 * n + 3.0) + 6.0 * dn2 * m2 - 4.0 * dn * m3;
        m3 += term1 * dn * (n - 2.0) - 3.0 * dn * m2;
        m2 += term1;
    }
    if !(m2 > 0.0) {
        return Err(MiloError::Stat("zero variance".into()));
    }
    Ok(n * m4 / (m2 * m2) - 3.0)
}

/// Number of singular values of `W - W_dq` strictly below `tau * sigma_max`.
/// A zero residual has rank 0.
pub fn residual_rank(w: &WeightMatrix, w_dq: &WeightMatrix, tau: f64) -> Result<usize> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(MiloError::Config(format!("tau must be in (0, 1), got {tau}")));
    }
    let e = w.sub(w_dq)?;
    let sv = lowrank::singular_values(&e)?;
    let max = sv.first().copied().unwrap_or(0.0);
    if max == 0.0 {
        return Ok(0);
    }
    let threshold = tau * max;
    Ok(sv.iter().filter(|&&s| s < threshold).count())
}

/// `||W - W_dq||_F / ||W||_F`.
pub fn rel_quant_error(w: &WeightMatrix, w_dq: &WeightMatrix) -> Result<f64> {
    let norm = w.frobenius_norm();
    if norm == 0.0 {
        return Err(MiloError::Stat(format!("matrix {} has zero norm", w.name())));
    }
    Ok(w.sub(w_dq)?.frobenius_norm() / norm)
}

/// Max/min activation ratio; unbounded when some expert never fired.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FrequencyRatio {
    Finite(f64),
    Unbounded,
}

impl Serialize for FrequencyRatio {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            FrequencyRatio::Finite(v) => s.serialize_f64(*v),
            FrequencyRatio::Unbounded => s.serialize_str("unbounded"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerFrequencies {
    pub layer_index: usize,
    pub frequencies: Vec<f64>,
    pub max_min_ratio: FrequencyRatio,
}

pub fn expert_frequencies(stats: &ExpertFrequencyStats) -> Result<Vec<LayerFrequencies>> {
    stats
        .layers
        .iter()
        .map(|layer| {
            let total: u64 = layer.counts.iter().sum();
            if layer.counts.is_empty() || total == 0 {
                return Err(MiloError::Stat(format!("layer {} has no activations", layer.layer_index)));
            }
            let frequencies = layer.counts.iter().map(|&c| c as f64 / total as f64).collect();
            let max = *layer.counts.iter().max().expect("non-empty");
            let min = *layer.counts.iter().min().expect("non-empty");
            let max_min_ratio = if min == 0 {
                FrequencyRatio::Unbounded
            } else {
                FrequencyRatio::Finite(max as f64 / min as f64)
            };
            Ok(LayerFrequencies {
                layer_index: layer.layer_index,
                frequencies,
                max_min_ratio,
            })
        })
        .collect()
}

/// Normalized activation frequency of every expert matrix, keyed by name.
pub fn expert_frequency_by_matrix(
    manifest: &ModelManifest,
    stats: &ExpertFrequencyStats,
) -> Result<HashMap<String, f64>> {
    let freqs = expert_frequencies(stats)?;
    let mut out = HashMap::new();
    for (layer, m) in manifest.matrices() {
        let Some(e) = m.expert_index else { continue };
        let f = freqs
            .iter()
            .find(|l| l.layer_index == layer)
            .and_then(|l| l.frequencies.get(e))
            .ok_or_else(|| MiloError::Stat(format!("no frequency for expert {e} of layer {layer}")))?;
        out.insert(m.name.clone(), *f);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixStats {
    pub name: String,
    pub layer_index: usize,
    pub rows: usize,
    pub cols: usize,
    pub structure_tag: StructureTag,
    pub kurtosis: f64,
    pub residual_rank: usize,
    pub rel_quant_error: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert_frequency: Option<f64>,
}

/// Kurtosis, residual rank and relative error of the calibration-free
/// zero-point-optimized quantization at `qcfg`.
pub fn matrix_stats(
    layer_index: usize,
    entry: &MatrixEntry,
    w: &WeightMatrix,
    expert_frequency: Option<f64>,
    qcfg: &QuantConfig,
) -> Result<MatrixStats> {
    if w.shape() != (entry.rows, entry.cols) {
        return Err(MiloError::Shape(format!(
            "{}: tensor is {:?}, manifest says {}x{}",
            entry.name,
            w.shape(),
            entry.rows,
            entry.cols
        )));
    }
    let params = quant::init_quant_params(w, qcfg)?;
    let dq = quant::dequantize(&quant::hqq_solve(w, qcfg, &params)?);
    Ok(MatrixStats {
        name: entry.name.clone(),
        layer_index,
        rows: entry.rows,
        cols: entry.cols,
        structure_tag: entry.structure_tag,
        kurtosis: kurtosis(w)?,
        residual_rank: residual_rank(w, &dq, DEFAULT_TAU)?,
        rel_quant_error: rel_quant_error(w, &dq)?,
        expert_frequency,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Score {
    Frequency,
    Kurtosis,
}

impl Score {
    fn name(self) -> &'static str {
        match self {
            Score::Frequency => "Frequency",
            Score::Kurtosis => "Kurtosis",
        }
    }
}

/// A parsed rank policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PolicySpec {
    Uniform(usize),
    Dense(usize),
    Sparse(usize),
    Scored { score: Score, rank: usize },
    DenseWithScored { dense: usize, score: Score, rank: usize },
}

fn parse_rank(s: &str, full: &str) -> Result<usize> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return Err(MiloError::Plan(format!("invalid rank in policy {full:?}")));
    }
    s.parse()
        .map_err(|_| MiloError::Plan(format!("rank out of range in policy {full:?}")))
}

fn parse_term(term: &str, full: &str) -> Result<(String, usize)> {
    let (name, rank) = term
        .split_once('-')
        .ok_or_else(|| MiloError::Plan(format!("unknown policy {full:?}")))?;
    Ok((name.to_string(), parse_rank(rank, full)?))
}

impl FromStr for PolicySpec {
    type Err = MiloError;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || MiloError::Plan(format!("unknown policy {s:?}"));
        let score_of = |name: &str| match name {
            "Frequency" => Some(Score::Frequency),
            "Kurtosis" => Some(Score::Kurtosis),
            _ => None,
        };
        match s.split_once('+') {
            None => {
                let (name, rank) = parse_term(s, s)?;
                match name.as_str() {
                    "Uniform" => Ok(PolicySpec::Uniform(rank)),
                    "Dense" => Ok(PolicySpec::Dense(rank)),
                    "Sparse" => Ok(PolicySpec::Sparse(rank)),
                    other => score_of(other)
                        .map(|score| PolicySpec::Scored { score, rank })
                        .ok_or_else(unknown),
                }
            }
            Some((first, second)) => {
                let (dn, dense) = parse_term(first, s)?;
                let (sn, rank) = parse_term(second, s)?;
                let score = score_of(&sn).ok_or_else(unknown)?;
                if dn != "Dense" {
                    return Err(unknown());
                }
                Ok(PolicySpec::DenseWithScored { dense, score, rank })
            }
        }
    }
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicySpec::Uniform(r) => write!(f, "Uniform-{r}"),
            PolicySpec::Dense(r) => write!(f, "Dense-{r}"),
            PolicySpec::Sparse(r) => write!(f, "Sparse-{r}"),
            PolicySpec::Scored { score, rank } => write!(f, "{}-{rank}", score.name()),
            PolicySpec::DenseWithScored { dense, score, rank } => {
                write!(f, "Dense-{dense}+{}-{rank}", score.name())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub name: String,
    pub rank: usize,
}

/// Per-matrix ranks in manifest order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankPlan {
    pub policy: String,
    pub entries: Vec<PlanEntry>,
    pub average_sparse_rank: f64,
    pub memory_bytes: u64,
}

impl RankPlan {
    pub fn rank_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.rank)
    }

    /// Checks the plan covers every manifest matrix exactly once.
    pub fn validate_against(&self, manifest: &ModelManifest) -> Result<()> {
        if self.entries.len() != manifest.matrix_count() {
            return Err(MiloError::Plan("plan and manifest list different matrices".into()));
        }
        for ((_, m), e) in manifest.matrices().zip(&self.entries) {
            if m.name != e.name {
                return Err(MiloError::Plan(format!("plan entry {} out of manifest order", e.name)));
            }
        }
        Ok(())
    }
}

/// Splits `rank * scores.len()` rank units proportionally to `scores`,
/// respecting per-matrix caps, with largest-remainder rounding (ties go to
/// the earlier index).
fn allocate_proportional(scores: &[f64], caps: &[usize], rank: usize) -> Result<Vec<usize>> {
    let n = scores.len();
    let total = rank * n;
    if total > caps.iter().sum::<usize>() {
        return Err(MiloError::Plan(format!(
            "average rank {rank} exceeds what the scored matrices can hold"
        )));
    }
    let mut share = vec![0.0f64; n];
    let mut active: Vec<usize> = (0..n).collect();
    let mut remaining = total as f64;
    loop {
        let sum: f64 = active.iter().map(|&i| scores[i]).sum();
        for &i in &active {
            share[i] = if sum > 0.0 {
                remaining * scores[i] / sum
            } else {
                remaining / active.len() as f64
            };
        }
        let over: Vec<usize> = active.iter().copied().filter(|&i| share[i] > caps[i] as f64).collect();
        if over.is_empty() {
            break;
        }
        for &i in &over {
            share[i] = caps[i] as f64;
            remaining -= caps[i] as f64;
        }
        active.retain(|i| !over.contains(i));
        if active.is_empty() {
            break;
        }
    }
    let mut ranks: Vec<usize> = share.iter().map(|&s| s.floor() as usize).collect();
    let mut left = total - ranks.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let fa = share[a] - share[a].floor();
        let fb = share[b] - share[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    while left > 0 {
        let before = left;
        for &i in &order {
            if left == 0 {
                break;
            }
            if ranks[i] < caps[i] {
                ranks[i] += 1;
                left -= 1;
            }
        }
        if left == before {
            return Err(MiloError::Plan("could not place every rank unit".into()));
        }
    }
    Ok(ranks)
}

fn score_values(score: Score, experts: &[&MatrixEntry], stats: &HashMap<&str, &MatrixStats>) -> Result<Vec<f64>> {
    let lookup = |m: &MatrixEntry| {
        stats
            .get(m.name.as_str())
            .copied()
            .ok_or_else(|| MiloError::Plan(format!("missing statistics for {}", m.name)))
    };
    match score {
        Score::Frequency => experts
            .iter()
            .map(|m| {
                lookup(m)?
                    .expert_frequency
                    .ok_or_else(|| MiloError::Plan(format!("missing expert frequency for {}", m.name)))
            })
            .collect(),
        Score::Kurtosis => {
            let k: Vec<f64> = experts.iter().map(|m| lookup(m).map(|s| s.kurtosis)).collect::<Result<_>>()?;
            let lo = k.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = k.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Ok(k.iter()
                .map(|&v| if hi > lo { (v - lo) / (hi - lo) } else { 1.0 })
                .collect())
        }
    }
}

/// Assigns a rank to every manifest matrix under `policy`.
pub fn plan_ranks(
    manifest: &ModelManifest,
    stats: &[MatrixStats],
    policy: &PolicySpec,
    mm: &MemoryModel,
) -> Result<RankPlan> {
    manifest.validate()?;
    let stats: HashMap<&str, &MatrixStats> = stats.iter().map(|s| (s.name.as_str(), s)).collect();
    let matrices: Vec<&MatrixEntry> = manifest.matrices().map(|(_, m)| m).collect();
    let cap = |m: &MatrixEntry| m.rows.min(m.cols);
    let is_expert = |m: &MatrixEntry| m.structure_tag == StructureTag::Expert;

    let (dense_rank, expert_rule): (usize, Option<(Option<Score>, usize)>) = match *policy {
        PolicySpec::Uniform(r) => (r, Some((None, r))),
        PolicySpec::Dense(r) => (r, None),
        PolicySpec::Sparse(r) => (0, Some((None, r))),
        PolicySpec::Scored { score, rank } => (0, Some((Some(score), rank))),
        PolicySpec::DenseWithScored { dense, score, rank } => (dense, Some((Some(score), rank))),
    };

    let mut ranks: Vec<usize> = matrices
        .iter()
        .map(|m| if is_expert(m) { 0 } else { dense_rank.min(cap(m)) })
        .collect();
    let expert_idx: Vec<usize> = (0..matrices.len()).filter(|&i| is_expert(matrices[i])).collect();
    match expert_rule {
        None => {}
        Some((None, r)) => {
            for &i in &expert_idx {
                ranks[i] = r.min(cap(matrices[i]));
            }
        }
        Some((Some(score), r)) if !expert_idx.is_empty() => {
            let experts: Vec<&MatrixEntry> = expert_idx.iter().map(|&i| matrices[i]).collect();
            let scores = score_values(score, &experts, &stats)?;
            let caps: Vec<usize> = experts.iter().map(|m| cap(m)).collect();
            for (&i, r) in expert_idx.iter().zip(allocate_proportional(&scores, &caps, r)?) {
                ranks[i] = r;
            }
        }
        Some((Some(_), _)) => {}
    }

    let entries: Vec<PlanEntry> = matrices
        .iter()
        .zip(&ranks)
        .map(|(m, &rank)| PlanEntry {
            name: m.name.clone(),
            rank,
        })
        .collect();
    let average_sparse_rank = if expert_idx.is_empty() {
        0.0
    } else {
        expert_idx.iter().map(|&i| ranks[i] as f64).sum::<f64>() / expert_idx.len() as f64
    };
    let mut plan = RankPlan {
        policy: policy.to_string(),
        entries,
        average_sparse_rank,
        memory_bytes: 0,
    };
    plan.memory_bytes = tensor_store::quantized_memory_bytes(manifest, &plan, mm.bits, mm.group_size, mm.comp_bits)?;
    Ok(plan)
}

/// A policy with its free rank parameter left open, for budget searches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PolicyFamily {
    Uniform,
    Dense,
    Sparse,
    Scored(Score),
    DenseWithScored { dense: usize, score: Score },
}

impl PolicyFamily {
    pub fn instantiate(self, r: usize) -> PolicySpec {
        match self {
            PolicyFamily::Uniform => PolicySpec::Uniform(r),
            PolicyFamily::Dense => PolicySpec::Dense(r),
            PolicyFamily::Sparse => PolicySpec::Sparse(r),
            PolicyFamily::Scored(score) => PolicySpec::Scored { score, rank: r },
            PolicyFamily::DenseWithScored { dense, score } => PolicySpec::DenseWithScored { dense, score, rank: r },
        }
    }

    fn touches(self, m: &MatrixEntry) -> bool {
        match self {
            PolicyFamily::Uniform => true,
            PolicyFamily::Dense => m.structure_tag.is_dense(),
            _ => m.structure_tag == StructureTag::Expert,
        }
    }
}

impl FromStr for PolicyFamily {
    type Err = MiloError;

    /// `Uniform`, `Dense`, `Sparse`, `Frequency`, `Kurtosis`,
    /// `Dense-<a>+Frequency` or `Dense-<a>+Kurtosis`.
    fn from_str(s: &str) -> Result<Self> {
        let score_of = |name: &str| match name {
            "Frequency" => Ok(Score::Frequency),
            "Kurtosis" => Ok(Score::Kurtosis),
            _ => Err(MiloError::Plan(format!("unknown policy family {s:?}"))),
        };
        match s {
            "Uniform" => Ok(PolicyFamily::Uniform),
            "Dense" => Ok(PolicyFamily::Dense),
            "Sparse" => Ok(PolicyFamily::Sparse),
            _ => match s.split_once('+') {
                None => score_of(s).map(PolicyFamily::Scored),
                Some((dense, score)) => {
                    let (name, a) = parse_term(dense, s)?;
                    if name != "Dense" {
                        return Err(MiloError::Plan(format!("unknown policy family {s:?}")));
                    }
                    Ok(PolicyFamily::DenseWithScored {
                        dense: a,
                        score: score_of(score)?,
                    })
                }
            },
        }
    }
}

/// For each family, the plan with the largest rank parameter whose memory
/// fits in `budget_bytes`. Families infeasible even at rank 0 are skipped.
pub fn plan_under_memory(
    manifest: &ModelManifest,
    stats: &[MatrixStats],
    budget_bytes: u64,
    families: &[PolicyFamily],
    mm: &MemoryModel,
) -> Result<Vec<RankPlan>> {
    let mut plans = Vec::new();
    for &family in families {
        let fits = |r: usize| -> Result<Option<RankPlan>> {
            match plan_ranks(manifest, stats, &family.instantiate(r), mm) {
                Ok(p) if p.memory_bytes <= budget_bytes => Ok(Some(p)),
                Ok(_) => Ok(None),
                Err(MiloError::Plan(_)) if r > 0 => Ok(None),
                Err(e) => Err(e),
            }
        };
        let Some(mut best) = fits(0)? else { continue };
        let hi_bound = manifest
            .matrices()
            .filter(|(_, m)| family.touches(m))
            .map(|(_, m)| m.rows.min(m.cols))
            .max()
            .unwrap_or(0);
        // Largest r in [lo, hi] that fits, with lo known to fit.
        let (mut lo, mut hi) = (0usize, hi_bound);
        while lo < hi {
            let mid = lo + (hi - lo).div_ceil(2);
            match fits(mid)? {
                Some(p) => {
                    lo = mid;
                    best = p;
                }
                None => hi = mid - 1,
            }
        }
        plans.push(best);
    }
    if plans.is_empty() {
        return Err(MiloError::Plan(format!("no candidate policy fits in {budget_bytes} bytes")));
    }
    Ok(plans)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_store::LayerEntry;

    fn entry(name: &str, tag: StructureTag, expert: Option<usize>) -> MatrixEntry {
        MatrixEntry {
            name: name.into(),
            rows: 64,
            cols: 64,
            structure_tag: tag,
            expert_index: expert,
        }
    }

    fn toy_manifest(experts: usize) -> ModelManifest {
        let mut matrices = vec![entry("attn.q", StructureTag::Attention, None)];
        matrices.extend((0..experts).map(|e| entry(&format!("e{e}"), StructureTag::Expert, Some(e))));
        ModelManifest {
            layers: vec![LayerEntry {
                layer_index: 0,
                matrices,
            }],
        }
    }

    fn stat(name: &str, kurtosis: f64, freq: Option<f64>) -> MatrixStats {
        MatrixStats {
            name: name.into(),
            layer_index: 0,
            rows: 64,
            cols: 64,
            structure_tag: StructureTag::Expert,
            kurtosis,
            residual_rank: 0,
            rel_quant_error: 0.1,
            expert_frequency: freq,
        }
    }

    #[test]
    fn two_point_kurtosis() {
        let v: Vec<f32> = (0..1000).map(|i| if i % 2 == 0 { -1.0 } else { 1.0 }).collect();
        assert!((kurtosis_of(&v).unwrap() + 2.0).abs() < 1e-12);
    }

    #[test]
    fn kurtosis_errors() {
        assert!(matches!(kurtosis_of(&[1.0; 10]), Err(MiloError::Stat(_))));
        assert!(matches!(kurtosis_of(&[1.0, 2.0]), Err(MiloError::Stat(_))));
    }

    #[test]
    fn residual_rank_examples() {
        let diag = |d: &[f32]| WeightMatrix::from_fn("d", d.len(), d.len(), |i, j| if i == j { d[i] } else { 0.0 }).unwrap();
        let zero = WeightMatrix::zeros("z", 4, 4);
        assert_eq!(residual_rank(&diag(&[4.0, 3.0, 1.0, 0.5]), &zero, 0.5).unwrap(), 2);
        assert_eq!(residual_rank(&diag(&[1.0; 4]), &zero, 0.5).unwrap(), 0);
        assert_eq!(residual_rank(&zero, &zero, 0.5).unwrap(), 0);
    }

    #[test]
    fn rel_error_limits() {
        let w = WeightMatrix::from_fn("w", 3, 3, |i, j| (i as f32) - (j as f32) + 0.5).unwrap();
        assert_eq!(rel_quant_error(&w, &w).unwrap(), 0.0);
        assert!((rel_quant_error(&w, &WeightMatrix::zeros("z", 3, 3)).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(
            rel_quant_error(&WeightMatrix::zeros("z", 3, 3), &w),
            Err(MiloError::Stat(_))
        ));
    }

    #[test]
    fn frequency_ratios() {
        let s = |counts: Vec<u64>| ExpertFrequencyStats {
            layers: vec![tensor_store::LayerCounts { layer_index: 0, counts }],
            total_tokens: 100,
        };
        let f = expert_frequencies(&s(vec![5, 5, 5, 5])).unwrap();
        assert_eq!(f[0].frequencies, vec![0.25; 4]);
        assert_eq!(f[0].max_min_ratio, FrequencyRatio::Finite(1.0));
        let f = expert_frequencies(&s(vec![117, 10])).unwrap();
        assert_eq!(f[0].max_min_ratio, FrequencyRatio::Finite(11.7));
        let f = expert_frequencies(&s(vec![1, 0])).unwrap();
        assert_eq!(f[0].max_min_ratio, FrequencyRatio::Unbounded);
        assert_eq!(serde_json::to_string(&f[0].max_min_ratio).unwrap(), "\"unbounded\"");
        assert!(expert_frequencies(&s(vec![])).is_err());
        assert!(expert_frequencies(&s(vec![0, 0])).is_err());
    }

    #[test]
    fn policy_grammar() {
        for s in [
            "Uniform-28",
            "Dense-512",
            "Sparse-32",
            "Frequency-16",
            "Kurtosis-16",
            "Dense-512+Kurtosis-16",
            "Dense-1024+Frequency-32",
        ] {
            assert_eq!(s.parse::<PolicySpec>().unwrap().to_string(), s);
        }
        for bad in [
            "Uniform",
            "Uniform-",
            "Uniform-+3",
            "uniform-3",
            "Sparse-4+Kurtosis-2",
            "Dense-4+Uniform-2",
            "Dense-4 + Kurtosis-2",
            "Dense-4+Kurtosis-2+Frequency-1",
            "Random-3",
        ] {
            assert!(matches!(bad.parse::<PolicySpec>(), Err(MiloError::Plan(_))), "{bad}");
        }
    }

    #[test]
    fn structural_policies() {
        let m = toy_manifest(3);
        let mm = MemoryModel::default();
        let p = plan_ranks(&m, &[], &"Uniform-28".parse().unwrap(), &mm).unwrap();
        assert!(p.entries.iter().all(|e| e.rank == 28));
        let p = plan_ranks(&m, &[], &"Dense-8".parse().unwrap(), &mm).unwrap();
        assert_eq!(p.entries.iter().map(|e| e.rank).collect::<Vec<_>>(), vec![8, 0, 0, 0]);
        let p = plan_ranks(&m, &[], &"Sparse-8".parse().unwrap(), &mm).unwrap();
        assert_eq!(p.entries.iter().map(|e| e.rank).collect::<Vec<_>>(), vec![0, 8, 8, 8]);
        assert_eq!(p.average_sparse_rank, 8.0);
        // Clamped to min(rows, cols).
        let p = plan_ranks(&m, &[], &"Dense-512".parse().unwrap(), &mm).unwrap();
        assert_eq!(p.entries[0].rank, 64);
    }

    #[test]
    fn frequency_policy_is_proportional() {
        let m = toy_manifest(2);
        let stats = vec![stat("e0", 0.0, Some(0.75)), stat("e1", 0.0, Some(0.25))];
        let p = plan_ranks(&m, &stats, &"Frequency-16".parse().unwrap(), &MemoryModel::default()).unwrap();
        assert_eq!(p.entries.iter().map(|e| e.rank).collect::<Vec<_>>(), vec![0, 24, 8]);
        let stats = vec![stat("e0", 0.0, Some(0.5)), stat("e1", 0.0, Some(0.5))];
        let p = plan_ranks(&m, &stats, &"Frequency-16".parse().unwrap(), &MemoryModel::default()).unwrap();
        assert_eq!(p.entries.iter().map(|e| e.rank).collect::<Vec<_>>(), vec![0, 16, 16]);
    }

    #[test]
    fn missing_stats_is_plan_error() {
        let m = toy_manifest(2);
        let stats = vec![stat("e0", 0.0, Some(0.5)), stat("e1", 0.0, None)];
        let err = plan_ranks(&m, &stats, &"Frequency-4".parse().unwrap(), &MemoryModel::default());
        assert!(matches!(err, Err(MiloError::Plan(_))));
        let err = plan_ranks(&m, &stats[..1], &"Kurtosis-4".parse().unwrap(), &MemoryModel::default());
        assert!(matches!(err, Err(MiloError::Plan(_))));
    }

    #[test]
    fn allocation_respects_caps_and_total() {
        let r = allocate_proportional(&[1.0, 0.0, 0.0], &[10, 64, 64], 8).unwrap();
        assert_eq!(r, vec![10, 7, 7]);
        let r = allocate_proportional(&[1.0, 1.0, 1.0], &[64; 3], 5).unwrap();
        assert_eq!(r, vec![5, 5, 5]);
        let r = allocate_proportional(&[1.0, 1.0, 1.0, 0.5], &[64; 4], 1).unwrap();
        assert_eq!(r.iter().sum::<usize>(), 4);
        assert!(allocate_proportional(&[1.0, 1.0], &[2, 2], 3).is_err());
    }

    #[test]
    fn budget_search_matches_hand_inversion() {
        // One 64x64 matrix, Uniform: bytes(r) = 1792 + 48 r + 256 for 1 <= r <= 64.
        let m = ModelManifest {
            layers: vec![LayerEntry {
                layer_index: 0,
                matrices: vec![entry("w", StructureTag::Attention, None)],
            }],
        };
        let mm = MemoryModel::default();
        for (budget, expected) in [(2528u64, 10usize), (2575, 10), (2576, 11), (2095, 0), (1792, 0)] {
            let plans = plan_under_memory(&m, &[], budget, &[PolicyFamily::Uniform], &mm).unwrap();
            assert_eq!(plans[0].entries[0].rank, expected, "budget {budget}");
        }
        assert!(matches!(
            plan_under_memory(&m, &[], 1791, &[PolicyFamily::Uniform], &mm),
            Err(MiloError::Plan(_))
        ));
    }

    #[test]
    fn family_parsing() {
        assert_eq!("Uniform".parse::<PolicyFamily>().unwrap(), PolicyFamily::Uniform);
        assert_eq!(
            "Dense-512+Kurtosis".parse::<PolicyFamily>().unwrap(),
            PolicyFamily::DenseWithScored {
                dense: 512,
                score: Score::Kurtosis
            }
        );
        assert!("Dense-512+Uniform".parse::<PolicyFamily>().is_err());
    }
}
