use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use milo::gemm::{self, GemmCheckReport, SuiteCase};
use milo::lowrank;
use milo::pack::{self, PackedInt3Matrix};
use milo::quant;
use milo::rank_policy::{self, LayerFrequencies, MatrixStats};
use milo::synth::{self, EXPERT_STATS_FILE, MANIFEST_FILE};
use milo::tensor_store::{self, ExpertFrequencyStats, StructureTag};
use milo::{milo_compress, MiloConfig, MiloError, ModelManifest, PolicySpec, RankPlan, Result, RunReport};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const ANALYSIS_FILE: &str = "analysis.json";
pub const PLAN_FILE: &str = "plan.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TIMING_FILE: &str = "timing.json";
pub const PACK_INDEX_FILE: &str = "packed/index.json";
pub const GEMM_FILE: &str = "gemm_check.json";
pub const REPORT_FILE: &str = "report.json";
pub const SCATTER_CSV: &str = "kurtosis_vs_error.csv";
pub const CONVERGENCE_CSV: &str = "convergence.csv";

/// Resolved locations for one run.
pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub model_dir: PathBuf,
}

impl Ctx {
    pub fn new(cfg: RunConfig, out: PathBuf) -> Self {
        let model_dir = cfg.model_dir.clone().unwrap_or_else(|| out.join("model"));
        Ctx { cfg, out, model_dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn compressed(&self, name: &str, suffix: &str) -> PathBuf {
        self.out.join("compressed").join(format!("{name}.{suffix}.milo"))
    }

    fn report_path(&self, name: &str) -> PathBuf {
        self.out.join("reports").join(format!("{name}.json"))
    }

    fn packed(&self, name: &str) -> PathBuf {
        self.out.join("packed").join(format!("{name}.p.milo"))
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(MiloError::Config(format!("missing upstream artifact {}", path.display())))
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)
        .map_err(|e| MiloError::Config(format!("cannot create {}: {e}", path.display())))
}

fn load_manifest(ctx: &Ctx) -> Result<ModelManifest> {
    let path = ctx.model_dir.join(MANIFEST_FILE);
    require(&path)?;
    let manifest = ModelManifest::load(&path)?;
    manifest.validate()?;
    Ok(manifest)
}

fn load_expert_stats(ctx: &Ctx, manifest: &ModelManifest) -> Result<ExpertFrequencyStats> {
    let path = ctx.model_dir.join(EXPERT_STATS_FILE);
    require(&path)?;
    let stats = ExpertFrequencyStats::load(&path)?;
    stats.validate_against(manifest)?;
    Ok(stats)
}

/// Loads a JSON artifact, failing with the missing path if it is absent.
fn read_artifact<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    require(path)?;
    tensor_store::read_json(path)
}

pub fn synth(ctx: &Ctx) -> Result<()> {
    let model = synth::generate(&ctx.cfg.synth, ctx.cfg.seed)?;
    synth::write_model(&model, &ctx.model_dir)?;
    eprintln!(
        "wrote {} matrices to {}",
        model.manifest.matrix_count(),
        ctx.model_dir.display()
    );
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TagMeans {
    pub count: usize,
    pub kurtosis: f64,
    pub rel_quant_error: f64,
}

#[derive(Debug, Serialize)]
struct Analysis<'a> {
    matrices: &'a [MatrixStats],
    layer_frequencies: &'a [LayerFrequencies],
    tag_means: BTreeMap<&'static str, TagMeans>,
}

/// The part of `analysis.json` later verbs read back.
#[derive(Debug, Deserialize)]
struct AnalysisIn {
    matrices: Vec<MatrixStats>,
    tag_means: BTreeMap<String, TagMeans>,
}

fn tag_means(stats: &[MatrixStats]) -> BTreeMap<&'static str, TagMeans> {
    let mut out: BTreeMap<&'static str, TagMeans> = BTreeMap::new();
    for s in stats {
        let t = out.entry(s.structure_tag.as_str()).or_default();
        t.count += 1;
        t.kurtosis += s.kurtosis;
        t.rel_quant_error += s.rel_quant_error;
    }
    for t in out.values_mut() {
        t.kurtosis /= t.count as f64;
        t.rel_quant_error /= t.count as f64;
    }
    out
}

pub fn analyze(ctx: &Ctx) -> Result<()> {
    let manifest = load_manifest(ctx)?;
    let expert_stats = load_expert_stats(ctx, &manifest)?;
    let freqs = rank_policy::expert_frequency_by_matrix(&manifest, &expert_stats)?;
    let tensors = synth::load_tensors(&manifest, &ctx.model_dir)?;
    let entries: Vec<_> = manifest.matrices().collect();
    let qcfg = ctx.cfg.milo.quant;
    let stats = entries
        .par_iter()
        .zip(tensors.par_iter())
        .map(|((layer, m), w)| rank_policy::matrix_stats(*layer, m, w, freqs.get(&m.name).copied(), &qcfg))
        .collect::<Result<Vec<_>>>()?;
    let layer_frequencies = rank_policy::expert_frequencies(&expert_stats)?;
    let analysis = Analysis {
        matrices: &stats,
        layer_frequencies: &layer_frequencies,
        tag_means: tag_means(&stats),
    };
    create_dir(&ctx.out)?;
    tensor_store::write_json(&ctx.path(ANALYSIS_FILE), &analysis)?;
    for (tag, t) in &analysis.tag_means {
        eprintln!(
            "{tag}: {} matrices, mean kurtosis {:.3}, mean rel error {:.4}",
            t.count, t.kurtosis, t.rel_quant_error
        );
    }
    Ok(())
}

pub fn plan_ranks(ctx: &Ctx, policy: Option<&str>) -> Result<()> {
    let policy: PolicySpec = policy.unwrap_or(&ctx.cfg.policy).parse()?;
    let manifest = load_manifest(ctx)?;
    let analysis: AnalysisIn = read_artifact(&ctx.path(ANALYSIS_FILE))?;
    let plan = rank_policy::plan_ranks(&manifest, &analysis.matrices, &policy, &ctx.cfg.memory)?;
    tensor_store::write_json(&ctx.path(PLAN_FILE), &plan)?;
    eprintln!("{}: {} bytes, average sparse rank {:.2}", plan.policy, plan.memory_bytes, plan.average_sparse_rank);
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Summary {
    pub policy: String,
    pub matrices: usize,
    /// Sum of per-matrix final errors.
    pub total_error: f64,
    /// Sum of squared per-matrix final errors.
    pub total_sq_error: f64,
    pub memory_bytes: u64,
    pub mean_rel_error: f64,
    pub tag_mean_rel_error: BTreeMap<String, f64>,
    pub compensators_written: usize,
}

#[derive(Debug, Serialize)]
struct Timing {
    quantize_seconds: f64,
}

fn remove_stale(path: &Path) -> Result<()> {
    match std::fs::remove_file(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(MiloError::Config(format!("cannot remove {}: {e}", path.display()))),
    }
}

pub fn quantize(ctx: &Ctx) -> Result<()> {
    let manifest = load_manifest(ctx)?;
    let plan: RankPlan = read_artifact(&ctx.path(PLAN_FILE))?;
    plan.validate_against(&manifest)?;
    let tensors = synth::load_tensors(&manifest, &ctx.model_dir)?;
    create_dir(&ctx.out.join("compressed"))?;
    create_dir(&ctx.out.join("reports"))?;

    let start = Instant::now();
    let entries: Vec<_> = manifest.matrices().map(|(_, m)| m).collect();
    let reports = entries
        .par_iter()
        .zip(tensors.par_iter())
        .map(|(m, w)| -> Result<(RunReport, StructureTag)> {
            let rank = plan
                .rank_of(&m.name)
                .ok_or_else(|| MiloError::Plan(format!("plan has no rank for {}", m.name)))?;
            let cfg = MiloConfig { rank, ..ctx.cfg.milo };
            let with_name = |e: MiloError| prefix_error(e, &m.name);
            let result = milo_compress(w, &cfg).map_err(with_name)?;
            quant::save_quantized(&result.quantized, &m.name, &ctx.compressed(&m.name, "q")).map_err(with_name)?;
            let (u_path, v_path) = (ctx.compressed(&m.name, "U"), ctx.compressed(&m.name, "V"));
            if rank > 0 {
                lowrank::save_compensator(&result.compensator, &m.name, &u_path, &v_path).map_err(with_name)?;
            } else {
                remove_stale(&u_path)?;
                remove_stale(&v_path)?;
            }
            let report = RunReport::new(&m.name, w, &result);
            tensor_store::write_json(&ctx.report_path(&m.name), &report)?;
            Ok((report, m.structure_tag))
        })
        .collect::<Result<Vec<_>>>()?;
    let seconds = start.elapsed().as_secs_f64();

    let memory_bytes = tensor_store::quantized_memory_bytes(
        &manifest,
        &plan,
        ctx.cfg.memory.bits,
        ctx.cfg.memory.group_size,
        ctx.cfg.memory.comp_bits,
    )?;
    if memory_bytes != plan.memory_bytes {
        return Err(MiloError::Plan(format!(
            "plan records {} bytes but the memory model gives {memory_bytes}",
            plan.memory_bytes
        )));
    }
    let mut by_tag: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (r, tag) in &reports {
        let e = by_tag.entry(tag.as_str().to_string()).or_default();
        e.0 += r.final_rel_error;
        e.1 += 1;
    }
    let finals: Vec<f64> = reports.iter().map(|(r, _)| *r.error_trace.last().unwrap_or(&0.0)).collect();
    let summary = Summary {
        policy: plan.policy.clone(),
        matrices: reports.len(),
        total_error: finals.iter().sum(),
        total_sq_error: finals.iter().map(|e| e * e).sum(),
        memory_bytes,
        mean_rel_error: reports.iter().map(|(r, _)| r.final_rel_error).sum::<f64>() / reports.len() as f64,
        tag_mean_rel_error: by_tag.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
        compensators_written: reports.iter().filter(|(r, _)| r.rank > 0).count(),
    };
    tensor_store::write_json(&ctx.path(SUMMARY_FILE), &summary)?;
    tensor_store::write_json(&ctx.path(TIMING_FILE), &Timing { quantize_seconds: seconds })?;
    eprintln!(
        "{}: total error {:.6}, mean rel error {:.5}, {} bytes, {seconds:.1}s",
        summary.policy, summary.total_error, summary.mean_rel_error, summary.memory_bytes
    );
    Ok(())
}

fn prefix_error(e: MiloError, name: &str) -> MiloError {
    let tag = |s: String| format!("{name}: {s}");
    match e {
        MiloError::Format(s) => MiloError::Format(tag(s)),
        MiloError::Data(s) => MiloError::Data(tag(s)),
        MiloError::Shape(s) => MiloError::Shape(tag(s)),
        MiloError::Numeric(s) => MiloError::Numeric(tag(s)),
        MiloError::Rank(s) => MiloError::Rank(tag(s)),
        MiloError::Range(s) => MiloError::Range(tag(s)),
        MiloError::Stat(s) => MiloError::Stat(tag(s)),
        MiloError::Plan(s) => MiloError::Plan(tag(s)),
        MiloError::Config(s) => MiloError::Config(tag(s)),
        io @ MiloError::Io { .. } => io,
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PackEntry {
    pub name: String,
    pub codes: usize,
    pub words: usize,
    pub code_bits: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PackIndex {
    pub layout: String,
    pub split: bool,
    pub entries: Vec<PackEntry>,
    /// Fast dequantization matched the naive path bit for bit on every matrix.
    pub fast_path_exact: bool,
}

pub fn pack(ctx: &Ctx) -> Result<()> {
    let manifest = load_manifest(ctx)?;
    let names: Vec<&str> = manifest.matrices().map(|(_, m)| m.name.as_str()).collect();
    for name in &names {
        require(&ctx.compressed(name, "q"))?;
    }
    create_dir(&ctx.out.join("packed"))?;
    let pcfg = &ctx.cfg.pack;
    let entries = names
        .par_iter()
        .map(|name| -> Result<PackEntry> {
            let (_, q) = quant::load_quantized(&ctx.compressed(name, "q"))?;
            let mut p = PackedInt3Matrix::from_quantized(&q, pcfg.layout).map_err(|e| prefix_error(e, name))?;
            let mode = p.mode();
            let fast = pack::dequant_packed_f16(&p, mode)?;
            let naive = pack::dequant_naive_f16(&p, mode)?;
            if fast.iter().zip(&naive).any(|(a, b)| a.to_bits() != b.to_bits()) {
                return Err(MiloError::Numeric(format!("{name}: fast dequantization differs from naive")));
            }
            if pcfg.split {
                p = p.into_split();
            }
            pack::save_packed(&p, name, &ctx.packed(name))?;
            Ok(PackEntry {
                name: name.to_string(),
                codes: q.codes.len(),
                words: p.word_count(),
                code_bits: 32 * p.word_count(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let index = PackIndex {
        layout: pcfg.layout.as_str().to_string(),
        split: pcfg.split,
        entries,
        fast_path_exact: true,
    };
    tensor_store::write_json(&ctx.path(PACK_INDEX_FILE), &index)?;
    eprintln!("packed {} matrices", index.entries.len());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GemmCheckOutput {
    pub functional: Vec<serde_json::Value>,
    pub error_handling: Vec<serde_json::Value>,
    pub boundary: Vec<serde_json::Value>,
    pub pass: bool,
}

fn to_values<T: Serialize>(items: &[T]) -> Vec<serde_json::Value> {
    items
        .iter()
        .map(|x| serde_json::to_value(x).expect("plain data serializes"))
        .collect()
}

/// Returns whether every suite passed.
pub fn gemm_check(ctx: &Ctx) -> Result<bool> {
    let g = &ctx.cfg.gemm;
    let seed = g.seeds[0];
    let functional = g
        .shapes
        .iter()
        .map(|&shape| gemm::gemm_check(shape, &g.tile_shapes, &g.modes, &g.seeds, g.max_batch, &g.direct_batches))
        .collect::<Result<Vec<GemmCheckReport>>>()?;
    let errors: Vec<SuiteCase> = gemm::error_suite(seed)?;
    let boundary: Vec<SuiteCase> = gemm::boundary_suite(seed)?;
    let pass = functional.iter().all(|r| r.pass) && errors.iter().all(|c| c.pass) && boundary.iter().all(|c| c.pass);
    let out = GemmCheckOutput {
        functional: to_values(&functional),
        error_handling: to_values(&errors),
        boundary: to_values(&boundary),
        pass,
    };
    create_dir(&ctx.out)?;
    tensor_store::write_json(&ctx.path(GEMM_FILE), &out)?;
    for r in &functional {
        eprintln!(
            "{}x{}: max rel error {:.3e} {}",
            r.shape.0,
            r.shape.1,
            r.max_rel_error,
            if r.pass { "pass" } else { "FAIL" }
        );
    }
    for c in errors.iter().chain(&boundary).filter(|c| !c.pass) {
        eprintln!("{}: FAIL ({})", c.name, c.detail);
    }
    Ok(pass)
}

#[derive(Debug, Serialize)]
struct ConvergenceRow {
    name: String,
    rank: usize,
    iterations_run: usize,
    stop_reason: milo::StopReason,
    final_rel_error: f64,
}

#[derive(Debug, Serialize)]
struct Report {
    tag_means: BTreeMap<String, TagMeans>,
    plan: RankPlan,
    summary: Summary,
    convergence: Vec<ConvergenceRow>,
    pack: Option<PackIndex>,
    gemm_check: Option<GemmCheckOutput>,
}

fn optional_artifact<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Option<T>> {
    if path.exists() {
        tensor_store::read_json(path).map(Some)
    } else {
        Ok(None)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    tensor_store::write_atomic(path, text.as_bytes())
}

pub fn report(ctx: &Ctx) -> Result<()> {
    let manifest = load_manifest(ctx)?;
    let analysis: AnalysisIn = read_artifact(&ctx.path(ANALYSIS_FILE))?;
    let plan: RankPlan = read_artifact(&ctx.path(PLAN_FILE))?;
    let summary: Summary = read_artifact(&ctx.path(SUMMARY_FILE))?;
    let runs = manifest
        .matrices()
        .map(|(_, m)| read_artifact::<RunReport>(&ctx.report_path(&m.name)))
        .collect::<Result<Vec<_>>>()?;

    let mut scatter = String::from("name,layer,structure_tag,kurtosis,rel_quant_error,residual_rank,expert_frequency\n");
    for s in &analysis.matrices {
        let freq = s.expert_frequency.map(|f| f.to_string()).unwrap_or_default();
        scatter.push_str(&format!(
            "{},{},{},{},{},{},{freq}\n",
            s.name,
            s.layer_index,
            s.structure_tag.as_str(),
            s.kurtosis,
            s.rel_quant_error,
            s.residual_rank
        ));
    }
    let mut trace = String::from("name,iteration,error\n");
    for r in &runs {
        for (t, e) in r.error_trace.iter().enumerate() {
            trace.push_str(&format!("{},{},{e}\n", r.name, t + 1));
        }
    }
    let report = Report {
        tag_means: analysis.tag_means,
        plan,
        summary,
        convergence: runs
            .iter()
            .map(|r| ConvergenceRow {
                name: r.name.clone(),
                rank: r.rank,
                iterations_run: r.iterations_run,
                stop_reason: r.stop_reason,
                final_rel_error: r.final_rel_error,
            })
            .collect(),
        pack: optional_artifact(&ctx.path(PACK_INDEX_FILE))?,
        gemm_check: optional_artifact(&ctx.path(GEMM_FILE))?,
    };
    tensor_store::write_json(&ctx.path(REPORT_FILE), &report)?;
    write_text(&ctx.path(SCATTER_CSV), &scatter)?;
    write_text(&ctx.path(CONVERGENCE_CSV), &trace)?;
    eprintln!("wrote {}", ctx.path(REPORT_FILE).display());
    Ok(())
}
