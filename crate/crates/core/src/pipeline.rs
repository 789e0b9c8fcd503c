//! File-based stages behind the command-line tool.
//!
//! Layout under the output directory:
//!
//! ```text
//! seed-<s>/graphs/{source_<k>.graph, target.graph, suite.json}
//! seed-<s>/orbits/{source_<k>, target}.{gdv, sig}
//! seed-<s>/<variant>/{checkpoint.txt, history.csv, stages.log, topology.trace,
//!                     predictions.csv, metrics.csv, metrics.json}
//! ablation/{runs.csv, table.csv}
//! tasks/{tasks.csv, summary.json}
//! ```
//!
//! Every command also writes a `manifest-<command>.json` next to its outputs.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::csd::CsdTopology;
use crate::domain::DomainSet;
use crate::error::{Error, Result};
use crate::eval::{evaluate, Prediction};
use crate::experiment::{
    ablate_sets, ablation_runs_csv, ablation_table_csv, run_task_suite, seeded, summarize_ablation, Variant,
};
use crate::graph::Graph;
use crate::graphlets::{count_orbits, ego_signatures, graph_hash, read_signature_cache, write_signature_cache, GdvTable};
use crate::nn::ModelParams;
use crate::synthgen::generate_domain;
use crate::train::{train_observed, CsdMode, Precomputed, TrainObserver};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
    pub skipped: bool,
}

/// Record of one command invocation. Timings vary between runs; everything
/// else is a function of config and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub version: String,
    pub seed: Option<u64>,
    pub stages: Vec<StageTiming>,
    /// Output files relative to the output directory.
    pub artifacts: Vec<PathBuf>,
}

impl RunManifest {
    fn new(command: &str, cfg: &ExperimentConfig, seed: Option<u64>) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            config_hash: cfg.hash(),
            version: VERSION.to_string(),
            seed,
            stages: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<(T, bool)>) -> Result<T> {
        let t0 = Instant::now();
        let (v, skipped) = f()?;
        self.stages.push(StageTiming {
            stage: stage.to_string(),
            seconds: t0.elapsed().as_secs_f64(),
            skipped,
        });
        Ok(v)
    }

    fn write(mut self, layout: &Layout, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("manifest-{}.json", self.command));
        self.artifacts.push(layout.relative(&path));
        self.artifacts.sort();
        self.artifacts.dedup();
        write_file(&path, serde_json::to_string_pretty(&self).expect("manifest serializes"))?;
        Ok(path)
    }
}

/// Paths of every artifact for one output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Layout {
        Layout { root: root.into() }
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed-{seed}"))
    }

    pub fn graphs_dir(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("graphs")
    }

    pub fn orbits_dir(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("orbits")
    }

    pub fn variant_dir(&self, seed: u64, variant: Variant) -> PathBuf {
        self.seed_dir(seed).join(variant.slug())
    }

    pub fn ablation_dir(&self) -> PathBuf {
        self.root.join("ablation")
    }

    pub fn tasks_dir(&self) -> PathBuf {
        self.root.join("tasks")
    }

    fn relative(&self, path: &Path) -> PathBuf {
        path.strip_prefix(&self.root).unwrap_or(path).to_path_buf()
    }
}

fn graph_names(num_sources: usize) -> Vec<String> {
    (0..num_sources)
        .map(|k| format!("source_{k}"))
        .chain(std::iter::once("target".to_string()))
        .collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn file_hash(path: &Path) -> Option<String> {
    fs::read(path).ok().map(|b| hex::encode(Sha256::digest(&b)))
}

/// Metadata written next to the generated graphs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteMeta {
    /// Hash of the seeded suite specification the graphs came from.
    pub suite_hash: String,
    pub seed: u64,
    pub num_sources: usize,
    /// Source shifts in file order.
    pub shifts: Vec<f64>,
    /// Content hash of each graph file, sources then target.
    pub graph_hashes: Vec<String>,
}

fn read_meta(graphs: &Path) -> Result<SuiteMeta> {
    let path = graphs.join("suite.json");
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::missing("generated graphs (run `generate` first)", path))
        }
        Err(e) => return Err(Error::io(&path, e)),
    };
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        reason: e.to_string(),
    })
}

fn generate_stage(cfg: &ExperimentConfig, layout: &Layout, seed: u64) -> Result<(Vec<PathBuf>, bool)> {
    let (suite, _) = seeded(&cfg.suite, &cfg.train, seed);
    let suite_hash = hex::encode(Sha256::digest(toml::to_string(&suite).expect("suite serializes").as_bytes()));
    let dir = layout.graphs_dir(seed);
    let names = graph_names(suite.num_sources());
    let mut paths: Vec<PathBuf> = names.iter().map(|n| dir.join(format!("{n}.graph"))).collect();
    paths.push(dir.join("suite.json"));

    if let Ok(meta) = read_meta(&dir) {
        let current: Vec<Option<String>> = paths[..names.len()].iter().map(|p| file_hash(p)).collect();
        if meta.suite_hash == suite_hash && current.iter().zip(&meta.graph_hashes).all(|(c, h)| c.as_ref() == Some(h)) {
            log::info!("generate seed {seed}: graphs up to date, skipped");
            return Ok((paths, true));
        }
    }

    create_dir(&dir)?;
    let (sources, target, seeds) = suite.domain_specs()?;
    let mut graphs = Vec::with_capacity(names.len());
    for (spec, &s) in sources.iter().chain(std::iter::once(&target)).zip(&seeds) {
        graphs.push(generate_domain(spec, s)?);
    }
    let mut hashes = Vec::with_capacity(graphs.len());
    for (g, path) in graphs.iter().zip(&paths) {
        g.save(path)?;
        hashes.push(file_hash(path).expect("file just written"));
    }
    let mut shifts = suite.shifts.clone();
    shifts.sort_by(f64::total_cmp);
    let meta = SuiteMeta {
        suite_hash,
        seed,
        num_sources: suite.num_sources(),
        shifts,
        graph_hashes: hashes,
    };
    write_file(
        paths.last().expect("meta path"),
        serde_json::to_string_pretty(&meta).expect("meta serializes"),
    )?;
    log::info!("generate seed {seed}: wrote {} graphs to {}", graphs.len(), dir.display());
    Ok((paths, false))
}

/// Writes the source and target graphs plus `suite.json` for one seed.
pub fn cmd_generate(cfg: &ExperimentConfig, layout: &Layout, seed: u64) -> Result<RunManifest> {
    let mut manifest = RunManifest::new("generate", cfg, Some(seed));
    let paths = manifest.time("generate", || generate_stage(cfg, layout, seed))?;
    manifest.artifacts = paths.iter().map(|p| layout.relative(p)).collect();
    let dir = layout.seed_dir(seed);
    manifest.clone().write(layout, &dir)?;
    Ok(manifest)
}

/// Loads the generated graphs of one seed. Target labels are withheld by
/// the returned set.
pub fn load_domain_set(layout: &Layout, seed: u64) -> Result<DomainSet> {
    let dir = layout.graphs_dir(seed);
    let meta = read_meta(&dir)?;
    let names = graph_names(meta.num_sources);
    let mut graphs = Vec::with_capacity(names.len());
    for (k, n) in names.iter().enumerate() {
        graphs.push(Graph::load(&dir.join(format!("{n}.graph")), k)?);
    }
    let target = graphs.pop().expect("target graph");
    DomainSet::new(graphs, target)
}

/// Outcome of probing one graph's orbit cache.
enum CacheState {
    Hit,
    Stale,
    Corrupt(String),
}

fn probe_orbit_cache(gdv_path: &Path, sig_path: &Path, hash: &str, num_nodes: usize) -> CacheState {
    if !gdv_path.exists() || !sig_path.exists() {
        return CacheState::Stale;
    }
    match read_signature_cache(sig_path, hash, num_nodes) {
        Ok(None) => return CacheState::Stale,
        Err(e) => return CacheState::Corrupt(e.to_string()),
        Ok(Some(_)) => {}
    }
    match fs::read_to_string(gdv_path).map_err(|e| e.to_string()).and_then(|t| {
        GdvTable::parse(&t).map_err(|e| e.to_string())
    }) {
        Ok(t) if t.num_nodes() == num_nodes => CacheState::Hit,
        Ok(t) => CacheState::Corrupt(format!("{} rows for {num_nodes} nodes", t.num_nodes())),
        Err(e) => CacheState::Corrupt(e),
    }
}

fn orbits_stage(layout: &Layout, seed: u64) -> Result<(Vec<PathBuf>, bool)> {
    let graphs_dir = layout.graphs_dir(seed);
    let meta = read_meta(&graphs_dir)?;
    let dir = layout.orbits_dir(seed);
    create_dir(&dir)?;
    let mut paths = Vec::new();
    let mut all_hit = true;
    for (k, name) in graph_names(meta.num_sources).iter().enumerate() {
        let graph = Graph::load(&graphs_dir.join(format!("{name}.graph")), k)?;
        let hash = graph_hash(&graph);
        let gdv_path = dir.join(format!("{name}.gdv"));
        let sig_path = dir.join(format!("{name}.sig"));
        match probe_orbit_cache(&gdv_path, &sig_path, &hash, graph.num_nodes()) {
            CacheState::Hit => {
                log::info!("orbits seed {seed}: cache hit for {name}, skipped");
            }
            state => {
                if let CacheState::Corrupt(why) = state {
                    log::warn!("orbits seed {seed}: cache for {name} is corrupt ({why}); recomputing");
                }
                all_hit = false;
                let table = count_orbits(&graph);
                write_file(&gdv_path, table.to_text())?;
                write_signature_cache(&sig_path, &hash, &ego_signatures(&graph))?;
                log::info!("orbits seed {seed}: computed {name}");
            }
        }
        paths.push(gdv_path);
        paths.push(sig_path);
    }
    Ok((paths, all_hit))
}

/// Counts orbits and ego signatures of every generated graph of one seed,
/// reusing caches whose graph hash still matches.
pub fn cmd_orbits(cfg: &ExperimentConfig, layout: &Layout, seed: u64) -> Result<RunManifest> {
    let mut manifest = RunManifest::new("orbits", cfg, Some(seed));
    let paths = manifest.time("orbits", || orbits_stage(layout, seed))?;
    manifest.artifacts = paths.iter().map(|p| layout.relative(p)).collect();
    manifest.clone().write(layout, &layout.seed_dir(seed))?;
    Ok(manifest)
}

/// Reads the orbit caches of one seed for the given domain set.
pub fn load_precomputed(layout: &Layout, seed: u64, ds: &DomainSet) -> Result<Precomputed> {
    let dir = layout.orbits_dir(seed);
    let names = graph_names(ds.num_sources());
    let graphs: Vec<&Graph> = ds.sources().iter().chain(std::iter::once(ds.target())).collect();
    let mut tables = Vec::with_capacity(graphs.len());
    let mut signatures = Vec::with_capacity(ds.num_sources());
    for (name, g) in names.iter().zip(&graphs) {
        let gdv_path = dir.join(format!("{name}.gdv"));
        let sig_path = dir.join(format!("{name}.sig"));
        if !gdv_path.exists() || !sig_path.exists() {
            return Err(Error::missing("orbit cache (run `orbits` first)", gdv_path));
        }
        let text = fs::read_to_string(&gdv_path).map_err(|e| Error::io(&gdv_path, e))?;
        let table = GdvTable::parse(&text)?;
        if table.num_nodes() != g.num_nodes() {
            return Err(Error::Precondition(format!(
                "orbit table {} does not match its graph; rerun `orbits`",
                gdv_path.display()
            )));
        }
        tables.push(table);
        if signatures.len() < ds.num_sources() {
            let sigs = read_signature_cache(&sig_path, &graph_hash(g), g.num_nodes())?.ok_or_else(|| {
                Error::Precondition(format!("signature cache {} is stale; rerun `orbits`", sig_path.display()))
            })?;
            signatures.push(sigs);
        }
    }
    let target = tables.pop().expect("target table");
    Ok(Precomputed::from_tables(&tables, &target, signatures))
}

struct StageObserver {
    topologies: usize,
    edges: usize,
    trace: Option<(PathBuf, fs::File)>,
    error: Option<Error>,
}

impl TrainObserver for StageObserver {
    fn on_topology(&mut self, epoch: usize, step: usize, topology: &CsdTopology) {
        self.topologies += 1;
        self.edges += topology.num_edges();
        if let Some((path, file)) = &mut self.trace {
            let res = writeln!(file, "# epoch {epoch} step {step}").and_then(|_| topology.write_trace(file));
            if let Err(e) = res {
                if self.error.is_none() {
                    self.error = Some(Error::io(path.clone(), e));
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainOptions {
    pub seed: u64,
    pub variant: Variant,
    pub trace_topology: bool,
}

/// Trains one variant on one seed's graphs and writes the checkpoint,
/// history and a stage log.
pub fn cmd_train(cfg: &ExperimentConfig, layout: &Layout, opts: TrainOptions) -> Result<RunManifest> {
    let TrainOptions {
        seed,
        variant,
        trace_topology,
    } = opts;
    let mut manifest = RunManifest::new("train", cfg, Some(seed));
    let (_, train_cfg) = seeded(&cfg.suite, &cfg.train, seed);
    let vcfg = variant.configure(&train_cfg);
    let mut log_lines = vec![format!("variant {variant}")];

    let (ds, pre) = manifest.time("load", || {
        let ds = load_domain_set(layout, seed)?;
        let pre = if variant.needs_signatures() {
            load_precomputed(layout, seed, &ds)?
        } else {
            Precomputed::default()
        };
        Ok(((ds, pre), false))
    })?;
    log_lines.push(format!("load: {} sources, target {} nodes", ds.num_sources(), ds.target().num_nodes()));
    log_lines.push(match vcfg.csd {
        CsdMode::Off => "topology: disabled".to_string(),
        CsdMode::Unweighted => format!("topology: top-{} without edge weights", vcfg.top_k),
        CsdMode::Weighted => format!("topology: top-{} with orbit edge weights", vcfg.top_k),
    });
    log_lines.push(format!("selective weighting: {}", if vcfg.selective { "on" } else { "off" }));

    let dir = layout.variant_dir(seed, variant);
    create_dir(&dir)?;
    let trace_path = dir.join("topology.trace");
    let trace = if trace_topology {
        let f = fs::File::create(&trace_path).map_err(|e| Error::io(&trace_path, e))?;
        Some((trace_path.clone(), f))
    } else {
        None
    };
    let mut obs = StageObserver {
        topologies: 0,
        edges: 0,
        trace,
        error: None,
    };
    let (params, history) = manifest.time("train", || Ok((train_observed(&ds, &vcfg, &pre, &mut obs)?, false)))?;
    if let Some(e) = obs.error.take() {
        return Err(e);
    }
    log_lines.push(format!("train: {} epochs", history.len()));
    log_lines.push(format!("topology: built {} batches, {} edges", obs.topologies, obs.edges));
    if let Some(w) = history.final_weights() {
        let ws: Vec<String> = w.combined.iter().map(|x| format!("{x:.6}")).collect();
        log_lines.push(format!("final source weights: {}", ws.join(" ")));
    }

    let ckpt = dir.join("checkpoint.txt");
    params.save(&ckpt)?;
    let hist = dir.join("history.csv");
    write_file(&hist, history.to_csv())?;
    let stages = dir.join("stages.log");
    log_lines.push(String::new());
    write_file(&stages, log_lines.join("\n"))?;
    manifest.artifacts = vec![ckpt, hist, stages].iter().map(|p| layout.relative(p)).collect();
    if trace_topology {
        manifest.artifacts.push(layout.relative(&trace_path));
    }
    manifest.clone().write(layout, &dir)?;
    log::info!("train seed {seed} {variant}: {}", layout.relative(&dir).display());
    Ok(manifest)
}

fn predictions_csv(preds: &[Prediction]) -> String {
    let mut out = String::from("node,probability,heterophily,refined,label\n");
    for (i, p) in preds.iter().enumerate() {
        out.push_str(&format!(
            "{i},{},{},{},{}\n",
            p.probability,
            p.heterophily,
            p.refined,
            p.label.index()
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub variant: Variant,
    pub seed: u64,
    pub num_sources: usize,
    pub lambda: f64,
    pub report: crate::eval::MetricReport,
}

/// Scores the target with a trained checkpoint.
pub fn cmd_evaluate(cfg: &ExperimentConfig, layout: &Layout, seed: u64, variant: Variant) -> Result<RunManifest> {
    let mut manifest = RunManifest::new("evaluate", cfg, Some(seed));
    let dir = layout.variant_dir(seed, variant);
    let ckpt = dir.join("checkpoint.txt");
    if !ckpt.exists() {
        return Err(Error::missing("checkpoint", ckpt));
    }
    let params = ModelParams::load(&ckpt)?;
    let ds = load_domain_set(layout, seed)?;
    let lambda = variant.lambda(&cfg.train);
    let (preds, report) = manifest.time("evaluate", || {
        Ok((evaluate(&ds, &params, lambda, cfg.experiment.score_scaling)?, false))
    })?;
    let m = ds.num_sources();
    let pred_path = dir.join("predictions.csv");
    write_file(&pred_path, predictions_csv(&preds))?;
    let csv_path = dir.join("metrics.csv");
    write_file(
        &csv_path,
        format!("task,seed,m,mode,f1,auc\nall-{m},{seed},{m},{variant},{},{}\n", report.f1, report.auc),
    )?;
    let json_path = dir.join("metrics.json");
    let summary = EvaluationSummary {
        variant,
        seed,
        num_sources: m,
        lambda,
        report: report.clone(),
    };
    write_file(&json_path, serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    log::info!("evaluate seed {seed} {variant}: f1 {:.4} auc {:.4}", report.f1, report.auc);
    manifest.artifacts = [pred_path, csv_path, json_path].iter().map(|p| layout.relative(p)).collect();
    manifest.clone().write(layout, &dir)?;
    Ok(manifest)
}

/// Runs the whole ladder over the configured seeds, reusing generated graphs
/// and orbit caches.
pub fn cmd_ablate(cfg: &ExperimentConfig, layout: &Layout) -> Result<RunManifest> {
    let mut manifest = RunManifest::new("ablate", cfg, None);
    let seeds = cfg.experiment.seeds.clone();
    let sets = manifest.time("prepare", || {
        let mut sets = Vec::with_capacity(seeds.len());
        let mut skipped = true;
        for &seed in &seeds {
            let (_, g) = generate_stage(cfg, layout, seed)?;
            let (_, o) = orbits_stage(layout, seed)?;
            skipped &= g && o;
            let ds = load_domain_set(layout, seed)?;
            let pre = load_precomputed(layout, seed, &ds)?;
            sets.push((seed, ds, pre));
        }
        Ok((sets, skipped))
    })?;
    let rows = manifest.time("ladder", || {
        Ok((
            ablate_sets(&sets, &cfg.train, &Variant::LADDER, cfg.experiment.score_scaling)?,
            false,
        ))
    })?;
    let dir = layout.ablation_dir();
    create_dir(&dir)?;
    let runs = dir.join("runs.csv");
    write_file(&runs, ablation_runs_csv(&rows))?;
    let table = dir.join("table.csv");
    write_file(&table, ablation_table_csv(&summarize_ablation(&rows)))?;
    manifest.artifacts = [runs, table].iter().map(|p| layout.relative(p)).collect();
    manifest.clone().write(layout, &dir)?;
    Ok(manifest)
}

/// High-m / Low-m transfer for the base model and the configured variant.
pub fn cmd_tasks(cfg: &ExperimentConfig, layout: &Layout) -> Result<RunManifest> {
    let mut manifest = RunManifest::new("tasks", cfg, None);
    let mut variants = vec![Variant::Base, cfg.experiment.variant];
    variants.dedup();
    let report = manifest.time("tasks", || {
        Ok((
            run_task_suite(
                &cfg.suite,
                &cfg.train,
                cfg.experiment.task_m,
                &cfg.experiment.seeds,
                &variants,
                cfg.experiment.score_scaling,
            )?,
            false,
        ))
    })?;
    let dir = layout.tasks_dir();
    create_dir(&dir)?;
    let csv = dir.join("tasks.csv");
    write_file(&csv, report.to_csv())?;
    let json = dir.join("summary.json");
    write_file(&json, report.summary_json())?;
    manifest.artifacts = [csv, json].iter().map(|p| layout.relative(p)).collect();
    manifest.clone().write(layout, &dir)?;
    Ok(manifest)
}
