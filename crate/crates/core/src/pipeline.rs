//! End-to-end commands: generate graphs, simulate landscapes, screen,
//! evaluate predictions, aggregate histograms and render plots.
//!
//! Every output byte is a function of the configuration and master seed,
//! except the timestamps and timings in run reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::SimParams;
use crate::fixed_point::{find_stable_sync_state, FixedPoint, FixedPointError, DEFAULT_TOL};
use crate::graph::{assign_power, generate_topology, Graph, GrowthParams};
use crate::io::{
    export_pgm, export_training_labels, make_splits, overlay_image, read_graph, read_heatmaps_csv, read_json,
    read_landscapes, write_critical_cells_csv, write_graph, write_histogram_csv, write_json, write_labels_csv,
    write_landscapes, DatasetError, DatasetManifest, FillPolicy, LandscapeFile, TrainingLabels, MANIFEST_VERSION,
    MIN_GRAPHS_FOR_SPLIT,
};
use crate::landscape::{
    bin_outcomes, default_frequency_edges, final_frequency_histogram, run_node_trials, snbs_from_landscape,
    FrequencyHistogram, LandscapeError, PerturbationBox,
};
use crate::metrics::{iou_topk, r2, relaxed_containment, ssim, weighted_mse_and_bound, MetricError, MetricReport};
use crate::screening::{exceedance_from_heatmap, exceeding_ratio, rank_critical_cells, CriticalCell, ExceedanceGrid};
use crate::seed::{derive_seed, stream};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("graph {graph}: no acceptable graph after {attempts} attempts: {last}")]
    Generation { graph: u64, attempts: usize, last: String },
    #[error("graph {graph}: {source}")]
    FixedPoint { graph: u64, source: FixedPointError },
    #[error("graph {graph} node {node}: {source}")]
    Landscape {
        graph: u64,
        node: usize,
        source: LandscapeError,
    },
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => EXIT_CONFIG,
            PipelineError::Metric(MetricError::ShapeMismatch(_)) => EXIT_CONFIG,
            PipelineError::Generation { .. }
            | PipelineError::FixedPoint { .. }
            | PipelineError::Landscape { .. }
            | PipelineError::Metric(_) => EXIT_NUMERICAL,
            PipelineError::Dataset(_) => EXIT_IO,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "config",
            PipelineError::Generation { .. } => "generation",
            PipelineError::FixedPoint { .. } => "fixed_point",
            PipelineError::Landscape { .. } => "landscape",
            PipelineError::Metric(_) => "metric",
            PipelineError::Dataset(_) => "io",
        }
    }
}

impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        PipelineError::Dataset(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScreenConfig {
    pub threshold: f64,
    pub top_k: usize,
    /// Size of the predicted list searched by the relaxed containment score.
    pub relaxed_m: usize,
}

impl Default for ScreenConfig {
    fn default() -> Self {
        Self {
            threshold: crate::screening::DEFAULT_THRESHOLD,
            top_k: crate::screening::DEFAULT_TOP_K,
            relaxed_m: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub graphs: usize,
    pub growth: GrowthParams,
    pub sim: SimParams,
    pub perturbation_box: PerturbationBox,
    pub n_trials: usize,
    pub grid_res: usize,
    pub jobs: usize,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub fill_policy: FillPolicy,
    pub screen: ScreenConfig,
    /// Fresh draws allowed per graph when a topology has no stable operating point.
    pub max_regenerations: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            graphs: 10_000,
            growth: GrowthParams::default(),
            sim: SimParams::default(),
            perturbation_box: PerturbationBox::default(),
            n_trials: 10_000,
            grid_res: 20,
            jobs: std::thread::available_parallelism().map_or(1, |n| n.get()),
            master_seed: 0,
            output_dir: PathBuf::from("out"),
            fill_policy: FillPolicy::default(),
            screen: ScreenConfig::default(),
            max_regenerations: 100,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |msg: String| Err(PipelineError::Config(msg));
        if self.jobs == 0 {
            return bad("jobs must be at least 1".into());
        }
        if self.graphs == 0 {
            return bad("graphs must be positive".into());
        }
        if self.n_trials == 0 {
            return bad("n_trials must be positive".into());
        }
        if self.grid_res == 0 {
            return bad("grid_res must be positive".into());
        }
        let b = &self.perturbation_box;
        if !(b.phi_range.0 < b.phi_range.1 && b.freq_range.0 < b.freq_range.1) {
            return bad("perturbation box ranges must be increasing".into());
        }
        if !(0.0..=1.0).contains(&self.screen.threshold) {
            return bad("screening threshold must lie in [0, 1]".into());
        }
        self.growth.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.sim.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }

    fn pool(&self) -> Result<rayon::ThreadPool, PipelineError> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| PipelineError::Config(format!("cannot start worker pool: {e}")))
    }
}

/// Output directory layout.
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn graph(&self, id: u64) -> PathBuf {
        self.root.join("graphs").join(format!("graph_{id:05}.json"))
    }

    pub fn landscapes(&self, id: u64) -> PathBuf {
        self.root.join("landscapes").join(format!("graph_{id:05}.bin"))
    }

    pub fn labels(&self, id: u64) -> PathBuf {
        self.root.join("labels").join(format!("graph_{id:05}.csv"))
    }

    pub fn histogram(&self, id: u64) -> PathBuf {
        self.root.join("histograms").join(format!("graph_{id:05}.json"))
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }

    fn ensure(&self, dirs: &[&str]) -> Result<(), PipelineError> {
        for d in dirs {
            fs::create_dir_all(self.root.join(d))?;
        }
        Ok(())
    }
}

/// Predictions for graph `id` inside a predictions directory.
pub fn prediction_path(dir: &Path, id: u64) -> PathBuf {
    dir.join(format!("graph_{id:05}.csv"))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunTiming {
    pub started_unix_s: f64,
    pub finished_unix_s: f64,
    pub wall_time_s: f64,
    pub cpu_time_s: f64,
}

struct Stopwatch {
    started: f64,
    wall: Instant,
    cpu: f64,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// User plus system CPU time of this process, across all threads.
pub fn process_cpu_seconds() -> f64 {
    let mut usage = std::mem::MaybeUninit::<libc::rusage>::zeroed();
    // SAFETY: getrusage only writes into the provided struct.
    let rc = unsafe { libc::getrusage(libc::RUSAGE_SELF, usage.as_mut_ptr()) };
    if rc != 0 {
        return 0.0;
    }
    // SAFETY: initialized by the successful call above.
    let usage = unsafe { usage.assume_init() };
    let secs = |t: libc::timeval| t.tv_sec as f64 + t.tv_usec as f64 * 1e-6;
    secs(usage.ru_utime) + secs(usage.ru_stime)
}

impl Stopwatch {
    fn start() -> Self {
        Self {
            started: unix_now(),
            wall: Instant::now(),
            cpu: process_cpu_seconds(),
        }
    }

    fn finish(&self) -> RunTiming {
        RunTiming {
            started_unix_s: self.started,
            finished_unix_s: unix_now(),
            wall_time_s: self.wall.elapsed().as_secs_f64(),
            cpu_time_s: process_cpu_seconds() - self.cpu,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Rejection {
    pub graph: u64,
    pub attempt: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateReport {
    pub graphs: usize,
    pub rejected: Vec<Rejection>,
    pub mean_edges: f64,
    pub timing: RunTiming,
}

/// Draws one graph, redrawing topology and power with a fresh seed until
/// the operating point exists and is linearly stable.
pub fn generate_graph(
    id: u64,
    growth: &GrowthParams,
    coupling: f64,
    master_seed: u64,
    max_regenerations: usize,
) -> Result<(Graph, FixedPoint, Vec<Rejection>), PipelineError> {
    let mut rejected = Vec::new();
    for attempt in 0..=max_regenerations {
        let a = attempt as u64;
        let attempt_result = generate_topology(growth, derive_seed(master_seed, id, a, stream::TOPOLOGY))
            .and_then(|t| assign_power(t, id, derive_seed(master_seed, id, a, stream::POWER)))
            .map_err(|e| e.to_string())
            .and_then(|g| {
                find_stable_sync_state(&g, coupling, DEFAULT_TOL)
                    .map(|fp| (g, fp))
                    .map_err(|e| e.to_string())
            });
        match attempt_result {
            Ok((g, fp)) => return Ok((g, fp, rejected)),
            Err(reason) => {
                log::info!("graph {id}: rejected attempt {attempt}: {reason}");
                rejected.push(Rejection {
                    graph: id,
                    attempt,
                    reason,
                });
            }
        }
    }
    Err(PipelineError::Generation {
        graph: id,
        attempts: max_regenerations + 1,
        last: rejected.last().map(|r| r.reason.clone()).unwrap_or_default(),
    })
}

fn manifest_for(cfg: &RunConfig, graph_ids: Vec<u64>) -> Result<DatasetManifest, PipelineError> {
    let splits = if graph_ids.len() >= MIN_GRAPHS_FOR_SPLIT {
        make_splits(&graph_ids, derive_seed(cfg.master_seed, 0, 0, stream::SPLITS))?
    } else {
        log::warn!(
            "only {} graphs: all assigned to the training split",
            graph_ids.len()
        );
        BTreeMap::from([
            ("train".to_string(), graph_ids.clone()),
            ("val".to_string(), vec![]),
            ("test".to_string(), vec![]),
        ])
    };
    Ok(DatasetManifest {
        version: MANIFEST_VERSION.to_string(),
        growth: cfg.growth,
        sim: cfg.sim,
        perturbation_box: cfg.perturbation_box,
        grid_res: cfg.grid_res,
        n_trials: cfg.n_trials,
        master_seed: cfg.master_seed,
        graph_ids,
        splits,
        fill_policy: cfg.fill_policy,
    })
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<GenerateReport, PipelineError> {
    cfg.validate()?;
    let clock = Stopwatch::start();
    let layout = Layout::new(&cfg.output_dir);
    layout.ensure(&["graphs", "reports"])?;
    let ids: Vec<u64> = (0..cfg.graphs as u64).collect();
    let results: Vec<_> = cfg.pool()?.install(|| {
        ids.par_iter()
            .map(|&id| generate_graph(id, &cfg.growth, cfg.sim.coupling, cfg.master_seed, cfg.max_regenerations))
            .collect()
    });
    let mut rejected = Vec::new();
    let mut edges = 0usize;
    for r in results {
        let (graph, _, rej) = r?;
        edges += graph.edges.len();
        rejected.extend(rej);
        write_graph(layout.graph(graph.id), &graph)?;
    }
    log::info!("generated {} graphs, {} draws rejected", ids.len(), rejected.len());
    write_json(layout.manifest(), &manifest_for(cfg, ids)?)?;
    let report = GenerateReport {
        graphs: cfg.graphs,
        rejected,
        mean_edges: edges as f64 / cfg.graphs as f64,
        timing: clock.finish(),
    };
    write_json(layout.reports().join("generate.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphSummary {
    pub graph: u64,
    pub snbs: Vec<f64>,
    pub failed_trials: usize,
    pub fixed_point_residual: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulateReport {
    pub graphs: Vec<GraphSummary>,
    pub failed_trials: usize,
    pub mean_snbs: f64,
    pub timing: RunTiming,
}

/// Landscapes and final-frequency histogram of one graph.
pub fn simulate_graph(
    graph: &Graph,
    cfg: &RunConfig,
) -> Result<(LandscapeFile, FrequencyHistogram, GraphSummary), PipelineError> {
    let fp = find_stable_sync_state(graph, cfg.sim.coupling, DEFAULT_TOL).map_err(|source| {
        PipelineError::FixedPoint {
            graph: graph.id,
            source,
        }
    })?;
    let edges = default_frequency_edges();
    let mut hist = final_frequency_histogram(&[], &edges, cfg.sim.sync_threshold);
    let mut landscapes = Vec::with_capacity(graph.num_nodes);
    let mut snbs = Vec::with_capacity(graph.num_nodes);
    let mut failed = 0;
    for node in 0..graph.num_nodes {
        let wrap = |source| PipelineError::Landscape {
            graph: graph.id,
            node,
            source,
        };
        let seed = derive_seed(cfg.master_seed, graph.id, node as u64, stream::PERTURBATIONS);
        let trials = run_node_trials(graph, &fp, node, cfg.n_trials, &cfg.perturbation_box, &cfg.sim, seed)
            .map_err(wrap)?;
        let ls = bin_outcomes(node, &trials.outcomes, &cfg.perturbation_box, cfg.grid_res).map_err(wrap)?;
        hist.merge(&final_frequency_histogram(&trials.outcomes, &edges, cfg.sim.sync_threshold));
        snbs.push(snbs_from_landscape(&ls).map_err(wrap)?);
        failed += trials.failed;
        landscapes.push(ls);
    }
    let summary = GraphSummary {
        graph: graph.id,
        snbs,
        failed_trials: failed,
        fixed_point_residual: fp.residual_inf,
    };
    let file = LandscapeFile {
        grid_res: cfg.grid_res,
        landscapes,
        phases: fp.phases,
    };
    Ok((file, hist, summary))
}

fn load_manifest(layout: &Layout) -> Result<DatasetManifest, PipelineError> {
    Ok(read_json(layout.manifest())?)
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<SimulateReport, PipelineError> {
    cfg.validate()?;
    let clock = Stopwatch::start();
    let layout = Layout::new(&cfg.output_dir);
    layout.ensure(&["landscapes", "labels", "histograms", "reports"])?;
    let mut manifest = load_manifest(&layout)?;
    let pool = cfg.pool()?;
    let mut summaries = Vec::with_capacity(manifest.graph_ids.len());
    for (k, &id) in manifest.graph_ids.iter().enumerate() {
        let graph = read_graph(layout.graph(id))?;
        let (file, hist, summary) = pool.install(|| simulate_graph(&graph, cfg))?;
        write_landscapes(layout.landscapes(id), &file)?;
        let labels: Vec<TrainingLabels> = file
            .landscapes
            .iter()
            .map(|ls| export_training_labels(ls, cfg.fill_policy))
            .collect();
        write_labels_csv(layout.labels(id), &labels)?;
        write_json(layout.histogram(id), &hist)?;
        log::info!(
            "graph {id} ({}/{}): mean SNBS {:.4}",
            k + 1,
            manifest.graph_ids.len(),
            summary.snbs.iter().sum::<f64>() / summary.snbs.len() as f64
        );
        summaries.push(summary);
    }
    manifest.sim = cfg.sim;
    manifest.perturbation_box = cfg.perturbation_box;
    manifest.grid_res = cfg.grid_res;
    manifest.n_trials = cfg.n_trials;
    manifest.fill_policy = cfg.fill_policy;
    write_json(layout.manifest(), &manifest)?;
    let all: Vec<f64> = summaries.iter().flat_map(|s| s.snbs.iter().copied()).collect();
    let report = SimulateReport {
        failed_trials: summaries.iter().map(|s| s.failed_trials).sum(),
        mean_snbs: all.iter().sum::<f64>() / all.len().max(1) as f64,
        graphs: summaries,
        timing: clock.finish(),
    };
    write_json(layout.reports().join("simulate.json"), &report)?;
    Ok(report)
}

/// Ground-truth heatmaps of one graph, missing cells filled per policy.
fn truth_heatmaps(file: &LandscapeFile, policy: FillPolicy) -> Vec<TrainingLabels> {
    file.landscapes
        .iter()
        .map(|ls| export_training_labels(ls, policy))
        .collect()
}

fn as_f64(labels: &[f32]) -> Vec<f64> {
    labels.iter().map(|&x| x as f64).collect()
}

fn load_predictions(
    dir: &Path,
    id: u64,
    num_nodes: usize,
    grid_res: usize,
) -> Result<Vec<Vec<f64>>, PipelineError> {
    let maps = read_heatmaps_csv(prediction_path(dir, id), grid_res)?;
    if maps.len() != num_nodes || maps.keys().enumerate().any(|(i, &node)| i != node) {
        return Err(DatasetError::Format(format!(
            "predictions for graph {id} must cover nodes 0..{num_nodes} exactly"
        ))
        .into());
    }
    Ok(maps.into_values().collect())
}

/// Critical cells of every graph, from truth or from predicted heatmaps.
pub fn cmd_screen(cfg: &RunConfig, predictions: Option<&Path>) -> Result<BTreeMap<u64, Vec<CriticalCell>>, PipelineError> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.output_dir);
    let manifest = load_manifest(&layout)?;
    let out_dir = layout
        .reports()
        .join(if predictions.is_some() { "critical_predicted" } else { "critical_truth" });
    fs::create_dir_all(&out_dir)?;
    let mut all = BTreeMap::new();
    for &id in &manifest.graph_ids {
        let file = read_landscapes(layout.landscapes(id))?;
        let grids: Vec<ExceedanceGrid> = match predictions {
            None => file.landscapes.iter().map(exceeding_ratio).collect(),
            Some(dir) => load_predictions(dir, id, file.landscapes.len(), file.grid_res)?
                .iter()
                .enumerate()
                .map(|(node, h)| exceedance_from_heatmap(node, file.grid_res, h))
                .collect(),
        };
        let cells = rank_critical_cells(&grids, cfg.screen.threshold, cfg.screen.top_k);
        write_critical_cells_csv(out_dir.join(format!("graph_{id:05}.csv")), &cells)?;
        all.insert(id, cells);
    }
    Ok(all)
}

#[derive(Debug, Clone, Serialize)]
struct GraphMetricsRow {
    graph: u64,
    ssim_mean: f64,
    weighted_mse: f64,
    snbs_sq_err: f64,
    bound_holds: bool,
    iou_topk: f64,
    relaxed_contained: bool,
    relaxed_per_cell: f64,
}

/// Scores every graph that has a prediction file in `predictions`.
pub fn cmd_evaluate(cfg: &RunConfig, predictions: &Path) -> Result<MetricReport, PipelineError> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.output_dir);
    layout.ensure(&["reports"])?;
    let manifest = load_manifest(&layout)?;
    let ids: Vec<u64> = manifest
        .graph_ids
        .iter()
        .copied()
        .filter(|&id| prediction_path(predictions, id).exists())
        .collect();
    if ids.is_empty() {
        return Err(PipelineError::Config(format!(
            "no prediction files in {}",
            predictions.display()
        )));
    }
    let mut rows = Vec::with_capacity(ids.len());
    let mut pooled_pred = Vec::new();
    let mut pooled_truth = Vec::new();
    let (mut ssim_sum, mut mse_sum, mut err_sum, mut bound_all, mut nodes) = (0.0, 0.0, 0.0, true, 0usize);
    for &id in &ids {
        let file = read_landscapes(layout.landscapes(id))?;
        let res = file.grid_res;
        let truth = truth_heatmaps(&file, manifest.fill_policy);
        let pred = load_predictions(predictions, id, truth.len(), res)?;
        let (mut g_ssim, mut g_mse, mut g_err, mut g_bound) = (0.0, 0.0, 0.0, true);
        let mut true_grids = Vec::with_capacity(truth.len());
        let mut pred_grids = Vec::with_capacity(truth.len());
        for (t, p) in truth.iter().zip(&pred) {
            let tv = as_f64(&t.labels);
            g_ssim += ssim(p, &tv, res)?;
            let b = weighted_mse_and_bound(p, &tv, &t.counts)?;
            g_mse += b.weighted_mse;
            g_err += b.snbs_sq_err;
            g_bound &= b.bound_holds;
            // Screen both from the single-precision values being compared;
            // cells without samples have no truth and are left out of both.
            let mut truth_grid = exceedance_from_heatmap(t.node, res, &tv);
            let mut pred_grid = exceedance_from_heatmap(t.node, res, p);
            for (k, &masked) in t.mask.iter().enumerate() {
                if masked == 1 {
                    truth_grid.values[k] = None;
                    pred_grid.values[k] = None;
                }
            }
            true_grids.push(truth_grid);
            pred_grids.push(pred_grid);
            pooled_pred.extend_from_slice(p);
            pooled_truth.extend_from_slice(&tv);
        }
        let s = &cfg.screen;
        let true_cells = rank_critical_cells(&true_grids, s.threshold, s.top_k);
        let pred_cells = rank_critical_cells(&pred_grids, s.threshold, s.relaxed_m.max(s.top_k));
        let containment = relaxed_containment(&pred_cells, &true_cells, s.top_k, s.relaxed_m);
        let n = truth.len() as f64;
        rows.push(GraphMetricsRow {
            graph: id,
            ssim_mean: g_ssim / n,
            weighted_mse: g_mse / n,
            snbs_sq_err: g_err / n,
            bound_holds: g_bound,
            iou_topk: iou_topk(&pred_cells, &true_cells, s.top_k),
            relaxed_contained: containment.all_contained,
            relaxed_per_cell: containment.per_cell,
        });
        ssim_sum += g_ssim;
        mse_sum += g_mse;
        err_sum += g_err;
        bound_all &= g_bound;
        nodes += truth.len();
    }
    let g = rows.len() as f64;
    let report = MetricReport {
        ssim_mean: ssim_sum / nodes as f64,
        r2: r2(&pooled_pred, &pooled_truth)?,
        weighted_mse: mse_sum / nodes as f64,
        snbs_sq_err: err_sum / nodes as f64,
        bound_holds: bound_all,
        iou_topk: rows.iter().map(|r| r.iou_topk).sum::<f64>() / g,
        relaxed_containment: rows.iter().filter(|r| r.relaxed_contained).count() as f64 / g,
        relaxed_per_cell: rows.iter().map(|r| r.relaxed_per_cell).sum::<f64>() / g,
    };
    if !report.bound_holds {
        log::error!("weighted MSE bound violated; check the count inputs");
    }
    write_json(layout.reports().join("metrics.json"), &report)?;
    let mut w = csv::Writer::from_path(layout.reports().join("metrics_per_graph.csv")).map_err(DatasetError::from)?;
    for row in &rows {
        w.serialize(row).map_err(DatasetError::from)?;
    }
    w.flush()?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistogramSummary {
    pub total: u64,
    pub frac_above_threshold: f64,
    pub frac_near_threshold: f64,
}

/// Pools the per-graph final-frequency histograms written by `simulate`.
pub fn cmd_histogram(cfg: &RunConfig) -> Result<FrequencyHistogram, PipelineError> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.output_dir);
    layout.ensure(&["reports"])?;
    let manifest = load_manifest(&layout)?;
    let mut pooled = final_frequency_histogram(&[], &default_frequency_edges(), manifest.sim.sync_threshold);
    for &id in &manifest.graph_ids {
        let h: FrequencyHistogram = read_json(layout.histogram(id))?;
        if h.edges != pooled.edges {
            return Err(DatasetError::Format(format!("graph {id} histogram uses different bins")).into());
        }
        pooled.merge(&h);
    }
    write_histogram_csv(layout.reports().join("final_frequency_histogram.csv"), &pooled)?;
    write_json(
        layout.reports().join("final_frequency_summary.json"),
        &HistogramSummary {
            total: pooled.total,
            frac_above_threshold: pooled.frac_above_threshold,
            frac_near_threshold: pooled.frac_near_threshold,
        },
    )?;
    Ok(pooled)
}

/// Writes one PGM per node plus, for nodes holding critical cells, an
/// overlay marking them. Returns the number of images written.
pub fn cmd_plot(cfg: &RunConfig) -> Result<usize, PipelineError> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.output_dir);
    layout.ensure(&["plots"])?;
    let manifest = load_manifest(&layout)?;
    let mut written = 0;
    for &id in &manifest.graph_ids {
        let file = read_landscapes(layout.landscapes(id))?;
        let res = file.grid_res;
        let grids: Vec<ExceedanceGrid> = file.landscapes.iter().map(exceeding_ratio).collect();
        let cells = rank_critical_cells(&grids, cfg.screen.threshold, cfg.screen.top_k);
        for t in truth_heatmaps(&file, manifest.fill_policy) {
            let image = as_f64(&t.labels);
            export_pgm(&image, res, layout.plots().join(format!("graph_{id:05}_node_{:02}.pgm", t.node)))?;
            written += 1;
            let marked: Vec<(usize, usize)> = cells.iter().filter(|c| c.node == t.node).map(|c| (c.m, c.n)).collect();
            if !marked.is_empty() {
                export_pgm(
                    &overlay_image(&image, res, &marked),
                    res,
                    layout.plots().join(format!("graph_{id:05}_node_{:02}_critical.pgm", t.node)),
                )?;
                written += 1;
            }
        }
    }
    Ok(written)
}
