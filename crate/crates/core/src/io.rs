//! On-disk formats: graph JSON, checksummed landscape files, dataset
//! manifests and splits, training labels, CSV exports and PGM images.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::SimParams;
use crate::graph::{import_topology, Graph, GraphError, GrowthParams};
use crate::landscape::{FrequencyHistogram, Landscape, PerturbationBox};
use crate::screening::CriticalCell;

pub const LANDSCAPE_MAGIC: [u8; 4] = *b"BSLS";
pub const LANDSCAPE_VERSION: u16 = 1;
const HEADER_LEN: usize = 16;
pub const MANIFEST_VERSION: &str = "1";
pub const MIN_GRAPHS_FOR_SPLIT: usize = 10;
pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("not a landscape file")]
    BadMagic,
    #[error("landscape file version {found}, expected {expected}")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("need at least {MIN_GRAPHS_FOR_SPLIT} graphs to split, got {0}")]
    TooFewGraphs(usize),
    #[error("invalid image: {0}")]
    InvalidImage(String),
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<(), DatasetError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T, DatasetError> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub fn write_graph(path: impl AsRef<Path>, graph: &Graph) -> Result<(), DatasetError> {
    let mut canonical = graph.clone();
    canonical.edges.sort_unstable();
    write_json(path, &canonical)
}

pub fn read_graph(path: impl AsRef<Path>) -> Result<Graph, DatasetError> {
    Ok(import_topology(path)?)
}

/// All landscapes of one graph plus the operating point they were computed at.
#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeFile {
    pub grid_res: usize,
    /// One landscape per node, in node order.
    pub landscapes: Vec<Landscape>,
    pub phases: Vec<f64>,
}

fn to_u32(v: usize, what: &str) -> Result<u32, DatasetError> {
    u32::try_from(v).map_err(|_| DatasetError::Format(format!("{what} {v} does not fit in 32 bits")))
}

pub fn encode_landscapes(file: &LandscapeFile) -> Result<Vec<u8>, DatasetError> {
    let n = file.landscapes.len();
    let m = file.grid_res;
    if file.phases.len() != n {
        return Err(DatasetError::Format(format!("{} phases for {n} landscapes", file.phases.len())));
    }
    for (i, ls) in file.landscapes.iter().enumerate() {
        if ls.node != i || ls.grid_res != m {
            return Err(DatasetError::Format(format!(
                "landscape {i} is for node {} at resolution {}",
                ls.node, ls.grid_res
            )));
        }
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * n * m * m + 8 * n + 4);
    buf.extend_from_slice(&LANDSCAPE_MAGIC);
    buf.extend_from_slice(&LANDSCAPE_VERSION.to_le_bytes());
    buf.extend_from_slice(&0u16.to_le_bytes());
    buf.extend_from_slice(&to_u32(n, "node count")?.to_le_bytes());
    buf.extend_from_slice(&to_u32(m, "grid resolution")?.to_le_bytes());
    for ls in &file.landscapes {
        for c in &ls.stable_counts {
            buf.extend_from_slice(&c.to_le_bytes());
        }
    }
    for ls in &file.landscapes {
        for c in &ls.total_counts {
            buf.extend_from_slice(&c.to_le_bytes());
        }
    }
    for p in &file.phases {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn decode_landscapes(bytes: &[u8]) -> Result<LandscapeFile, DatasetError> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err(DatasetError::Format(format!("{} bytes is too short", bytes.len())));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(DatasetError::ChecksumMismatch { stored, computed });
    }
    if body[..4] != LANDSCAPE_MAGIC {
        return Err(DatasetError::BadMagic);
    }
    let version = u16::from_le_bytes([body[4], body[5]]);
    if version != LANDSCAPE_VERSION {
        return Err(DatasetError::VersionMismatch {
            found: version,
            expected: LANDSCAPE_VERSION,
        });
    }
    let word = |at: usize| u32::from_le_bytes(body[at..at + 4].try_into().unwrap());
    let n = word(8) as usize;
    let m = word(12) as usize;
    let cells = m * m;
    let expected = HEADER_LEN + 8 * n * cells + 8 * n;
    if body.len() != expected {
        return Err(DatasetError::Format(format!(
            "{} bytes of data for {n} nodes at resolution {m}, expected {expected}",
            body.len()
        )));
    }
    let counts_at = |offset: usize| -> Vec<u32> { (0..cells).map(|k| word(offset + 4 * k)).collect() };
    let totals_base = HEADER_LEN + 4 * n * cells;
    let landscapes = (0..n)
        .map(|i| Landscape {
            node: i,
            grid_res: m,
            stable_counts: counts_at(HEADER_LEN + 4 * i * cells),
            total_counts: counts_at(totals_base + 4 * i * cells),
        })
        .collect();
    let phases_base = HEADER_LEN + 8 * n * cells;
    let phases = (0..n)
        .map(|i| f64::from_le_bytes(body[phases_base + 8 * i..phases_base + 8 * i + 8].try_into().unwrap()))
        .collect();
    Ok(LandscapeFile {
        grid_res: m,
        landscapes,
        phases,
    })
}

pub fn write_landscapes(path: impl AsRef<Path>, file: &LandscapeFile) -> Result<(), DatasetError> {
    fs::write(path, encode_landscapes(file)?)?;
    Ok(())
}

pub fn read_landscapes(path: impl AsRef<Path>) -> Result<LandscapeFile, DatasetError> {
    decode_landscapes(&fs::read(path)?)
}

/// How cells without samples are labelled for training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FillPolicy {
    /// Mean of the sampled 8-neighbours; the node's SNBS when none are sampled.
    #[default]
    NeighborMean,
    /// Label 0.
    None,
}

impl fmt::Display for FillPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FillPolicy::NeighborMean => "neighbor-mean",
            FillPolicy::None => "none",
        })
    }
}

impl FromStr for FillPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "neighbor-mean" => Ok(FillPolicy::NeighborMean),
            "none" => Ok(FillPolicy::None),
            other => Err(format!("unknown fill policy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub growth: GrowthParams,
    pub sim: SimParams,
    pub perturbation_box: PerturbationBox,
    pub grid_res: usize,
    pub n_trials: usize,
    pub master_seed: u64,
    pub graph_ids: Vec<u64>,
    pub splits: BTreeMap<String, Vec<u64>>,
    pub fill_policy: FillPolicy,
}

/// Seeded shuffle, then cuts at `floor(0.70 n)` and `floor(0.85 n)`.
pub fn make_splits(graph_ids: &[u64], seed: u64) -> Result<BTreeMap<String, Vec<u64>>, DatasetError> {
    let n = graph_ids.len();
    if n < MIN_GRAPHS_FOR_SPLIT {
        return Err(DatasetError::TooFewGraphs(n));
    }
    let mut ids = graph_ids.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let a = n * 70 / 100;
    let b = n * 85 / 100;
    Ok(BTreeMap::from([
        ("train".to_string(), ids[..a].to_vec()),
        ("val".to_string(), ids[a..b].to_vec()),
        ("test".to_string(), ids[b..].to_vec()),
    ]))
}

/// Per-node training target: cell probabilities, sample counts and a mask
/// that is 1 where the label was filled in rather than observed.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLabels {
    pub node: usize,
    pub grid_res: usize,
    pub labels: Vec<f32>,
    pub counts: Vec<u32>,
    pub mask: Vec<u8>,
}

pub fn export_training_labels(ls: &Landscape, policy: FillPolicy) -> TrainingLabels {
    let res = ls.grid_res;
    let grid = ls.lbs_grid();
    let snbs = match ls.n_trials() {
        0 => 0.0,
        t => ls.n_stable() as f64 / t as f64,
    };
    let mut labels = Vec::with_capacity(res * res);
    let mut mask = Vec::with_capacity(res * res);
    for m in 0..res {
        for n in 0..res {
            if let Some(p) = grid[m * res + n] {
                labels.push(p as f32);
                mask.push(0);
                continue;
            }
            let fill = match policy {
                FillPolicy::None => 0.0,
                FillPolicy::NeighborMean => {
                    let mut sum = 0.0;
                    let mut count = 0;
                    for dm in -1i64..=1 {
                        for dn in -1i64..=1 {
                            let (mm, nn) = (m as i64 + dm, n as i64 + dn);
                            if (dm, dn) == (0, 0) || mm < 0 || nn < 0 || mm >= res as i64 || nn >= res as i64 {
                                continue;
                            }
                            if let Some(p) = grid[mm as usize * res + nn as usize] {
                                sum += p;
                                count += 1;
                            }
                        }
                    }
                    if count > 0 {
                        sum / count as f64
                    } else {
                        snbs
                    }
                }
            };
            labels.push(fill as f32);
            mask.push(1);
        }
    }
    TrainingLabels {
        node: ls.node,
        grid_res: res,
        labels,
        counts: ls.total_counts.clone(),
        mask,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    node: usize,
    m: usize,
    n: usize,
    label: f32,
    count: u32,
    mask: u8,
}

/// CSV with columns `node,m,n,label,count,mask`, one row per cell.
pub fn write_labels_csv(path: impl AsRef<Path>, labels: &[TrainingLabels]) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_path(path)?;
    for t in labels {
        for k in 0..t.labels.len() {
            w.serialize(LabelRow {
                node: t.node,
                m: k / t.grid_res,
                n: k % t.grid_res,
                label: t.labels[k],
                count: t.counts[k],
                mask: t.mask[k],
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels_csv(path: impl AsRef<Path>, grid_res: usize) -> Result<Vec<TrainingLabels>, DatasetError> {
    let mut by_node: BTreeMap<usize, TrainingLabels> = BTreeMap::new();
    let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
    for row in csv::Reader::from_path(path)?.deserialize() {
        let row: LabelRow = row?;
        check_cell(row.m, row.n, grid_res)?;
        let t = by_node.entry(row.node).or_insert_with(|| TrainingLabels {
            node: row.node,
            grid_res,
            labels: vec![0.0; grid_res * grid_res],
            counts: vec![0; grid_res * grid_res],
            mask: vec![0; grid_res * grid_res],
        });
        let k = row.m * grid_res + row.n;
        t.labels[k] = row.label;
        t.counts[k] = row.count;
        t.mask[k] = row.mask;
        *seen.entry(row.node).or_default() += 1;
    }
    check_complete(&seen, grid_res)?;
    Ok(by_node.into_values().collect())
}

#[derive(Debug, Deserialize)]
struct HeatmapRow {
    node: usize,
    m: usize,
    n: usize,
    label: f32,
}

fn check_cell(m: usize, n: usize, grid_res: usize) -> Result<(), DatasetError> {
    if m >= grid_res || n >= grid_res {
        return Err(DatasetError::Format(format!("cell ({m}, {n}) outside a {grid_res}x{grid_res} grid")));
    }
    Ok(())
}

fn check_complete(seen: &BTreeMap<usize, usize>, grid_res: usize) -> Result<(), DatasetError> {
    for (&node, &rows) in seen {
        if rows != grid_res * grid_res {
            return Err(DatasetError::Format(format!(
                "node {node} has {rows} rows, expected {}",
                grid_res * grid_res
            )));
        }
    }
    Ok(())
}

/// Reads per-node heatmaps from any CSV with `node,m,n,label` columns
/// (extra columns are ignored), such as model predictions. Values are read
/// at single precision, like the training labels.
pub fn read_heatmaps_csv(path: impl AsRef<Path>, grid_res: usize) -> Result<BTreeMap<usize, Vec<f64>>, DatasetError> {
    let mut maps: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
    for row in csv::Reader::from_path(path)?.deserialize() {
        let row: HeatmapRow = row?;
        check_cell(row.m, row.n, grid_res)?;
        if !(0.0..=1.0).contains(&row.label) {
            return Err(DatasetError::Format(format!(
                "node {} cell ({}, {}) has value {} outside [0, 1]",
                row.node, row.m, row.n, row.label
            )));
        }
        maps.entry(row.node).or_insert_with(|| vec![f64::NAN; grid_res * grid_res])[row.m * grid_res + row.n] =
            row.label as f64;
        *seen.entry(row.node).or_default() += 1;
    }
    check_complete(&seen, grid_res)?;
    Ok(maps)
}

/// Binary greyscale image; rows run from the highest frequency cell at the
/// top to the lowest, columns from the lowest phase cell to the highest.
pub fn encode_pgm(image: &[f64], grid_res: usize) -> Result<Vec<u8>, DatasetError> {
    if image.len() != grid_res * grid_res {
        return Err(DatasetError::InvalidImage(format!(
            "{} values for a {grid_res}x{grid_res} image",
            image.len()
        )));
    }
    if let Some(v) = image.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(DatasetError::InvalidImage(format!("value {v} outside [0, 1]")));
    }
    let mut out = format!("P5\n{grid_res} {grid_res}\n255\n").into_bytes();
    for n in (0..grid_res).rev() {
        for m in 0..grid_res {
            out.push((255.0 * image[m * grid_res + n]).round() as u8);
        }
    }
    Ok(out)
}

pub fn export_pgm(image: &[f64], grid_res: usize, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    fs::write(path, encode_pgm(image, grid_res)?)?;
    Ok(())
}

/// Stability heatmap scaled into `[0, 200/255]`, with critical cells drawn
/// at full white so they stand out.
pub fn overlay_image(image: &[f64], grid_res: usize, critical: &[(usize, usize)]) -> Vec<f64> {
    let mut out: Vec<f64> = image.iter().map(|v| v.clamp(0.0, 1.0) * 200.0 / 255.0).collect();
    for &(m, n) in critical {
        out[m * grid_res + n] = 1.0;
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct HistogramRow {
    bin_lo: f64,
    bin_hi: f64,
    count: u64,
}

pub fn write_histogram_csv(path: impl AsRef<Path>, hist: &FrequencyHistogram) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_path(path)?;
    for (k, &count) in hist.counts.iter().enumerate() {
        w.serialize(HistogramRow {
            bin_lo: hist.edges[k],
            bin_hi: hist.edges[k + 1],
            count,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct CriticalRow {
    node: usize,
    m: usize,
    n: usize,
    exceed_ratio: f64,
    center_dist: f64,
    rank: usize,
}

/// Ranked cells, `rank` counting from 1.
pub fn write_critical_cells_csv(path: impl AsRef<Path>, cells: &[CriticalCell]) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_path(path)?;
    for (k, c) in cells.iter().enumerate() {
        w.serialize(CriticalRow {
            node: c.node,
            m: c.m,
            n: c.n,
            exceed_ratio: c.exceed_ratio,
            center_dist: c.center_dist,
            rank: k + 1,
        })?;
    }
    w.flush()?;
    Ok(())
}
