//! Solution-space characterization: uniform random rollouts, the path
//! matrix, Monte Carlo aggregation into density grids, and superior-path
//! statistics.
//!
//! Rollout `(i, j)` and Monte Carlo iteration `n` each draw from their own
//! keyed RNG stream, so a characterization is reproducible from its seed at
//! any thread count.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::exec;
use crate::rng::{mix, salt, stream};
use crate::search::{run_rollout, RolloutPolicy, SearchConfig};
use crate::trace::{Query, ReasoningTrace};
use crate::{Error, Result};

/// Length and verdict of one sampled path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathCell {
    pub length: u64,
    pub correct: bool,
}

/// N queries by K independent rollouts.
#[derive(Debug, Clone, PartialEq)]
pub struct PathMatrix {
    pub queries: Vec<String>,
    /// One row per query, each of exactly K cells.
    pub cells: Vec<Vec<PathCell>>,
}

impl PathMatrix {
    pub fn n_queries(&self) -> usize {
        self.queries.len()
    }

    pub fn k(&self) -> usize {
        self.cells.first().map_or(0, Vec::len)
    }

    /// Group traces by query id (first-appearance order) into a rectangular
    /// matrix; every query must have the same number of paths.
    pub fn from_traces(traces: &[ReasoningTrace]) -> Result<Self> {
        let mut queries: Vec<String> = Vec::new();
        let mut rows: BTreeMap<String, Vec<PathCell>> = BTreeMap::new();
        for t in traces {
            if !rows.contains_key(&t.query_id) {
                queries.push(t.query_id.clone());
            }
            rows.entry(t.query_id.clone()).or_default().push(PathCell {
                length: t.total_tokens,
                correct: t.correct,
            });
        }
        if queries.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let k = rows[&queries[0]].len();
        let mut cells = Vec::with_capacity(queries.len());
        for q in &queries {
            let row = rows.remove(q).expect("inserted above");
            if row.len() != k {
                return Err(Error::Data(format!(
                    "query {q:?} has {} paths, expected {k}",
                    row.len()
                )));
            }
            cells.push(row);
        }
        Ok(Self { queries, cells })
    }
}

/// Per-rollout seed for cell `(i, j)` of a characterization.
pub fn cell_seed(seed: u64, query_index: usize, path_index: usize) -> u64 {
    mix(
        mix(mix(seed, salt::ROLLOUT), query_index as u64),
        path_index as u64,
    )
}

/// One uniform-random rollout: the search loop with every decision forced
/// to a uniformly sampled operator from the configured set.
pub fn random_rollout<B: Backend>(
    query: &Query,
    backend: &B,
    cfg: &SearchConfig,
    roll_seed: u64,
) -> Result<ReasoningTrace> {
    run_rollout::<B>(
        query,
        backend,
        RolloutPolicy::Uniform,
        cfg,
        roll_seed,
        "random",
    )
    .map(|o| o.trace)
}

/// K independent random rollouts per query. Returns the path matrix and
/// every trace (row-major).
pub fn characterize<B: Backend + Sync>(
    queries: &[Query],
    backend: &B,
    k: usize,
    cfg: &SearchConfig,
    seed: u64,
) -> Result<(PathMatrix, Vec<ReasoningTrace>)> {
    if k == 0 {
        return Err(Error::Data("K must be at least 1".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..queries.len())
        .flat_map(|i| (0..k).map(move |j| (i, j)))
        .collect();
    let traces = exec::par_map_result(&jobs, |&(i, j)| {
        random_rollout(&queries[i], backend, cfg, cell_seed(seed, i, j))
    })?;
    Ok((PathMatrix::from_traces(&traces)?, traces))
}

/// Pick one path per query uniformly and return the mean length and mean
/// accuracy over the query set.
pub fn sample_combination(pm: &PathMatrix, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let n = pm.n_queries() as f64;
    let mut len_sum = 0.0;
    let mut acc_sum = 0.0;
    for row in &pm.cells {
        let cell = row[rng.gen_range(0..row.len())];
        len_sum += cell.length as f64;
        acc_sum += f64::from(u8::from(cell.correct));
    }
    (len_sum / n, acc_sum / n)
}

/// Bin layout for density grids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinSpec {
    /// Length bin width in tokens.
    pub length_width: f64,
    /// Accuracy bin width; defaults to `1/N`, the resolution of a mean over
    /// N queries.
    pub accuracy_width: Option<f64>,
}

impl Default for BinSpec {
    fn default() -> Self {
        Self {
            length_width: 64.0,
            accuracy_width: None,
        }
    }
}

/// 2-D histogram over the (mean length, mean accuracy) plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub length_edges: Vec<f64>,
    pub accuracy_edges: Vec<f64>,
    /// `counts[length_bin][accuracy_bin]`.
    pub counts: Vec<Vec<u64>>,
    pub n_samples: u64,
}

impl DensityGrid {
    fn bin(edges: &[f64], value: f64) -> usize {
        let bins = edges.len() - 1;
        let lo = edges[0];
        let width = edges[1] - edges[0];
        (((value - lo) / width).floor() as isize).clamp(0, bins as isize - 1) as usize
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// CSV rows `length_bin_low,acc_bin_low,count` for non-empty bins.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("length_bin_low,acc_bin_low,count\n");
        for (li, row) in self.counts.iter().enumerate() {
            for (ai, &count) in row.iter().enumerate() {
                if count > 0 {
                    out.push_str(&format!(
                        "{},{},{count}\n",
                        self.length_edges[li], self.accuracy_edges[ai]
                    ));
                }
            }
        }
        out
    }
}

fn build_edges(lo: f64, hi: f64, width: f64) -> Vec<f64> {
    let start = (lo / width).floor() * width;
    let mut edges = vec![start];
    let mut edge = start;
    while edge < hi {
        edge += width;
        edges.push(edge);
    }
    if edges.len() < 2 {
        edges.push(start + width);
    }
    edges
}

/// Monte Carlo aggregation: each iteration selects one path per query and
/// deposits the resulting `(mean length, mean accuracy)` point into the
/// grid. Iteration `n` uses its own stream, so counts are independent of
/// thread count.
pub fn monte_carlo_aggregate(
    pm: &PathMatrix,
    iterations: u64,
    bins: &BinSpec,
    seed: u64,
) -> Result<DensityGrid> {
    if iterations == 0 {
        return Err(Error::Data("iterations must be at least 1".into()));
    }
    if pm.n_queries() == 0 {
        return Err(Error::EmptyDataset);
    }
    let n = pm.n_queries() as f64;
    // Means live in the convex hull of per-query extremes.
    let min_len: f64 = pm
        .cells
        .iter()
        .map(|r| r.iter().map(|c| c.length).min().unwrap() as f64)
        .sum::<f64>()
        / n;
    let max_len: f64 = pm
        .cells
        .iter()
        .map(|r| r.iter().map(|c| c.length).max().unwrap() as f64)
        .sum::<f64>()
        / n;
    let length_edges = build_edges(min_len, max_len, bins.length_width);
    let acc_width = bins.accuracy_width.unwrap_or(1.0 / n);
    let accuracy_edges = build_edges(0.0, 1.0, acc_width);
    let l_bins = length_edges.len() - 1;
    let a_bins = accuracy_edges.len() - 1;

    let chunk = 4096u64;
    let chunks: Vec<u64> = (0..iterations.div_ceil(chunk)).collect();
    let partials = exec::par_map(&chunks, |&c| {
        let mut counts = vec![vec![0u64; a_bins]; l_bins];
        let lo = c * chunk;
        let hi = (lo + chunk).min(iterations);
        for it in lo..hi {
            let mut rng = stream(seed, &[salt::MONTE_CARLO, it]);
            let (len, acc) = sample_combination(pm, &mut rng);
            counts[DensityGrid::bin(&length_edges, len)][DensityGrid::bin(&accuracy_edges, acc)] +=
                1;
        }
        counts
    });
    let mut counts = vec![vec![0u64; a_bins]; l_bins];
    for partial in partials {
        for (row, prow) in counts.iter_mut().zip(partial) {
            for (slot, v) in row.iter_mut().zip(prow) {
                *slot += v;
            }
        }
    }
    Ok(DensityGrid {
        length_edges,
        accuracy_edges,
        counts,
        n_samples: iterations,
    })
}

/// A discrete distribution over `(mean length, mean accuracy)` points.
pub type PointDistribution = Vec<((f64, f64), f64)>;

/// Exact enumeration of all `K^N` equiprobable path combinations. The means
/// are accumulated in query order, exactly as [`sample_combination`] does,
/// so the two agree bit for bit on identical combinations.
pub fn exact_aggregate(pm: &PathMatrix) -> Result<PointDistribution> {
    let n = pm.n_queries();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let k = pm.k() as u128;
    let combos = k
        .checked_pow(n as u32)
        .filter(|c| *c <= 1_000_000)
        .ok_or_else(|| {
            Error::Data(format!(
                "combination count K^N exceeds 1e6 (K={}, N={n})",
                pm.k()
            ))
        })?;
    let weight = 1.0 / combos as f64;
    let mut points: BTreeMap<(u64, u64), f64> = BTreeMap::new();
    let mut picks = vec![0usize; n];
    for _ in 0..combos {
        let mut len_sum = 0.0;
        let mut acc_sum = 0.0;
        for (row, &pick) in pm.cells.iter().zip(&picks) {
            let cell = row[pick];
            len_sum += cell.length as f64;
            acc_sum += f64::from(u8::from(cell.correct));
        }
        let point = (len_sum / n as f64, acc_sum / n as f64);
        *points
            .entry((point.0.to_bits(), point.1.to_bits()))
            .or_default() += weight;
        // Odometer increment.
        for slot in picks.iter_mut().rev() {
            *slot += 1;
            if *slot < pm.k() {
                break;
            }
            *slot = 0;
        }
    }
    Ok(points
        .into_iter()
        .map(|((lb, ab), p)| ((f64::from_bits(lb), f64::from_bits(ab)), p))
        .collect())
}

/// Fraction of probability mass strictly better than the baseline on both
/// axes: higher accuracy and lower length (the upper-left region).
pub fn superior_fraction(points: &PointDistribution, baseline: (f64, f64)) -> f64 {
    let (base_len, base_acc) = baseline;
    points
        .iter()
        .filter(|((len, acc), _)| *acc > base_acc && *len < base_len)
        .map(|(_, p)| p)
        .sum()
}

/// Grid variant of [`superior_fraction`], scored at bin midpoints.
pub fn superior_fraction_grid(grid: &DensityGrid, baseline: (f64, f64)) -> f64 {
    let (base_len, base_acc) = baseline;
    let mut mass = 0u64;
    for (li, row) in grid.counts.iter().enumerate() {
        let len_mid = (grid.length_edges[li] + grid.length_edges[li + 1]) / 2.0;
        for (ai, &count) in row.iter().enumerate() {
            let acc_mid = (grid.accuracy_edges[ai] + grid.accuracy_edges[ai + 1]) / 2.0;
            if acc_mid > base_acc && len_mid < base_len {
                mass += count;
            }
        }
    }
    mass as f64 / grid.n_samples as f64
}

#[derive(Serialize, Deserialize)]
struct PathRowWire {
    query_id: String,
    paths: Vec<PathCell>,
}

/// Write a path matrix as JSONL, one row per query.
pub fn write_path_matrix(path: &Path, pm: &PathMatrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (q, row) in pm.queries.iter().zip(&pm.cells) {
        let line = serde_json::to_string(&PathRowWire {
            query_id: q.clone(),
            paths: row.clone(),
        })?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_path_matrix(path: &Path) -> Result<PathMatrix> {
    let reader = BufReader::new(File::open(path)?);
    let mut queries = Vec::new();
    let mut cells = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: PathRowWire = serde_json::from_str(&line).map_err(|e| Error::Line {
            line: idx + 1,
            source: Box::new(e.into()),
        })?;
        queries.push(row.query_id);
        cells.push(row.paths);
    }
    if queries.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let k = cells[0].len();
    if cells.iter().any(|r| r.len() != k) {
        return Err(Error::Data("path matrix rows have unequal K".into()));
    }
    Ok(PathMatrix { queries, cells })
}
