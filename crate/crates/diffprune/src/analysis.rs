//! Analysis of finished diffs: where the nonzeros live, what shipping them
//! costs, and how the methods compare across target rates.

use crate::config::RunConfig;
use crate::error::Result;
use crate::model::Model;
use crate::pipeline::{accuracy_with, diff_prune, nonadaptive_diff_prune};
use crate::reparam::DiffVector;
use crate::space::GroupPartition;
use crate::task::TaskSuite;
use rayon::prelude::*;
use std::fmt;

// ─── placement ───

#[derive(Clone, Debug, PartialEq)]
pub struct LayerRow {
    pub layer: u16,
    pub nonzeros: usize,
    /// Share of all nonzero entries, 0 when the diff is empty.
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparsityReport {
    pub total_nonzeros: usize,
    pub rows: Vec<LayerRow>,
}

/// Counts nonzero diff entries per layer. Every layer of the space gets a
/// row, including layers the diff never touches.
pub fn per_layer_sparsity(dv: &DiffVector) -> SparsityReport {
    let space = dv.space();
    let layers = space.layers();
    let mut counts = vec![0usize; layers.len()];
    for &(pos, _) in dv.entries() {
        let layer = space.segment_of(pos as usize).layer;
        let idx = layers.binary_search(&layer).expect("layer is listed");
        counts[idx] += 1;
    }
    let total = dv.support_len();
    let rows = layers
        .into_iter()
        .zip(counts)
        .map(|(layer, nonzeros)| LayerRow {
            layer,
            nonzeros,
            fraction: if total == 0 {
                0.0
            } else {
                nonzeros as f64 / total as f64
            },
        })
        .collect();
    SparsityReport {
        total_nonzeros: total,
        rows,
    }
}

/// Fraction of groups with no support at all — the payoff of structured
/// gating, since a fully-zero group costs nothing to describe.
pub fn zero_group_fraction(dv: &DiffVector, part: &GroupPartition) -> f64 {
    let dead = part
        .groups()
        .iter()
        .filter(|g| g.iter().all(|&i| dv.get(i as u32).is_none()))
        .count();
    dead as f64 / part.n_groups() as f64
}

// ─── storage ───

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StorageScheme {
    /// Ship a full checkpoint: 4 bytes per parameter.
    FullWeights,
    /// Ship the diff: a `u32` position and an `f32` value per nonzero.
    PositionsAndValues,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StorageEstimate {
    pub bytes: u64,
}

impl StorageEstimate {
    /// Decimal megabytes (1 MB = 1e6 bytes).
    pub fn megabytes(&self) -> f64 {
        self.bytes as f64 / 1e6
    }
}

/// Exact payload cost of shipping one task adaptation, excluding container
/// framing (magic, tables, checksum), which is O(segments), not O(entries).
pub fn storage_cost(n_params: u64, n_nonzero: u64, scheme: StorageScheme) -> StorageEstimate {
    let bytes = match scheme {
        StorageScheme::FullWeights => 4 * n_params,
        StorageScheme::PositionsAndValues => 8 * n_nonzero,
    };
    StorageEstimate { bytes }
}

// ─── rank correlation ───

/// Ranks with ties averaged, 1-based.
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        // positions i..=j share the average of ranks i+1..=j+1
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average-rank tie handling. Returns `NaN`
/// when either side has fewer than two points or no rank variance.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "paired samples required");
    if xs.len() < 2 {
        return f64::NAN;
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    cov / (vx * vy).sqrt()
}

// ─── sparsity sweep ───

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Structured,
    Unstructured,
    NonAdaptive,
}

impl Method {
    pub fn all() -> [Method; 3] {
        [Method::Structured, Method::Unstructured, Method::NonAdaptive]
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Structured => "structured",
            Method::Unstructured => "unstructured",
            Method::NonAdaptive => "non-adaptive",
        })
    }
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub sparsity: f64,
    pub method: Method,
    /// Median over `sweep_seeds` of the mean validation accuracy over the
    /// suite's derived tasks.
    pub accuracy: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn run_cell(
    model: &dyn Model,
    theta: &[f32],
    suite: &TaskSuite,
    cfg: &RunConfig,
    method: Method,
    sparsity: f64,
    seed: u64,
) -> Result<f64> {
    let mut c = cfg.clone();
    c.sparsity = sparsity;
    c.seed = seed;
    let mut total = 0.0;
    for task in &suite.derived {
        let run = match method {
            Method::Structured => {
                c.structured = true;
                diff_prune(model, theta, task, &c)?
            }
            Method::Unstructured => {
                c.structured = false;
                diff_prune(model, theta, task, &c)?
            }
            Method::NonAdaptive => nonadaptive_diff_prune(model, theta, task, &c)?,
        };
        total += accuracy_with(model, theta, Some(&run.diff), &task.val)?;
    }
    Ok(total / suite.derived.len() as f64)
}

/// Runs every method at every target rate in `cfg.sweep_sparsities`,
/// repeated over `cfg.sweep_seeds`, in parallel. Row order is rate-major
/// then method, independent of scheduling.
pub fn sparsity_sweep(
    model: &dyn Model,
    theta: &[f32],
    suite: &TaskSuite,
    cfg: &RunConfig,
) -> Result<Vec<SweepRow>> {
    let mut jobs = Vec::new();
    for &t in &cfg.sweep_sparsities {
        for method in Method::all() {
            for &seed in &cfg.sweep_seeds {
                jobs.push((t, method, seed));
            }
        }
    }
    let accs: Vec<f64> = jobs
        .par_iter()
        .map(|&(t, method, seed)| run_cell(model, theta, suite, cfg, method, t, seed))
        .collect::<Result<_>>()?;
    let per_seed = cfg.sweep_seeds.len();
    let rows = jobs
        .chunks(per_seed)
        .zip(accs.chunks(per_seed))
        .map(|(job, accs)| SweepRow {
            sparsity: job[0].0,
            method: job[0].1,
            accuracy: median(accs.to_vec()),
        })
        .collect();
    Ok(rows)
}

/// `sparsity,method,accuracy` lines, full float precision, deterministic.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("sparsity,method,accuracy\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.sparsity, r.method, r.accuracy));
    }
    out
}

// ─── tests ───
