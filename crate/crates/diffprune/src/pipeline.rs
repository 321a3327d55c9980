//! Training pipelines: pretraining, gated diff training, projection,
//! fixed-mask finetuning, and the dense baselines.
//!
//! Every pipeline here trains *against a frozen base parameter vector* —
//! `theta` is read, never written, and task adaptation lives entirely in a
//! sparse diff. One SGD step builds a fresh graph: constants for `theta`,
//! trainable leaves for whatever the pipeline optimizes, a scalar loss, one
//! backward pass, and an in-place update of the host-side state. Graphs are
//! deliberately throwaway; all state that persists between steps is plain
//! `Vec<f32>`.
//!
//! Randomness is `ChaCha8` with one stream per purpose (batch order, gate
//! noise), so runs are reproducible bit-for-bit and adding a consumer never
//! shifts another's draws.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::reparam::{
    self, compose, draw_noise, expected_l0_graph, expected_l0_total, train_delta, DiffVector,
    GatedDiff,
};
use crate::space::FlatParamSpace;
use crate::task::{Example, TaskDataset};
use crate::tensor::{sigmoid32, Graph, Var};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

/// Training diverged once the loss passes this. Non-finite values are caught
/// op-by-op inside the graph; this additionally catches finite-but-runaway
/// losses. It is deliberately generous — a large `lambda` makes the penalty
/// term legitimately big at initialization.
const LOSS_CEILING: f64 = 1e8;

/// Evaluation builds graphs in chunks of this many examples to bound memory.
const EVAL_CHUNK: usize = 64;

const STREAM_SHUFFLE: u64 = 1;
const STREAM_NOISE: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-step loss over the epoch (risk plus penalty where one applies).
    pub train_loss: f64,
    pub val_accuracy: f64,
    /// Closed-form expected number of open gates; `None` for dense stages.
    pub expected_l0: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub result: T,
    pub epochs: Vec<EpochRecord>,
}

/// Per-stage epoch logs of a two-stage pipeline.
#[derive(Clone, Debug, Default)]
pub struct StageReports {
    pub train: Vec<EpochRecord>,
    pub finetune: Vec<EpochRecord>,
}

/// A finished adaptation run: the sparse diff to ship, the gate state when
/// the run was gate-based, and the epoch logs.
#[derive(Clone, Debug)]
pub struct PruneRun {
    pub diff: DiffVector,
    pub gated: Option<GatedDiff>,
    pub stages: StageReports,
}

// ─── shared step machinery ───

fn check_dim(space: &FlatParamSpace, theta: &[f32]) -> Result<()> {
    if theta.len() != space.dim() {
        return Err(Error::LengthMismatch {
            what: "base parameters",
            expected: space.dim(),
            actual: theta.len(),
        });
    }
    Ok(())
}

/// Frozen parameters: one constant per segment, reshaped.
fn const_params(g: &mut Graph, space: &FlatParamSpace, theta: &[f32]) -> Result<Vec<Var>> {
    space
        .segments()
        .iter()
        .map(|s| {
            let flat = g.constant(theta[s.range()].to_vec(), &[s.len])?;
            g.reshape(flat, &s.shape)
        })
        .collect()
}

/// `theta + delta` with a differentiable per-segment delta.
fn composed_params(
    g: &mut Graph,
    space: &FlatParamSpace,
    theta: &[f32],
    delta: &[Var],
) -> Result<Vec<Var>> {
    space
        .segments()
        .iter()
        .zip(delta)
        .map(|(s, &d)| {
            let flat = g.constant(theta[s.range()].to_vec(), &[s.len])?;
            let sum = g.add(flat, d)?;
            g.reshape(sum, &s.shape)
        })
        .collect()
}

fn shuffled_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn guard_loss(loss: f64, step: usize) -> Result<()> {
    if !loss.is_finite() || loss > LOSS_CEILING {
        return Err(Error::Diverged { step, loss });
    }
    Ok(())
}

fn sgd_into(host: &mut [f32], grad: &[f32], lr: f32, step: usize, loss: f64) -> Result<()> {
    debug_assert_eq!(host.len(), grad.len());
    for (h, &g) in host.iter_mut().zip(grad) {
        *h -= lr * g;
        if !h.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
    }
    Ok(())
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

// ─── evaluation ───

/// Classification accuracy of `theta` on `examples`. Ties in the logits go
/// to the lower class index, so evaluation is deterministic.
pub fn evaluate(model: &dyn Model, theta: &[f32], examples: &[Example]) -> Result<f64> {
    check_dim(model.space(), theta)?;
    if examples.is_empty() {
        return Err(Error::Malformed {
            reason: "empty evaluation set".into(),
        });
    }
    let mut correct = 0usize;
    for chunk in examples.chunks(EVAL_CHUNK) {
        let mut g = Graph::new();
        let params = const_params(&mut g, model.space(), theta)?;
        let refs: Vec<&Example> = chunk.iter().collect();
        let rows = model.logits_matrix(&mut g, &params, &refs)?;
        correct += rows
            .iter()
            .zip(chunk)
            .filter(|(row, ex)| argmax(row) == ex.label)
            .count();
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Accuracy of `theta` patched with an optional diff.
pub fn accuracy_with(
    model: &dyn Model,
    theta: &[f32],
    diff: Option<&DiffVector>,
    examples: &[Example],
) -> Result<f64> {
    match diff {
        None => evaluate(model, theta, examples),
        Some(dv) => evaluate(model, &compose(theta, dv)?, examples),
    }
}

// ─── pretraining ───

/// Trains base parameters from a fresh init on `data`. This is the only
/// pipeline that produces a `theta` rather than a diff against one.
pub fn pretrain(model: &dyn Model, data: &TaskDataset, cfg: &RunConfig) -> Result<TrainOutcome<Vec<f32>>> {
    let space = model.space().clone();
    let mut theta = model.init_theta(cfg.seed);
    let mut shuffle = stream(cfg.seed, STREAM_SHUFFLE);
    let lr = cfg.learning_rate as f32;
    let mut records = Vec::with_capacity(cfg.pretrain_epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.pretrain_epochs {
        let t0 = Instant::now();
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for batch_idx in shuffled_batches(data.train.len(), cfg.batch_size, &mut shuffle) {
            let batch: Vec<&Example> = batch_idx.iter().map(|&i| &data.train[i]).collect();
            let mut g = Graph::new();
            let leaves: Vec<Var> = space
                .segments()
                .iter()
                .map(|s| g.leaf(theta[s.range()].to_vec(), &[s.len], true))
                .collect::<Result<_>>()?;
            let params: Vec<Var> = space
                .segments()
                .iter()
                .zip(&leaves)
                .map(|(s, &v)| g.reshape(v, &s.shape))
                .collect::<Result<_>>()?;
            let risk = model.risk(&mut g, &params, &batch)?;
            let loss = g.item(risk) as f64;
            guard_loss(loss, step)?;
            g.backward(risk)?;
            for (s, &leaf) in space.segments().iter().zip(&leaves) {
                if let Some(grad) = g.grad(leaf) {
                    let grad = grad.to_vec();
                    sgd_into(&mut theta[s.range()], &grad, lr, step, loss)?;
                }
            }
            loss_sum += loss;
            n_batches += 1;
            step += 1;
        }
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n_batches as f64,
            val_accuracy: evaluate(model, &theta, &data.val)?,
            expected_l0: None,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(TrainOutcome {
        result: theta,
        epochs: records,
    })
}

// ─── gated diff training ───

/// The deterministic test-time gate `clamp(sigmoid(alpha) * (r-l) + l, 0, 1)`
/// applied to the diff weights (group gates multiplied in when structured,
/// head entries passed through). Used for epoch-level validation metrics
/// while gates are still stochastic.
pub fn expected_gate_delta(diff: &GatedDiff) -> Vec<f32> {
    let scale = (diff.gate.stretch.r - diff.gate.stretch.l) as f32;
    let shift = diff.gate.stretch.l as f32;
    let zhat = |alpha: f32| (sigmoid32(alpha) * scale + shift).clamp(0.0, 1.0);
    let mut delta = diff.w.clone();
    for i in diff.space.nonhead_positions() {
        delta[i] *= zhat(diff.gate.alpha[i]);
    }
    if let Some(part) = &diff.structure {
        for (j, group) in part.groups().iter().enumerate() {
            let zg = zhat(part.alpha[j]);
            for &i in group {
                delta[i] *= zg;
            }
        }
    }
    delta
}

/// Trains a gated diff on `data` against frozen `theta`: per-step noise,
/// stochastic gates in the graph, risk plus `lambda` times the closed-form
/// expected L0, SGD on diff weights and gate locations.
pub fn train_l0(
    model: &dyn Model,
    theta: &[f32],
    data: &TaskDataset,
    cfg: &RunConfig,
) -> Result<TrainOutcome<GatedDiff>> {
    let space = model.space().clone();
    check_dim(&space, theta)?;
    let mut diff = GatedDiff::new(
        space.clone(),
        cfg.stretch(),
        cfg.alpha_init as f32,
        cfg.w_init as f32,
        cfg.structured,
    );
    let mut shuffle = stream(cfg.seed, STREAM_SHUFFLE);
    let mut noise = stream(cfg.seed, STREAM_NOISE);
    let lr = cfg.learning_rate as f32;
    let mut records = Vec::with_capacity(cfg.epochs_train);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs_train {
        let t0 = Instant::now();
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for batch_idx in shuffled_batches(data.train.len(), cfg.batch_size, &mut shuffle) {
            let batch: Vec<&Example> = batch_idx.iter().map(|&i| &data.train[i]).collect();
            let u = draw_noise(&diff, &mut noise);
            let mut g = Graph::new();
            let td = train_delta(&mut g, &diff, &u)?;
            let params = composed_params(&mut g, &space, theta, &td.per_segment)?;
            let risk = model.risk(&mut g, &params, &batch)?;
            let l0 = expected_l0_graph(&mut g, &diff, &td.leaves)?;
            let penalty = g.affine_stretch(l0, cfg.lambda as f32, 0.0)?;
            let loss_var = g.add(risk, penalty)?;
            let loss = g.item(loss_var) as f64;
            guard_loss(loss, step)?;
            g.backward(loss_var)?;
            for &(si, v) in &td.leaves.w {
                if let Some(grad) = g.grad(v) {
                    let grad = grad.to_vec();
                    let range = space.segments()[si].range();
                    sgd_into(&mut diff.w[range], &grad, lr, step, loss)?;
                }
            }
            for &(si, v) in &td.leaves.alpha {
                if let Some(grad) = g.grad(v) {
                    let grad = grad.to_vec();
                    let range = space.segments()[si].range();
                    sgd_into(&mut diff.gate.alpha[range], &grad, lr, step, loss)?;
                }
            }
            for &(gi, v) in &td.leaves.group_alpha {
                if let Some(grad) = g.grad(v) {
                    let grad = grad.to_vec();
                    let part = diff.structure.as_mut().expect("group leaves imply structure");
                    sgd_into(&mut part.alpha[gi..gi + 1], &grad, lr, step, loss)?;
                }
            }
            loss_sum += loss;
            n_batches += 1;
            step += 1;
        }
        let eval_delta = expected_gate_delta(&diff);
        let theta_eval: Vec<f32> = theta.iter().zip(&eval_delta).map(|(t, d)| t + d).collect();
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n_batches as f64,
            val_accuracy: evaluate(model, &theta_eval, &data.val)?,
            expected_l0: Some(expected_l0_total(&diff)),
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(TrainOutcome {
        result: diff,
        epochs: records,
    })
}

// ─── projection ───

/// Keeps the `ceil(sparsity * nonhead_dim)` largest-magnitude non-head
/// entries (ties broken toward lower positions) and every head entry.
pub fn project_l0(dv: &DiffVector, sparsity: f64) -> Result<DiffVector> {
    if !(sparsity > 0.0 && sparsity <= 1.0) {
        return Err(Error::BadValue {
            key: "sparsity".into(),
            reason: format!("target rate {sparsity} outside (0, 1]"),
        });
    }
    let space = dv.space().clone();
    let k = (sparsity * space.nonhead_dim() as f64).ceil() as usize;
    type Entries = Vec<(u32, f32)>;
    let (head, mut nonhead): (Entries, Entries) = dv
        .entries()
        .iter()
        .partition(|&&(pos, _)| space.is_head(pos as usize));
    if nonhead.len() > k {
        nonhead.sort_by(|a, b| {
            b.1.abs()
                .total_cmp(&a.1.abs())
                .then(a.0.cmp(&b.0))
        });
        nonhead.truncate(k);
    }
    let mut entries = head;
    entries.extend(nonhead);
    entries.sort_by_key(|&(pos, _)| pos);
    DiffVector::new(space, entries)
}

// ─── fixed-mask finetuning ───

/// Optimizes the values of `dv` on its frozen support. In the graph the
/// dense per-segment leaf is multiplied by the 0/1 support mask, so
/// off-support coordinates receive exactly zero gradient and never move.
/// With `epochs_finetune = 0` the diff is returned unchanged.
pub fn finetune_fixed_mask(
    model: &dyn Model,
    theta: &[f32],
    dv: &DiffVector,
    data: &TaskDataset,
    cfg: &RunConfig,
) -> Result<TrainOutcome<DiffVector>> {
    let space = model.space().clone();
    check_dim(&space, theta)?;
    if space.as_ref() != dv.space().as_ref() {
        return Err(Error::SpaceMismatch {
            detail: "diff was built against a different parameter space".into(),
        });
    }
    if cfg.epochs_finetune == 0 {
        return Ok(TrainOutcome {
            result: dv.clone(),
            epochs: Vec::new(),
        });
    }
    let mut delta = dv.to_dense();
    let mut mask = vec![0.0f32; space.dim()];
    for &(pos, _) in dv.entries() {
        mask[pos as usize] = 1.0;
    }
    let touched: Vec<bool> = space
        .segments()
        .iter()
        .map(|s| mask[s.range()].iter().any(|&m| m != 0.0))
        .collect();
    let mut shuffle = stream(cfg.seed, STREAM_SHUFFLE);
    let lr = cfg.learning_rate as f32;
    let mut records = Vec::with_capacity(cfg.epochs_finetune);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs_finetune {
        let t0 = Instant::now();
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for batch_idx in shuffled_batches(data.train.len(), cfg.batch_size, &mut shuffle) {
            let batch: Vec<&Example> = batch_idx.iter().map(|&i| &data.train[i]).collect();
            let mut g = Graph::new();
            let mut params = Vec::with_capacity(space.segments().len());
            let mut leaves: Vec<Option<Var>> = Vec::with_capacity(space.segments().len());
            for (si, s) in space.segments().iter().enumerate() {
                let th = g.constant(theta[s.range()].to_vec(), &[s.len])?;
                if touched[si] {
                    let leaf = g.leaf(delta[s.range()].to_vec(), &[s.len], true)?;
                    let m = g.constant(mask[s.range()].to_vec(), &[s.len])?;
                    let gated = g.mul(leaf, m)?;
                    let sum = g.add(th, gated)?;
                    params.push(g.reshape(sum, &s.shape)?);
                    leaves.push(Some(leaf));
                } else {
                    params.push(g.reshape(th, &s.shape)?);
                    leaves.push(None);
                }
            }
            let risk = model.risk(&mut g, &params, &batch)?;
            let loss = g.item(risk) as f64;
            guard_loss(loss, step)?;
            g.backward(risk)?;
            for (s, leaf) in space.segments().iter().zip(&leaves) {
                if let Some(grad) = leaf.and_then(|v| g.grad(v)) {
                    let grad = grad.to_vec();
                    sgd_into(&mut delta[s.range()], &grad, lr, step, loss)?;
                }
            }
            loss_sum += loss;
            n_batches += 1;
            step += 1;
        }
        let theta_eval: Vec<f32> = theta
            .iter()
            .zip(&delta)
            .zip(&mask)
            .map(|((t, d), m)| t + d * m)
            .collect();
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n_batches as f64,
            val_accuracy: evaluate(model, &theta_eval, &data.val)?,
            expected_l0: None,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
    }
    // Defensive re-mask: off-support coordinates saw exactly-zero gradients,
    // but make the invariant structural rather than numerical.
    let masked: Vec<f32> = delta.iter().zip(&mask).map(|(d, m)| d * m).collect();
    Ok(TrainOutcome {
        result: DiffVector::from_dense(space, &masked)?,
        epochs: records,
    })
}

// ─── dense baselines ───

/// Dense diff training restricted to the segments marked trainable.
fn train_dense(
    model: &dyn Model,
    theta: &[f32],
    data: &TaskDataset,
    cfg: &RunConfig,
    trainable: &[bool],
    epochs: usize,
) -> Result<TrainOutcome<Vec<f32>>> {
    let space = model.space().clone();
    check_dim(&space, theta)?;
    let mut delta = vec![0.0f32; space.dim()];
    let mut shuffle = stream(cfg.seed, STREAM_SHUFFLE);
    let lr = cfg.learning_rate as f32;
    let mut records = Vec::with_capacity(epochs);
    let mut step = 0usize;
    for epoch in 0..epochs {
        let t0 = Instant::now();
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for batch_idx in shuffled_batches(data.train.len(), cfg.batch_size, &mut shuffle) {
            let batch: Vec<&Example> = batch_idx.iter().map(|&i| &data.train[i]).collect();
            let mut g = Graph::new();
            let mut params = Vec::with_capacity(space.segments().len());
            let mut leaves: Vec<Option<Var>> = Vec::with_capacity(space.segments().len());
            for (si, s) in space.segments().iter().enumerate() {
                let th = g.constant(theta[s.range()].to_vec(), &[s.len])?;
                if trainable[si] {
                    let leaf = g.leaf(delta[s.range()].to_vec(), &[s.len], true)?;
                    let sum = g.add(th, leaf)?;
                    params.push(g.reshape(sum, &s.shape)?);
                    leaves.push(Some(leaf));
                } else {
                    params.push(g.reshape(th, &s.shape)?);
                    leaves.push(None);
                }
            }
            let risk = model.risk(&mut g, &params, &batch)?;
            let loss = g.item(risk) as f64;
            guard_loss(loss, step)?;
            g.backward(risk)?;
            for (s, leaf) in space.segments().iter().zip(&leaves) {
                if let Some(grad) = leaf.and_then(|v| g.grad(v)) {
                    let grad = grad.to_vec();
                    sgd_into(&mut delta[s.range()], &grad, lr, step, loss)?;
                }
            }
            loss_sum += loss;
            n_batches += 1;
            step += 1;
        }
        let theta_eval: Vec<f32> = theta.iter().zip(&delta).map(|(t, d)| t + d).collect();
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n_batches as f64,
            val_accuracy: evaluate(model, &theta_eval, &data.val)?,
            expected_l0: None,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(TrainOutcome {
        result: delta,
        epochs: records,
    })
}

// ─── end-to-end pipelines ───

/// The full gate-based pipeline: train stochastic gates, finalize to a hard
/// sparse diff, project to the target rate, finetune values on the frozen
/// support.
pub fn diff_prune(
    model: &dyn Model,
    theta: &[f32],
    data: &TaskDataset,
    cfg: &RunConfig,
) -> Result<PruneRun> {
    let trained = train_l0(model, theta, data, cfg)?;
    let finalized = reparam::finalize(&trained.result, cfg.seed)?;
    let projected = project_l0(&finalized, cfg.sparsity)?;
    let ft = finetune_fixed_mask(model, theta, &projected, data, cfg)?;
    Ok(PruneRun {
        diff: ft.result,
        gated: Some(trained.result),
        stages: StageReports {
            train: trained.epochs,
            finetune: ft.epochs,
        },
    })
}

/// Baseline: dense diff training, magnitude projection to the target rate,
/// fixed-mask finetuning. Same stage budgets as [`diff_prune`], no gates.
pub fn nonadaptive_diff_prune(
    model: &dyn Model,
    theta: &[f32],
    data: &TaskDataset,
    cfg: &RunConfig,
) -> Result<PruneRun> {
    let space = model.space().clone();
    let trainable = vec![true; space.segments().len()];
    let dense = train_dense(model, theta, data, cfg, &trainable, cfg.epochs_train)?;
    let dv = DiffVector::from_dense(space, &dense.result)?;
    let projected = project_l0(&dv, cfg.sparsity)?;
    let ft = finetune_fixed_mask(model, theta, &projected, data, cfg)?;
    Ok(PruneRun {
        diff: ft.result,
        gated: None,
        stages: StageReports {
            train: dense.epochs,
            finetune: ft.epochs,
        },
    })
}

/// Baseline: unconstrained finetuning, expressed as the non-adaptive
/// pipeline at a target rate of 1 (projection keeps everything, so both
/// stages train the full diff).
pub fn full_finetune(
    model: &dyn Model,
    theta: &[f32],
    data: &TaskDataset,
    cfg: &RunConfig,
) -> Result<PruneRun> {
    let mut cfg = cfg.clone();
    cfg.sparsity = 1.0;
    nonadaptive_diff_prune(model, theta, data, &cfg)
}

/// Baseline: dense training of only the last non-head layer plus the head,
/// with the same total epoch budget as the two-stage pipelines.
pub fn last_layer_finetune(
    model: &dyn Model,
    theta: &[f32],
    data: &TaskDataset,
    cfg: &RunConfig,
) -> Result<PruneRun> {
    let space = model.space().clone();
    let last = space.penultimate_layer();
    let trainable: Vec<bool> = space
        .segments()
        .iter()
        .map(|s| s.head || s.layer == last)
        .collect();
    let dense = train_dense(
        model,
        theta,
        data,
        cfg,
        &trainable,
        cfg.epochs_train + cfg.epochs_finetune,
    )?;
    let dv = DiffVector::from_dense(space, &dense.result)?;
    Ok(PruneRun {
        diff: dv,
        gated: None,
        stages: StageReports {
            train: dense.epochs,
            finetune: Vec::new(),
        },
    })
}

// ─── tests ───
