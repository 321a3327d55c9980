//! Synthetic sequence-classification tasks.
//!
//! The suite is built around one *base* task: each class owns a small set of
//! anchor tokens, and an example of that class is a sequence where every
//! position is, with probability `anchor_prob`, one of the class's anchors
//! and otherwise a uniformly random token. A model pretrained on the base
//! task is then adapted to *derived* tasks that perturb it in controlled,
//! increasingly localized ways:
//!
//! * `relabel` — identical inputs, classes renamed by a fixed permutation.
//!   Only the classifier head needs to change.
//! * `swap` — two pairs of tokens exchange identities in the input stream.
//!   A handful of embedding rows (plus whatever attends to them) must adapt.
//! * `parity` — the label collapses to class-index parity. The head must
//!   remap eight-way evidence onto two labels.
//!
//! All sampling is `ChaCha8` with one stream per (task, split), so any task
//! can be regenerated independently of the others and the suite is a pure
//! function of `suite_seed`.

use crate::config::RunConfig;
use crate::error::Result;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct TaskDataset {
    pub name: String,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub classes: usize,
}

#[derive(Clone, Debug)]
pub struct TaskSuite {
    pub base: TaskDataset,
    pub derived: Vec<TaskDataset>,
    pub vocab: usize,
    pub seq_len: usize,
}

impl TaskSuite {
    /// Looks up `base` or a derived task by name.
    pub fn task(&self, name: &str) -> Option<&TaskDataset> {
        if self.base.name == name {
            return Some(&self.base);
        }
        self.derived.iter().find(|t| t.name == name)
    }

    pub fn names(&self) -> Vec<&str> {
        let mut names = vec![self.base.name.as_str()];
        names.extend(self.derived.iter().map(|t| t.name.as_str()));
        names
    }
}

/// RNG stream ids. Every consumer of `suite_seed` draws from its own stream,
/// so adding a task or resizing a split never perturbs the others.
const STREAM_ANCHORS: u64 = 1_000;
const STREAM_RELABEL: u64 = 1_001;
const STREAM_SWAP: u64 = 1_002;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Token sets owned by each class, disjoint across classes.
fn assign_anchors(cfg: &RunConfig) -> Vec<Vec<u32>> {
    let mut tokens: Vec<u32> = (0..cfg.vocab as u32).collect();
    tokens.shuffle(&mut stream(cfg.suite_seed, STREAM_ANCHORS));
    tokens
        .chunks(cfg.anchors_per_class)
        .take(cfg.classes)
        .map(|c| c.to_vec())
        .collect()
}

/// Draws one split. Class labels go round-robin (exactly balanced), then the
/// example order is shuffled within the same stream.
fn draw_split(
    cfg: &RunConfig,
    anchors: &[Vec<u32>],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Example> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % cfg.classes;
        let tokens = (0..cfg.seq_len)
            .map(|_| {
                if rng.gen::<f64>() < cfg.anchor_prob {
                    *anchors[label].choose(rng).expect("anchor sets are nonempty")
                } else {
                    rng.gen_range(0..cfg.vocab as u32)
                }
            })
            .collect();
        out.push(Example { tokens, label });
    }
    out.shuffle(rng);
    out
}

fn draw_task(cfg: &RunConfig, anchors: &[Vec<u32>], name: &str, index: u64) -> TaskDataset {
    let train = draw_split(cfg, anchors, cfg.train_examples, &mut stream(cfg.suite_seed, index * 2));
    let val = draw_split(cfg, anchors, cfg.val_examples, &mut stream(cfg.suite_seed, index * 2 + 1));
    TaskDataset {
        name: name.into(),
        train,
        val,
        classes: cfg.classes,
    }
}

fn map_labels(task: TaskDataset, name: &str, f: impl Fn(usize) -> usize) -> TaskDataset {
    let remap = |mut ex: Vec<Example>| {
        for e in &mut ex {
            e.label = f(e.label);
        }
        ex
    };
    TaskDataset {
        name: name.into(),
        train: remap(task.train),
        val: remap(task.val),
        classes: task.classes,
    }
}

fn map_tokens(task: TaskDataset, name: &str, f: impl Fn(u32) -> u32) -> TaskDataset {
    let remap = |mut ex: Vec<Example>| {
        for e in &mut ex {
            for t in &mut e.tokens {
                *t = f(*t);
            }
        }
        ex
    };
    TaskDataset {
        name: name.into(),
        train: remap(task.train),
        val: remap(task.val),
        classes: task.classes,
    }
}

/// Builds the base task plus the `relabel`, `swap`, and `parity` variants.
pub fn build_suite(cfg: &RunConfig) -> Result<TaskSuite> {
    cfg.validate()?;
    let anchors = assign_anchors(cfg);

    let base = draw_task(cfg, &anchors, "base", 0);

    // relabel: fresh draws from the same input distribution, labels pushed
    // through a seeded permutation.
    let mut perm: Vec<usize> = (0..cfg.classes).collect();
    perm.shuffle(&mut stream(cfg.suite_seed, STREAM_RELABEL));
    let relabel = map_labels(draw_task(cfg, &anchors, "base", 1), "relabel", |c| perm[c]);

    // swap: classes/2 disjoint token pairs exchange identities everywhere in
    // the input (at least one pair). Labels are untouched, so only the
    // swapped tokens' embeddings carry new meaning — the one derived task a
    // head-only diff cannot solve, and the pair count scales the number of
    // encoder coordinates a sparse diff has to reach.
    let mut pool: Vec<u32> = (0..cfg.vocab as u32).collect();
    pool.shuffle(&mut stream(cfg.suite_seed, STREAM_SWAP));
    let pairs: Vec<(u32, u32)> = (0..(cfg.classes / 2).max(1))
        .map(|i| (pool[2 * i], pool[2 * i + 1]))
        .collect();
    let swap = map_tokens(draw_task(cfg, &anchors, "base", 2), "swap", |t| {
        for &(a, b) in &pairs {
            if t == a {
                return b;
            }
            if t == b {
                return a;
            }
        }
        t
    });

    // parity: same inputs, binary label from the class index.
    let parity = map_labels(draw_task(cfg, &anchors, "base", 3), "parity", |c| c % 2);

    Ok(TaskSuite {
        base,
        derived: vec![relabel, swap, parity],
        vocab: cfg.vocab,
        seq_len: cfg.seq_len,
    })
}

/// Fraction of examples carrying the most common label — the accuracy of a
/// constant classifier, useful as a sanity floor in tests.
pub fn majority_fraction(examples: &[Example], classes: usize) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let mut counts = vec![0usize; classes];
    for e in examples {
        counts[e.label] += 1;
    }
    *counts.iter().max().expect("classes >= 1") as f64 / examples.len() as f64
}

// ─── tests ───
