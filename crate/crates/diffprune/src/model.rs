//! Desk-scale classifiers with flat, segment-addressed parameters.
//!
//! Both models take a token sequence and produce class logits, and both
//! describe their parameters as a [`FlatParamSpace`] so the diff machinery
//! can address every weight by flat position without knowing anything about
//! architectures. The graph only ever sees per-segment vectors reshaped to
//! the segment's shape.
//!
//! The transformer avoids row slicing entirely: splitting `[L, d]` into `h`
//! heads is a row-major reshape to `[L*h, d/h]` (row `i*h + head` holds
//! position `i`'s slice for that head), and cross-head attention terms are
//! killed by a constant 0/1 block mask. Attention weights are elementwise
//! sigmoid scaled by `1/L` rather than a row softmax, which keeps the op set
//! small and is perfectly adequate at this scale.

use crate::config::{ModelKind, RunConfig};
use crate::error::{Error, Result};
use crate::space::{seg, FlatParamSpace, Segment};
use crate::task::Example;
use crate::tensor::{Graph, Var};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

pub trait Model: Send + Sync {
    fn space(&self) -> &Arc<FlatParamSpace>;

    fn classes(&self) -> usize;

    /// Fresh parameters: Xavier-uniform matrices, zero biases, deterministic
    /// in `seed`.
    fn init_theta(&self, seed: u64) -> Vec<f32>;

    /// Logits for one example as a `[1, classes]` node. `params` holds one
    /// node per segment, index-aligned with `space().segments()` and already
    /// reshaped to each segment's shape.
    fn example_logits(&self, g: &mut Graph, params: &[Var], tokens: &[u32]) -> Result<Var>;

    /// Mean cross-entropy over a batch. The default builds one logits chain
    /// per example and averages the per-example losses; implementations with
    /// a batched forward pass override this.
    fn risk(&self, g: &mut Graph, params: &[Var], batch: &[&Example]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Malformed {
                reason: "empty batch".into(),
            });
        }
        let mut total: Option<Var> = None;
        for ex in batch {
            let logits = self.example_logits(g, params, &ex.tokens)?;
            let ce = g.softmax_cross_entropy(logits, &[ex.label])?;
            total = Some(match total {
                Some(t) => g.add(t, ce)?,
                None => ce,
            });
        }
        let total = total.expect("batch is nonempty");
        g.affine_stretch(total, 1.0 / batch.len() as f32, 0.0)
    }

    /// Row-major `[n, classes]` logits for a list of examples, read out of
    /// the graph. Used by evaluation, which only needs values.
    fn logits_matrix(
        &self,
        g: &mut Graph,
        params: &[Var],
        examples: &[&Example],
    ) -> Result<Vec<Vec<f32>>> {
        examples
            .iter()
            .map(|ex| {
                let v = self.example_logits(g, params, &ex.tokens)?;
                Ok(g.data(v).to_vec())
            })
            .collect()
    }
}

pub fn build(cfg: &RunConfig) -> Result<Box<dyn Model>> {
    Ok(match cfg.model {
        ModelKind::Mlp => Box::new(Mlp::new(cfg)?),
        ModelKind::Transformer => Box::new(TinyTransformer::new(cfg)?),
    })
}

/// Xavier-uniform init for every rank-2 segment, zeros for the rest, drawn
/// in segment order from a single seeded stream.
fn xavier_theta(space: &FlatParamSpace, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = vec![0.0f32; space.dim()];
    for s in space.segments() {
        if let [rows, cols] = s.shape[..] {
            let limit = (6.0 / (rows + cols) as f64).sqrt() as f32;
            for v in &mut theta[s.range()] {
                *v = rng.gen_range(-limit..limit);
            }
        }
    }
    theta
}

fn segment_index(space: &FlatParamSpace, name: &str) -> usize {
    space
        .segments()
        .iter()
        .position(|s| s.name == name)
        .expect("segment was added at construction")
}

/// Appends a segment at the running offset.
fn push_seg(segs: &mut Vec<Segment>, offset: &mut usize, name: &str, shape: &[usize], layer: u16, head: bool) {
    let s = seg(name, *offset, shape, layer, head);
    *offset += s.len;
    segs.push(s);
}

// ─── MLP ───

/// Bag-of-positions MLP: the input is the concatenation of one-hot token
/// vectors (position is encoded by the slot), followed by `depth` ReLU
/// layers and a linear head.
pub struct Mlp {
    space: Arc<FlatParamSpace>,
    vocab: usize,
    seq_len: usize,
    classes: usize,
    /// `(weight, bias)` segment indices per hidden layer.
    hidden: Vec<(usize, usize)>,
    head: (usize, usize),
}

impl Mlp {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let in_dim = cfg.seq_len * cfg.vocab;
        let mut segs = Vec::new();
        let mut offset = 0;
        let mut fan_in = in_dim;
        for i in 0..cfg.depth {
            push_seg(&mut segs, &mut offset, &format!("fc{i}.w"), &[fan_in, cfg.width], i as u16, false);
            push_seg(&mut segs, &mut offset, &format!("fc{i}.b"), &[cfg.width], i as u16, false);
            fan_in = cfg.width;
        }
        push_seg(&mut segs, &mut offset, "head.w", &[fan_in, cfg.classes], cfg.depth as u16, true);
        push_seg(&mut segs, &mut offset, "head.b", &[cfg.classes], cfg.depth as u16, true);
        let space = Arc::new(FlatParamSpace::new(segs)?);
        let hidden = (0..cfg.depth)
            .map(|i| {
                (
                    segment_index(&space, &format!("fc{i}.w")),
                    segment_index(&space, &format!("fc{i}.b")),
                )
            })
            .collect();
        let head = (
            segment_index(&space, "head.w"),
            segment_index(&space, "head.b"),
        );
        Ok(Mlp {
            space,
            vocab: cfg.vocab,
            seq_len: cfg.seq_len,
            classes: cfg.classes,
            hidden,
            head,
        })
    }

    /// One-hot input rows, `[n, seq_len * vocab]`.
    fn input_rows(&self, g: &mut Graph, examples: &[&[u32]]) -> Result<Var> {
        let in_dim = self.seq_len * self.vocab;
        let mut data = vec![0.0f32; examples.len() * in_dim];
        for (row, tokens) in examples.iter().enumerate() {
            debug_assert_eq!(tokens.len(), self.seq_len);
            for (i, &t) in tokens.iter().enumerate() {
                data[row * in_dim + i * self.vocab + t as usize] = 1.0;
            }
        }
        g.constant(data, &[examples.len(), in_dim])
    }

    fn forward(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for &(w, b) in &self.hidden {
            let lin = g.matmul(h, params[w])?;
            let lin = g.add(lin, params[b])?;
            h = g.relu(lin)?;
        }
        let logits = g.matmul(h, params[self.head.0])?;
        g.add(logits, params[self.head.1])
    }
}

impl Model for Mlp {
    fn space(&self) -> &Arc<FlatParamSpace> {
        &self.space
    }

    fn classes(&self) -> usize {
        self.classes
    }

    fn init_theta(&self, seed: u64) -> Vec<f32> {
        xavier_theta(&self.space, seed)
    }

    fn example_logits(&self, g: &mut Graph, params: &[Var], tokens: &[u32]) -> Result<Var> {
        let x = self.input_rows(g, &[tokens])?;
        self.forward(g, params, x)
    }

    fn risk(&self, g: &mut Graph, params: &[Var], batch: &[&Example]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Malformed {
                reason: "empty batch".into(),
            });
        }
        let rows: Vec<&[u32]> = batch.iter().map(|e| e.tokens.as_slice()).collect();
        let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
        let x = self.input_rows(g, &rows)?;
        let logits = self.forward(g, params, x)?;
        g.softmax_cross_entropy(logits, &labels)
    }

    fn logits_matrix(
        &self,
        g: &mut Graph,
        params: &[Var],
        examples: &[&Example],
    ) -> Result<Vec<Vec<f32>>> {
        let rows: Vec<&[u32]> = examples.iter().map(|e| e.tokens.as_slice()).collect();
        let x = self.input_rows(g, &rows)?;
        let logits = self.forward(g, params, x)?;
        let data = g.data(logits);
        Ok(data.chunks(self.classes).map(<[f32]>::to_vec).collect())
    }
}

// ─── transformer ───

/// Segment indices for one encoder block.
struct Block {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Two-ish-layer encoder: token+position one-hot → shared embedding matrix →
/// residual attention/FFN blocks → mean pool → linear head.
pub struct TinyTransformer {
    space: Arc<FlatParamSpace>,
    vocab: usize,
    seq_len: usize,
    classes: usize,
    d_model: usize,
    heads: usize,
    embed: usize,
    blocks: Vec<Block>,
    head: (usize, usize),
}

impl TinyTransformer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let d = cfg.d_model;
        let mut segs = Vec::new();
        let mut offset = 0;
        // Token and position embeddings live in one matrix; the input one-hot
        // has vocab + seq_len columns, so a single matmul adds them.
        push_seg(&mut segs, &mut offset, "embed", &[cfg.vocab + cfg.seq_len, d], 0, false);
        for i in 0..cfg.layers {
            let layer = (1 + i) as u16;
            let mut p = |name: &str, shape: &[usize]| {
                push_seg(&mut segs, &mut offset, &format!("enc{i}.{name}"), shape, layer, false)
            };
            p("wq", &[d, d]);
            p("bq", &[d]);
            p("wk", &[d, d]);
            p("bk", &[d]);
            p("wv", &[d, d]);
            p("bv", &[d]);
            p("wo", &[d, d]);
            p("bo", &[d]);
            p("ffn1.w", &[d, cfg.d_ff]);
            p("ffn1.b", &[cfg.d_ff]);
            p("ffn2.w", &[cfg.d_ff, d]);
            p("ffn2.b", &[d]);
        }
        let head_layer = (cfg.layers + 1) as u16;
        push_seg(&mut segs, &mut offset, "head.w", &[d, cfg.classes], head_layer, true);
        push_seg(&mut segs, &mut offset, "head.b", &[cfg.classes], head_layer, true);
        let space = Arc::new(FlatParamSpace::new(segs)?);
        let blocks = (0..cfg.layers)
            .map(|i| {
                let at = |name: &str| segment_index(&space, &format!("enc{i}.{name}"));
                Block {
                    wq: at("wq"),
                    bq: at("bq"),
                    wk: at("wk"),
                    bk: at("bk"),
                    wv: at("wv"),
                    bv: at("bv"),
                    wo: at("wo"),
                    bo: at("bo"),
                    w1: at("ffn1.w"),
                    b1: at("ffn1.b"),
                    w2: at("ffn2.w"),
                    b2: at("ffn2.b"),
                }
            })
            .collect();
        let head = (
            segment_index(&space, "head.w"),
            segment_index(&space, "head.b"),
        );
        let embed = segment_index(&space, "embed");
        Ok(TinyTransformer {
            space,
            vocab: cfg.vocab,
            seq_len: cfg.seq_len,
            classes: cfg.classes,
            d_model: d,
            heads: cfg.heads,
            embed,
            blocks,
            head,
        })
    }

    /// `[L, vocab + L]` one-hot of token identity and position.
    fn input_onehot(&self, g: &mut Graph, tokens: &[u32]) -> Result<Var> {
        let cols = self.vocab + self.seq_len;
        let mut data = vec![0.0f32; self.seq_len * cols];
        for (i, &t) in tokens.iter().enumerate() {
            data[i * cols + t as usize] = 1.0;
            data[i * cols + self.vocab + i] = 1.0;
        }
        g.constant(data, &[self.seq_len, cols])
    }

    /// `[L*h, L*h]` mask keeping only same-head score entries. After the
    /// head-split reshape, row `i*h + k` belongs to head `k`, so the mask is
    /// 1 exactly where `row % h == col % h`.
    fn head_mask(&self, g: &mut Graph) -> Result<Var> {
        let n = self.seq_len * self.heads;
        let mut data = vec![0.0f32; n * n];
        for row in 0..n {
            for col in 0..n {
                if row % self.heads == col % self.heads {
                    data[row * n + col] = 1.0;
                }
            }
        }
        g.constant(data, &[n, n])
    }

    fn project(&self, g: &mut Graph, h: Var, w: Var, b: Var) -> Result<Var> {
        let lin = g.matmul(h, w)?;
        g.add(lin, b)
    }
}

impl Model for TinyTransformer {
    fn space(&self) -> &Arc<FlatParamSpace> {
        &self.space
    }

    fn classes(&self) -> usize {
        self.classes
    }

    fn init_theta(&self, seed: u64) -> Vec<f32> {
        xavier_theta(&self.space, seed)
    }

    fn example_logits(&self, g: &mut Graph, params: &[Var], tokens: &[u32]) -> Result<Var> {
        if tokens.len() != self.seq_len {
            return Err(Error::LengthMismatch {
                what: "token sequence",
                expected: self.seq_len,
                actual: tokens.len(),
            });
        }
        let l = self.seq_len;
        let h = self.heads;
        let dk = self.d_model / h;
        let x = self.input_onehot(g, tokens)?;
        let mut hid = g.matmul(x, params[self.embed])?; // [L, d]
        for blk in &self.blocks {
            let q = self.project(g, hid, params[blk.wq], params[blk.bq])?;
            let k = self.project(g, hid, params[blk.wk], params[blk.bk])?;
            let v = self.project(g, hid, params[blk.wv], params[blk.bv])?;
            let qr = g.reshape(q, &[l * h, dk])?;
            let kr = g.reshape(k, &[l * h, dk])?;
            let vr = g.reshape(v, &[l * h, dk])?;
            let kt = g.transpose(kr)?;
            let scores = g.matmul(qr, kt)?; // [L*h, L*h], cross-head rows included
            let scores = g.affine_stretch(scores, 1.0 / (dk as f32).sqrt(), 0.0)?;
            let gates = g.sigmoid(scores)?;
            let mask = self.head_mask(g)?;
            let gates = g.mul(gates, mask)?;
            let attn = g.affine_stretch(gates, 1.0 / l as f32, 0.0)?;
            let ctx = g.matmul(attn, vr)?; // [L*h, dk]
            let ctx = g.reshape(ctx, &[l, self.d_model])?;
            let out = self.project(g, ctx, params[blk.wo], params[blk.bo])?;
            hid = g.add(hid, out)?;
            let f1 = self.project(g, hid, params[blk.w1], params[blk.b1])?;
            let f1 = g.relu(f1)?;
            let f2 = self.project(g, f1, params[blk.w2], params[blk.b2])?;
            hid = g.add(hid, f2)?;
        }
        let pool = g.constant(vec![1.0 / l as f32; l], &[1, l])?;
        let pooled = g.matmul(pool, hid)?; // [1, d]
        self.project(g, pooled, params[self.head.0], params[self.head.1])
    }
}

// ─── tests ───
