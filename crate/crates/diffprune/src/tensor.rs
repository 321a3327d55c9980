//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! A [`Graph`] is a Wengert tape: every operation evaluates eagerly, appends a
//! node holding its forward value, and remembers its inputs. [`Var`] is a copy
//! handle into the tape. [`Graph::backward`] replays the tape in reverse
//! insertion order (inputs always precede outputs, so this is a topological
//! order) and accumulates gradients into every node that requires them.
//!
//! Storage is `f32` row-major; the two loss-style reductions (`reduce_sum`,
//! `softmax_cross_entropy`) accumulate in `f64` before rounding once. Every
//! completed operation is checked for non-finite outputs so NaN/Inf cannot
//! propagate silently; the offending op is named in the error.
//!
//! Broadcasting is deliberately narrow: `add` accepts a matrix plus a
//! row-vector bias and nothing else. Anything wider gets composed from
//! `matmul`/`reshape` at the call site, which keeps shape bugs loud.

use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`]. Cheap to copy, only meaningful for the
/// graph that produced it.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul,
    Transpose,
    /// Elementwise add of two same-shape tensors.
    Add,
    /// `[r, c]` matrix plus `[c]` row-vector bias.
    AddBias,
    Mul,
    Sigmoid,
    Log,
    Tanh,
    Relu,
    Clamp {
        lo: f32,
        hi: f32,
    },
    /// `x * scale + shift` with constant coefficients; only the scale
    /// matters to the backward pass, so the shift is applied at build time
    /// and not stored.
    Affine {
        scale: f32,
    },
    ReduceSum,
    Reshape,
    SoftmaxCrossEntropy {
        labels: Vec<usize>,
        classes: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul => "matmul",
            Op::Transpose => "transpose",
            Op::Add => "add",
            Op::AddBias => "add(bias)",
            Op::Mul => "mul",
            Op::Sigmoid => "sigmoid",
            Op::Log => "log",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::Clamp { .. } => "clamp",
            Op::Affine { .. } => "affine_stretch",
            Op::ReduceSum => "reduce_sum",
            Op::Reshape => "reshape",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<Var>,
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

/// Numerically stable logistic function; shared with the host-side gate math
/// so sampled and replayed chains agree bit for bit.
pub fn sigmoid32(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    // ── node construction ──

    fn push(&mut self, node: Node) -> Result<Var> {
        if node.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: node.op.name() });
        }
        self.nodes.push(node);
        Ok(Var(self.nodes.len() - 1))
    }

    /// Registers an input tensor. `requires_grad` marks it as a gradient sink.
    pub fn leaf(&mut self, data: Vec<f32>, shape: &[usize], requires_grad: bool) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidShape {
                op: "leaf",
                shape: shape.to_vec(),
                reason: "dimensions must be nonzero",
            });
        }
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "leaf",
                shape: shape.to_vec(),
                reason: "element count does not match data length",
            });
        }
        self.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            shape: shape.to_vec(),
            data,
            requires_grad,
            grad: None,
        })
    }

    /// Non-differentiable input (constants, one-hot encodings, masks).
    pub fn constant(&mut self, data: Vec<f32>, shape: &[usize]) -> Result<Var> {
        self.leaf(data, shape, false)
    }

    pub fn scalar_const(&mut self, v: f32) -> Result<Var> {
        self.constant(vec![v], &[1])
    }

    fn unary(&mut self, op: Op, x: Var, data: Vec<f32>) -> Result<Var> {
        let node = Node {
            requires_grad: self.nodes[x.0].requires_grad,
            shape: self.nodes[x.0].shape.clone(),
            op,
            inputs: vec![x],
            data,
            grad: None,
        };
        self.push(node)
    }

    // ── forward ops ──

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let da = &self.nodes[a.0].data;
        let db = &self.nodes[b.0].data;
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for kk in 0..k {
                let aik = da[i * k + kk];
                // One-hot encodings make lhs rows mostly zero; skipping them
                // turns the embedding matmul into a row gather.
                if aik != 0.0 {
                    let brow = &db[kk * n..(kk + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += aik * brow[j];
                    }
                }
            }
        }
        self.push(Node {
            op: Op::Matmul,
            inputs: vec![a, b],
            shape: vec![m, n],
            requires_grad: self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad,
            data: out,
            grad: None,
        })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                shape: s.clone(),
                reason: "expects rank 2",
            });
        }
        let (r, c) = (s[0], s[1]);
        let d = &self.nodes[x.0].data;
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        self.push(Node {
            op: Op::Transpose,
            inputs: vec![x],
            shape: vec![c, r],
            requires_grad: self.nodes[x.0].requires_grad,
            data: out,
            grad: None,
        })
    }

    /// Elementwise add, or matrix `[r, c]` plus row-vector bias `[c]`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (
            self.nodes[a.0].shape.clone(),
            self.nodes[b.0].shape.clone(),
        );
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        if sa == sb {
            let data = self.nodes[a.0]
                .data
                .iter()
                .zip(&self.nodes[b.0].data)
                .map(|(x, y)| x + y)
                .collect();
            return self.push(Node {
                op: Op::Add,
                inputs: vec![a, b],
                shape: sa,
                requires_grad: rg,
                data,
                grad: None,
            });
        }
        if sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0] {
            let (r, c) = (sa[0], sa[1]);
            let da = &self.nodes[a.0].data;
            let db = &self.nodes[b.0].data;
            let mut out = vec![0.0f32; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[i * c + j] = da[i * c + j] + db[j];
                }
            }
            return self.push(Node {
                op: Op::AddBias,
                inputs: vec![a, b],
                shape: sa,
                requires_grad: rg,
                data: out,
                grad: None,
            });
        }
        Err(Error::ShapeMismatch {
            op: "add",
            lhs: sa,
            rhs: sb,
        })
    }

    /// Strictly same-shape elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        self.push(Node {
            op: Op::Mul,
            inputs: vec![a, b],
            shape: self.nodes[a.0].shape.clone(),
            requires_grad: self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad,
            data,
            grad: None,
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let data = self.nodes[x.0].data.iter().map(|&v| sigmoid32(v)).collect();
        self.unary(Op::Sigmoid, x, data)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let data = self.nodes[x.0].data.iter().map(|&v| v.ln()).collect();
        self.unary(Op::Log, x, data)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let data = self.nodes[x.0].data.iter().map(|&v| v.tanh()).collect();
        self.unary(Op::Tanh, x, data)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self.nodes[x.0].data.iter().map(|&v| v.max(0.0)).collect();
        self.unary(Op::Relu, x, data)
    }

    /// `min(hi, max(lo, x))`. The subgradient passes through on the closed
    /// interval: it is 1 at exactly `lo` and `hi`, 0 strictly outside. The
    /// gate chain relies on this so boundary samples still move `alpha`.
    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Result<Var> {
        let data = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| v.max(lo).min(hi))
            .collect();
        self.unary(Op::Clamp { lo, hi }, x, data)
    }

    /// `x * scale + shift`.
    pub fn affine_stretch(&mut self, x: Var, scale: f32, shift: f32) -> Result<Var> {
        let data = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| v * scale + shift)
            .collect();
        self.unary(Op::Affine { scale }, x, data)
    }

    /// Sum of all elements, accumulated in f64, returned as a `[1]` scalar.
    pub fn reduce_sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.nodes[x.0].data.iter().map(|&v| v as f64).sum();
        let node = Node {
            op: Op::ReduceSum,
            inputs: vec![x],
            shape: vec![1],
            requires_grad: self.nodes[x.0].requires_grad,
            data: vec![s as f32],
            grad: None,
        };
        self.push(node)
    }

    /// Metadata-only view with a new shape; same element count required.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel != self.nodes[x.0].data.len() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                reason: "element count must be preserved",
            });
        }
        let node = Node {
            op: Op::Reshape,
            inputs: vec![x],
            shape: shape.to_vec(),
            requires_grad: self.nodes[x.0].requires_grad,
            data: self.nodes[x.0].data.clone(),
            grad: None,
        };
        self.push(node)
    }

    /// Mean cross-entropy of `[batch, classes]` logits against integer
    /// labels, as one fused op. Log-sum-exp and the mean run in f64.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.nodes[logits.0].shape.clone();
        if s.len() != 2 {
            return Err(Error::InvalidShape {
                op: "softmax_cross_entropy",
                shape: s,
                reason: "logits must be [batch, classes]",
            });
        }
        let (b, c) = (s[0], s[1]);
        if labels.len() != b {
            return Err(Error::LengthMismatch {
                what: "softmax_cross_entropy labels",
                expected: b,
                actual: labels.len(),
            });
        }
        for (row, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::LabelOutOfRange {
                    row,
                    label: y,
                    classes: c,
                });
            }
        }
        let d = &self.nodes[logits.0].data;
        let mut total = 0.0f64;
        for (row, &y) in labels.iter().enumerate() {
            let r = &d[row * c..(row + 1) * c];
            let m = r.iter().fold(f32::NEG_INFINITY, |a, &v| a.max(v)) as f64;
            let lse: f64 = m + r.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
            total += lse - r[y] as f64;
        }
        let mean = (total / b as f64) as f32;
        let node = Node {
            op: Op::SoftmaxCrossEntropy {
                labels: labels.to_vec(),
                classes: c,
            },
            inputs: vec![logits],
            shape: vec![1],
            requires_grad: self.nodes[logits.0].requires_grad,
            data: vec![mean],
            grad: None,
        };
        self.push(node)
    }

    // ── access ──

    pub fn data(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar value of a `[1]` node (loss readout).
    pub fn item(&self, v: Var) -> f32 {
        self.nodes[v.0].data[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ── backward ──

    /// Accumulates `d root / d node` into every reachable node with
    /// `requires_grad`. Repeated calls keep accumulating; use
    /// [`Graph::zero_grads`] between independent passes. Replay order is the
    /// reverse of insertion order, so it is deterministic.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].data.len() != 1 {
            return Err(Error::NonScalarRoot {
                shape: self.nodes[root.0].shape.clone(),
            });
        }
        if !self.nodes[root.0].requires_grad {
            return Err(Error::RootWithoutGrad);
        }
        let mut scratch: Vec<Option<Vec<f32>>> = vec![None; root.0 + 1];
        scratch[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let gout = match scratch[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let contributions = self.vjp(idx, &gout)?;
            let node = &mut self.nodes[idx];
            if node.requires_grad {
                let acc = node.grad.get_or_insert_with(|| vec![0.0; gout.len()]);
                for (a, g) in acc.iter_mut().zip(&gout) {
                    *a += g;
                }
            }
            for (var, g) in contributions {
                let slot = &mut scratch[var.0];
                match slot {
                    Some(acc) => {
                        for (a, gi) in acc.iter_mut().zip(&g) {
                            *a += gi;
                        }
                    }
                    None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian product of node `idx`: returns the gradient
    /// contribution for each input that requires one.
    fn vjp(&self, idx: usize, gout: &[f32]) -> Result<Vec<(Var, Vec<f32>)>> {
        let node = &self.nodes[idx];
        let mut out: Vec<(Var, Vec<f32>)> = Vec::new();
        let needs = |g: &Graph, v: Var| g.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if needs(self, a) {
                    let db = &self.nodes[b.0].data;
                    let mut ga = vec![0.0f32; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let g = gout[i * n + j];
                            if g != 0.0 {
                                for kk in 0..k {
                                    ga[i * k + kk] += g * db[kk * n + j];
                                }
                            }
                        }
                    }
                    out.push((a, ga));
                }
                if needs(self, b) {
                    let da = &self.nodes[a.0].data;
                    let mut gb = vec![0.0f32; k * n];
                    for i in 0..m {
                        for kk in 0..k {
                            let av = da[i * k + kk];
                            if av != 0.0 {
                                let grow = &gout[i * n..(i + 1) * n];
                                let brow = &mut gb[kk * n..(kk + 1) * n];
                                for j in 0..n {
                                    brow[j] += av * grow[j];
                                }
                            }
                        }
                    }
                    out.push((b, gb));
                }
            }
            Op::Transpose => {
                let x = node.inputs[0];
                if needs(self, x) {
                    let (c, r) = (node.shape[0], node.shape[1]);
                    let mut gx = vec![0.0f32; r * c];
                    for i in 0..c {
                        for j in 0..r {
                            gx[j * c + i] = gout[i * r + j];
                        }
                    }
                    out.push((x, gx));
                }
            }
            Op::Add => {
                for &v in &node.inputs {
                    if needs(self, v) {
                        out.push((v, gout.to_vec()));
                    }
                }
            }
            Op::AddBias => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                if needs(self, a) {
                    out.push((a, gout.to_vec()));
                }
                if needs(self, b) {
                    let (r, c) = (node.shape[0], node.shape[1]);
                    let mut gb = vec![0.0f32; c];
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] += gout[i * c + j];
                        }
                    }
                    out.push((b, gb));
                }
            }
            Op::Mul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                if needs(self, a) {
                    let gb: Vec<f32> = gout
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(g, y)| g * y)
                        .collect();
                    out.push((a, gb));
                }
                if needs(self, b) {
                    let ga: Vec<f32> = gout
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(g, x)| g * x)
                        .collect();
                    out.push((b, ga));
                }
            }
            Op::Sigmoid => {
                let x = node.inputs[0];
                if needs(self, x) {
                    let gx = gout
                        .iter()
                        .zip(&node.data)
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect();
                    out.push((x, gx));
                }
            }
            Op::Log => {
                let x = node.inputs[0];
                if needs(self, x) {
                    let gx = gout
                        .iter()
                        .zip(&self.nodes[x.0].data)
                        .map(|(g, v)| g / v)
                        .collect();
                    out.push((x, gx));
                }
            }
            Op::Tanh => {
                let x = node.inputs[0];
                if needs(self, x) {
                    let gx = gout
                        .iter()
                        .zip(&node.data)
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect();
                    out.push((x, gx));
                }
            }
            Op::Relu => {
                let x = node.inputs[0];
                if needs(self, x) {
                    let gx = gout
                        .iter()
                        .zip(&self.nodes[x.0].data)
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect();
                    out.push((x, gx));
                }
            }
            Op::Clamp { lo, hi } => {
                let x = node.inputs[0];
                if needs(self, x) {
                    let (lo, hi) = (*lo, *hi);
                    let gx = gout
                        .iter()
                        .zip(&self.nodes[x.0].data)
                        .map(|(g, v)| if *v >= lo && *v <= hi { *g } else { 0.0 })
                        .collect();
                    out.push((x, gx));
                }
            }
            Op::Affine { scale } => {
                let x = node.inputs[0];
                if needs(self, x) {
                    out.push((x, gout.iter().map(|g| g * scale).collect()));
                }
            }
            Op::ReduceSum => {
                let x = node.inputs[0];
                if needs(self, x) {
                    out.push((x, vec![gout[0]; self.nodes[x.0].data.len()]));
                }
            }
            Op::Reshape => {
                let x = node.inputs[0];
                if needs(self, x) {
                    out.push((x, gout.to_vec()));
                }
            }
            Op::SoftmaxCrossEntropy { labels, classes } => {
                let x = node.inputs[0];
                if needs(self, x) {
                    let c = *classes;
                    let b = labels.len();
                    let d = &self.nodes[x.0].data;
                    let scale = gout[0] as f64 / b as f64;
                    let mut gx = vec![0.0f32; b * c];
                    for (row, &y) in labels.iter().enumerate() {
                        let r = &d[row * c..(row + 1) * c];
                        let m = r.iter().fold(f32::NEG_INFINITY, |a, &v| a.max(v)) as f64;
                        let denom: f64 = r.iter().map(|&v| (v as f64 - m).exp()).sum();
                        for j in 0..c {
                            let p = (r[j] as f64 - m).exp() / denom;
                            let ind = if j == y { 1.0 } else { 0.0 };
                            gx[row * c + j] = ((p - ind) * scale) as f32;
                        }
                    }
                    out.push((x, gx));
                }
            }
        }
        for (_, g) in &out {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: node.op.name() });
            }
        }
        Ok(out)
    }
}

// ─── tests ───
