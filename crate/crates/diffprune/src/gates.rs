//! Hard-Concrete stochastic gates.
//!
//! Each gated coordinate carries a location parameter `alpha`. A gate draw
//! starts from uniform noise `u`, pushes it through a logistic reparameterized
//! by `alpha`, stretches the result from `(0, 1)` to `(l, r)` with `l < 0` and
//! `r > 1`, and clamps back to `[0, 1]`:
//!
//! ```text
//! s    = sigmoid(log u - log(1 - u) + alpha)
//! sbar = s * (r - l) + l
//! z    = min(1, max(0, sbar))
//! ```
//!
//! The stretch puts probability mass on exactly 0 and exactly 1, so a sampled
//! gate can switch a coordinate fully off while staying differentiable in
//! `alpha` everywhere the clamp is not strictly saturated. The probability of
//! a nonzero gate has the closed form `sigmoid(alpha - log(-l / r))`, which is
//! what the training objective penalizes.
//!
//! Temperature is fixed at 1 throughout: one fewer knob, and the stretch
//! limits already control the saturation behavior.

use crate::error::{Error, Result};
use crate::tensor::{sigmoid32, Graph, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Noise is drawn in `(NOISE_EPS, 1 - NOISE_EPS)` so `log u` and `log(1 - u)`
/// stay finite in f32.
pub const NOISE_EPS: f32 = 1e-6;

/// Stretch interval `(l, r)` around the unit interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stretch {
    pub l: f64,
    pub r: f64,
}

impl Stretch {
    pub fn new(l: f64, r: f64) -> Result<Self> {
        if !(l < 0.0 && r > 1.0 && l.is_finite() && r.is_finite()) {
            return Err(Error::BadStretch { l, r });
        }
        Ok(Stretch { l, r })
    }

    /// `log(-l / r)`, the offset that turns `alpha` into the logit of
    /// `P(z != 0)`.
    pub fn log_ratio(&self) -> f64 {
        (-self.l / self.r).ln()
    }
}

impl Default for Stretch {
    /// The stretch used throughout: `(-1.5, 1.5)`.
    fn default() -> Self {
        Stretch { l: -1.5, r: 1.5 }
    }
}

/// Per-coordinate gate state: one location parameter per gated coordinate
/// plus the shared stretch.
#[derive(Clone, Debug)]
pub struct GateParams {
    pub alpha: Vec<f32>,
    pub stretch: Stretch,
}

/// One drawn gate realization, with the intermediates kept for inspection.
#[derive(Clone, Debug)]
pub struct GateSample {
    pub u: Vec<f32>,
    pub s: Vec<f32>,
    pub sbar: Vec<f32>,
    pub z: Vec<f32>,
}

fn validate_noise(u: &[f32]) -> Result<()> {
    for (i, &v) in u.iter().enumerate() {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::NoiseOutOfRange { index: i, value: v });
        }
    }
    Ok(())
}

/// Draws `n` noise values in `(NOISE_EPS, 1 - NOISE_EPS)` from `rng`.
pub fn draw_noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| NOISE_EPS + rng.gen::<f32>() * (1.0 - 2.0 * NOISE_EPS))
        .collect()
}

/// Evaluates the gate chain on the host, mirroring the graph version op for
/// op (same f32 operation order) so finalized gates and training-time gates
/// agree bit for bit on identical noise.
pub fn sample_gate(params: &GateParams, u: &[f32]) -> Result<GateSample> {
    if u.len() != params.alpha.len() {
        return Err(Error::LengthMismatch {
            what: "gate noise",
            expected: params.alpha.len(),
            actual: u.len(),
        });
    }
    validate_noise(u)?;
    let scale = (params.stretch.r - params.stretch.l) as f32;
    let shift = params.stretch.l as f32;
    let mut s = Vec::with_capacity(u.len());
    let mut sbar = Vec::with_capacity(u.len());
    let mut z = Vec::with_capacity(u.len());
    for (&ui, &ai) in u.iter().zip(&params.alpha) {
        // Bit-identical to the graph's op sequence: IEEE `1.0 - u` is the
        // same operation as the graph's `u * -1.0 + 1.0`, and `clamp` equals
        // its `max(0).min(1)` for the finite inputs validated above.
        let logit = ui.ln() - (1.0 - ui).ln();
        let si = sigmoid32(logit + ai);
        let sb = si * scale + shift;
        s.push(si);
        sbar.push(sb);
        z.push(sb.clamp(0.0, 1.0));
    }
    Ok(GateSample {
        u: u.to_vec(),
        s,
        sbar,
        z,
    })
}

/// Builds the gate chain inside a graph so gradients flow from `z` back to
/// the `alpha` leaf. The noise enters as a constant leaf.
pub fn sample_gate_graph(g: &mut Graph, alpha: Var, u: &[f32], stretch: Stretch) -> Result<Var> {
    if u.len() != g.data(alpha).len() {
        return Err(Error::LengthMismatch {
            what: "gate noise",
            expected: g.data(alpha).len(),
            actual: u.len(),
        });
    }
    validate_noise(u)?;
    let n = u.len();
    let uv = g.constant(u.to_vec(), &[n])?;
    let log_u = g.log(uv)?;
    let one_minus_u = g.affine_stretch(uv, -1.0, 1.0)?;
    let log_omu = g.log(one_minus_u)?;
    let neg_log_omu = g.affine_stretch(log_omu, -1.0, 0.0)?;
    let logit_u = g.add(log_u, neg_log_omu)?;
    let pre = g.add(logit_u, alpha)?;
    let s = g.sigmoid(pre)?;
    let sbar = g.affine_stretch(s, (stretch.r - stretch.l) as f32, stretch.l as f32)?;
    g.clamp(sbar, 0.0, 1.0)
}

/// Per-coordinate probability that the sampled gate is nonzero:
/// `sigmoid(alpha - log(-l / r))`. This is also each coordinate's
/// contribution to the expected L0 of the gated vector.
pub fn expected_l0(params: &GateParams) -> Vec<f64> {
    let c = params.stretch.log_ratio();
    params
        .alpha
        .iter()
        .map(|&a| sigmoid64(a as f64 - c))
        .collect()
}

pub fn sigmoid64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Deterministic end-of-training gate realization: one seeded noise draw
/// pushed through the chain. The result is not necessarily binary — interior
/// values are kept and folded into the stored diff — but saturated-low gates
/// come out exactly zero, which is where the sparsity comes from.
pub fn finalize_gate(params: &GateParams, seed: u64) -> GateSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = draw_noise(&mut rng, params.alpha.len());
    sample_gate(params, &u).expect("drawn noise is always strictly inside (0, 1)")
}

// ─── tests ───
