//! The seven differentiable approximations of uniform quantization.
//!
//! Each quantizer is a custom-gradient node: the forward values and the
//! elementwise backward multiplier are computed here and recorded on the
//! tape via [`Tape::custom_unary`]. At evaluation time every quantizer
//! collapses to hard rounding.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::{self, slot};
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum QuantKind {
    Aun,
    Ste,
    Uq,
    Sga,
    Sth,
    Dsq,
    Sra,
    HardRound,
}

impl QuantKind {
    pub const TRAINABLE: [QuantKind; 7] = [
        QuantKind::Aun,
        QuantKind::Ste,
        QuantKind::Uq,
        QuantKind::Sga,
        QuantKind::Sth,
        QuantKind::Dsq,
        QuantKind::Sra,
    ];

    pub fn name(self) -> &'static str {
        match self {
            QuantKind::Aun => "aun",
            QuantKind::Ste => "ste",
            QuantKind::Uq => "uq",
            QuantKind::Sga => "sga",
            QuantKind::Sth => "sth",
            QuantKind::Dsq => "dsq",
            QuantKind::Sra => "sra",
            QuantKind::HardRound => "round",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "aun" => QuantKind::Aun,
            "ste" => QuantKind::Ste,
            "uq" => QuantKind::Uq,
            "sga" => QuantKind::Sga,
            "sth" => QuantKind::Sth,
            "dsq" => QuantKind::Dsq,
            "sra" => QuantKind::Sra,
            "round" => QuantKind::HardRound,
            other => return Err(Error::invalid(format!("unknown quantizer kind '{other}'"))),
        })
    }
}

/// Which approximation to use plus its hyper-parameters. Kinds that do
/// not read a given parameter ignore it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantizerSpec {
    pub kind: QuantKind,
    /// Annealing rate of the temperature schedule (SGA/SRA).
    pub c: f64,
    /// Schedule anchor in iterations (SGA/SRA/STH).
    pub t0: u64,
    /// Sharpness of the DS-Q tanh surrogate.
    pub k: f64,
    /// Clamp for the fractional part before arctanh.
    pub epsilon: f64,
}

impl QuantizerSpec {
    pub fn new(kind: QuantKind) -> Self {
        QuantizerSpec { kind, c: 0.0003, t0: 960_000, k: 0.1, epsilon: 1e-6 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.k > 0.0) {
            return Err(Error::invalid(format!("c and k must be positive (c={}, k={})", self.c, self.k)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.1) {
            return Err(Error::invalid(format!("epsilon must lie in (0, 0.1), got {}", self.epsilon)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-call quantization context: iteration, mode, and one replayable
/// noise substream per quantizer slot.
pub struct QuantContext {
    pub t: u64,
    pub mode: Mode,
    pub rng_ent: ChaCha8Rng,
    pub rng_dec: ChaCha8Rng,
}

impl QuantContext {
    pub fn new(mode: Mode, t: u64, experiment_hash: u64) -> Self {
        QuantContext {
            t,
            mode,
            rng_ent: rng::substream(&[experiment_hash, t, slot::QUANT_ENT]),
            rng_dec: rng::substream(&[experiment_hash, t, slot::QUANT_DEC]),
        }
    }
}

/// The two quantized views of the same latent: one for the entropy model
/// and one for the decoder.
#[derive(Clone, Copy, Debug)]
pub struct LatentPair {
    pub y_ent: Var,
    pub y_dec: Var,
}

/// τ = min(0.5, 0.5·exp(−c·(t − t0))).
pub fn tau_schedule(spec: &QuantizerSpec, t: u64) -> f64 {
    let dt = t as f64 - spec.t0 as f64;
    (0.5 * (-spec.c * dt).exp()).min(0.5)
}

/// Rounding with ties away from zero; applied identically at train and
/// test time so rounding-forward quantizers are bit-identical across modes.
#[inline]
pub fn round_half_away(x: f32) -> f32 {
    x.round()
}

/// P(δ = 1) of the annealed stochastic rounding distribution, with the
/// fractional part r already clamped to [ε, 1−ε]:
/// p ∝ exp(−arctanh(1−r)/τ), 1−p ∝ exp(−arctanh(r)/τ).
pub fn p_tau(r: f64, tau: f64) -> f64 {
    let logit = (r.atanh() - (1.0 - r).atanh()) / tau;
    sigmoid(logit)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn clamp_frac(y: f64, eps: f64) -> (f64, bool) {
    let r = (y - y.floor()).clamp(0.0, 1.0);
    if r < eps {
        (eps, true)
    } else if r > 1.0 - eps {
        (1.0 - eps, true)
    } else {
        (r, false)
    }
}

/// Forward value and exact derivative of the Gumbel-softmax relaxation
/// for one element, with frozen Gumbel draws g0 (paired with log p) and
/// g1 (paired with log(1−p)).
pub fn sga_element(y: f64, g0: f64, g1: f64, tau: f64, eps: f64) -> (f64, f64) {
    let fl = y.floor();
    let (r, clamped) = clamp_frac(y, eps);
    let logit = (r.atanh() - (1.0 - r).atanh()) / tau;
    // softmax over {log p + g0, log(1−p) + g1} at temperature τ
    let s = sigmoid((logit + g0 - g1) / tau);
    let grad = if clamped {
        0.0
    } else {
        let dlogit = (1.0 / (1.0 - r * r) + 1.0 / (1.0 - (1.0 - r) * (1.0 - r))) / tau;
        s * (1.0 - s) * dlogit / tau
    };
    (fl + s, grad)
}

/// DS-Q backward multiplier: derivative of the tanh surrogate
/// ⌊y⌋ + ½ + ½·tanh(k·d)/tanh(k/2) with d = y − ⌊y⌋ − ½.
pub fn dsq_grad(y: f64, k: f64) -> f64 {
    let d = y - y.floor() - 0.5;
    let t = (k * d).tanh();
    (k / 2.0) * (1.0 - t * t) / (0.5 * k).tanh()
}

fn uniform_half(rng: &mut ChaCha8Rng) -> f64 {
    rng.gen::<f64>() - 0.5
}

fn gumbel(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.gen::<f64>().max(1e-300);
    -(-u.ln()).ln()
}

fn check_finite(tape: &Tape, y: Var, op: &str) -> Result<()> {
    if tape.data(y).iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{op}: non-finite latent value")));
    }
    Ok(())
}

/// AUN-Q: ỹ = y + u, u ~ U[−½,½] i.i.d.; gradient 1.
pub fn aun_q(tape: &mut Tape, y: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let out: Vec<f32> = tape.data(y).iter().map(|&v| v + uniform_half(rng) as f32).collect();
    let ones = vec![1.0; out.len()];
    tape.custom_unary(y, out, ones)
}

/// STE-Q: ỹ = round(y); gradient 1.
pub fn ste_q(tape: &mut Tape, y: Var) -> Result<Var> {
    let out: Vec<f32> = tape.data(y).iter().map(|&v| round_half_away(v)).collect();
    let ones = vec![1.0; out.len()];
    tape.custom_unary(y, out, ones)
}

/// Universal quantization of one element for a given shared dither u.
pub fn uq_element(y: f32, u: f32) -> f32 {
    round_half_away(y + u) - u
}

/// U-Q: ỹ = round(y + u) − u with one u shared by the whole tensor;
/// gradient 1.
pub fn u_q(tape: &mut Tape, y: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let u = uniform_half(rng) as f32;
    let out: Vec<f32> = tape.data(y).iter().map(|&v| uq_element(v, u)).collect();
    let ones = vec![1.0; out.len()];
    tape.custom_unary(y, out, ones)
}

/// SGA-Q: Gumbel-softmax relaxation of annealed stochastic rounding;
/// backward is the exact derivative of the relaxed forward.
pub fn sga_q(tape: &mut Tape, y: Var, tau: f64, eps: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
    check_finite(tape, y, "sga_q")?;
    let n = tape.numel(y);
    let mut out = Vec::with_capacity(n);
    let mut grad = Vec::with_capacity(n);
    for i in 0..n {
        let v = tape.data(y)[i];
        let g0 = gumbel(rng);
        let g1 = gumbel(rng);
        let (o, g) = sga_element(v as f64, g0, g1, tau, eps);
        out.push(o as f32);
        grad.push(g as f32);
    }
    tape.custom_unary(y, out, grad)
}

/// SRA-Q: hard sample from the same annealed distribution; gradient 1.
pub fn sra_q(tape: &mut Tape, y: Var, tau: f64, eps: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
    let n = tape.numel(y);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let v = tape.data(y)[i];
        let (r, _) = clamp_frac(v as f64, eps);
        let p = p_tau(r, tau);
        let delta = if rng.gen::<f64>() < p { 1.0 } else { 0.0 };
        out.push((v as f64).floor() as f32 + delta);
    }
    let ones = vec![1.0; n];
    tape.custom_unary(y, out, ones)
}

/// STH-Q: AUN-Q before iteration t0, hard rounding with zero gradient
/// from t0 on.
pub fn sth_q(
    tape: &mut Tape,
    y: Var,
    spec: &QuantizerSpec,
    t: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    if t < spec.t0 {
        aun_q(tape, y, rng)
    } else {
        let out: Vec<f32> = tape.data(y).iter().map(|&v| round_half_away(v)).collect();
        let zeros = vec![0.0; out.len()];
        tape.custom_unary(y, out, zeros)
    }
}

/// DS-Q: deterministic rounding forward, tanh-surrogate gradient.
pub fn ds_q(tape: &mut Tape, y: Var, k: f64) -> Result<Var> {
    let n = tape.numel(y);
    let mut out = Vec::with_capacity(n);
    let mut grad = Vec::with_capacity(n);
    for i in 0..n {
        let v = tape.data(y)[i];
        out.push(round_half_away(v));
        grad.push(dsq_grad(v as f64, k) as f32);
    }
    tape.custom_unary(y, out, grad)
}

/// Test-time quantizer: elementwise round, no gradient.
pub fn hard_round(tape: &mut Tape, y: Var) -> Result<Var> {
    let out: Vec<f32> = tape.data(y).iter().map(|&v| round_half_away(v)).collect();
    let zeros = vec![0.0; out.len()];
    tape.custom_unary(y, out, zeros)
}

/// Apply one quantizer in Train mode using the given noise substream.
pub fn apply_train(
    tape: &mut Tape,
    y: Var,
    spec: &QuantizerSpec,
    t: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    spec.validate()?;
    match spec.kind {
        QuantKind::Aun => aun_q(tape, y, rng),
        QuantKind::Ste => ste_q(tape, y),
        QuantKind::Uq => u_q(tape, y, rng),
        QuantKind::Sga => sga_q(tape, y, tau_schedule(spec, t), spec.epsilon, rng),
        QuantKind::Sra => sra_q(tape, y, tau_schedule(spec, t), spec.epsilon, rng),
        QuantKind::Sth => sth_q(tape, y, spec, t, rng),
        QuantKind::Dsq => ds_q(tape, y, spec.k),
        QuantKind::HardRound => hard_round(tape, y),
    }
}

/// Quantize the same latent for the entropy model and the decoder.
///
/// Identical specs collapse to a single draw shared by both views; in
/// Eval mode both views are the hard rounding of `y`. STH-Q cannot be
/// paired with a different kind.
pub fn quantize_pair(
    tape: &mut Tape,
    y: Var,
    spec_ent: &QuantizerSpec,
    spec_dec: &QuantizerSpec,
    ctx: &mut QuantContext,
) -> Result<LatentPair> {
    if ctx.mode == Mode::Eval {
        let r = hard_round(tape, y)?;
        return Ok(LatentPair { y_ent: r, y_dec: r });
    }
    if spec_ent == spec_dec {
        let v = apply_train(tape, y, spec_ent, ctx.t, &mut ctx.rng_ent)?;
        return Ok(LatentPair { y_ent: v, y_dec: v });
    }
    if spec_ent.kind == QuantKind::Sth || spec_dec.kind == QuantKind::Sth {
        return Err(Error::invalid(
            "sth cannot be paired with a different quantizer; it is not separable",
        ));
    }
    let y_ent = apply_train(tape, y, spec_ent, ctx.t, &mut ctx.rng_ent)?;
    let y_dec = apply_train(tape, y, spec_dec, ctx.t, &mut ctx.rng_dec)?;
    Ok(LatentPair { y_ent, y_dec })
}
