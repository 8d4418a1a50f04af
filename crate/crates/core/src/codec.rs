//! Toy convolutional analysis/synthesis transforms wired to the
//! two-quantizer pipeline and the joint rate-distortion loss.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::entropy::{self, FactorizedPrior};
use crate::error::{Error, Result};
use crate::quant::{self, LatentPair, QuantContext, QuantizerSpec};
use crate::rng::{self, slot};
use crate::tensor::{Tape, Tensor, Var};

pub const LEAKY_SLOPE: f32 = 0.2;
const KERNEL: usize = 5;
const STRIDE: usize = 2;
const PAD: usize = 2;
const OUT_PAD: usize = 1;

/// Channel widths of the three-layer encoder/decoder.
#[derive(Clone, Copy, Debug)]
pub struct CodecLayout {
    pub width0: usize,
    pub width1: usize,
    pub latent_channels: usize,
}

impl Default for CodecLayout {
    fn default() -> Self {
        CodecLayout { width0: 32, width1: 64, latent_channels: 32 }
    }
}

/// All trainable state of one codec: conv stacks plus the factorized prior.
#[derive(Clone, Debug)]
pub struct CodecParams {
    pub layout: CodecLayout,
    enc_w: Vec<Tensor>,
    enc_b: Vec<Tensor>,
    dec_w: Vec<Tensor>,
    dec_b: Vec<Tensor>,
    pub prior: FactorizedPrior,
}

fn init_weight(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f32> =
        (0..n).map(|_| ((rng.gen::<f64>() * 2.0 - 1.0) * bound) as f32).collect();
    Tensor::from_vec(shape, data).unwrap().with_grad()
}

impl CodecParams {
    pub fn new(layout: CodecLayout, seed_parts: &[u64]) -> Self {
        let mut r = rng::substream(&[seed_parts, &[slot::INIT]].concat());
        let chans = [3, layout.width0, layout.width1, layout.latent_channels];
        let mut enc_w = Vec::new();
        let mut enc_b = Vec::new();
        for i in 0..3 {
            let (ci, co) = (chans[i], chans[i + 1]);
            enc_w.push(init_weight(vec![co, ci, KERNEL, KERNEL], ci * KERNEL * KERNEL, &mut r));
            enc_b.push(Tensor::zeros(vec![co]).with_grad());
        }
        let mut dec_w = Vec::new();
        let mut dec_b = Vec::new();
        for i in 0..3 {
            let (ci, co) = (chans[3 - i], chans[2 - i]);
            dec_w.push(init_weight(vec![ci, co, KERNEL, KERNEL], ci * KERNEL * KERNEL, &mut r));
            dec_b.push(Tensor::zeros(vec![co]).with_grad());
        }
        CodecParams { layout, enc_w, enc_b, dec_w, dec_b, prior: FactorizedPrior::new(layout.latent_channels) }
    }

    /// Parameter tensors in the fixed order shared with
    /// [`CodecParams::tensors_mut`] and the recorded tape vars.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for i in 0..3 {
            out.push((format!("enc{i}.w"), &self.enc_w[i]));
            out.push((format!("enc{i}.b"), &self.enc_b[i]));
        }
        for i in 0..3 {
            out.push((format!("dec{i}.w"), &self.dec_w[i]));
            out.push((format!("dec{i}.b"), &self.dec_b[i]));
        }
        out.push(("prior.mu".into(), &self.prior.mu));
        out.push(("prior.log_sigma".into(), &self.prior.log_sigma));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for (w, b) in self.enc_w.iter_mut().zip(self.enc_b.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        for (w, b) in self.dec_w.iter_mut().zip(self.dec_b.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out.push(&mut self.prior.mu);
        out.push(&mut self.prior.log_sigma);
        out
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.named_tensors().iter().map(|(_, t)| t.numel()).collect()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let named = self.named_tensors();
        crate::tensor::checkpoint::save(path, &named.iter().map(|(n, t)| (n.clone(), *t)).collect::<Vec<_>>())
    }

    /// Load a checkpoint, inferring the channel layout from the stored
    /// encoder weight shapes.
    pub fn load_infer(path: &std::path::Path) -> Result<Self> {
        let loaded = crate::tensor::checkpoint::load(path)?;
        let shape_of = |name: &str| -> Result<Vec<usize>> {
            loaded
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.shape().to_vec())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))
        };
        let layout = CodecLayout {
            width0: shape_of("enc0.w")?[0],
            width1: shape_of("enc1.w")?[0],
            latent_channels: shape_of("enc2.w")?[0],
        };
        Self::load(path, layout)
    }

    pub fn load(path: &std::path::Path, layout: CodecLayout) -> Result<Self> {
        let mut params = CodecParams::new(layout, &[0]);
        let loaded = crate::tensor::checkpoint::load(path)?;
        let map: std::collections::HashMap<String, Tensor> = loaded.into_iter().collect();
        let names: Vec<String> = params.named_tensors().iter().map(|(n, _)| n.clone()).collect();
        for (name, dst) in names.iter().zip(params.tensors_mut()) {
            let src = map.get(name).ok_or_else(|| {
                Error::Checkpoint(format!("missing tensor '{name}'"))
            })?;
            if src.shape() != dst.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' has shape {:?}, expected {:?} (layout mismatch?)",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(params)
    }

    fn record(&self, tape: &mut Tape) -> Vec<Var> {
        self.named_tensors().iter().map(|(_, t)| tape.param(t)).collect()
    }

    fn encode_net(&self, tape: &mut Tape, x: Var, vars: &[Var]) -> Result<Var> {
        let mut h = x;
        for i in 0..3 {
            h = tape.conv2d(h, vars[2 * i], vars[2 * i + 1], STRIDE, PAD)?;
            if i < 2 {
                h = tape.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        Ok(h)
    }

    fn decode_net(&self, tape: &mut Tape, y: Var, vars: &[Var]) -> Result<Var> {
        let mut h = y;
        for i in 0..3 {
            h = tape.conv2d_transpose(h, vars[6 + 2 * i], vars[6 + 2 * i + 1], STRIDE, PAD, OUT_PAD)?;
            if i < 2 {
                h = tape.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        Ok(h)
    }
}

/// The components of one rate-distortion loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct RDLossParts {
    /// Rate in bits per pixel.
    pub rate: f64,
    /// MSE on the 0..255 scale.
    pub distortion: f64,
    pub lambda: f64,
    pub total: f64,
}

/// One recorded training forward: scalar loss plus the parameter vars
/// (in [`CodecParams::tensors_mut`] order) to pull gradients from.
pub struct TrainForward {
    pub loss: Var,
    pub parts: RDLossParts,
    pub latents: LatentPair,
    pub param_vars: Vec<Var>,
}

fn check_input(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::ShapeMismatch {
            op: "codec forward",
            detail: format!("expected [N,3,H,W], got {:?}", shape),
        });
    }
    if shape[2] % 8 != 0 || shape[3] % 8 != 0 {
        return Err(Error::invalid(format!(
            "image sides must be multiples of 8, got {}x{}",
            shape[2], shape[3]
        )));
    }
    Ok((shape[0], shape[2], shape[3]))
}

/// Record the full training loss L = bpp + λ·MSE on the tape.
pub fn forward_train(
    tape: &mut Tape,
    x: &Tensor,
    params: &CodecParams,
    spec_ent: &QuantizerSpec,
    spec_dec: &QuantizerSpec,
    ctx: &mut QuantContext,
    lambda: f64,
) -> Result<TrainForward> {
    let (n, h, w) = check_input(x.shape())?;
    let vars = params.record(tape);
    let xv = tape.param(x);
    let y = params.encode_net(tape, xv, &vars)?;
    let latents = quant::quantize_pair(tape, y, spec_ent, spec_dec, ctx)?;

    let (mu, ls) = (vars[12], vars[13]);
    let rate = entropy::rate_bits(tape, latents.y_ent, mu, ls)?;
    let pixels = (n * h * w) as f32;
    let bpp = tape.mul_scalar(rate, 1.0 / pixels);

    let recon = params.decode_net(tape, latents.y_dec, &vars)?;
    let diff = tape.sub(xv, recon)?;
    let sq = tape.mul(diff, diff)?;
    let mse01 = tape.mean(sq);
    let mse255 = tape.mul_scalar(mse01, 255.0 * 255.0);

    let weighted = tape.mul_scalar(mse255, lambda as f32);
    let total = tape.add(bpp, weighted)?;
    let parts = RDLossParts {
        rate: tape.scalar_value(bpp) as f64,
        distortion: tape.scalar_value(mse255) as f64,
        lambda,
        total: tape.scalar_value(total) as f64,
    };
    Ok(TrainForward { loss: total, parts, latents, param_vars: vars })
}

/// Deterministic evaluation of one image: hard rounding, reconstruction
/// clipped to [0,1], and the prior's bit estimate for the rounded latents.
pub struct EvalOutput {
    /// [3,H,W] in [0,1].
    pub reconstruction: Vec<f32>,
    pub estimated_bits: f64,
    pub bpp_estimated: f64,
    /// Rounded latents, channel-major [C, H/8, W/8].
    pub symbols: Vec<i32>,
    pub latent_h: usize,
    pub latent_w: usize,
}

pub fn forward_eval(x: &Tensor, params: &CodecParams) -> Result<EvalOutput> {
    let (n, h, w) = check_input(x.shape())?;
    if n != 1 {
        return Err(Error::invalid("forward_eval expects a single image [1,3,H,W]"));
    }
    let mut tape = Tape::new();
    let vars = params.record(&mut tape);
    let xv = tape.leaf(x.shape().to_vec(), x.data().to_vec(), false)?;
    let y = params.encode_net(&mut tape, xv, &vars)?;
    let rounded = quant::hard_round(&mut tape, y)?;

    let symbols: Vec<i32> = tape.data(rounded).iter().map(|&v| v as i32).collect();
    let (lh, lw) = (h / 8, w / 8);
    let plane = lh * lw;
    let mut estimated_bits = 0.0f64;
    for (i, &s) in symbols.iter().enumerate() {
        let c = i / plane;
        let p = entropy::likelihood_scalar(
            s as f64,
            params.prior.mu.data()[c] as f64,
            params.prior.log_sigma.data()[c] as f64,
        )
        .max(entropy::LIKELIHOOD_FLOOR as f64);
        estimated_bits -= p.log2();
    }

    let recon = params.decode_net(&mut tape, rounded, &vars)?;
    let reconstruction: Vec<f32> = tape.data(recon).iter().map(|&v| v.clamp(0.0, 1.0)).collect();
    Ok(EvalOutput {
        reconstruction,
        estimated_bits,
        bpp_estimated: estimated_bits / (h * w) as f64,
        symbols,
        latent_h: lh,
        latent_w: lw,
    })
}

/// Run only the synthesis transform on decoded integer latents laid out
/// [C, lh, lw]; returns the [3, 8·lh, 8·lw] reconstruction in [0,1].
pub fn reconstruct_from_symbols(
    params: &CodecParams,
    symbols: &[i32],
    latent_h: usize,
    latent_w: usize,
) -> Result<Vec<f32>> {
    let c = params.layout.latent_channels;
    if symbols.len() != c * latent_h * latent_w {
        return Err(Error::ShapeMismatch {
            op: "reconstruct_from_symbols",
            detail: format!("{} symbols vs {}x{}x{}", symbols.len(), c, latent_h, latent_w),
        });
    }
    let mut tape = Tape::new();
    let vars = params.record(&mut tape);
    let y = tape.leaf(
        vec![1, c, latent_h, latent_w],
        symbols.iter().map(|&s| s as f32).collect(),
        false,
    )?;
    let recon = params.decode_net(&mut tape, y, &vars)?;
    Ok(tape.data(recon).iter().map(|&v| v.clamp(0.0, 1.0)).collect())
}

/// MSE between two [0,1] images, reported on the 0..255 scale.
pub fn mse(x: &[f32], xhat: &[f32]) -> Result<f64> {
    if x.len() != xhat.len() || x.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "mse",
            detail: format!("{} vs {} samples", x.len(), xhat.len()),
        });
    }
    let acc: f64 = x
        .iter()
        .zip(xhat)
        .map(|(&a, &b)| {
            let d = (a as f64 - b as f64) * 255.0;
            d * d
        })
        .sum();
    Ok(acc / x.len() as f64)
}

#[cfg(test)]
mod tests;
