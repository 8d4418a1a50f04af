//! Factorized per-channel entropy model over quantized latents.
//!
//! Each latent channel gets an independent logistic location-scale
//! distribution; the likelihood of a (possibly continuous) value is the
//! CDF difference over the unit interval centered on it. The same model
//! feeds the differentiable rate term during training and the fixed-point
//! CDF tables of the range coder afterwards.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const LIKELIHOOD_FLOOR: f32 = 1e-9;
pub const TOTAL_FREQ: u32 = 1 << 16;
const TAIL_MASS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct FactorizedPrior {
    pub mu: Tensor,
    pub log_sigma: Tensor,
}

impl FactorizedPrior {
    pub fn new(channels: usize) -> Self {
        FactorizedPrior {
            mu: Tensor::zeros(vec![channels]).with_grad(),
            log_sigma: Tensor::from_vec(vec![channels], vec![1.0; channels])
                .unwrap()
                .with_grad(),
        }
    }

    pub fn channels(&self) -> usize {
        self.mu.numel()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Logistic CDF difference over the unit interval around `v`.
pub fn likelihood_scalar(v: f64, mu: f64, log_sigma: f64) -> f64 {
    let s = log_sigma.exp();
    sigmoid((v - mu + 0.5) / s) - sigmoid((v - mu - 0.5) / s)
}

/// Elementwise likelihood of `values` [N,C,H,W] under per-channel
/// location `mu` [C] and log-scale `log_sigma` [C], clamped below at
/// 1e-9. Differentiable with respect to all three inputs.
pub fn likelihood(tape: &mut Tape, values: Var, mu: Var, log_sigma: Var) -> Result<Var> {
    let shape = tape.shape(values).to_vec();
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "likelihood",
            detail: format!("values must be [N,C,H,W], got {:?}", shape),
        });
    }
    let channels = shape[1];
    if tape.shape(mu) != [channels] || tape.shape(log_sigma) != [channels] {
        return Err(Error::ShapeMismatch {
            op: "likelihood",
            detail: format!(
                "prior must have {} channels, got mu {:?}, log_sigma {:?}",
                channels,
                tape.shape(mu),
                tape.shape(log_sigma)
            ),
        });
    }
    let hw = shape[2] * shape[3];
    let chw = channels * hw;
    let n = tape.numel(values);
    let mut data = vec![0.0f32; n];
    let mut d_v = vec![0.0f32; n];
    let mut d_mu = vec![0.0f32; n];
    let mut d_ls = vec![0.0f32; n];
    for i in 0..n {
        let c = (i % chw) / hw;
        let v = tape.data(values)[i] as f64;
        let m = tape.data(mu)[c] as f64;
        let ls = tape.data(log_sigma)[c] as f64;
        let s = ls.exp();
        let zp = (v - m + 0.5) / s;
        let zm = (v - m - 0.5) / s;
        let cp = sigmoid(zp);
        let cm = sigmoid(zm);
        let p = cp - cm;
        if p < LIKELIHOOD_FLOOR as f64 {
            data[i] = LIKELIHOOD_FLOOR;
            continue; // clamp active, partials stay zero
        }
        let dp = cp * (1.0 - cp);
        let dm = cm * (1.0 - cm);
        data[i] = p as f32;
        d_v[i] = ((dp - dm) / s) as f32;
        d_mu[i] = -d_v[i];
        d_ls[i] = (-(dp * zp - dm * zm)) as f32;
    }
    Ok(tape.likelihood_node(values, mu, log_sigma, channels, chw, hw, data, d_v, d_mu, d_ls))
}

/// Total rate in bits: −Σ log2 p_i over the whole batch.
pub fn rate_bits(tape: &mut Tape, y_ent: Var, mu: Var, log_sigma: Var) -> Result<Var> {
    let p = likelihood(tape, y_ent, mu, log_sigma)?;
    let logp = tape.log(p);
    let total = tape.sum(logp);
    Ok(tape.mul_scalar(total, -std::f32::consts::LOG2_E))
}

/// Fixed-point cumulative frequency table for one channel.
///
/// Symbols 0..2L span the integer support [−L, L]; symbol 2L+1 is the
/// escape used for out-of-range values. `cum` has 2L+3 entries with
/// cum[0] = 0 and cum[last] = 2^16, strictly increasing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    pub support: u16,
    pub cum: Vec<u32>,
}

impl CdfTable {
    pub fn num_symbols(&self) -> usize {
        2 * self.support as usize + 2
    }

    pub fn escape_symbol(&self) -> usize {
        2 * self.support as usize + 1
    }

    /// Symbol index for an integer latent value, or the escape symbol.
    pub fn symbol_of(&self, value: i32) -> usize {
        let l = self.support as i32;
        if (-l..=l).contains(&value) {
            (value + l) as usize
        } else {
            self.escape_symbol()
        }
    }

    pub fn value_of(&self, symbol: usize) -> i32 {
        symbol as i32 - self.support as i32
    }

    pub fn freq(&self, symbol: usize) -> u32 {
        self.cum[symbol + 1] - self.cum[symbol]
    }

    /// Inverse lookup: which symbol owns this cumulative position.
    pub fn symbol_at(&self, cum_pos: u32) -> usize {
        // largest i with cum[i] <= cum_pos; cum is strictly increasing
        match self.cum.binary_search(&cum_pos) {
            Ok(i) => i.min(self.num_symbols() - 1),
            Err(i) => i - 1,
        }
    }

    /// Wire format: L (u16), then 2L+2 cumulative u16 values
    /// (cum[1..=2L+2], with the final 2^16 wrapping to 0).
    pub fn serialize(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.support.to_le_bytes());
        for &c in &self.cum[1..] {
            out.extend_from_slice(&((c & 0xFFFF) as u16).to_le_bytes());
        }
    }

    pub fn deserialize(buf: &[u8], pos: &mut usize) -> Result<Self> {
        let take = |pos: &mut usize| -> Result<u16> {
            if *pos + 2 > buf.len() {
                return Err(Error::Bitstream("truncated CDF table".into()));
            }
            let v = u16::from_le_bytes([buf[*pos], buf[*pos + 1]]);
            *pos += 2;
            Ok(v)
        };
        let support = take(pos)?;
        let n = 2 * support as usize + 2;
        let mut cum = Vec::with_capacity(n + 1);
        cum.push(0u32);
        for i in 0..n {
            let v = take(pos)? as u32;
            // the final entry is 2^16 stored mod 2^16
            cum.push(if i == n - 1 && v == 0 { TOTAL_FREQ } else { v });
        }
        let table = CdfTable { support, cum };
        table.check()?;
        Ok(table)
    }

    fn check(&self) -> Result<()> {
        if self.cum.len() != self.num_symbols() + 1
            || self.cum[0] != 0
            || *self.cum.last().unwrap() != TOTAL_FREQ
            || self.cum.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Bitstream("invalid CDF table: not strictly increasing to 2^16".into()));
        }
        Ok(())
    }
}

/// Smallest per-channel support bound leaving < 1e-6 tail mass.
pub fn required_support_channel(prior: &FactorizedPrior, channel: usize) -> u16 {
    let mu = prior.mu.data()[channel] as f64;
    let s = (prior.log_sigma.data()[channel] as f64).exp();
    // logistic tail: 1 − σ((L+0.5−μ)/s) < TAIL_MASS/2 per side
    let z = -(TAIL_MASS / 2.0 / (1.0 - TAIL_MASS / 2.0)).ln(); // σ^{-1}(1−m)
    let need = (mu.abs() + z * s - 0.5).ceil().max(1.0);
    need.min(u16::MAX as f64) as u16
}

/// Smallest support bound valid for every channel at once.
pub fn required_support(prior: &FactorizedPrior) -> u16 {
    (0..prior.channels())
        .map(|c| required_support_channel(prior, c))
        .max()
        .unwrap_or(1)
}

/// Build one fixed-point CDF table per channel. With `support = None`
/// each channel gets its own minimal bound (keeps the stream header
/// small); an explicit bound that leaves too much tail mass is an error.
pub fn build_cdf_tables(prior: &FactorizedPrior, support: Option<u16>) -> Result<Vec<CdfTable>> {
    if let Some(l) = support {
        let needed = required_support(prior);
        if l < needed {
            return Err(Error::invalid(format!(
                "support bound L={l} leaves more than {TAIL_MASS} tail mass; use L>={needed}"
            )));
        }
    }
    let mut tables = Vec::with_capacity(prior.channels());
    for c in 0..prior.channels() {
        let ch_support = support.unwrap_or_else(|| required_support_channel(prior, c));
        let l = ch_support as i32;
        let mu = prior.mu.data()[c] as f64;
        let ls = prior.log_sigma.data()[c] as f64;
        let num = 2 * ch_support as usize + 2;
        let mut pmf: Vec<f64> = (-l..=l).map(|v| likelihood_scalar(v as f64, mu, ls)).collect();
        let in_range: f64 = pmf.iter().sum();
        pmf.push((1.0 - in_range).max(TAIL_MASS)); // escape
        let total: f64 = pmf.iter().sum();

        // Quantize to 16-bit frequencies with a minimum of 1 per symbol.
        let mut freqs: Vec<u32> = pmf
            .iter()
            .map(|p| ((p / total) * TOTAL_FREQ as f64).round().max(1.0) as u32)
            .collect();
        let mut sum: i64 = freqs.iter().map(|&f| f as i64).sum();
        // Push the rounding residual into the largest bins, never below 1.
        while sum != TOTAL_FREQ as i64 {
            let delta = TOTAL_FREQ as i64 - sum;
            let idx = if delta > 0 {
                (0..num).max_by_key(|&i| freqs[i]).unwrap()
            } else {
                (0..num).filter(|&i| freqs[i] > 1).max_by_key(|&i| freqs[i]).unwrap()
            };
            let adj = if delta > 0 { delta } else { (-delta).min(freqs[idx] as i64 - 1) };
            freqs[idx] = (freqs[idx] as i64 + if delta > 0 { adj } else { -adj }) as u32;
            sum += if delta > 0 { adj } else { -adj };
        }

        let mut cum = Vec::with_capacity(num + 1);
        cum.push(0u32);
        for f in &freqs {
            cum.push(cum.last().unwrap() + f);
        }
        let table = CdfTable { support: ch_support, cum };
        table.check()?;
        tables.push(table);
    }
    Ok(tables)
}

#[cfg(test)]
mod tests;
