//! Rate-distortion metrics: PSNR, BPP aggregation, and Bjøntegaard-Delta
//! rate between RD curves. All accumulation is in f64.

use std::fmt::Write as _;
use std::path::Path;

use crate::coder::Bitstream;
use crate::error::{Error, Result};

/// One trained model evaluated on one dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RDPoint {
    pub bpp: f64,
    pub psnr: f64,
}

#[derive(Clone, Debug)]
pub struct RDCurve {
    pub label: String,
    pub points: Vec<RDPoint>,
}

impl RDCurve {
    pub fn new(label: impl Into<String>, mut points: Vec<RDPoint>) -> Result<Self> {
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        if points.len() < 2 {
            return Err(Error::invalid("an RD curve needs at least 2 points"));
        }
        if points.windows(2).any(|w| w[0].bpp >= w[1].bpp) {
            return Err(Error::invalid("RD curve bpp values must be strictly increasing"));
        }
        if points.iter().any(|p| p.bpp <= 0.0) {
            return Err(Error::invalid("RD curve bpp values must be positive"));
        }
        Ok(RDCurve { label: label.into(), points })
    }
}

pub const PSNR_CAP_DB: f64 = 99.0;

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        return PSNR_CAP_DB;
    }
    10.0 * (255.0f64 * 255.0 / mse).log10()
}

/// PSNR between two images on the 0..255 scale.
pub fn psnr(x: &[f32], xhat: &[f32]) -> Result<f64> {
    if x.len() != xhat.len() || x.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "psnr",
            detail: format!("{} vs {} samples", x.len(), xhat.len()),
        });
    }
    let mse = x
        .iter()
        .zip(xhat)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / x.len() as f64;
    Ok(psnr_from_mse(mse))
}

/// Least-squares cubic fit of y over (centered) x, returned as
/// coefficients c0..c3 of Σ ci·(x−shift)^i.
fn fit_cubic(x: &[f64], y: &[f64], shift: f64) -> [f64; 4] {
    // normal equations over powers 0..3
    let mut ata = [[0.0f64; 4]; 4];
    let mut aty = [0.0f64; 4];
    for (&xi, &yi) in x.iter().zip(y) {
        let t = xi - shift;
        let pow = [1.0, t, t * t, t * t * t];
        for i in 0..4 {
            aty[i] += pow[i] * yi;
            for j in 0..4 {
                ata[i][j] += pow[i] * pow[j];
            }
        }
    }
    // Gaussian elimination with partial pivoting
    let mut a = ata;
    let mut b = aty;
    for col in 0..4 {
        let piv = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..4 {
            let f = a[row][col] / a[col][col];
            for k in col..4 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut c = [0.0f64; 4];
    for row in (0..4).rev() {
        let mut acc = b[row];
        for k in row + 1..4 {
            acc -= a[row][k] * c[k];
        }
        c[row] = acc / a[row][row];
    }
    c
}

fn poly_integral(c: &[f64; 4], lo: f64, hi: f64) -> f64 {
    let anti = |t: f64| c[0] * t + c[1] * t * t / 2.0 + c[2] * t.powi(3) / 3.0 + c[3] * t.powi(4) / 4.0;
    anti(hi) - anti(lo)
}

/// Bjøntegaard-Delta rate of `test` against `anchor`, in percent.
/// Negative means the test curve spends fewer bits at equal quality.
pub fn bd_rate(anchor: &RDCurve, test: &RDCurve) -> Result<f64> {
    for c in [anchor, test] {
        if c.points.len() < 4 {
            return Err(Error::invalid(format!(
                "bd_rate: curve '{}' has {} points, need at least 4",
                c.label,
                c.points.len()
            )));
        }
    }
    let range = |c: &RDCurve| {
        let lo = c.points.iter().map(|p| p.psnr).fold(f64::INFINITY, f64::min);
        let hi = c.points.iter().map(|p| p.psnr).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    };
    let (a_lo, a_hi) = range(anchor);
    let (t_lo, t_hi) = range(test);
    let lo = a_lo.max(t_lo);
    let hi = a_hi.min(t_hi);
    if hi - lo < 1.0 {
        return Err(Error::invalid(format!(
            "bd_rate: PSNR ranges overlap by {:.3} dB (< 1 dB): '{}' spans [{:.2}, {:.2}], '{}' spans [{:.2}, {:.2}]",
            (hi - lo).max(0.0),
            anchor.label,
            a_lo,
            a_hi,
            test.label,
            t_lo,
            t_hi
        )));
    }
    let shift = 0.5 * (lo + hi);
    let fit = |c: &RDCurve| {
        let xs: Vec<f64> = c.points.iter().map(|p| p.psnr).collect();
        let ys: Vec<f64> = c.points.iter().map(|p| p.bpp.log2()).collect();
        fit_cubic(&xs, &ys, shift)
    };
    let ca = fit(anchor);
    let ct = fit(test);
    let avg_diff =
        (poly_integral(&ct, lo - shift, hi - shift) - poly_integral(&ca, lo - shift, hi - shift))
            / (hi - lo);
    Ok((avg_diff.exp2() - 1.0) * 100.0)
}

#[derive(Clone, Copy, Debug)]
pub struct BppReport {
    /// From real bitstream sizes, header included.
    pub actual: f64,
    /// From the prior's likelihoods.
    pub estimated: f64,
}

/// Total bits over total pixels across a set of coded images.
pub fn aggregate_bpp(streams: &[Bitstream], estimated_bits: &[f64]) -> Result<BppReport> {
    if streams.len() != estimated_bits.len() || streams.is_empty() {
        return Err(Error::invalid(format!(
            "aggregate_bpp: {} streams vs {} estimates",
            streams.len(),
            estimated_bits.len()
        )));
    }
    let pixels: f64 = streams.iter().map(|s| (s.image_h * s.image_w) as f64).sum();
    let actual_bits: f64 = streams.iter().map(|s| s.total_bits() as f64).sum();
    let est_bits: f64 = estimated_bits.iter().sum();
    Ok(BppReport { actual: actual_bits / pixels, estimated: est_bits / pixels })
}

/// Curves as CSV: `label,bpp,psnr` rows under a header line.
pub fn curves_to_csv(curves: &[RDCurve]) -> String {
    let mut out = String::from("label,bpp,psnr\n");
    for c in curves {
        for p in &c.points {
            writeln!(out, "{},{},{}", c.label, p.bpp, p.psnr).unwrap();
        }
    }
    out
}

pub fn write_curves_csv(path: &Path, curves: &[RDCurve]) -> Result<()> {
    std::fs::write(path, curves_to_csv(curves))?;
    Ok(())
}

pub fn read_curves_csv(path: &Path) -> Result<Vec<RDCurve>> {
    let text = std::fs::read_to_string(path)?;
    parse_curves_csv(&text).map_err(|e| Error::BadFile {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

pub fn parse_curves_csv(text: &str) -> Result<Vec<RDCurve>> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: std::collections::HashMap<String, Vec<RDPoint>> = Default::default();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.starts_with("label")) {
            continue;
        }
        let mut parts = line.split(',');
        let (label, bpp, psnr) = (
            parts.next().unwrap_or(""),
            parts.next().unwrap_or(""),
            parts.next().unwrap_or(""),
        );
        let bpp: f64 = bpp
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("line {}: bad bpp '{bpp}'", lineno + 1)))?;
        let psnr: f64 = psnr
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("line {}: bad psnr '{psnr}'", lineno + 1)))?;
        if !groups.contains_key(label) {
            order.push(label.to_string());
        }
        groups.entry(label.to_string()).or_default().push(RDPoint { bpp, psnr });
    }
    order
        .into_iter()
        .map(|label| {
            let pts = groups.remove(&label).unwrap();
            RDCurve::new(label, pts)
        })
        .collect()
}
