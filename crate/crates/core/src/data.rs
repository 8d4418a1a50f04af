//! Image ingestion (binary P6 PPM) and deterministic synthetic datasets.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// 8-bit RGB image, row-major HWC.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(h: usize, w: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != h * w * 3 {
            return Err(Error::ShapeMismatch {
                op: "Image::new",
                detail: format!("{}x{}x3 needs {} bytes, got {}", h, w, h * w * 3, pixels.len()),
            });
        }
        Ok(Image { h, w, pixels })
    }

    /// [1,3,H,W] tensor scaled to [0,1].
    pub fn to_tensor(&self) -> Tensor {
        let hw = self.h * self.w;
        let mut data = vec![0.0f32; 3 * hw];
        for i in 0..hw {
            for c in 0..3 {
                data[c * hw + i] = self.pixels[i * 3 + c] as f32 / 255.0;
            }
        }
        Tensor::from_vec(vec![1, 3, self.h, self.w], data).unwrap()
    }

    /// Inverse of [`Image::to_tensor`] with clipping to [0,1].
    pub fn from_chw(h: usize, w: usize, data: &[f32]) -> Result<Self> {
        if data.len() != 3 * h * w {
            return Err(Error::ShapeMismatch {
                op: "Image::from_chw",
                detail: format!("expected {} values, got {}", 3 * h * w, data.len()),
            });
        }
        let hw = h * w;
        let mut pixels = vec![0u8; hw * 3];
        for i in 0..hw {
            for c in 0..3 {
                let v = (data[c * hw + i].clamp(0.0, 1.0) * 255.0).round();
                pixels[i * 3 + c] = v as u8;
            }
        }
        Ok(Image { h, w, pixels })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    PpmDir,
    Synthetic,
}

#[derive(Clone, Debug)]
pub struct ImageSet {
    pub images: Vec<Image>,
    pub source: Source,
    pub seed: u64,
}

fn bad_file(path: &Path, detail: impl Into<String>) -> Error {
    Error::BadFile { path: path.display().to_string(), detail: detail.into() }
}

/// Parse one binary P6 PPM with max-val 255.
pub fn load_ppm(path: &Path) -> Result<Image> {
    let buf = std::fs::read(path)?;
    if buf.len() < 2 || &buf[..2] != b"P6" {
        let magic = String::from_utf8_lossy(&buf[..buf.len().min(2)]).into_owned();
        return Err(bad_file(path, format!("not a binary P6 PPM (magic '{magic}')")));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3]; // width, height, maxval
    for field in fields.iter_mut() {
        // skip whitespace and '#' comments
        loop {
            match buf.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < buf.len() && buf[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_digit() => break,
                _ => return Err(bad_file(path, "malformed header")),
            }
        }
        let mut v = 0usize;
        while let Some(b) = buf.get(pos) {
            if !b.is_ascii_digit() {
                break;
            }
            v = v * 10 + (b - b'0') as usize;
            pos += 1;
        }
        *field = v;
    }
    match buf.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(bad_file(path, "missing whitespace after maxval")),
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(bad_file(path, format!("unsupported maxval {maxval}, only 255")));
    }
    if w == 0 || h == 0 {
        return Err(bad_file(path, "zero image dimension"));
    }
    let need = w * h * 3;
    if buf.len() - pos < need {
        return Err(bad_file(
            path,
            format!("truncated payload: need {need} bytes, found {}", buf.len() - pos),
        ));
    }
    Image::new(h, w, buf[pos..pos + need].to_vec())
}

pub fn save_ppm(path: &Path, image: &Image) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", image.w, image.h).into_bytes();
    out.extend_from_slice(&image.pixels);
    std::fs::write(path, out)?;
    Ok(())
}

/// Load every .ppm file in a directory, sorted by filename.
pub fn load_ppm_dir(dir: &Path) -> Result<ImageSet> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map_or(false, |e| e == "ppm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::invalid(format!("no .ppm files in {}", dir.display())));
    }
    let images = paths.iter().map(|p| load_ppm(p)).collect::<Result<Vec<_>>>()?;
    Ok(ImageSet { images, source: Source::PpmDir, seed: 0 })
}

/// Deterministic mixture of smooth gradients, Gaussian blobs, and
/// checkerboards. Same (n, size, seed) always yields the same bytes.
pub fn synth_dataset(n: usize, size: usize, seed: u64) -> Result<ImageSet> {
    if size % 8 != 0 || size == 0 {
        return Err(Error::invalid(format!("synthetic image size must be a multiple of 8, got {size}")));
    }
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = rng::substream(&[seed, i as u64, rng::slot::DATA]);
        images.push(match i % 3 {
            0 => synth_gradient(size, &mut r),
            1 => synth_blobs(size, &mut r),
            _ => synth_checker(size, &mut r),
        });
    }
    Ok(ImageSet { images, source: Source::Synthetic, seed })
}

fn rand_color(r: &mut ChaCha8Rng) -> [f64; 3] {
    [r.gen::<f64>(), r.gen(), r.gen()]
}

fn synth_gradient(size: usize, r: &mut ChaCha8Rng) -> Image {
    let a = rand_color(r);
    let b = rand_color(r);
    let angle = r.gen::<f64>() * std::f64::consts::TAU;
    let (dx, dy) = (angle.cos(), angle.sin());
    let mut pixels = vec![0u8; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let t = ((x as f64 * dx + y as f64 * dy) / (size as f64 * std::f64::consts::SQRT_2)
                + 0.5)
                .clamp(0.0, 1.0);
            for c in 0..3 {
                pixels[(y * size + x) * 3 + c] =
                    ((a[c] + (b[c] - a[c]) * t) * 255.0).round() as u8;
            }
        }
    }
    Image { h: size, w: size, pixels }
}

fn synth_blobs(size: usize, r: &mut ChaCha8Rng) -> Image {
    let bg = rand_color(r);
    let count = r.gen_range(2..=5);
    let blobs: Vec<([f64; 3], f64, f64, f64)> = (0..count)
        .map(|_| {
            let color = rand_color(r);
            let cx = r.gen::<f64>() * size as f64;
            let cy = r.gen::<f64>() * size as f64;
            let sigma = size as f64 * (0.08 + 0.17 * r.gen::<f64>());
            (color, cx, cy, sigma)
        })
        .collect();
    let mut pixels = vec![0u8; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let mut v = bg;
            for (color, cx, cy, sigma) in &blobs {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                let w = (-d2 / (2.0 * sigma * sigma)).exp();
                for c in 0..3 {
                    v[c] = v[c] * (1.0 - w) + color[c] * w;
                }
            }
            for c in 0..3 {
                pixels[(y * size + x) * 3 + c] = (v[c].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    Image { h: size, w: size, pixels }
}

fn synth_checker(size: usize, r: &mut ChaCha8Rng) -> Image {
    let a = rand_color(r);
    let b = rand_color(r);
    let fx = r.gen_range(2.0..10.0) / size as f64;
    let fy = r.gen_range(2.0..10.0) / size as f64;
    let (px, py) = (r.gen::<f64>(), r.gen::<f64>());
    let mut pixels = vec![0u8; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let s = ((x as f64 * fx + px) * std::f64::consts::TAU).sin()
                * ((y as f64 * fy + py) * std::f64::consts::TAU).sin();
            let src = if s >= 0.0 { &a } else { &b };
            for c in 0..3 {
                pixels[(y * size + x) * 3 + c] = (src[c] * 255.0).round() as u8;
            }
        }
    }
    Image { h: size, w: size, pixels }
}

/// Sample a batch of random patches, scaled to [0,1], as a [B,3,P,P]
/// tensor. Crops always lie fully inside the source image.
pub fn random_crop(
    set: &ImageSet,
    batch: usize,
    patch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    if set.images.is_empty() {
        return Err(Error::invalid("random_crop: empty image set"));
    }
    if let Some(img) = set.images.iter().find(|i| i.h < patch || i.w < patch) {
        return Err(Error::invalid(format!(
            "random_crop: image {}x{} is smaller than patch {patch}",
            img.h, img.w
        )));
    }
    let hw = patch * patch;
    let mut data = vec![0.0f32; batch * 3 * hw];
    for b in 0..batch {
        let img = &set.images[rng.gen_range(0..set.images.len())];
        let oy = rng.gen_range(0..=img.h - patch);
        let ox = rng.gen_range(0..=img.w - patch);
        for y in 0..patch {
            for x in 0..patch {
                let src = ((oy + y) * img.w + ox + x) * 3;
                for c in 0..3 {
                    data[b * 3 * hw + c * hw + y * patch + x] =
                        img.pixels[src + c] as f32 / 255.0;
                }
            }
        }
    }
    Tensor::from_vec(vec![batch, 3, patch, patch], data)
}
