//! Dense kernels backing the conv2d / transposed-conv2d tape ops.
//!
//! Everything is row-major `f32`. Convolutions go through im2col so the
//! hot loop is always one of the three GEMM variants below.

/// c += a * b, a is m×k, b is k×n, c is m×n.
pub fn gemm(m: usize, n: usize, k: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let a_il = a[i * k + l];
            if a_il == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for j in 0..n {
                crow[j] += a_il * brow[j];
            }
        }
    }
}

/// c += a * b^T, a is m×p, b is n×p, c is m×n.
pub fn gemm_abt(m: usize, n: usize, p: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), n * p);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        for j in 0..n {
            let brow = &b[j * p..(j + 1) * p];
            let mut acc = 0.0f32;
            for l in 0..p {
                acc += arow[l] * brow[l];
            }
            c[i * n + j] += acc;
        }
    }
}

/// c += a^T * b, a is k×m, b is k×n, c is m×n.
pub fn gemm_atb(m: usize, n: usize, k: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for l in 0..k {
        let brow = &b[l * n..(l + 1) * n];
        for i in 0..m {
            let a_li = a[l * m + i];
            if a_li == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += a_li * brow[j];
            }
        }
    }
}

/// Geometry of one conv plane: `C`×`h`×`w` image patched with a `k`×`k`
/// kernel at stride `s` and symmetric zero padding `p`, producing an
/// `oh`×`ow` grid of patches.
#[derive(Clone, Copy, Debug)]
pub struct PatchGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub s: usize,
    pub p: usize,
    pub oh: usize,
    pub ow: usize,
}

impl PatchGeom {
    pub fn conv_out(c: usize, h: usize, w: usize, k: usize, s: usize, p: usize) -> Self {
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (w + 2 * p - k) / s + 1;
        PatchGeom { c, h, w, k, s, p, oh, ow }
    }

    pub fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// image (c×h×w) -> col (c*k*k × oh*ow). Out-of-bounds taps read as zero.
pub fn im2col(g: &PatchGeom, image: &[f32], col: &mut [f32]) {
    debug_assert_eq!(image.len(), g.c * g.h * g.w);
    debug_assert_eq!(col.len(), g.rows() * g.cols());
    let cols = g.cols();
    for c in 0..g.c {
        let plane = &image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = ((c * g.k + ki) * g.k + kj) * cols;
                for oh in 0..g.oh {
                    let ih = (oh * g.s + ki) as isize - g.p as isize;
                    let dst = &mut col[row + oh * g.ow..row + (oh + 1) * g.ow];
                    if ih < 0 || ih >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.ow {
                        let iw = (ow * g.s + kj) as isize - g.p as isize;
                        dst[ow] = if iw < 0 || iw >= g.w as isize {
                            0.0
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// col (c*k*k × oh*ow) -> image (c×h×w), accumulating overlapping taps.
pub fn col2im(g: &PatchGeom, col: &[f32], image: &mut [f32]) {
    debug_assert_eq!(image.len(), g.c * g.h * g.w);
    debug_assert_eq!(col.len(), g.rows() * g.cols());
    let cols = g.cols();
    for c in 0..g.c {
        let plane = &mut image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = ((c * g.k + ki) * g.k + kj) * cols;
                for oh in 0..g.oh {
                    let ih = (oh * g.s + ki) as isize - g.p as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let src = &col[row + oh * g.ow..row + (oh + 1) * g.ow];
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.ow {
                        let iw = (ow * g.s + kj) as isize - g.p as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] += src[ow];
                        }
                    }
                }
            }
        }
    }
}
