//! Minimal define-by-run reverse-mode autodiff over dense f32 tensors.
//!
//! The tape is rebuilt every training iteration. Nodes are appended in
//! topological order, so the backward pass is a single reverse sweep.

use crate::error::{Error, Result};

pub mod adam;
pub mod checkpoint;
pub mod conv;

use conv::{col2im, gemm, gemm_abt, gemm_atb, im2col, PatchGeom};

/// A persistent dense tensor (model parameter or data buffer).
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::ShapeMismatch {
                op: "Tensor::from_vec",
                detail: format!("shape {:?} does not describe {} elements", shape, data.len()),
            });
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f32),
    Matmul { a: Var, b: Var, m: usize, n: usize, k: usize },
    Conv2d { input: Var, weight: Var, bias: Var, geom: PatchGeom, co: usize },
    ConvT2d { input: Var, weight: Var, bias: Var, geom: PatchGeom, ci: usize, co: usize },
    LeakyRelu(Var, f32),
    Log(Var),
    Exp(Var),
    Tanh(Var),
    Sigmoid(Var),
    ClampMin(Var, f32),
    Sum(Var),
    Mean(Var),
    /// Unary op with a caller-supplied elementwise gradient multiplier.
    /// This is how `floor` and every quantizer get onto the tape.
    Custom { input: Var, grad_mul: Vec<f32> },
    /// Discretized logistic likelihood with cached partials; see entropy.rs.
    Likelihood {
        values: Var,
        mu: Var,
        log_sigma: Var,
        channels: usize,
        chw: usize,
        hw: usize,
        d_v: Vec<f32>,
        d_mu: Vec<f32>,
        d_ls: Vec<f32>,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    needs_grad: bool,
    op: Op,
}

/// Define-by-run gradient tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, needs_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data, needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].data
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].data.len()
    }

    pub fn scalar_value(&self, v: Var) -> f32 {
        self.nodes[v.0].data[0]
    }

    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                detail: format!("shape {:?} vs {} elements", shape, data.len()),
            });
        }
        Ok(self.push(shape, data, requires_grad, Op::Leaf))
    }

    /// Record a parameter tensor as a leaf, copying its current values.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), t.requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<Var> {
        self.leaf(shape, data, false)
    }

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let data: Vec<f32> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), data, ng, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let data: Vec<f32> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), data, ng, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let data: Vec<f32> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), data, ng, Op::Mul(a, b)))
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Var {
        let data: Vec<f32> = self.data(a).iter().map(|x| x + s).collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), data, ng, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f32) -> Var {
        let data: Vec<f32> = self.data(a).iter().map(|x| x * s).collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), data, ng, Op::MulScalar(a, s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", sa, sb),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        gemm(m, n, k, self.data(a), self.data(b), &mut data);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], data, ng, Op::Matmul { a, b, m, n, k }))
    }

    /// input [N,Ci,H,W], weight [Co,Ci,k,k], bias [Co].
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        if si.len() != 4 || sw.len() != 4 || si[1] != sw[1] || self.shape(bias) != [sw[0]] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("input {:?}, weight {:?}, bias {:?}", si, sw, self.shape(bias)),
            });
        }
        let (n, ci, h, w) = (si[0], si[1], si[2], si[3]);
        let (co, k) = (sw[0], sw[2]);
        let geom = PatchGeom::conv_out(ci, h, w, k, stride, pad);
        let (oh, ow) = (geom.oh, geom.ow);
        let plane = oh * ow;
        let mut data = vec![0.0; n * co * plane];
        let mut col = vec![0.0; geom.rows() * geom.cols()];
        for s in 0..n {
            im2col(&geom, &self.data(input)[s * ci * h * w..(s + 1) * ci * h * w], &mut col);
            let out = &mut data[s * co * plane..(s + 1) * co * plane];
            gemm(co, plane, geom.rows(), self.data(weight), &col, out);
            for c in 0..co {
                let b = self.data(bias)[c];
                for v in &mut out[c * plane..(c + 1) * plane] {
                    *v += b;
                }
            }
        }
        let ng = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(vec![n, co, oh, ow], data, ng, Op::Conv2d { input, weight, bias, geom, co }))
    }

    /// input [N,Ci,H,W], weight [Ci,Co,k,k], bias [Co].
    /// Output spatial size is (H-1)*stride - 2*pad + k + out_pad.
    pub fn conv2d_transpose(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        if si.len() != 4 || sw.len() != 4 || si[1] != sw[0] || self.shape(bias) != [sw[1]] {
            return Err(Error::ShapeMismatch {
                op: "conv2d_transpose",
                detail: format!("input {:?}, weight {:?}, bias {:?}", si, sw, self.shape(bias)),
            });
        }
        let (n, ci, h, w) = (si[0], si[1], si[2], si[3]);
        let (co, k) = (sw[1], sw[2]);
        let oh = (h - 1) * stride + k + out_pad - 2 * pad;
        let ow = (w - 1) * stride + k + out_pad - 2 * pad;
        // The transposed conv scatters through the geometry of the
        // equivalent forward conv whose input is our output.
        let geom = PatchGeom { c: co, h: oh, w: ow, k, s: stride, p: pad, oh: h, ow: w };
        let plane_in = h * w;
        let plane_out = oh * ow;
        let rows = geom.rows(); // co*k*k
        let mut data = vec![0.0; n * co * plane_out];
        let mut col = vec![0.0; rows * plane_in];
        for s in 0..n {
            col.fill(0.0);
            // col = W^T (ci×rows)^T x (ci×plane_in)
            gemm_atb(
                rows,
                plane_in,
                ci,
                self.data(weight),
                &self.data(input)[s * ci * plane_in..(s + 1) * ci * plane_in],
                &mut col,
            );
            let out = &mut data[s * co * plane_out..(s + 1) * co * plane_out];
            col2im(&geom, &col, out);
            for c in 0..co {
                let b = self.data(bias)[c];
                for v in &mut out[c * plane_out..(c + 1) * plane_out] {
                    *v += b;
                }
            }
        }
        let ng = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            vec![n, co, oh, ow],
            data,
            ng,
            Op::ConvT2d { input, weight, bias, geom, ci, co },
        ))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Var {
        let data: Vec<f32> =
            self.data(a).iter().map(|&x| if x > 0.0 { x } else { slope * x }).collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), data, ng, Op::LeakyRelu(a, slope))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let data: Vec<f32> = self.data(a).iter().map(|x| x.ln()).collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), data, ng, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data: Vec<f32> = self.data(a).iter().map(|x| x.exp()).collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), data, ng, Op::Exp(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let data: Vec<f32> = self.data(a).iter().map(|x| x.tanh()).collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), data, ng, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data: Vec<f32> = self.data(a).iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), data, ng, Op::Sigmoid(a))
    }

    pub fn clamp_min(&mut self, a: Var, lo: f32) -> Var {
        let data: Vec<f32> = self.data(a).iter().map(|x| x.max(lo)).collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), data, ng, Op::ClampMin(a, lo))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f32 = self.data(a).iter().sum();
        let ng = self.needs(a);
        self.push(vec![1], vec![s], ng, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.numel(a) as f32;
        let s: f32 = self.data(a).iter().sum::<f32>() / n;
        let ng = self.needs(a);
        self.push(vec![1], vec![s], ng, Op::Mean(a))
    }

    /// Elementwise floor. Default backward gradient is zero; quantizers
    /// that want something else go through [`Tape::custom_unary`].
    pub fn floor(&mut self, a: Var) -> Var {
        let data: Vec<f32> = self.data(a).iter().map(|x| x.floor()).collect();
        let zeros = vec![0.0; data.len()];
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), data, ng, Op::Custom { input: a, grad_mul: zeros })
    }

    /// Record `out_data` as a function of `input` whose backward rule is
    /// elementwise multiplication by `grad_mul`.
    pub fn custom_unary(&mut self, input: Var, out_data: Vec<f32>, grad_mul: Vec<f32>) -> Result<Var> {
        if out_data.len() != self.numel(input) || grad_mul.len() != out_data.len() {
            return Err(Error::ShapeMismatch {
                op: "custom_unary",
                detail: format!(
                    "input {} elements, out {}, grad_mul {}",
                    self.numel(input),
                    out_data.len(),
                    grad_mul.len()
                ),
            });
        }
        let ng = self.needs(input);
        Ok(self.push(self.shape(input).to_vec(), out_data, ng, Op::Custom { input, grad_mul }))
    }

    pub(crate) fn likelihood_node(
        &mut self,
        values: Var,
        mu: Var,
        log_sigma: Var,
        channels: usize,
        chw: usize,
        hw: usize,
        data: Vec<f32>,
        d_v: Vec<f32>,
        d_mu: Vec<f32>,
        d_ls: Vec<f32>,
    ) -> Var {
        let ng = self.needs(values) || self.needs(mu) || self.needs(log_sigma);
        self.push(
            self.shape(values).to_vec(),
            data,
            ng,
            Op::Likelihood { values, mu, log_sigma, channels, chw, hw, d_v, d_mu, d_ls },
        )
    }

    /// Reverse sweep from a scalar loss. Populates gradients for every
    /// node that (transitively) feeds the loss and needs one.
    pub fn backward(&mut self, loss: Var) -> Result<BackwardGrads> {
        if self.numel(loss) != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f32>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(BackwardGrads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], v: Var, delta: impl FnOnce(&mut [f32])) {
        if !self.needs(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.numel(v)]);
        delta(slot);
    }

    fn propagate(&self, idx: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |dst| add_into(dst, g, 1.0));
                self.accumulate(grads, *b, |dst| add_into(dst, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |dst| add_into(dst, g, 1.0));
                self.accumulate(grads, *b, |dst| add_into(dst, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] * db[i];
                    }
                });
                self.accumulate(grads, *b, |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] * da[i];
                    }
                });
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, |dst| add_into(dst, g, 1.0)),
            Op::MulScalar(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, |dst| add_into(dst, g, s));
            }
            Op::Matmul { a, b, m, n, k } => {
                let (m, n, k) = (*m, *n, *k);
                let (da, db) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |dst| gemm_abt(m, k, n, g, db, dst));
                self.accumulate(grads, *b, |dst| gemm_atb(k, n, m, da, g, dst));
            }
            Op::Conv2d { input, weight, bias, geom, co } => {
                self.backward_conv2d(*input, *weight, *bias, geom, *co, g, grads);
            }
            Op::ConvT2d { input, weight, bias, geom, ci, co } => {
                self.backward_convt2d(*input, *weight, *bias, geom, *ci, *co, g, grads);
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.data(*a);
                let slope = *slope;
                self.accumulate(grads, *a, |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] * if x[i] > 0.0 { 1.0 } else { slope };
                    }
                });
            }
            Op::Log(a) => {
                let x = self.data(*a);
                self.accumulate(grads, *a, |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] / x[i];
                    }
                });
            }
            Op::Exp(a) => {
                let y = &self.nodes[idx].data;
                self.accumulate(grads, *a, |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] * y[i];
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &self.nodes[idx].data;
                self.accumulate(grads, *a, |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].data;
                self.accumulate(grads, *a, |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::ClampMin(a, lo) => {
                let x = self.data(*a);
                let lo = *lo;
                self.accumulate(grads, *a, |dst| {
                    for i in 0..dst.len() {
                        if x[i] > lo {
                            dst[i] += g[i];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let gv = g[0];
                self.accumulate(grads, *a, |dst| {
                    for d in dst.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::Mean(a) => {
                let gv = g[0] / self.numel(*a) as f32;
                self.accumulate(grads, *a, |dst| {
                    for d in dst.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::Custom { input, grad_mul } => {
                self.accumulate(grads, *input, |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] * grad_mul[i];
                    }
                });
            }
            Op::Likelihood { values, mu, log_sigma, channels, chw, hw, d_v, d_mu, d_ls } => {
                let (channels, chw, hw) = (*channels, *chw, *hw);
                self.accumulate(grads, *values, |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] * d_v[i];
                    }
                });
                self.accumulate(grads, *mu, |dst| {
                    reduce_per_channel(dst, g, d_mu, channels, chw, hw);
                });
                self.accumulate(grads, *log_sigma, |dst| {
                    reduce_per_channel(dst, g, d_ls, channels, chw, hw);
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_conv2d(
        &self,
        input: Var,
        weight: Var,
        bias: Var,
        geom: &PatchGeom,
        co: usize,
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let n = self.shape(input)[0];
        let plane = geom.oh * geom.ow;
        let rows = geom.rows();
        let in_sz = geom.c * geom.h * geom.w;
        let mut col = vec![0.0; rows * plane];
        let need_w = self.needs(weight);
        let need_x = self.needs(input);
        for s in 0..n {
            let gout = &g[s * co * plane..(s + 1) * co * plane];
            if need_w {
                im2col(geom, &self.data(input)[s * in_sz..(s + 1) * in_sz], &mut col);
                self.accumulate(grads, weight, |dst| gemm_abt(co, rows, plane, gout, &col, dst));
            }
            if need_x {
                let mut colgrad = vec![0.0; rows * plane];
                gemm_atb(rows, plane, co, self.data(weight), gout, &mut colgrad);
                self.accumulate(grads, input, |dst| {
                    col2im(geom, &colgrad, &mut dst[s * in_sz..(s + 1) * in_sz]);
                });
            }
            self.accumulate(grads, bias, |dst| {
                for c in 0..co {
                    dst[c] += gout[c * plane..(c + 1) * plane].iter().sum::<f32>();
                }
            });
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_convt2d(
        &self,
        input: Var,
        weight: Var,
        bias: Var,
        geom: &PatchGeom,
        ci: usize,
        co: usize,
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        // geom describes the *output* image patched back to input positions.
        let n = self.shape(input)[0];
        let plane_in = geom.oh * geom.ow; // H*W of the tconv input
        let plane_out = geom.h * geom.w;
        let rows = geom.rows(); // co*k*k
        let mut colg = vec![0.0; rows * plane_in];
        for s in 0..n {
            let gout = &g[s * co * plane_out..(s + 1) * co * plane_out];
            im2col(geom, gout, &mut colg);
            if self.needs(input) {
                self.accumulate(grads, input, |dst| {
                    gemm(
                        ci,
                        plane_in,
                        rows,
                        self.data(weight),
                        &colg,
                        &mut dst[s * ci * plane_in..(s + 1) * ci * plane_in],
                    );
                });
            }
            if self.needs(weight) {
                let x = &self.data(input)[s * ci * plane_in..(s + 1) * ci * plane_in];
                self.accumulate(grads, weight, |dst| gemm_abt(ci, rows, plane_in, x, &colg, dst));
            }
            self.accumulate(grads, bias, |dst| {
                for c in 0..co {
                    dst[c] += gout[c * plane_out..(c + 1) * plane_out].iter().sum::<f32>();
                }
            });
        }
    }
}

fn add_into(dst: &mut [f32], src: &[f32], scale: f32) {
    for i in 0..dst.len() {
        dst[i] += src[i] * scale;
    }
}

/// Reduce an elementwise partial into a per-channel [C] gradient for
/// tensors laid out [N,C,H,W].
fn reduce_per_channel(
    dst: &mut [f32],
    g: &[f32],
    partial: &[f32],
    channels: usize,
    chw: usize,
    hw: usize,
) {
    let n = g.len() / chw;
    for s in 0..n {
        for c in 0..channels {
            let base = s * chw + c * hw;
            let mut acc = 0.0f32;
            for i in base..base + hw {
                acc += g[i] * partial[i];
            }
            dst[c] += acc;
        }
    }
}

/// Gradients produced by one backward sweep, addressed by [`Var`].
#[derive(Debug)]
pub struct BackwardGrads {
    grads: Vec<Option<Vec<f32>>>,
}

impl BackwardGrads {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copy the gradient for `v` into the persistent tensor, accumulating
    /// with anything already there.
    pub fn write_to(&self, v: Var, t: &mut Tensor) -> Result<()> {
        let g = self.get(v).ok_or_else(|| {
            Error::invalid("missing gradient: variable did not reach the loss or needs_grad is false")
        })?;
        let n = t.numel();
        let slot = t.grad.get_or_insert_with(|| vec![0.0; n]);
        add_into(slot, g, 1.0);
        Ok(())
    }
}
