//! Differentiable building blocks: convolution, batch norm, ReLU, linear
//! layers, global statistics pooling and softmax cross-entropy.
//!
//! Layers keep no activations. `forward` returns whatever `backward` needs
//! and callers hand it back, so inference through `&self` stays possible.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Batch-first 4-d tensor `[n, c, h, w]`; `h` is frequency, `w` is time.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::DimensionMismatch {
                expected: n * c * h * w,
                got: data.len(),
            });
        }
        Ok(Self { n, c, h, w, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn item_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn item(&self, i: usize) -> &[f64] {
        let l = self.item_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [f64] {
        let l = self.item_len();
        &mut self.data[i * l..(i + 1) * l]
    }
}

/// A named tensor of model state. Buffers (batch-norm running statistics)
/// are not trainable and never receive gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub trainable: bool,
}

impl Param {
    pub fn new(shape: Vec<usize>, value: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        Self {
            shape,
            value,
            grad: Vec::new(),
            trainable: true,
        }
    }

    pub fn buffer(shape: Vec<usize>, value: Vec<f64>) -> Self {
        Self {
            trainable: false,
            ..Self::new(shape, value)
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    /// Gradient storage, allocated on first use.
    pub fn grad_mut(&mut self) -> &mut [f64] {
        if self.grad.len() != self.value.len() {
            self.grad = vec![0.0; self.value.len()];
        }
        &mut self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn grad_at(&self, i: usize) -> f64 {
        self.grad.get(i).copied().unwrap_or(0.0)
    }
}

/// Named views of every parameter and buffer, in a stable order.
pub trait Parameters {
    fn params(&self) -> Vec<(String, &Param)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Param)>;
}

fn prefixed<'a, T>(prefix: &str, items: Vec<(String, T)>) -> impl Iterator<Item = (String, T)> + 'a
where
    T: 'a,
{
    let prefix = prefix.to_string();
    items.into_iter().map(move |(n, p)| (format!("{prefix}.{n}"), p))
}

pub(crate) fn join_params<'a>(parts: Vec<(&str, Vec<(String, &'a Param)>)>) -> Vec<(String, &'a Param)> {
    parts.into_iter().flat_map(|(p, v)| prefixed(p, v)).collect()
}

pub(crate) fn join_params_mut<'a>(
    parts: Vec<(&str, Vec<(String, &'a mut Param)>)>,
) -> Vec<(String, &'a mut Param)> {
    parts.into_iter().flat_map(|(p, v)| prefixed(p, v)).collect()
}

/// `c = a * b + beta * c` on strided row/column-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index matrixmultiply touches for
    // the given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn he_normal<R: Rng + ?Sized>(rng: &mut R, n: usize, fan_in: usize) -> Vec<f64> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Bias-free 2-d convolution with square kernels and symmetric zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        Self {
            in_c,
            out_c,
            kernel,
            stride,
            pad: kernel / 2,
            weight: Param::new(
                vec![out_c, in_c, kernel, kernel],
                he_normal(rng, out_c * fan_in, fan_in),
            ),
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    /// Output columns `[lo, hi)` whose input column `xo * stride + kj - pad`
    /// lies inside `[0, w)`.
    fn valid_cols(&self, kj: usize, w: usize, ow: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = self.pad.saturating_sub(kj).div_ceil(s);
        let hi = if w + self.pad > kj {
            ((w + self.pad - kj - 1) / s + 1).min(ow)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    fn im2col(&self, x: &[f64], h: usize, w: usize, cols: &mut [f64]) {
        let (oh, ow) = self.out_size(h, w);
        let (k, s) = (self.kernel, self.stride);
        let p = oh * ow;
        for c in 0..self.in_c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = &mut cols[((c * k + ki) * k + kj) * p..][..p];
                    let (lo, hi) = self.valid_cols(kj, w, ow);
                    for y in 0..oh {
                        let ih = (y * s + ki) as isize - self.pad as isize;
                        let dst = &mut row[y * ow..(y + 1) * ow];
                        if ih < 0 || ih >= h as isize || lo >= hi {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &x[(c * h + ih as usize) * w..][..w];
                        dst[..lo].fill(0.0);
                        dst[hi..].fill(0.0);
                        let first = lo * s + kj - self.pad;
                        if s == 1 {
                            dst[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (d, v) in dst[lo..hi].iter_mut().zip(src[first..].iter().step_by(s)) {
                                *d = *v;
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize, dx: &mut [f64]) {
        let (oh, ow) = self.out_size(h, w);
        let (k, s) = (self.kernel, self.stride);
        let p = oh * ow;
        for c in 0..self.in_c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = &cols[((c * k + ki) * k + kj) * p..][..p];
                    let (lo, hi) = self.valid_cols(kj, w, ow);
                    if lo >= hi {
                        continue;
                    }
                    let first = lo * s + kj - self.pad;
                    for y in 0..oh {
                        let ih = (y * s + ki) as isize - self.pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let dst = &mut dx[(c * h + ih as usize) * w..][..w];
                        let src = &row[y * ow + lo..y * ow + hi];
                        for (d, v) in dst[first..].iter_mut().step_by(s).zip(src) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.in_c, "conv input channels");
        let (oh, ow) = self.out_size(x.h, x.w);
        let kk = self.in_c * self.kernel * self.kernel;
        let p = oh * ow;
        let mut out = Tensor::zeros(x.n, self.out_c, oh, ow);
        let mut cols = vec![0.0; kk * p];
        for i in 0..x.n {
            self.im2col(x.item(i), x.h, x.w, &mut cols);
            gemm(
                self.out_c,
                kk,
                p,
                &self.weight.value,
                (kk, 1),
                &cols,
                (p, 1),
                0.0,
                out.item_mut(i),
            );
        }
        out
    }

    /// Accumulates the weight gradient and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        let (oh, ow) = (dy.h, dy.w);
        let kk = self.in_c * self.kernel * self.kernel;
        let p = oh * ow;
        let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
        let mut cols = vec![0.0; kk * p];
        let mut dcols = vec![0.0; kk * p];
        self.weight.grad_mut();
        for i in 0..x.n {
            self.im2col(x.item(i), x.h, x.w, &mut cols);
            gemm(
                self.out_c,
                p,
                kk,
                dy.item(i),
                (p, 1),
                &cols,
                (1, p),
                1.0,
                &mut self.weight.grad,
            );
            gemm(
                kk,
                self.out_c,
                p,
                &self.weight.value,
                (1, kk),
                dy.item(i),
                (p, 1),
                0.0,
                &mut dcols,
            );
            self.col2im(&dcols, x.h, x.w, dx.item_mut(i));
        }
        dx
    }
}

impl Parameters for Conv2d {
    fn params(&self) -> Vec<(String, &Param)> {
        vec![("weight".into(), &self.weight)]
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        vec![("weight".into(), &mut self.weight)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics.
    Eval,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
}

/// Normalized activations and per-channel inverse std from a forward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    mode: Mode,
}

impl BatchNorm2d {
    pub fn new(c: usize) -> Self {
        Self {
            gamma: Param::new(vec![c], vec![1.0; c]),
            beta: Param::new(vec![c], vec![0.0; c]),
            running_mean: Param::buffer(vec![c], vec![0.0; c]),
            running_var: Param::buffer(vec![c], vec![1.0; c]),
        }
    }

    fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn batch_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let m = (x.n * x.h * x.w) as f64;
        let hw = x.h * x.w;
        let mut mean = vec![0.0; x.c];
        let mut var = vec![0.0; x.c];
        for i in 0..x.n {
            let item = x.item(i);
            for c in 0..x.c {
                mean[c] += item[c * hw..(c + 1) * hw].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for i in 0..x.n {
            let item = x.item(i);
            for c in 0..x.c {
                var[c] += item[c * hw..(c + 1) * hw]
                    .iter()
                    .map(|v| (v - mean[c]).powi(2))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        (mean, var)
    }

    fn normalize(&self, x: &Tensor, mean: &[f64], inv_std: &[f64]) -> (Tensor, Tensor) {
        let hw = x.h * x.w;
        let mut xhat = x.clone();
        let mut y = x.clone();
        for i in 0..x.n {
            let (xi, yi) = (xhat.item_mut(i), y.item_mut(i));
            for c in 0..x.c {
                let (g, b) = (self.gamma.value[c], self.beta.value[c]);
                for j in c * hw..(c + 1) * hw {
                    let v = (xi[j] - mean[c]) * inv_std[c];
                    xi[j] = v;
                    yi[j] = g * v + b;
                }
            }
        }
        (xhat, y)
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> (Tensor, BnCache) {
        assert_eq!(x.c, self.channels(), "batch-norm channels");
        let (mean, inv_std) = match mode {
            Mode::Train => {
                let (mean, var) = Self::batch_stats(x);
                let m = (x.n * x.h * x.w) as f64;
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                for c in 0..x.c {
                    let rm = &mut self.running_mean.value[c];
                    *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean[c];
                    let rv = &mut self.running_var.value[c];
                    *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * var[c] * unbias;
                }
                let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                (mean, inv)
            }
            Mode::Eval => (
                self.running_mean.value.clone(),
                self.running_var
                    .value
                    .iter()
                    .map(|v| 1.0 / (v + BN_EPS).sqrt())
                    .collect(),
            ),
        };
        let (xhat, y) = self.normalize(x, &mean, &inv_std);
        (
            y,
            BnCache {
                xhat,
                inv_std,
                mode,
            },
        )
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let inv: Vec<f64> = self
            .running_var
            .value
            .iter()
            .map(|v| 1.0 / (v + BN_EPS).sqrt())
            .collect();
        self.normalize(x, &self.running_mean.value, &inv).1
    }

    pub fn backward(&mut self, cache: &BnCache, dy: &Tensor) -> Tensor {
        let xhat = &cache.xhat;
        let hw = dy.h * dy.w;
        let c_n = dy.c;
        let mut sum_dy = vec![0.0; c_n];
        let mut sum_dy_xhat = vec![0.0; c_n];
        for i in 0..dy.n {
            let (d, xh) = (dy.item(i), xhat.item(i));
            for c in 0..c_n {
                for j in c * hw..(c + 1) * hw {
                    sum_dy[c] += d[j];
                    sum_dy_xhat[c] += d[j] * xh[j];
                }
            }
        }
        for c in 0..c_n {
            self.gamma.grad_mut()[c] += sum_dy_xhat[c];
            self.beta.grad_mut()[c] += sum_dy[c];
        }
        let m = (dy.n * hw) as f64;
        let mut dx = dy.clone();
        for i in 0..dy.n {
            let xh = xhat.item(i);
            let dxi = dx.item_mut(i);
            for c in 0..c_n {
                let scale = self.gamma.value[c] * cache.inv_std[c];
                for j in c * hw..(c + 1) * hw {
                    dxi[j] = match cache.mode {
                        Mode::Eval => scale * dxi[j],
                        Mode::Train => {
                            scale * (dxi[j] - sum_dy[c] / m - xh[j] * sum_dy_xhat[c] / m)
                        }
                    };
                }
            }
        }
        dx
    }
}

impl Parameters for BatchNorm2d {
    fn params(&self) -> Vec<(String, &Param)> {
        vec![
            ("gamma".into(), &self.gamma),
            ("beta".into(), &self.beta),
            ("running_mean".into(), &self.running_mean),
            ("running_var".into(), &self.running_var),
        ]
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        vec![
            ("gamma".into(), &mut self.gamma),
            ("beta".into(), &mut self.beta),
            ("running_mean".into(), &mut self.running_mean),
            ("running_var".into(), &mut self.running_var),
        ]
    }
}

/// In-place ReLU; returns the activity mask for the backward pass.
pub fn relu(x: &mut Tensor) -> Vec<bool> {
    x.data
        .iter_mut()
        .map(|v| {
            let on = *v > 0.0;
            if !on {
                *v = 0.0;
            }
            on
        })
        .collect()
}

pub fn relu_backward(mask: &[bool], dy: &mut Tensor) {
    for (d, &on) in dy.data.iter_mut().zip(mask) {
        if !on {
            *d = 0.0;
        }
    }
}

/// Row-major `[rows, cols]` matrix used after pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Fully connected layer `y = W x + b`, weight `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let std = (1.0 / input.max(1) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        Self {
            weight: Param::new(
                vec![output, input],
                (0..input * output).map(|_| dist.sample(rng)).collect(),
            ),
            bias: Param::new(vec![output], vec![0.0; output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let (i, o) = (self.input_dim(), self.output_dim());
        assert_eq!(x.cols, i, "linear input width");
        let mut data = vec![0.0; x.rows * o];
        for r in 0..x.rows {
            data[r * o..(r + 1) * o].copy_from_slice(&self.bias.value);
        }
        gemm(x.rows, i, o, &x.data, (i, 1), &self.weight.value, (1, i), 1.0, &mut data);
        Matrix {
            rows: x.rows,
            cols: o,
            data,
        }
    }

    pub fn backward(&mut self, x: &Matrix, dy: &Matrix) -> Matrix {
        let (i, o) = (self.input_dim(), self.output_dim());
        self.weight.grad_mut();
        gemm(o, x.rows, i, &dy.data, (1, o), &x.data, (i, 1), 1.0, &mut self.weight.grad);
        let bg = self.bias.grad_mut();
        for r in 0..dy.rows {
            for (g, d) in bg.iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
        let mut dx = vec![0.0; x.rows * i];
        gemm(x.rows, o, i, &dy.data, (o, 1), &self.weight.value, (i, 1), 0.0, &mut dx);
        Matrix {
            rows: x.rows,
            cols: i,
            data: dx,
        }
    }
}

impl Parameters for Linear {
    fn params(&self) -> Vec<(String, &Param)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    /// Per-channel mean and standard deviation, `2C` outputs.
    MeanStd,
    /// Per-channel mean, `C` outputs.
    Mean,
}

impl Pooling {
    pub fn output_dim(self, channels: usize) -> usize {
        match self {
            Pooling::MeanStd => 2 * channels,
            Pooling::Mean => channels,
        }
    }
}

pub const GSP_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GspCache {
    means: Vec<f64>,
    stds: Vec<f64>,
    shape: [usize; 4],
}

/// Global statistics pooling over every frequency-time position of each
/// channel. The standard deviation is `sqrt(var + 1e-5)` with the
/// population variance.
pub fn gsp(x: &Tensor, pooling: Pooling) -> Result<(Matrix, GspCache)> {
    let hw = x.h * x.w;
    if hw == 0 || (pooling == Pooling::MeanStd && hw < 2) {
        return Err(Error::invalid(format!(
            "statistics pooling needs at least 2 positions, got {hw}"
        )));
    }
    let mut means = vec![0.0; x.n * x.c];
    let mut stds = vec![0.0; x.n * x.c];
    let out_dim = pooling.output_dim(x.c);
    let mut data = vec![0.0; x.n * out_dim];
    for i in 0..x.n {
        let item = x.item(i);
        for c in 0..x.c {
            let s = &item[c * hw..(c + 1) * hw];
            let mean = s.iter().sum::<f64>() / hw as f64;
            let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / hw as f64;
            let std = (var + GSP_EPS).sqrt();
            means[i * x.c + c] = mean;
            stds[i * x.c + c] = std;
            data[i * out_dim + c] = mean;
            if pooling == Pooling::MeanStd {
                data[i * out_dim + x.c + c] = std;
            }
        }
    }
    Ok((
        Matrix {
            rows: x.n,
            cols: out_dim,
            data,
        },
        GspCache {
            means,
            stds,
            shape: x.shape(),
        },
    ))
}

pub fn gsp_backward(x: &Tensor, cache: &GspCache, dy: &Matrix, pooling: Pooling) -> Tensor {
    let [n, c_n, h, w] = cache.shape;
    let hw = (h * w) as f64;
    let mut dx = Tensor::zeros(n, c_n, h, w);
    for i in 0..n {
        let xi = x.item(i);
        let d = dy.row(i);
        let dxi = dx.item_mut(i);
        for c in 0..c_n {
            let dmean = d[c] / hw;
            let (mean, std) = (cache.means[i * c_n + c], cache.stds[i * c_n + c]);
            let dstd = if pooling == Pooling::MeanStd { d[c_n + c] } else { 0.0 };
            let span = c * h * w..(c + 1) * h * w;
            for j in span {
                dxi[j] = dmean + dstd * (xi[j] - mean) / (hw * std);
            }
        }
    }
    dx
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. logits.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if labels.len() != logits.rows {
        return Err(Error::DimensionMismatch {
            expected: logits.rows,
            got: labels.len(),
        });
    }
    let k = logits.cols;
    let mut grad = vec![0.0; logits.data.len()];
    let mut loss = 0.0;
    let scale = 1.0 / logits.rows as f64;
    for (r, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::invalid(format!("label {y} outside [0, {k})")));
        }
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + denom.ln();
        loss += log_z - row[y];
        for (j, v) in row.iter().enumerate() {
            let p = (v - log_z).exp();
            grad[r * k + j] = scale * (p - if j == y { 1.0 } else { 0.0 });
        }
    }
    Ok((
        loss * scale,
        Matrix {
            rows: logits.rows,
            cols: k,
            data: grad,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_matches_hand_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut conv = Conv2d::new(1, 1, 3, 1, &mut rng);
        conv.weight.value = vec![0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];
        let x = Tensor::from_vec(1, 1, 3, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]).unwrap();
        let y = conv.forward(&x);
        // Laplacian with zero padding, computed by hand.
        assert_eq!(y.data, vec![2.0, 1.0, -4.0, -3.0, 0.0, -7.0, -16.0, -11.0, -22.0]);
    }

    #[test]
    fn strided_conv_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c3 = Conv2d::new(2, 4, 3, 2, &mut rng);
        let c1 = Conv2d::new(2, 4, 1, 2, &mut rng);
        for (h, w) in [(64, 64), (64, 101), (7, 9)] {
            assert_eq!(c3.out_size(h, w), c1.out_size(h, w));
        }
        assert_eq!(c3.out_size(64, 100), (32, 50));
    }

    #[test]
    fn gsp_constant_map() {
        let x = Tensor::from_vec(1, 2, 2, 2, vec![3.0; 8]).unwrap();
        let (y, _) = gsp(&x, Pooling::MeanStd).unwrap();
        assert_eq!(y.cols, 4);
        assert_eq!(&y.data[..2], &[3.0, 3.0]);
        for s in &y.data[2..] {
            assert!((s - GSP_EPS.sqrt()).abs() < 1e-15);
        }
        let single = Tensor::from_vec(1, 2, 1, 1, vec![1.0, 2.0]).unwrap();
        assert!(gsp(&single, Pooling::MeanStd).is_err());
        assert!(gsp(&single, Pooling::Mean).is_ok());
    }

    #[test]
    fn gsp_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..24).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = Tensor::from_vec(1, 4, 2, 3, data.clone()).unwrap();
        let (y, _) = gsp(&x, Pooling::MeanStd).unwrap();
        for c in 0..4 {
            let s = &data[c * 6..(c + 1) * 6];
            let mut mean = 0.0;
            for v in s {
                mean += v;
            }
            mean /= 6.0;
            let mut var = 0.0;
            for v in s {
                var += (v - mean) * (v - mean);
            }
            var /= 6.0;
            assert!((y.data[c] - mean).abs() < 1e-9);
            assert!((y.data[4 + c] - (var + 1e-5).sqrt()).abs() < 1e-9);
        }
        let (m, _) = gsp(&x, Pooling::Mean).unwrap();
        assert_eq!(&m.data[..], &y.data[..4]);
    }

    #[test]
    fn gsp_mean_unchanged_by_tiling_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (c, h, w) = (3, 4, 5);
        let data: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(1, c, h, w, data.clone()).unwrap();
        let mut tiled = Vec::new();
        for row in data.chunks(w) {
            tiled.extend_from_slice(row);
            tiled.extend_from_slice(row);
        }
        let x2 = Tensor::from_vec(1, c, h, 2 * w, tiled).unwrap();
        let (a, _) = gsp(&x, Pooling::MeanStd).unwrap();
        let (b, _) = gsp(&x2, Pooling::MeanStd).unwrap();
        for k in 0..c {
            assert!((a.data[k] - b.data[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn gsp_256_channels_gives_512() {
        let x = Tensor::zeros(1, 256, 8, 8);
        assert_eq!(gsp(&x, Pooling::MeanStd).unwrap().0.cols, 512);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Matrix {
            rows: 2,
            cols: 4,
            data: vec![0.0; 8],
        };
        let (loss, grad) = softmax_cross_entropy(&logits, &[1, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((grad.data[1] - (0.25 - 1.0) / 2.0).abs() < 1e-12);
        assert!(softmax_cross_entropy(&logits, &[1, 4]).is_err());
    }

    #[test]
    fn linear_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut lin = Linear::new(2, 3, &mut rng);
        lin.weight.value = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        lin.bias.value = vec![0.5, 0.0, -0.5];
        let y = lin.forward(&Matrix {
            rows: 1,
            cols: 2,
            data: vec![1.0, -1.0],
        });
        assert_eq!(y.data, vec![-0.5, -1.0, -1.5]);
    }

    #[test]
    fn batch_norm_train_normalizes() {
        let mut bn = BatchNorm2d::new(1);
        let x = Tensor::from_vec(2, 1, 1, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, _) = bn.forward(&x, Mode::Train);
        let mean: f64 = y.data.iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((bn.running_mean.value[0] - 0.25).abs() < 1e-12);
        let e = bn.infer(&x);
        assert_eq!(e, bn.forward(&x, Mode::Eval).0);
    }
}
