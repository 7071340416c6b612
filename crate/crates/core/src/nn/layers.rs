use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{gemm, Real, Tensor};
use crate::error::{structure, Result};

/// Serializable description of one layer; [`super::Network::build`] turns a
/// list of these into live layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { units: usize },
    Conv2d { filters: usize, kernel: usize, stride: usize },
    BatchNorm,
    Relu,
    MaxPool2d { size: usize, stride: usize },
    Flatten,
    /// Remember the current activation under `slot`.
    SkipSave { slot: usize },
    /// Add the activation saved under `slot`; with `project`, a 1x1 stride-1
    /// convolution maps the saved activation to the current channel count.
    SkipAdd { slot: usize, project: bool },
}

fn he_uniform<T: Real, R: Rng>(n: usize, fan_in: usize, rng: &mut R) -> Vec<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| T::of(rng.random_range(-limit..limit))).collect()
}

#[derive(Debug, Clone)]
pub struct Dense<T> {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out, in]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub grad_weight: Vec<T>,
    pub grad_bias: Vec<T>,
    input: Option<Tensor<T>>,
}

impl<T: Real> Dense<T> {
    pub fn new<R: Rng>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        Dense {
            in_features,
            out_features,
            weight: he_uniform(in_features * out_features, in_features, rng),
            bias: vec![T::zero(); out_features],
            grad_weight: vec![T::zero(); in_features * out_features],
            grad_bias: vec![T::zero(); out_features],
            input: None,
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let b = x.batch();
        let (i, o) = (self.in_features, self.out_features);
        let mut y = Tensor::zeros(vec![b, o]);
        for row in y.data_mut().chunks_mut(o) {
            row.copy_from_slice(&self.bias);
        }
        gemm(b, i, o, T::one(), (x.data(), i, 1), (&self.weight, 1, i), T::one(), y.data_mut(), o, 1);
        y
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let y = self.infer(x);
        if train {
            self.input = Some(x.clone());
        }
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take().expect("Dense::backward without forward");
        let b = x.batch();
        let (i, o) = (self.in_features, self.out_features);
        gemm(o, b, i, T::one(), (dy.data(), 1, o), (x.data(), i, 1), T::one(), &mut self.grad_weight, i, 1);
        for row in dy.data().chunks(o) {
            for (g, &d) in self.grad_bias.iter_mut().zip(row) {
                *g += d;
            }
        }
        let mut dx = Tensor::zeros(vec![b, i]);
        gemm(b, o, i, T::one(), (dy.data(), o, 1), (&self.weight, i, 1), T::zero(), dx.data_mut(), i, 1);
        dx
    }
}

/// "Same"-padded 2-D convolution: output side `ceil(H / stride)`, total
/// padding `max((out - 1) * stride + k - H, 0)` with the smaller half on the
/// top/left.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `[out, in * k * k]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub grad_weight: Vec<T>,
    pub grad_bias: Vec<T>,
    cache: Option<ConvCache<T>>,
}

#[derive(Debug, Clone)]
struct ConvCache<T> {
    cols: Vec<T>,
    in_shape: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    pad_top: usize,
    pad_left: usize,
}

pub(crate) fn same_out(len: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = len.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(len);
    (out, total / 2)
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng>(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            weight: he_uniform(out_channels * fan_in, fan_in, rng),
            bias: vec![T::zero(); out_channels],
            grad_weight: vec![T::zero(); out_channels * fan_in],
            grad_bias: vec![T::zero(); out_channels],
            cache: None,
        }
    }

    fn geom(&self, h: usize, w: usize) -> ConvGeom {
        let (oh, pad_top) = same_out(h, self.kernel, self.stride);
        let (ow, pad_left) = same_out(w, self.kernel, self.stride);
        ConvGeom {
            h,
            w,
            oh,
            ow,
            pad_top,
            pad_left,
        }
    }

    /// `[C*k*k, B*OH*OW]` patch matrix.
    fn im2col(&self, x: &Tensor<T>, g: ConvGeom) -> Vec<T> {
        let b = x.batch();
        let k = self.kernel;
        let p = g.oh * g.ow;
        let ncols = b * p;
        let mut cols = vec![T::zero(); self.in_channels * k * k * ncols];
        let xd = x.data();
        for c in 0..self.in_channels {
            for ki in 0..k {
                for kj in 0..k {
                    let r = (c * k + ki) * k + kj;
                    let row = &mut cols[r * ncols..(r + 1) * ncols];
                    for bi in 0..b {
                        let plane = &xd[(bi * self.in_channels + c) * g.h * g.w..][..g.h * g.w];
                        for oy in 0..g.oh {
                            let iy = (oy * self.stride + ki) as isize - g.pad_top as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let src = &plane[iy as usize * g.w..][..g.w];
                            let dst = &mut row[bi * p + oy * g.ow..][..g.ow];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kj) as isize - g.pad_left as isize;
                                if ix >= 0 && ix < g.w as isize {
                                    *d = src[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &[T], b: usize, g: ConvGeom) -> Tensor<T> {
        let k = self.kernel;
        let p = g.oh * g.ow;
        let ncols = b * p;
        let mut dx = Tensor::zeros(vec![b, self.in_channels, g.h, g.w]);
        let dxd = dx.data_mut();
        for c in 0..self.in_channels {
            for ki in 0..k {
                for kj in 0..k {
                    let r = (c * k + ki) * k + kj;
                    let row = &dcols[r * ncols..(r + 1) * ncols];
                    for bi in 0..b {
                        let plane = &mut dxd[(bi * self.in_channels + c) * g.h * g.w..][..g.h * g.w];
                        for oy in 0..g.oh {
                            let iy = (oy * self.stride + ki) as isize - g.pad_top as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let dst = &mut plane[iy as usize * g.w..][..g.w];
                            let src = &row[bi * p + oy * g.ow..][..g.ow];
                            for (ox, &s) in src.iter().enumerate() {
                                let ix = (ox * self.stride + kj) as isize - g.pad_left as isize;
                                if ix >= 0 && ix < g.w as isize {
                                    dst[ix as usize] += s;
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let s = x.shape();
        let (b, h, w) = (s[0], s[2], s[3]);
        let g = self.geom(h, w);
        let cols = self.im2col(x, g);
        let y = self.multiply(&cols, b, g);
        if train {
            self.cache = Some(ConvCache {
                cols,
                in_shape: s.to_vec(),
            });
        }
        y
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let s = x.shape();
        let g = self.geom(s[2], s[3]);
        let cols = self.im2col(x, g);
        self.multiply(&cols, s[0], g)
    }

    fn multiply(&self, cols: &[T], b: usize, g: ConvGeom) -> Tensor<T> {
        let p = g.oh * g.ow;
        let ncols = b * p;
        let ckk = self.in_channels * self.kernel * self.kernel;
        let oc = self.out_channels;
        let mut ym = vec![T::zero(); oc * ncols];
        gemm(oc, ckk, ncols, T::one(), (&self.weight, ckk, 1), (cols, ncols, 1), T::zero(), &mut ym, ncols, 1);
        let mut y = Tensor::zeros(vec![b, oc, g.oh, g.ow]);
        let yd = y.data_mut();
        for o in 0..oc {
            let bias = self.bias[o];
            for bi in 0..b {
                let src = &ym[o * ncols + bi * p..][..p];
                let dst = &mut yd[(bi * oc + o) * p..][..p];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = v + bias;
                }
            }
        }
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let cache = self.cache.take().expect("Conv2d::backward without forward");
        let (b, h, w) = (cache.in_shape[0], cache.in_shape[2], cache.in_shape[3]);
        let g = self.geom(h, w);
        let p = g.oh * g.ow;
        let ncols = b * p;
        let ckk = self.in_channels * self.kernel * self.kernel;
        let oc = self.out_channels;
        let mut dym = vec![T::zero(); oc * ncols];
        let dyd = dy.data();
        for o in 0..oc {
            let mut gb = T::zero();
            for bi in 0..b {
                let src = &dyd[(bi * oc + o) * p..][..p];
                dym[o * ncols + bi * p..][..p].copy_from_slice(src);
                gb += src.iter().copied().sum::<T>();
            }
            self.grad_bias[o] += gb;
        }
        gemm(oc, ncols, ckk, T::one(), (&dym, ncols, 1), (&cache.cols, 1, ncols), T::one(), &mut self.grad_weight, ckk, 1);
        let mut dcols = cache.cols;
        gemm(ckk, oc, ncols, T::one(), (&self.weight, 1, ckk), (&dym, ncols, 1), T::zero(), &mut dcols, ncols, 1);
        self.col2im(&dcols, b, g)
    }
}

/// Batch normalization over the channel axis (axis 1). In training the batch
/// statistics are used and the running estimates updated; in inference the
/// running estimates are used.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub channels: usize,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub grad_gamma: Vec<T>,
    pub grad_beta: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache<T>>,
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Real> BatchNorm<T> {
    pub const MOMENTUM: f64 = 0.9;
    pub const EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        BatchNorm {
            channels,
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            grad_gamma: vec![T::zero(); channels],
            grad_beta: vec![T::zero(); channels],
            momentum: Self::MOMENTUM,
            eps: Self::EPS,
            cache: None,
        }
    }

    fn spatial(x: &Tensor<T>) -> usize {
        x.shape()[2..].iter().product()
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let (b, c, s) = (x.batch(), self.channels, Self::spatial(x));
        let mut y = x.clone();
        let yd = y.data_mut();
        for ch in 0..c {
            let inv = T::one() / (self.running_var[ch] + T::of(self.eps)).sqrt();
            let scale = self.gamma[ch] * inv;
            let shift = self.beta[ch] - self.running_mean[ch] * scale;
            for bi in 0..b {
                for v in &mut yd[(bi * c + ch) * s..][..s] {
                    *v = *v * scale + shift;
                }
            }
        }
        y
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        if !train {
            return self.infer(x);
        }
        let (b, c, s) = (x.batch(), self.channels, Self::spatial(x));
        let m = b * s;
        let mut xhat = x.clone();
        let mut inv_std = vec![T::zero(); c];
        let mom = T::of(self.momentum);
        for ch in 0..c {
            let mut sum = T::zero();
            for bi in 0..b {
                sum += x.data()[(bi * c + ch) * s..][..s].iter().copied().sum::<T>();
            }
            let mean = sum / T::of(m as f64);
            let mut ss = T::zero();
            for bi in 0..b {
                for &v in &x.data()[(bi * c + ch) * s..][..s] {
                    ss += (v - mean) * (v - mean);
                }
            }
            let var = ss / T::of(m as f64);
            let inv = T::one() / (var + T::of(self.eps)).sqrt();
            inv_std[ch] = inv;
            for bi in 0..b {
                for v in &mut xhat.data_mut()[(bi * c + ch) * s..][..s] {
                    *v = (*v - mean) * inv;
                }
            }
            let unbiased = if m > 1 { ss / T::of((m - 1) as f64) } else { var };
            self.running_mean[ch] = mom * self.running_mean[ch] + (T::one() - mom) * mean;
            self.running_var[ch] = mom * self.running_var[ch] + (T::one() - mom) * unbiased;
        }
        let mut y = xhat.clone();
        let yd = y.data_mut();
        for ch in 0..c {
            for bi in 0..b {
                for v in &mut yd[(bi * c + ch) * s..][..s] {
                    *v = *v * self.gamma[ch] + self.beta[ch];
                }
            }
        }
        self.cache = Some(BnCache { xhat, inv_std });
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let cache = self.cache.take().expect("BatchNorm::backward without forward");
        let (b, c, s) = (dy.batch(), self.channels, Self::spatial(dy));
        let m = T::of((b * s) as f64);
        let mut dx = Tensor::zeros(dy.shape().to_vec());
        for ch in 0..c {
            let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
            for bi in 0..b {
                let o = (bi * c + ch) * s;
                for (&d, &xh) in dy.data()[o..o + s].iter().zip(&cache.xhat.data()[o..o + s]) {
                    sum_dy += d;
                    sum_dy_xhat += d * xh;
                }
            }
            self.grad_gamma[ch] += sum_dy_xhat;
            self.grad_beta[ch] += sum_dy;
            let k = self.gamma[ch] * cache.inv_std[ch] / m;
            for bi in 0..b {
                let o = (bi * c + ch) * s;
                for i in o..o + s {
                    dx.data_mut()[i] = k * (m * dy.data()[i] - sum_dy - cache.xhat.data()[i] * sum_dy_xhat);
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub size: usize,
    pub stride: usize,
    argmax: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new(size: usize, stride: usize) -> Self {
        MaxPool2d {
            size,
            stride,
            argmax: None,
        }
    }

    pub(crate) fn out_len(&self, len: usize) -> usize {
        if len < self.size {
            0
        } else {
            (len - self.size) / self.stride + 1
        }
    }

    pub fn forward<T: Real>(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let s = x.shape();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (self.out_len(h), self.out_len(w));
        let mut y = Tensor::zeros(vec![b, c, oh, ow]);
        let mut idx = if train { vec![0usize; b * c * oh * ow] } else { Vec::new() };
        let xd = x.data();
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * self.stride * w + ox * self.stride;
                    for dy in 0..self.size {
                        for dx in 0..self.size {
                            let i = base + (oy * self.stride + dy) * w + ox * self.stride + dx;
                            if xd[i] > xd[best] {
                                best = i;
                            }
                        }
                    }
                    let o = (plane * oh + oy) * ow + ox;
                    y.data_mut()[o] = xd[best];
                    if train {
                        idx[o] = best;
                    }
                }
            }
        }
        if train {
            self.argmax = Some((idx, s.to_vec()));
        }
        y
    }

    pub fn backward<T: Real>(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let (idx, in_shape) = self.argmax.take().expect("MaxPool2d::backward without forward");
        let mut dx = Tensor::zeros(in_shape);
        for (&i, &d) in idx.iter().zip(dy.data()) {
            dx.data_mut()[i] += d;
        }
        dx
    }
}

/// A live layer.
#[derive(Debug, Clone)]
pub enum Layer<T> {
    Dense(Dense<T>),
    Conv2d(Conv2d<T>),
    BatchNorm(BatchNorm<T>),
    Relu { mask: Option<Vec<bool>> },
    MaxPool2d(MaxPool2d),
    Flatten { in_shape: Option<Vec<usize>> },
    SkipSave { slot: usize },
    SkipAdd { slot: usize, projection: Option<Conv2d<T>> },
}

impl<T: Real> Layer<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2d(_) => "conv2d",
            Layer::BatchNorm(_) => "batch_norm",
            Layer::Relu { .. } => "relu",
            Layer::MaxPool2d(_) => "max_pool2d",
            Layer::Flatten { .. } => "flatten",
            Layer::SkipSave { .. } => "skip_save",
            Layer::SkipAdd { .. } => "skip_add",
        }
    }

    /// Output shape (without batch axis) for a given input shape, checked
    /// before any computation.
    pub fn output_shape(&self, name: &str, input: &[usize], saved: &[Option<Vec<usize>>]) -> Result<Vec<usize>> {
        let spatial = |what: &str| -> Result<(usize, usize, usize)> {
            match input {
                [c, h, w] => Ok((*c, *h, *w)),
                _ => Err(structure(name, format!("{what} needs a [C, H, W] input, got {input:?}"))),
            }
        };
        match self {
            Layer::Dense(d) => match input {
                [f] if *f == d.in_features => Ok(vec![d.out_features]),
                _ => Err(structure(name, format!("expects [{}] features, got {input:?}", d.in_features))),
            },
            Layer::Conv2d(cv) => {
                let (c, h, w) = spatial("convolution")?;
                if c != cv.in_channels {
                    return Err(structure(name, format!("expects {} channels, got {c}", cv.in_channels)));
                }
                if h == 0 || w == 0 {
                    return Err(structure(name, "empty spatial extent"));
                }
                let (oh, _) = same_out(h, cv.kernel, cv.stride);
                let (ow, _) = same_out(w, cv.kernel, cv.stride);
                Ok(vec![cv.out_channels, oh, ow])
            }
            Layer::BatchNorm(bn) => {
                if input.first() != Some(&bn.channels) {
                    return Err(structure(name, format!("expects {} channels, got {input:?}", bn.channels)));
                }
                Ok(input.to_vec())
            }
            Layer::Relu { .. } => Ok(input.to_vec()),
            Layer::MaxPool2d(p) => {
                let (c, h, w) = spatial("pooling")?;
                let (oh, ow) = (p.out_len(h), p.out_len(w));
                if oh == 0 || ow == 0 {
                    return Err(structure(name, format!("{h}x{w} is smaller than the {0}x{0} window", p.size)));
                }
                Ok(vec![c, oh, ow])
            }
            Layer::Flatten { .. } => Ok(vec![input.iter().product()]),
            Layer::SkipSave { .. } => Ok(input.to_vec()),
            Layer::SkipAdd { slot, projection } => {
                let skip = saved
                    .get(*slot)
                    .and_then(|s| s.clone())
                    .ok_or_else(|| structure(name, format!("skip slot {slot} was never saved")))?;
                let skip = match projection {
                    Some(p) => Layer::Conv2d(p.clone()).output_shape(&format!("{name} projection"), &skip, saved)?,
                    None => skip,
                };
                if skip != input {
                    return Err(structure(
                        name,
                        format!("cannot add skip of shape {skip:?} to activation of shape {input:?}"),
                    ));
                }
                Ok(input.to_vec())
            }
        }
    }
}
