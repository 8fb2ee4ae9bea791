use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gemm::gemm;
use super::{Mode, ParamRole, ParamTensor, Tensor};
use crate::error::{config_err, Error, Result};

/// Serializable description of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerConfig {
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize },
    Maxpool { window: [usize; 2] },
    Batchnorm { features: usize, eps: f64, momentum: f64 },
    FullyConnected { inputs: usize, outputs: usize },
    Relu,
    ShiftedLeakyRelu { alpha: f64, t_min: f64 },
    /// Fixed (non-trainable) multiplication.
    Scale { factor: f64 },
    Flatten,
}

impl LayerConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerConfig::Conv2d { in_channels, out_channels, kernel } => {
                if in_channels == 0 || out_channels == 0 {
                    return Err(config_err!("conv2d channel counts must be >= 1"));
                }
                if kernel == 0 || kernel % 2 == 0 {
                    return Err(config_err!("conv2d kernel must be odd and >= 1, got {kernel}"));
                }
            }
            LayerConfig::Maxpool { window } => {
                if window[0] == 0 || window[1] == 0 {
                    return Err(config_err!("maxpool window must be >= 1, got {window:?}"));
                }
            }
            LayerConfig::Batchnorm { features, eps, momentum } => {
                if features == 0 || eps <= 0.0 || !(0.0..=1.0).contains(&momentum) {
                    return Err(config_err!("invalid batchnorm settings"));
                }
            }
            LayerConfig::FullyConnected { inputs, outputs } => {
                if inputs == 0 || outputs == 0 {
                    return Err(config_err!("fully-connected widths must be >= 1"));
                }
            }
            LayerConfig::ShiftedLeakyRelu { alpha, t_min } => {
                if !(alpha > 0.0 && alpha < 1.0) {
                    return Err(config_err!("leak slope must lie in (0, 1), got {alpha}"));
                }
                if !(t_min >= 0.0) {
                    return Err(config_err!("shift must be >= 0, got {t_min}"));
                }
            }
            LayerConfig::Scale { factor } => {
                if !factor.is_finite() || factor == 0.0 {
                    return Err(config_err!("scale factor must be finite and non-zero"));
                }
            }
            LayerConfig::Relu | LayerConfig::Flatten => {}
        }
        Ok(())
    }

    /// Instantiates the layer with freshly initialized parameters.
    pub fn build<R: Rng + ?Sized>(&self, name: &str, rng: &mut R) -> Result<Layer> {
        self.validate()?;
        Ok(match *self {
            LayerConfig::Conv2d { in_channels, out_channels, kernel } => {
                Layer::Conv2d(Conv2d::new(name, in_channels, out_channels, kernel, rng)?)
            }
            LayerConfig::Maxpool { window } => Layer::MaxPool(MaxPool2d::new(window[0], window[1])?),
            LayerConfig::Batchnorm { features, eps, momentum } => {
                Layer::BatchNorm(BatchNorm::with_settings(name, features, eps, momentum))
            }
            LayerConfig::FullyConnected { inputs, outputs } => {
                Layer::Linear(Linear::new(name, inputs, outputs, rng))
            }
            LayerConfig::Relu => Layer::Relu(Relu::default()),
            LayerConfig::ShiftedLeakyRelu { alpha, t_min } => {
                Layer::ShiftedLeakyRelu(ShiftedLeakyRelu::new(alpha, t_min)?)
            }
            LayerConfig::Scale { factor } => Layer::Scale(Scale::new(factor)),
            LayerConfig::Flatten => Layer::Flatten(Flatten::default()),
        })
    }
}

fn kaiming_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor { shape: shape.to_vec(), data }
}

fn missing_cache(layer: &str) -> Error {
    Error::Usage(format!("{layer} backward called before forward"))
}

fn check_grad_shape(grad: &Tensor, expected: &[usize], layer: &str) -> Result<()> {
    if grad.shape() != expected {
        return Err(config_err!(
            "{layer} backward expected upstream gradient of shape {expected:?}, got {:?}",
            grad.shape()
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------

/// Stride-1 cross-correlation with same-size zero padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    /// `[out, in, k, k]`
    pub kernels: ParamTensor,
    /// `[out]`
    pub bias: ParamTensor,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    cache: Option<ConvCache>,
}

#[derive(Clone, Debug)]
struct ConvCache {
    cols: Vec<f64>,
    batch: usize,
    height: usize,
    width: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        LayerConfig::Conv2d { in_channels, out_channels, kernel }.validate()?;
        let shape = [out_channels, in_channels, kernel, kernel];
        let w = kaiming_uniform(&shape, in_channels * kernel * kernel, rng);
        Self::from_parts(name, w, Tensor::zeros(&[out_channels]))
    }

    /// Builds a layer from explicit kernels `[out, in, k, k]` and bias `[out]`.
    pub fn from_parts(name: &str, kernels: Tensor, bias: Tensor) -> Result<Self> {
        let s = kernels.shape();
        if s.len() != 4 || s[2] != s[3] || s[2].is_multiple_of(2) {
            return Err(config_err!("conv kernels must be [out, in, k, k] with odd k, got {s:?}"));
        }
        if bias.shape() != [s[0]] {
            return Err(config_err!("conv bias shape {:?} does not match {} outputs", bias.shape(), s[0]));
        }
        let (out_channels, in_channels, kernel) = (s[0], s[1], s[2]);
        Ok(Self {
            kernels: ParamTensor::new(format!("{name}.weight"), ParamRole::Weight, kernels),
            bias: ParamTensor::new(format!("{name}.bias"), ParamRole::Bias, bias),
            in_channels,
            out_channels,
            kernel,
            cache: None,
        })
    }

    pub fn config(&self) -> LayerConfig {
        LayerConfig::Conv2d {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
        }
    }

    fn dims(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        x.expect_rank(4, "conv2d")?;
        let s = x.shape();
        if s[1] != self.in_channels {
            return Err(config_err!(
                "conv2d expects {} input channels, got {}",
                self.in_channels,
                s[1]
            ));
        }
        Ok((s[0], s[2], s[3]))
    }

    fn im2col(&self, x: &[f64], batch: usize, h: usize, w: usize) -> Vec<f64> {
        let k = self.kernel;
        let pad = (k - 1) / 2;
        let hw = h * w;
        let ncols = batch * hw;
        let mut cols = vec![0.0; self.in_channels * k * k * ncols];
        for c in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for b in 0..batch {
                        let src = &x[(b * self.in_channels + c) * hw..][..hw];
                        for y in 0..h {
                            let sy = y as isize + ky as isize - pad as isize;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let srow = &src[sy as usize * w..][..w];
                            let drow = &mut dst[b * hw + y * w..][..w];
                            for (xx, d) in drow.iter_mut().enumerate() {
                                let sx = xx as isize + kx as isize - pad as isize;
                                if sx >= 0 && sx < w as isize {
                                    *d = srow[sx as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], batch: usize, h: usize, w: usize) -> Vec<f64> {
        let k = self.kernel;
        let pad = (k - 1) / 2;
        let hw = h * w;
        let ncols = batch * hw;
        let mut x = vec![0.0; batch * self.in_channels * hw];
        for c in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for b in 0..batch {
                        let dst = &mut x[(b * self.in_channels + c) * hw..][..hw];
                        for y in 0..h {
                            let sy = y as isize + ky as isize - pad as isize;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let srow = &src[b * hw + y * w..][..w];
                            let drow = &mut dst[sy as usize * w..][..w];
                            for (xx, v) in srow.iter().enumerate() {
                                let sx = xx as isize + kx as isize - pad as isize;
                                if sx >= 0 && sx < w as isize {
                                    drow[sx as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
        x
    }

    fn compute(&self, x: &Tensor) -> Result<(Tensor, ConvCache)> {
        let (batch, h, w) = self.dims(x)?;
        let hw = h * w;
        let ncols = batch * hw;
        let ckk = self.in_channels * self.kernel * self.kernel;
        let cols = self.im2col(x.data(), batch, h, w);
        let mut mat = vec![0.0; self.out_channels * ncols];
        gemm(
            self.out_channels,
            ckk,
            ncols,
            self.kernels.value.data(),
            false,
            &cols,
            false,
            &mut mat,
            false,
        );
        let mut out = vec![0.0; batch * self.out_channels * hw];
        let bias = self.bias.value.data();
        for b in 0..batch {
            for co in 0..self.out_channels {
                let src = &mat[co * ncols + b * hw..][..hw];
                let dst = &mut out[(b * self.out_channels + co) * hw..][..hw];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bias[co];
                }
            }
        }
        let out = Tensor { shape: vec![batch, self.out_channels, h, w], data: out };
        Ok((out, ConvCache { cols, batch, height: h, width: w }))
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (out, cache) = self.compute(x)?;
        self.cache = Some(cache);
        Ok(out)
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.compute(x)?.0)
    }

    /// Returns the input gradient and accumulates kernel and bias gradients.
    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        Ok(self.backward_impl(grad, true)?.expect("input gradient requested"))
    }

    /// Accumulates kernel and bias gradients without forming the input
    /// gradient.
    pub fn backward_params(&mut self, grad: &Tensor) -> Result<()> {
        self.backward_impl(grad, false).map(|_| ())
    }

    fn backward_impl(&mut self, grad: &Tensor, want_input: bool) -> Result<Option<Tensor>> {
        let cache = self.cache.take().ok_or_else(|| missing_cache("conv2d"))?;
        let ConvCache { cols, batch, height: h, width: w } = cache;
        check_grad_shape(grad, &[batch, self.out_channels, h, w], "conv2d")?;
        let hw = h * w;
        let ncols = batch * hw;
        let ckk = self.in_channels * self.kernel * self.kernel;

        let mut g = vec![0.0; self.out_channels * ncols];
        for b in 0..batch {
            for co in 0..self.out_channels {
                let src = &grad.data()[(b * self.out_channels + co) * hw..][..hw];
                g[co * ncols + b * hw..][..hw].copy_from_slice(src);
            }
        }

        let mut dk = vec![0.0; self.out_channels * ckk];
        gemm(self.out_channels, ncols, ckk, &g, false, &cols, true, &mut dk, false);
        self.kernels.accumulate(&dk);
        let db: Vec<f64> = g.chunks_exact(ncols).map(|row| row.iter().sum()).collect();
        self.bias.accumulate(&db);
        if !want_input {
            return Ok(None);
        }

        let mut dcols = cols;
        gemm(
            ckk,
            self.out_channels,
            ncols,
            self.kernels.value.data(),
            true,
            &g,
            false,
            &mut dcols,
            false,
        );
        let dx = self.col2im(&dcols, batch, h, w);
        Ok(Some(Tensor { shape: vec![batch, self.in_channels, h, w], data: dx }))
    }
}

// ---------------------------------------------------------------------------

/// Non-overlapping max pooling in ceil mode: edge windows are truncated so
/// each output axis has exactly `ceil(dim / window)` cells.
#[derive(Clone, Debug)]
pub struct MaxPool2d {
    window: (usize, usize),
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new(ph: usize, pw: usize) -> Result<Self> {
        LayerConfig::Maxpool { window: [ph, pw] }.validate()?;
        Ok(Self { window: (ph, pw), cache: None })
    }

    pub fn config(&self) -> LayerConfig {
        LayerConfig::Maxpool { window: [self.window.0, self.window.1] }
    }

    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.window.0), w.div_ceil(self.window.1))
    }

    fn compute(&self, x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
        x.expect_rank(4, "maxpool")?;
        let s = x.shape();
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ph, pw) = self.window;
        let (oh, ow) = self.output_dims(h, w);
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        let data = x.data();
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_ix = base + oy * ph * w + ox * pw;
                    for y in oy * ph..((oy + 1) * ph).min(h) {
                        for xx in ox * pw..((ox + 1) * pw).min(w) {
                            let ix = base + y * w + xx;
                            if data[ix] > best {
                                best = data[ix];
                                best_ix = ix;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_ix);
                }
            }
        }
        Ok((Tensor { shape: vec![s[0], s[1], oh, ow], data: out }, argmax))
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (out, argmax) = self.compute(x)?;
        self.cache = Some((argmax, x.shape().to_vec()));
        Ok(out)
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.compute(x)?.0)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let (argmax, in_shape) = self.cache.take().ok_or_else(|| missing_cache("maxpool"))?;
        let (oh, ow) = self.output_dims(in_shape[2], in_shape[3]);
        check_grad_shape(grad, &[in_shape[0], in_shape[1], oh, ow], "maxpool")?;
        let mut dx = vec![0.0; in_shape.iter().product()];
        for (g, &ix) in grad.data().iter().zip(&argmax) {
            dx[ix] += g;
        }
        Ok(Tensor { shape: in_shape, data: dx })
    }
}

// ---------------------------------------------------------------------------

/// Per-channel batch normalization over `[B, C, ...]` inputs.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamTensor,
    pub beta: ParamTensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    eps: f64,
    momentum: f64,
    cache: Option<BnCache>,
}

#[derive(Clone, Debug)]
struct BnCache {
    xhat: Vec<f64>,
    invstd: Vec<f64>,
    shape: Vec<usize>,
    mode: Mode,
}

impl BatchNorm {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(name: &str, features: usize) -> Self {
        Self::with_settings(name, features, Self::EPS, Self::MOMENTUM)
    }

    pub fn with_settings(name: &str, features: usize, eps: f64, momentum: f64) -> Self {
        Self {
            gamma: ParamTensor::new(
                format!("{name}.gamma"),
                ParamRole::Scale,
                Tensor::filled(&[features], 1.0),
            ),
            beta: ParamTensor::new(format!("{name}.beta"), ParamRole::Shift, Tensor::zeros(&[features])),
            running_mean: Tensor::zeros(&[features]),
            running_var: Tensor::filled(&[features], 1.0),
            eps,
            momentum,
            cache: None,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.value.len()
    }

    pub fn config(&self) -> LayerConfig {
        LayerConfig::Batchnorm { features: self.features(), eps: self.eps, momentum: self.momentum }
    }

    fn dims(&self, x: &Tensor) -> Result<(usize, usize)> {
        let s = x.shape();
        if s.len() < 2 || s[1] != self.features() {
            return Err(config_err!(
                "batchnorm expects [B, {}, ...] input, got {s:?}",
                self.features()
            ));
        }
        Ok((s[0], s[2..].iter().product()))
    }

    fn batch_stats(&self, data: &[f64], batch: usize, spatial: usize) -> (Vec<f64>, Vec<f64>) {
        let c_n = self.features();
        let n = (batch * spatial) as f64;
        let mut mean = vec![0.0; c_n];
        for (bc, chunk) in data.chunks_exact(spatial).enumerate() {
            mean[bc % c_n] += chunk.iter().sum::<f64>();
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut var = vec![0.0; c_n];
        for (bc, chunk) in data.chunks_exact(spatial).enumerate() {
            let m = mean[bc % c_n];
            var[bc % c_n] += chunk.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        }
        for v in var.iter_mut() {
            *v /= n;
        }
        (mean, var)
    }

    /// Normalizes; in train mode also returns the batch statistics. The
    /// normalized input is kept only when `keep` is set.
    #[allow(clippy::type_complexity)]
    fn compute(
        &self,
        x: &Tensor,
        mode: Mode,
        keep: bool,
    ) -> Result<(Tensor, Option<BnCache>, Option<(Vec<f64>, Vec<f64>)>)> {
        let (batch, spatial) = self.dims(x)?;
        let c_n = self.features();
        let n = (batch * spatial) as f64;
        let data = x.data();
        let (mean, var, stats) = match mode {
            Mode::Train => {
                if batch < 2 {
                    return Err(config_err!("batchnorm in train mode needs a batch of at least 2"));
                }
                let (mean, var) = self.batch_stats(data, batch, spatial);
                let unbiased = var.iter().map(|v| v * n / (n - 1.0)).collect();
                (mean.clone(), var, Some((mean, unbiased)))
            }
            Mode::Eval => (self.running_mean.data().to_vec(), self.running_var.data().to_vec(), None),
        };
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let gamma = self.gamma.value.data();
        let beta = self.beta.value.data();
        let mut xhat = Vec::with_capacity(if keep { data.len() } else { 0 });
        let mut out = Vec::with_capacity(data.len());
        for (bc, chunk) in data.chunks_exact(spatial).enumerate() {
            let c = bc % c_n;
            let (m, is, g, b) = (mean[c], invstd[c], gamma[c], beta[c]);
            if keep {
                let start = xhat.len();
                xhat.extend(chunk.iter().map(|v| (v - m) * is));
                out.extend(xhat[start..].iter().map(|h| g * h + b));
            } else {
                out.extend(chunk.iter().map(|v| g * ((v - m) * is) + b));
            }
        }
        let cache = keep.then(|| BnCache { xhat, invstd, shape: x.shape().to_vec(), mode });
        Ok((Tensor { shape: x.shape().to_vec(), data: out }, cache, stats))
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (out, cache, stats) = self.compute(x, mode, true)?;
        if let Some((mean, unbiased)) = stats {
            let m = self.momentum;
            for (r, v) in self.running_mean.data_mut().iter_mut().zip(&mean) {
                *r = (1.0 - m) * *r + m * v;
            }
            for (r, v) in self.running_var.data_mut().iter_mut().zip(&unbiased) {
                *r = (1.0 - m) * *r + m * v;
            }
        }
        self.cache = cache;
        Ok(out)
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.compute(x, Mode::Eval, false)?.0)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let cache = self.cache.take().ok_or_else(|| missing_cache("batchnorm"))?;
        check_grad_shape(grad, &cache.shape, "batchnorm")?;
        let batch = cache.shape[0];
        let spatial: usize = cache.shape[2..].iter().product();
        let c_n = self.features();
        let n = (batch * spatial) as f64;
        let dy = grad.data();
        let gamma = self.gamma.value.data().to_vec();
        let mut dgamma = vec![0.0; c_n];
        let mut dbeta = vec![0.0; c_n];
        for (bc, (g, h)) in dy.chunks_exact(spatial).zip(cache.xhat.chunks_exact(spatial)).enumerate() {
            let c = bc % c_n;
            dgamma[c] += g.iter().zip(h).map(|(a, b)| a * b).sum::<f64>();
            dbeta[c] += g.iter().sum::<f64>();
        }
        let mut dx = Vec::with_capacity(dy.len());
        for (bc, (g, h)) in dy.chunks_exact(spatial).zip(cache.xhat.chunks_exact(spatial)).enumerate() {
            let c = bc % c_n;
            let scale = gamma[c] * cache.invstd[c];
            match cache.mode {
                Mode::Train => {
                    let (db, dg) = (dbeta[c], dgamma[c]);
                    dx.extend(g.iter().zip(h).map(|(d, xh)| scale / n * (n * d - db - xh * dg)));
                }
                Mode::Eval => dx.extend(g.iter().map(|d| scale * d)),
            }
        }
        self.gamma.accumulate(&dgamma);
        self.beta.accumulate(&dbeta);
        Ok(Tensor { shape: cache.shape, data: dx })
    }
}

// ---------------------------------------------------------------------------

/// Affine map `y = x·Wᵀ + b` over `[B, F_in]` inputs.
#[derive(Clone, Debug)]
pub struct Linear {
    /// `[out, in]`
    pub weight: ParamTensor,
    pub bias: ParamTensor,
    cache: Option<Tensor>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let w = kaiming_uniform(&[outputs, inputs], inputs, rng);
        Self::from_parts(name, w, Tensor::zeros(&[outputs])).expect("consistent shapes")
    }

    pub fn from_parts(name: &str, weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(config_err!(
                "linear layer needs weight [out, in] and bias [out], got {:?} and {:?}",
                weight.shape(),
                bias.shape()
            ));
        }
        Ok(Self {
            weight: ParamTensor::new(format!("{name}.weight"), ParamRole::Weight, weight),
            bias: ParamTensor::new(format!("{name}.bias"), ParamRole::Bias, bias),
            cache: None,
        })
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn config(&self) -> LayerConfig {
        LayerConfig::FullyConnected { inputs: self.inputs(), outputs: self.outputs() }
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        x.expect_rank(2, "fully-connected")?;
        let (batch, fin) = (x.shape()[0], x.shape()[1]);
        if fin != self.inputs() {
            return Err(config_err!(
                "fully-connected expects {} inputs, got {fin}",
                self.inputs()
            ));
        }
        let fout = self.outputs();
        let mut out = vec![0.0; batch * fout];
        for row in out.chunks_exact_mut(fout) {
            row.copy_from_slice(self.bias.value.data());
        }
        gemm(batch, fin, fout, x.data(), false, self.weight.value.data(), true, &mut out, true);
        Ok(Tensor { shape: vec![batch, fout], data: out })
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let out = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self.cache.take().ok_or_else(|| missing_cache("fully-connected"))?;
        let (batch, fin, fout) = (x.shape()[0], self.inputs(), self.outputs());
        check_grad_shape(grad, &[batch, fout], "fully-connected")?;
        let mut dw = vec![0.0; fout * fin];
        gemm(fout, batch, fin, grad.data(), true, x.data(), false, &mut dw, false);
        self.weight.accumulate(&dw);
        let mut db = vec![0.0; fout];
        for row in grad.data().chunks_exact(fout) {
            for (d, g) in db.iter_mut().zip(row) {
                *d += g;
            }
        }
        self.bias.accumulate(&db);
        let mut dx = vec![0.0; batch * fin];
        gemm(batch, fout, fin, grad.data(), false, self.weight.value.data(), false, &mut dx, false);
        Ok(Tensor { shape: vec![batch, fin], data: dx })
    }
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default)]
pub struct Relu {
    mask: Option<(Vec<bool>, Vec<usize>)>,
}

impl Relu {
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        Ok(Tensor { shape: x.shape().to_vec(), data })
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.mask = Some((x.data().iter().map(|&v| v > 0.0).collect(), x.shape().to_vec()));
        self.infer(x)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let (mask, shape) = self.mask.take().ok_or_else(|| missing_cache("relu"))?;
        check_grad_shape(grad, &shape, "relu")?;
        let data = grad.data().iter().zip(&mask).map(|(&g, &m)| if m { g } else { 0.0 }).collect();
        Ok(Tensor { shape, data })
    }
}

/// `f(x) = t_min + x` for `x >= 0`, `t_min + alpha·x` otherwise.
#[derive(Clone, Debug)]
pub struct ShiftedLeakyRelu {
    pub alpha: f64,
    pub t_min: f64,
    cache: Option<Tensor>,
}

impl ShiftedLeakyRelu {
    pub fn new(alpha: f64, t_min: f64) -> Result<Self> {
        LayerConfig::ShiftedLeakyRelu { alpha, t_min }.validate()?;
        Ok(Self { alpha, t_min, cache: None })
    }

    pub fn apply(&self, v: f64) -> f64 {
        if v >= 0.0 {
            self.t_min + v
        } else {
            self.t_min + self.alpha * v
        }
    }

    pub fn slope(&self, v: f64) -> f64 {
        if v >= 0.0 {
            1.0
        } else {
            self.alpha
        }
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let data = x.data().iter().map(|&v| self.apply(v)).collect();
        Ok(Tensor { shape: x.shape().to_vec(), data })
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.cache = Some(x.clone());
        self.infer(x)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self.cache.take().ok_or_else(|| missing_cache("shifted leaky relu"))?;
        check_grad_shape(grad, x.shape(), "shifted leaky relu")?;
        let data = grad.data().iter().zip(x.data()).map(|(&g, &v)| g * self.slope(v)).collect();
        Ok(Tensor { shape: x.shape().to_vec(), data })
    }
}

#[derive(Clone, Debug)]
pub struct Scale {
    pub factor: f64,
    shape: Option<Vec<usize>>,
}

impl Scale {
    pub fn new(factor: f64) -> Self {
        Self { factor, shape: None }
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let data = x.data().iter().map(|v| v * self.factor).collect();
        Ok(Tensor { shape: x.shape().to_vec(), data })
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.shape = Some(x.shape().to_vec());
        self.infer(x)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let shape = self.shape.take().ok_or_else(|| missing_cache("scale"))?;
        check_grad_shape(grad, &shape, "scale")?;
        self.infer(grad)
    }
}

/// `[B, ...] -> [B, prod(...)]`.
#[derive(Clone, Debug, Default)]
pub struct Flatten {
    shape: Option<Vec<usize>>,
}

impl Flatten {
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let b = x.shape()[0];
        x.clone().reshape(&[b, x.len() / b])
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.shape = Some(x.shape().to_vec());
        self.infer(x)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let shape = self.shape.take().ok_or_else(|| missing_cache("flatten"))?;
        grad.clone().reshape(&shape)
    }
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub enum Layer {
    Conv2d(Conv2d),
    MaxPool(MaxPool2d),
    BatchNorm(BatchNorm),
    Linear(Linear),
    Relu(Relu),
    ShiftedLeakyRelu(ShiftedLeakyRelu),
    Scale(Scale),
    Flatten(Flatten),
}

impl Layer {
    pub fn config(&self) -> LayerConfig {
        match self {
            Layer::Conv2d(l) => l.config(),
            Layer::MaxPool(l) => l.config(),
            Layer::BatchNorm(l) => l.config(),
            Layer::Linear(l) => l.config(),
            Layer::Relu(_) => LayerConfig::Relu,
            Layer::ShiftedLeakyRelu(l) => LayerConfig::ShiftedLeakyRelu { alpha: l.alpha, t_min: l.t_min },
            Layer::Scale(l) => LayerConfig::Scale { factor: l.factor },
            Layer::Flatten(_) => LayerConfig::Flatten,
        }
    }

    /// Forward pass that caches what `backward` needs.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match self {
            Layer::Conv2d(l) => l.forward(x),
            Layer::MaxPool(l) => l.forward(x),
            Layer::BatchNorm(l) => l.forward(x, mode),
            Layer::Linear(l) => l.forward(x),
            Layer::Relu(l) => l.forward(x),
            Layer::ShiftedLeakyRelu(l) => l.forward(x),
            Layer::Scale(l) => l.forward(x),
            Layer::Flatten(l) => l.forward(x),
        }
    }

    /// Eval-mode forward pass that touches no layer state.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv2d(l) => l.infer(x),
            Layer::MaxPool(l) => l.infer(x),
            Layer::BatchNorm(l) => l.infer(x),
            Layer::Linear(l) => l.infer(x),
            Layer::Relu(l) => l.infer(x),
            Layer::ShiftedLeakyRelu(l) => l.infer(x),
            Layer::Scale(l) => l.infer(x),
            Layer::Flatten(l) => l.infer(x),
        }
    }

    /// Backward pass that skips the input gradient where a layer can.
    pub fn backward_params(&mut self, grad: &Tensor) -> Result<()> {
        match self {
            Layer::Conv2d(l) => l.backward_params(grad),
            other => other.backward(grad).map(|_| ()),
        }
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv2d(l) => l.backward(grad),
            Layer::MaxPool(l) => l.backward(grad),
            Layer::BatchNorm(l) => l.backward(grad),
            Layer::Linear(l) => l.backward(grad),
            Layer::Relu(l) => l.backward(grad),
            Layer::ShiftedLeakyRelu(l) => l.backward(grad),
            Layer::Scale(l) => l.backward(grad),
            Layer::Flatten(l) => l.backward(grad),
        }
    }

    pub fn params(&self) -> Vec<&ParamTensor> {
        match self {
            Layer::Conv2d(l) => vec![&l.kernels, &l.bias],
            Layer::BatchNorm(l) => vec![&l.gamma, &l.beta],
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        match self {
            Layer::Conv2d(l) => vec![&mut l.kernels, &mut l.bias],
            Layer::BatchNorm(l) => vec![&mut l.gamma, &mut l.beta],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            _ => Vec::new(),
        }
    }

    /// Non-trainable state (batchnorm running statistics).
    pub fn buffers(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Layer::BatchNorm(l) => vec![("running_mean", &l.running_mean), ("running_var", &l.running_var)],
            _ => Vec::new(),
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            Layer::BatchNorm(l) => {
                vec![("running_mean", &mut l.running_mean), ("running_var", &mut l.running_var)]
            }
            _ => Vec::new(),
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, Layer::Conv2d(_))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut conv = Conv2d::from_parts("c", t(&[1, 1, 1, 1], &[1.0]), t(&[1], &[0.0])).unwrap();
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(conv.forward(&x).unwrap().data(), x.data());
    }

    #[test]
    fn conv_all_ones_3x3_with_zero_padding() {
        let conv = Conv2d::from_parts("c", Tensor::filled(&[1, 1, 3, 3], 1.0), t(&[1], &[0.0])).unwrap();
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(conv.infer(&x).unwrap().data(), &[10.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn conv_scalar_product_rule() {
        let (x, w) = (1.5, -0.75);
        let mut conv = Conv2d::from_parts("c", t(&[1, 1, 1, 1], &[w]), t(&[1], &[0.0])).unwrap();
        conv.forward(&t(&[1, 1, 1, 1], &[x])).unwrap();
        let dx = conv.backward(&t(&[1, 1, 1, 1], &[1.0])).unwrap();
        assert_eq!(dx.data(), &[w]);
        assert_eq!(conv.kernels.grad.data(), &[x]);
        assert_eq!(conv.bias.grad.data(), &[1.0]);
    }

    #[test]
    fn conv_zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv2d::new("c", 2, 3, 3, &mut rng).unwrap();
        let x = kaiming_uniform(&[2, 2, 4, 5], 1, &mut rng);
        conv.forward(&x).unwrap();
        let dx = conv.backward(&Tensor::zeros(&[2, 3, 4, 5])).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(conv.kernels.grad.data().iter().all(|&v| v == 0.0));
        assert!(conv.bias.grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_rejects_bad_shapes_and_even_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(Conv2d::new("c", 1, 1, 2, &mut rng), Err(Error::Config(_))));
        let conv = Conv2d::new("c", 2, 1, 3, &mut rng).unwrap();
        assert!(matches!(conv.infer(&Tensor::zeros(&[1, 3, 4, 4])), Err(Error::Config(_))));
    }

    #[test]
    fn backward_before_forward_is_usage_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut conv = Conv2d::new("c", 1, 1, 3, &mut rng).unwrap();
        assert!(matches!(conv.backward(&Tensor::zeros(&[1, 1, 2, 2])), Err(Error::Usage(_))));
        let mut bn = BatchNorm::new("bn", 1);
        assert!(matches!(bn.backward(&Tensor::zeros(&[2, 1])), Err(Error::Usage(_))));
    }

    #[test]
    fn maxpool_ceil_mode() {
        let p = MaxPool2d::new(1, 2).unwrap();
        assert_eq!(p.infer(&t(&[1, 1, 1, 3], &[1.0, 5.0, 2.0])).unwrap().data(), &[5.0, 2.0]);
        let p = MaxPool2d::new(2, 2).unwrap();
        let out = p.infer(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[4.0]);
        let out = p.infer(&Tensor::filled(&[2, 3, 5, 7], 0.25)).unwrap();
        assert_eq!(out.shape(), &[2, 3, 3, 4]);
        assert!(out.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn maxpool_window_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = kaiming_uniform(&[2, 2, 3, 5], 1, &mut rng);
        let p = MaxPool2d::new(1, 1).unwrap();
        assert_eq!(p.infer(&x).unwrap(), x);
    }

    #[test]
    fn batchnorm_constant_feature_gives_zeros() {
        let mut bn = BatchNorm::new("bn", 2);
        let out = bn.forward(&t(&[3, 2], &[4.0, -1.0, 4.0, -1.0, 4.0, -1.0]), Mode::Train).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batchnorm_unit_variance_pair() {
        let mut bn = BatchNorm::new("bn", 1);
        let out = bn.forward(&t(&[2, 1], &[-1.0, 1.0]), Mode::Train).unwrap();
        let expected = 1.0 / (1.0 + BatchNorm::EPS).sqrt();
        assert!((out.data()[0] + expected).abs() < 1e-15);
        assert!((out.data()[1] - expected).abs() < 1e-15);
        assert!((out.data()[1] - 1.0).abs() < 1e-5);
        // running statistics: mean 0, unbiased variance 2
        assert!((bn.running_var.data()[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn batchnorm_single_sample_train_is_rejected() {
        let mut bn = BatchNorm::new("bn", 3);
        assert!(matches!(bn.forward(&Tensor::zeros(&[1, 3]), Mode::Train), Err(Error::Config(_))));
        assert!(bn.forward(&Tensor::zeros(&[1, 3]), Mode::Eval).is_ok());
    }

    #[test]
    fn linear_examples() {
        let lin = Linear::from_parts("fc", t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), t(&[2], &[0.0, 0.0])).unwrap();
        let x = t(&[1, 2], &[0.3, -7.0]);
        assert_eq!(lin.infer(&x).unwrap().data(), x.data());
        let lin = Linear::from_parts("fc", t(&[1, 2], &[1.0, 1.0]), t(&[1], &[1.0])).unwrap();
        assert_eq!(lin.infer(&t(&[1, 2], &[2.0, 3.0])).unwrap().data(), &[6.0]);
        assert!(matches!(lin.infer(&t(&[1, 3], &[1.0, 2.0, 3.0])), Err(Error::Config(_))));
    }

    #[test]
    fn shifted_leaky_relu_values() {
        let f = ShiftedLeakyRelu::new(0.01, 17.0).unwrap();
        assert_eq!(f.apply(0.0), 17.0);
        assert_eq!(f.apply(100.0), 117.0);
        assert!((f.apply(-100.0) - 16.0).abs() < 1e-12);
        assert_eq!(f.slope(0.0), 1.0);
        assert_eq!(f.slope(-1e-9), 0.01);
        assert!(ShiftedLeakyRelu::new(1.0, 17.0).is_err());
        assert!(ShiftedLeakyRelu::new(0.01, -1.0).is_err());
    }

    #[test]
    fn layer_config_round_trips_through_json() {
        let cfgs = vec![
            LayerConfig::Conv2d { in_channels: 1, out_channels: 16, kernel: 3 },
            LayerConfig::Maxpool { window: [1, 2] },
            LayerConfig::ShiftedLeakyRelu { alpha: 0.01, t_min: 17.0 },
            LayerConfig::Relu,
        ];
        let s = serde_json::to_string(&cfgs).unwrap();
        assert!(s.contains("\"kind\":\"conv2d\""));
        let back: Vec<LayerConfig> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, cfgs);
    }
}
