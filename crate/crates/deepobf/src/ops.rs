//! Layer forward/backward kernels. Convolution runs through a patch-matrix
//! (im2col) expansion; the naive loop version lives in the test suite as an
//! independent oracle.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Convolution parameters: `weight` is `[out_channels, in_channels, kh, kw]`,
/// `bias` is `[out_channels]`. One stride and one zero-padding value apply to
/// both spatial dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    pub fn validate(&self) -> Result<()> {
        let (oc, ic, kh, kw) = self.weight.dims4()?;
        if oc < 1 || ic < 1 || kh < 1 || kw < 1 {
            return Err(Error::Shape(format!(
                "conv weight extents must all be >= 1, got [{oc},{ic},{kh},{kw}]"
            )));
        }
        if self.bias.shape() != [oc] {
            return Err(Error::Shape(format!(
                "conv bias extent {:?} does not match {} output channels",
                self.bias.shape(),
                oc
            )));
        }
        if self.stride < 1 {
            return Err(Error::Shape("conv stride must be >= 1".into()));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f32,
    pub momentum: f32,
}

impl BatchNormParams {
    pub fn identity(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::filled(vec![channels], 1.0),
            beta: Tensor::zeros(vec![channels]),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::filled(vec![channels], 1.0),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if self.beta.numel() != c || self.running_mean.numel() != c || self.running_var.numel() != c
        {
            return Err(Error::Shape("batchnorm parameter extents disagree".into()));
        }
        if self.eps <= 0.0 {
            return Err(Error::Shape("batchnorm epsilon must be > 0".into()));
        }
        if !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return Err(Error::Shape("batchnorm momentum must be in (0,1]".into()));
        }
        if self.running_var.data().iter().any(|v| *v < 0.0) {
            return Err(Error::Shape("running variance must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: Tensor, // [classes, features]
    pub bias: Tensor,   // [classes]
}

impl LinearParams {
    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let (o, _) = self.weight.dims2()?;
        if self.bias.shape() != [o] {
            return Err(Error::Shape(format!(
                "linear bias extent {:?} does not match {} rows",
                self.bias.shape(),
                o
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// small dense matmul kernels (row-major)
// ---------------------------------------------------------------------------

/// c[m,n] += a[m,k] * b[k,n]
pub(crate) fn matmul_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

/// c[m,p] += a[m,n] * b[p,n]^T  (rows of a dotted with rows of b)
pub(crate) fn matmul_abt_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, n: usize, p: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(c.len(), m * p);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..p {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = 0.0f32;
            for (av, bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            c[i * p + j] += s;
        }
    }
}

/// c[k,n] += a[m,k]^T * b[m,n]
pub(crate) fn matmul_atb_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for t in 0..m {
        let brow = &b[t * n..(t + 1) * n];
        for i in 0..k {
            let ati = a[t * k + i];
            if ati == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += ati * bv;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::Shape(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

#[derive(Debug)]
pub struct Conv2dCtx {
    pub x_dims: (usize, usize, usize, usize),
    pub out_hw: (usize, usize),
    /// Patch matrices, one `[ic*kh*kw, oh*ow]` block per batch item.
    cols: Vec<f32>,
    k: usize,
}

fn im2col(
    x: &[f32],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    padding: usize,
    (oh, ow): (usize, usize),
    cols: &mut [f32],
) {
    let n = oh * ow;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * n;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - padding as isize;
                    let dst = &mut cols[row + oi * ow..row + (oi + 1) * ow];
                    if ii < 0 || ii >= h as isize {
                        dst.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src_row = &plane[ii as usize * w..(ii as usize + 1) * w];
                    for (oj, d) in dst.iter_mut().enumerate() {
                        let jj = (oj * stride + kj) as isize - padding as isize;
                        *d = if jj < 0 || jj >= w as isize {
                            0.0
                        } else {
                            src_row[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(
    cols: &[f32],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    padding: usize,
    (oh, ow): (usize, usize),
    x: &mut [f32],
) {
    let n = oh * ow;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * n;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - padding as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let src = &cols[row + oi * ow..row + (oi + 1) * ow];
                    for (oj, s) in src.iter().enumerate() {
                        let jj = (oj * stride + kj) as isize - padding as isize;
                        if jj >= 0 && jj < w as isize {
                            plane[ii as usize * w + jj as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

/// Windowed dot product over all input channels plus bias (stride/padding as
/// configured).
pub fn conv2d_forward(x: &Tensor, p: &ConvParams) -> Result<(Tensor, Conv2dCtx)> {
    p.validate()?;
    let (b, c, h, w) = x.dims4()?;
    let (oc, ic, kh, kw) = p.weight.dims4()?;
    if c != ic {
        return Err(Error::Shape(format!(
            "conv expects {ic} input channels, got {c}"
        )));
    }
    let oh = conv_out_extent(h, kh, p.stride, p.padding)?;
    let ow = conv_out_extent(w, kw, p.stride, p.padding)?;
    let k = ic * kh * kw;
    let n = oh * ow;
    let mut cols = vec![0.0f32; b * k * n];
    let mut out = vec![0.0f32; b * oc * n];
    for bi in 0..b {
        let xb = &x.data()[bi * c * h * w..(bi + 1) * c * h * w];
        let cb = &mut cols[bi * k * n..(bi + 1) * k * n];
        im2col(xb, (c, h, w), (kh, kw), p.stride, p.padding, (oh, ow), cb);
        let ob = &mut out[bi * oc * n..(bi + 1) * oc * n];
        matmul_acc(p.weight.data(), cb, ob, oc, k, n);
        for (o, orow) in ob.chunks_mut(n).enumerate() {
            let bias = p.bias.data()[o];
            orow.iter_mut().for_each(|v| *v += bias);
        }
    }
    Ok((
        Tensor::new(vec![b, oc, oh, ow], out)?,
        Conv2dCtx {
            x_dims: (b, c, h, w),
            out_hw: (oh, ow),
            cols,
            k,
        },
    ))
}

pub struct ConvGrads {
    pub dx: Tensor,
    /// Same extents as `weight` / `bias`; `None` when parameter gradients
    /// were not requested (frozen node).
    pub dweight: Option<Vec<f32>>,
    pub dbias: Option<Vec<f32>>,
}

pub fn conv2d_backward(
    p: &ConvParams,
    ctx: &Conv2dCtx,
    dy: &Tensor,
    need_param_grads: bool,
) -> Result<ConvGrads> {
    let (b, c, h, w) = ctx.x_dims;
    let (oc, _, kh, kw) = p.weight.dims4()?;
    let (oh, ow) = ctx.out_hw;
    let n = oh * ow;
    debug_assert_eq!(dy.shape(), &[b, oc, oh, ow]);
    let k = ctx.k;
    let mut dx = vec![0.0f32; b * c * h * w];
    let mut dw = if need_param_grads {
        Some(vec![0.0f32; p.weight.numel()])
    } else {
        None
    };
    let mut db = if need_param_grads {
        Some(vec![0.0f32; oc])
    } else {
        None
    };
    let mut dcols = vec![0.0f32; k * n];
    for bi in 0..b {
        let dyb = &dy.data()[bi * oc * n..(bi + 1) * oc * n];
        let cb = &ctx.cols[bi * k * n..(bi + 1) * k * n];
        if let (Some(dw), Some(db)) = (dw.as_mut(), db.as_mut()) {
            matmul_abt_acc(dyb, cb, dw, oc, n, k);
            for (o, dyrow) in dyb.chunks(n).enumerate() {
                db[o] += dyrow.iter().sum::<f32>();
            }
        }
        dcols.iter_mut().for_each(|v| *v = 0.0);
        matmul_atb_acc(p.weight.data(), dyb, &mut dcols, oc, k, n);
        let dxb = &mut dx[bi * c * h * w..(bi + 1) * c * h * w];
        col2im(
            &dcols,
            (c, h, w),
            (kh, kw),
            p.stride,
            p.padding,
            (oh, ow),
            dxb,
        );
    }
    Ok(ConvGrads {
        dx: Tensor::new(vec![b, c, h, w], dx)?,
        dweight: dw,
        dbias: db,
    })
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub enum BnCtx {
    Train { x_hat: Vec<f32>, inv_std: Vec<f32> },
    Infer { scale: Vec<f32> },
}

pub struct BnForward {
    pub y: Tensor,
    pub ctx: BnCtx,
    /// New running statistics `(mean, var)` when run in training mode. The
    /// caller decides whether to apply them (frozen nodes do not).
    pub running_update: Option<(Vec<f32>, Vec<f32>)>,
}

/// Training mode normalizes by batch statistics (biased variance) and
/// produces updated running statistics; inference mode normalizes by the
/// stored running statistics.
pub fn batchnorm_forward(x: &Tensor, p: &BatchNormParams, training: bool) -> Result<BnForward> {
    p.validate()?;
    let (b, c, h, w) = x.dims4()?;
    if c != p.channels() {
        return Err(Error::Shape(format!(
            "batchnorm expects {} channels, got {c}",
            p.channels()
        )));
    }
    let plane = h * w;
    let n = b * plane;
    let mut out = vec![0.0f32; x.numel()];
    if training {
        if n == 0 {
            return Err(Error::Shape("batchnorm on empty batch".into()));
        }
        let mut x_hat = vec![0.0f32; x.numel()];
        let mut inv_std = vec![0.0f32; c];
        let mut new_mean = p.running_mean.data().to_vec();
        let mut new_var = p.running_var.data().to_vec();
        for ci in 0..c {
            let mut sum = 0.0f64;
            for bi in 0..b {
                let base = (bi * c + ci) * plane;
                for v in &x.data()[base..base + plane] {
                    sum += *v as f64;
                }
            }
            let mean = (sum / n as f64) as f32;
            let mut var_sum = 0.0f64;
            for bi in 0..b {
                let base = (bi * c + ci) * plane;
                for v in &x.data()[base..base + plane] {
                    let d = (*v - mean) as f64;
                    var_sum += d * d;
                }
            }
            let var = (var_sum / n as f64) as f32;
            let istd = 1.0 / (var + p.eps).sqrt();
            inv_std[ci] = istd;
            let g = p.gamma.data()[ci];
            let bta = p.beta.data()[ci];
            for bi in 0..b {
                let base = (bi * c + ci) * plane;
                for i in base..base + plane {
                    let xh = (x.data()[i] - mean) * istd;
                    x_hat[i] = xh;
                    out[i] = g * xh + bta;
                }
            }
            let m = p.momentum;
            new_mean[ci] = (1.0 - m) * new_mean[ci] + m * mean;
            new_var[ci] = (1.0 - m) * new_var[ci] + m * var;
        }
        Ok(BnForward {
            y: Tensor::new(x.shape().to_vec(), out)?,
            ctx: BnCtx::Train { x_hat, inv_std },
            running_update: Some((new_mean, new_var)),
        })
    } else {
        let mut scale = vec![0.0f32; c];
        for ci in 0..c {
            let istd = 1.0 / (p.running_var.data()[ci] + p.eps).sqrt();
            let g = p.gamma.data()[ci];
            scale[ci] = g * istd;
            let shift = p.beta.data()[ci] - g * p.running_mean.data()[ci] * istd;
            for bi in 0..b {
                let base = (bi * c + ci) * plane;
                for i in base..base + plane {
                    out[i] = scale[ci] * x.data()[i] + shift;
                }
            }
        }
        Ok(BnForward {
            y: Tensor::new(x.shape().to_vec(), out)?,
            ctx: BnCtx::Infer { scale },
            running_update: None,
        })
    }
}

/// Apply a running-statistics update produced by a training-mode forward.
pub fn batchnorm_apply_update(p: &mut BatchNormParams, update: (Vec<f32>, Vec<f32>)) {
    p.running_mean.data_mut().copy_from_slice(&update.0);
    p.running_var.data_mut().copy_from_slice(&update.1);
}

pub struct BnGrads {
    pub dx: Tensor,
    pub dgamma: Option<Vec<f32>>,
    pub dbeta: Option<Vec<f32>>,
}

pub fn batchnorm_backward(
    p: &BatchNormParams,
    ctx: &BnCtx,
    dy: &Tensor,
    need_param_grads: bool,
) -> Result<BnGrads> {
    let (b, c, h, w) = dy.dims4()?;
    let plane = h * w;
    let n = (b * plane) as f32;
    let mut dx = vec![0.0f32; dy.numel()];
    match ctx {
        BnCtx::Train { x_hat, inv_std } => {
            let mut dgamma = vec![0.0f32; c];
            let mut dbeta = vec![0.0f32; c];
            for ci in 0..c {
                let mut sum_dy = 0.0f64;
                let mut sum_dy_xhat = 0.0f64;
                for bi in 0..b {
                    let base = (bi * c + ci) * plane;
                    for i in base..base + plane {
                        sum_dy += dy.data()[i] as f64;
                        sum_dy_xhat += (dy.data()[i] * x_hat[i]) as f64;
                    }
                }
                dgamma[ci] = sum_dy_xhat as f32;
                dbeta[ci] = sum_dy as f32;
                let g = p.gamma.data()[ci];
                let istd = inv_std[ci];
                let mean_dy = sum_dy as f32 / n;
                let mean_dy_xhat = sum_dy_xhat as f32 / n;
                for bi in 0..b {
                    let base = (bi * c + ci) * plane;
                    for i in base..base + plane {
                        dx[i] = g * istd * (dy.data()[i] - mean_dy - x_hat[i] * mean_dy_xhat);
                    }
                }
            }
            Ok(BnGrads {
                dx: Tensor::new(dy.shape().to_vec(), dx)?,
                dgamma: need_param_grads.then_some(dgamma),
                dbeta: need_param_grads.then_some(dbeta),
            })
        }
        BnCtx::Infer { scale } => {
            // Inference-mode normalization is a per-channel affine map;
            // parameter gradients are only produced in training mode.
            for ci in 0..c {
                let s = scale[ci];
                for bi in 0..b {
                    let base = (bi * c + ci) * plane;
                    for i in base..base + plane {
                        dx[i] = s * dy.data()[i];
                    }
                }
            }
            Ok(BnGrads {
                dx: Tensor::new(dy.shape().to_vec(), dx)?,
                dgamma: None,
                dbeta: None,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// activations and pooling
// ---------------------------------------------------------------------------

pub fn relu_forward(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|v| v.max(0.0)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same extent")
}

pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(yv, dv)| if *yv > 0.0 { *dv } else { 0.0 })
        .collect();
    Tensor::new(dy.shape().to_vec(), data).expect("same extent")
}

#[derive(Debug)]
pub struct MaxPoolCtx {
    pub x_dims: (usize, usize, usize, usize),
    /// Flat input index of the window maximum per output element. Ties break
    /// to the first maximal index in row-major scan order.
    pub argmax: Vec<u32>,
}

pub fn maxpool_forward(x: &Tensor, k: usize, stride: usize) -> Result<(Tensor, MaxPoolCtx)> {
    let (b, c, h, w) = x.dims4()?;
    let oh = conv_out_extent(h, k, stride, 0)?;
    let ow = conv_out_extent(w, k, stride, 0)?;
    let mut out = vec![0.0f32; b * c * oh * ow];
    let mut argmax = vec![0u32; b * c * oh * ow];
    let mut oidx = 0;
    for bi in 0..b {
        for ci in 0..c {
            let plane = &x.data()[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ki in 0..k {
                        for kj in 0..k {
                            let idx = (oi * stride + ki) * w + (oj * stride + kj);
                            if plane[idx] > best {
                                best = plane[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[oidx] = best;
                    argmax[oidx] = ((bi * c + ci) * h * w + best_idx) as u32;
                    oidx += 1;
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![b, c, oh, ow], out)?,
        MaxPoolCtx {
            x_dims: (b, c, h, w),
            argmax,
        },
    ))
}

pub fn maxpool_backward(ctx: &MaxPoolCtx, dy: &Tensor) -> Tensor {
    let (b, c, h, w) = ctx.x_dims;
    let mut dx = vec![0.0f32; b * c * h * w];
    for (i, &src) in ctx.argmax.iter().enumerate() {
        dx[src as usize] += dy.data()[i];
    }
    Tensor::new(vec![b, c, h, w], dx).expect("extent")
}

pub fn avgpool_forward(x: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let oh = conv_out_extent(h, k, stride, 0)?;
    let ow = conv_out_extent(w, k, stride, 0)?;
    let inv = 1.0 / (k * k) as f32;
    let mut out = vec![0.0f32; b * c * oh * ow];
    let mut oidx = 0;
    for bi in 0..b {
        for ci in 0..c {
            let plane = &x.data()[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut s = 0.0f32;
                    for ki in 0..k {
                        for kj in 0..k {
                            s += plane[(oi * stride + ki) * w + (oj * stride + kj)];
                        }
                    }
                    out[oidx] = s * inv;
                    oidx += 1;
                }
            }
        }
    }
    Tensor::new(vec![b, c, oh, ow], out)
}

pub fn avgpool_backward(
    x_dims: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    dy: &Tensor,
) -> Tensor {
    let (b, c, h, w) = x_dims;
    let (_, _, oh, ow) = dy.dims4().expect("4-D");
    let inv = 1.0 / (k * k) as f32;
    let mut dx = vec![0.0f32; b * c * h * w];
    let mut oidx = 0;
    for bi in 0..b {
        for ci in 0..c {
            let plane_base = (bi * c + ci) * h * w;
            for oi in 0..oh {
                for oj in 0..ow {
                    let g = dy.data()[oidx] * inv;
                    for ki in 0..k {
                        for kj in 0..k {
                            dx[plane_base + (oi * stride + ki) * w + (oj * stride + kj)] += g;
                        }
                    }
                    oidx += 1;
                }
            }
        }
    }
    Tensor::new(vec![b, c, h, w], dx).expect("extent")
}

pub fn global_avgpool_forward(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let plane = h * w;
    let inv = 1.0 / plane as f32;
    let mut out = vec![0.0f32; b * c];
    for (i, o) in out.iter_mut().enumerate() {
        let base = i * plane;
        let mut s = 0.0f64;
        for v in &x.data()[base..base + plane] {
            s += *v as f64;
        }
        *o = s as f32 * inv;
    }
    Tensor::new(vec![b, c, 1, 1], out)
}

pub fn global_avgpool_backward(x_dims: (usize, usize, usize, usize), dy: &Tensor) -> Tensor {
    let (b, c, h, w) = x_dims;
    let plane = h * w;
    let inv = 1.0 / plane as f32;
    let mut dx = vec![0.0f32; b * c * plane];
    for (i, &g) in dy.data().iter().enumerate() {
        let base = i * plane;
        dx[base..base + plane].iter_mut().for_each(|v| *v = g * inv);
    }
    Tensor::new(vec![b, c, h, w], dx).expect("extent")
}

// ---------------------------------------------------------------------------
// merge ops
// ---------------------------------------------------------------------------

/// Concatenate along the channel dimension; batch and spatial extents must
/// agree. Output channel count is the sum of input channel counts.
pub fn concat_forward(xs: &[&Tensor]) -> Result<Tensor> {
    if xs.is_empty() {
        return Err(Error::Shape("concat of zero tensors".into()));
    }
    let (b, _, h, w) = xs[0].dims4()?;
    let mut c_total = 0;
    for x in xs {
        let (bx, cx, hx, wx) = x.dims4()?;
        if (bx, hx, wx) != (b, h, w) {
            return Err(Error::Shape(format!(
                "concat extent mismatch: [{b},_,{h},{w}] vs [{bx},_,{hx},{wx}]"
            )));
        }
        c_total += cx;
    }
    let plane = h * w;
    let mut out = vec![0.0f32; b * c_total * plane];
    for bi in 0..b {
        let mut co = 0;
        for x in xs {
            let cx = x.shape()[1];
            let src = &x.data()[bi * cx * plane..(bi + 1) * cx * plane];
            let dst = &mut out[(bi * c_total + co) * plane..(bi * c_total + co + cx) * plane];
            dst.copy_from_slice(src);
            co += cx;
        }
    }
    Tensor::new(vec![b, c_total, h, w], out)
}

/// Split a concat gradient back into per-input gradients.
pub fn concat_backward(dy: &Tensor, channels: &[usize]) -> Result<Vec<Tensor>> {
    let (b, c_total, h, w) = dy.dims4()?;
    debug_assert_eq!(channels.iter().sum::<usize>(), c_total);
    let plane = h * w;
    let mut grads = Vec::with_capacity(channels.len());
    let mut co = 0;
    for &cx in channels {
        let mut g = vec![0.0f32; b * cx * plane];
        for bi in 0..b {
            let src = &dy.data()[(bi * c_total + co) * plane..(bi * c_total + co + cx) * plane];
            g[bi * cx * plane..(bi + 1) * cx * plane].copy_from_slice(src);
        }
        grads.push(Tensor::new(vec![b, cx, h, w], g)?);
        co += cx;
    }
    Ok(grads)
}

/// Elementwise sum; all extents must be identical.
pub fn add_forward(xs: &[&Tensor]) -> Result<Tensor> {
    if xs.is_empty() {
        return Err(Error::Shape("add of zero tensors".into()));
    }
    let shape = xs[0].shape().to_vec();
    for x in &xs[1..] {
        if x.shape() != shape {
            return Err(Error::Shape(format!(
                "add extent mismatch: {:?} vs {:?}",
                shape,
                x.shape()
            )));
        }
    }
    let mut out = xs[0].data().to_vec();
    for x in &xs[1..] {
        for (o, v) in out.iter_mut().zip(x.data()) {
            *o += v;
        }
    }
    Tensor::new(shape, out)
}

// ---------------------------------------------------------------------------
// flatten / linear
// ---------------------------------------------------------------------------

pub fn flatten_forward(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Tensor::new(vec![b, c * h * w], x.data().to_vec())
}

pub fn flatten_backward(x_dims: (usize, usize, usize, usize), dy: &Tensor) -> Tensor {
    let (b, c, h, w) = x_dims;
    Tensor::new(vec![b, c, h, w], dy.data().to_vec()).expect("extent")
}

/// Affine map `y = x W^T + bias`.
pub fn linear_forward(x: &Tensor, p: &LinearParams) -> Result<Tensor> {
    p.validate()?;
    let (b, f) = x.dims2()?;
    let (o, fin) = p.weight.dims2()?;
    if f != fin {
        return Err(Error::Shape(format!(
            "linear expects {fin} input features, got {f}"
        )));
    }
    let mut out = vec![0.0f32; b * o];
    matmul_abt_acc(x.data(), p.weight.data(), &mut out, b, f, o);
    for row in out.chunks_mut(o) {
        for (v, bias) in row.iter_mut().zip(p.bias.data()) {
            *v += bias;
        }
    }
    Tensor::new(vec![b, o], out)
}

pub struct LinearGrads {
    pub dx: Tensor,
    pub dweight: Option<Vec<f32>>,
    pub dbias: Option<Vec<f32>>,
}

pub fn linear_backward(
    x: &Tensor,
    p: &LinearParams,
    dy: &Tensor,
    need_param_grads: bool,
) -> Result<LinearGrads> {
    let (b, f) = x.dims2()?;
    let (o, _) = p.weight.dims2()?;
    debug_assert_eq!(dy.shape(), &[b, o]);
    let mut dx = vec![0.0f32; b * f];
    matmul_acc(dy.data(), p.weight.data(), &mut dx, b, o, f);
    let (dw, db) = if need_param_grads {
        let mut dw = vec![0.0f32; o * f];
        matmul_atb_acc(dy.data(), x.data(), &mut dw, b, o, f);
        let mut db = vec![0.0f32; o];
        for row in dy.data().chunks(o) {
            for (d, v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
        (Some(dw), Some(db))
    } else {
        (None, None)
    };
    Ok(LinearGrads {
        dx: Tensor::new(vec![b, f], dx)?,
        dweight: dw,
        dbias: db,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t4(b: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Tensor {
        Tensor::new(vec![b, c, h, w], data).unwrap()
    }

    #[test]
    fn conv_all_ones_sums_window() {
        let x = t4(1, 1, 3, 3, vec![1.0; 9]);
        let p = ConvParams {
            weight: t4(1, 1, 3, 3, vec![1.0; 9]),
            bias: Tensor::zeros(vec![1]),
            stride: 1,
            padding: 0,
        };
        let (y, _) = conv2d_forward(&x, &p).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], 9.0);
    }

    #[test]
    fn conv_single_pixel_is_affine() {
        // One pixel, one kernel weight: output is v*k + beta.
        let v = 2.5f32;
        let k = -1.25f32;
        let beta = 0.75f32;
        let x = t4(1, 1, 1, 1, vec![v]);
        let p = ConvParams {
            weight: t4(1, 1, 1, 1, vec![k]),
            bias: Tensor::new(vec![1], vec![beta]).unwrap(),
            stride: 1,
            padding: 0,
        };
        let (y, _) = conv2d_forward(&x, &p).unwrap();
        assert_eq!(y.data()[0], v * k + beta);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = t4(1, 2, 4, 4, vec![0.0; 32]);
        let p = ConvParams {
            weight: t4(1, 3, 3, 3, vec![0.0; 27]),
            bias: Tensor::zeros(vec![1]),
            stride: 1,
            padding: 0,
        };
        let err = conv2d_forward(&x, &p).unwrap_err();
        assert!(err.to_string().contains("input channels"));
    }

    #[test]
    fn conv_rejects_undersized_output() {
        let x = t4(1, 1, 2, 2, vec![0.0; 4]);
        let p = ConvParams {
            weight: t4(1, 1, 3, 3, vec![0.0; 9]),
            bias: Tensor::zeros(vec![1]),
            stride: 1,
            padding: 0,
        };
        assert!(conv2d_forward(&x, &p).is_err());
    }

    #[test]
    fn batchnorm_identity_in_inference() {
        let x = t4(1, 2, 2, 2, (0..8).map(|v| v as f32).collect());
        let p = BatchNormParams::identity(2);
        let out = batchnorm_forward(&x, &p, false).unwrap();
        for (a, b) in x.data().iter().zip(out.y.data()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
        assert!(out.running_update.is_none());
    }

    #[test]
    fn batchnorm_constant_channel_normalizes_to_zero() {
        let x = t4(2, 1, 2, 2, vec![3.0; 8]);
        let p = BatchNormParams::identity(1);
        let out = batchnorm_forward(&x, &p, true).unwrap();
        assert!(out.y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn batchnorm_two_value_batch() {
        // batch {0, 2}: mean 1, biased variance 1, outputs +-1/sqrt(1+eps)
        let x = t4(2, 1, 1, 1, vec![0.0, 2.0]);
        let mut p = BatchNormParams::identity(1);
        let out = batchnorm_forward(&x, &p, true).unwrap();
        let expect = 1.0 / (1.0f32 + 1e-5).sqrt();
        assert!((out.y.data()[0] + expect).abs() < 1e-6);
        assert!((out.y.data()[1] - expect).abs() < 1e-6);
        // running stats move toward batch stats with momentum 0.1
        batchnorm_apply_update(&mut p, out.running_update.unwrap());
        assert!((p.running_mean.data()[0] - 0.1).abs() < 1e-6);
        assert!((p.running_var.data()[0] - (0.9 + 0.1)).abs() < 1e-6);
    }

    #[test]
    fn batchnorm_rejects_empty_batch() {
        let x = Tensor::zeros(vec![0, 1, 2, 2]);
        let p = BatchNormParams::identity(1);
        assert!(batchnorm_forward(&x, &p, true).is_err());
    }

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::new(vec![1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = relu_forward(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn maxpool_takes_window_max() {
        let x = t4(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let (y, _) = maxpool_forward(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn maxpool_ties_route_to_first_index() {
        let x = t4(1, 1, 2, 2, vec![5.0, 5.0, 5.0, 5.0]);
        let (_, ctx) = maxpool_forward(&x, 2, 2).unwrap();
        assert_eq!(ctx.argmax, vec![0]);
    }

    #[test]
    fn pool_rejects_oversized_window() {
        let x = t4(1, 1, 2, 2, vec![0.0; 4]);
        assert!(maxpool_forward(&x, 3, 1).is_err());
        assert!(avgpool_forward(&x, 3, 1).is_err());
    }

    #[test]
    fn avgpool_takes_window_mean() {
        let x = t4(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let y = avgpool_forward(&x, 2, 2).unwrap();
        assert_eq!(y.data()[0], 2.5);
    }

    #[test]
    fn concat_sums_channels() {
        let a = t4(1, 2, 2, 2, vec![1.0; 8]);
        let b = t4(1, 3, 2, 2, vec![2.0; 12]);
        let y = concat_forward(&[&a, &b]).unwrap();
        assert_eq!(y.shape(), &[1, 5, 2, 2]);
        assert_eq!(&y.data()[..8], &[1.0; 8]);
        assert_eq!(&y.data()[8..], &[2.0; 12]);
    }

    #[test]
    fn concat_of_one_tensor_is_identity() {
        let a = t4(2, 1, 2, 2, (0..8).map(|v| v as f32).collect());
        let y = concat_forward(&[&a]).unwrap();
        assert!(y.bit_eq(&a));
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = t4(1, 1, 2, 2, vec![0.0; 4]);
        let b = t4(1, 1, 3, 3, vec![0.0; 9]);
        assert!(concat_forward(&[&a, &b]).is_err());
    }

    #[test]
    fn add_zero_is_identity() {
        let a = t4(1, 1, 2, 2, vec![1.0, -2.0, 3.0, 4.0]);
        let z = Tensor::zeros(vec![1, 1, 2, 2]);
        let y = add_forward(&[&a, &z]).unwrap();
        assert!(y.bit_eq(&a));
    }

    #[test]
    fn linear_identity_weights() {
        let x = Tensor::new(vec![1, 2], vec![3.0, -1.0]).unwrap();
        let p = LinearParams {
            weight: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            bias: Tensor::zeros(vec![2]),
        };
        let y = linear_forward(&x, &p).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn linear_hand_case() {
        // x=[1,2], W=[[1,1],[0,1]], bias=[0,1] -> [3,3]
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let p = LinearParams {
            weight: Tensor::new(vec![2, 2], vec![1.0, 1.0, 0.0, 1.0]).unwrap(),
            bias: Tensor::new(vec![2], vec![0.0, 1.0]).unwrap(),
        };
        let y = linear_forward(&x, &p).unwrap();
        assert_eq!(y.data(), &[3.0, 3.0]);
    }

    #[test]
    fn linear_single_feature_single_class() {
        // literal one-term affine form: x*w + beta
        let x = Tensor::new(vec![1, 1], vec![1.5]).unwrap();
        let p = LinearParams {
            weight: Tensor::new(vec![1, 1], vec![-2.0]).unwrap(),
            bias: Tensor::new(vec![1], vec![0.25]).unwrap(),
        };
        let y = linear_forward(&x, &p).unwrap();
        assert_eq!(y.data()[0], 1.5 * -2.0 + 0.25);
    }

    #[test]
    fn linear_rejects_feature_mismatch() {
        let x = Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap();
        let p = LinearParams {
            weight: Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap(),
            bias: Tensor::zeros(vec![2]),
        };
        assert!(linear_forward(&x, &p).is_err());
    }
}
