//! Dense layer kernels: forward and exact backward passes.
//!
//! Convolution runs as im2col plus a small saxpy GEMM; everything is
//! plain f32 on flat NCHW buffers. Padding is fixed at
//! `dilation * (kernel - 1) / 2`, which keeps spatial size for stride 1.

use serde::{Deserialize, Serialize};

use crate::error::{EmberError, Result};
use crate::tensor::Shape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.in_ch % self.groups != 0 || self.out_ch % self.groups != 0 {
            return Err(EmberError::InvalidGroups(format!(
                "in {} out {} groups {}",
                self.in_ch, self.out_ch, self.groups
            )));
        }
        if self.kernel == 0 || self.stride == 0 || self.dilation == 0 {
            return Err(EmberError::InvalidConfig(
                "kernel, stride and dilation must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    /// Weight element count: out_ch x (in_ch / groups) x k x k.
    pub fn weight_len(&self) -> usize {
        self.out_ch * (self.in_ch / self.groups) * self.kernel * self.kernel
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(
            self.out_ch,
            self.in_ch / self.groups,
            self.kernel,
            self.kernel,
        )
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.padding();
        let span = self.dilation * (self.kernel - 1) + 1;
        let oh = (h + 2 * p - span) / self.stride + 1;
        let ow = (w + 2 * p - span) / self.stride + 1;
        (oh, ow)
    }

    pub fn out_shape(&self, input: Shape) -> Shape {
        let (oh, ow) = self.out_hw(input.h, input.w);
        Shape::new(input.n, self.out_ch, oh, ow)
    }
}

/// Unpacks one (sample, group) into the column matrix:
/// rows = (in_ch/groups) * k * k, cols = out_h * out_w.
fn im2col(
    input: &[f32],
    ishape: Shape,
    spec: &ConvSpec,
    n: usize,
    g: usize,
    col: &mut [f32],
) {
    let cg = spec.in_ch / spec.groups;
    let k = spec.kernel;
    let pad = spec.padding() as isize;
    let (oh, ow) = spec.out_hw(ishape.h, ishape.w);
    col.fill(0.0);
    for c_local in 0..cg {
        let c = g * cg + c_local;
        for kh in 0..k {
            for kw in 0..k {
                let row = (c_local * k + kh) * k + kw;
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * spec.stride + kh * spec.dilation) as isize - pad;
                    if iy < 0 || iy >= ishape.h as isize {
                        continue;
                    }
                    let src_base = ishape.at(n, c, iy as usize, 0);
                    for ox in 0..ow {
                        let ix = (ox * spec.stride + kw * spec.dilation) as isize - pad;
                        if ix < 0 || ix >= ishape.w as isize {
                            continue;
                        }
                        dst[oy * ow + ox] = input[src_base + ix as usize];
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back onto the (sample, group) slice of
/// `grad_input`: the exact transpose of `im2col`.
fn col2im_add(
    col: &[f32],
    gshape: Shape,
    spec: &ConvSpec,
    n: usize,
    g: usize,
    grad_input: &mut [f32],
) {
    let cg = spec.in_ch / spec.groups;
    let k = spec.kernel;
    let pad = spec.padding() as isize;
    let (oh, ow) = spec.out_hw(gshape.h, gshape.w);
    for c_local in 0..cg {
        let c = g * cg + c_local;
        for kh in 0..k {
            for kw in 0..k {
                let row = (c_local * k + kh) * k + kw;
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * spec.stride + kh * spec.dilation) as isize - pad;
                    if iy < 0 || iy >= gshape.h as isize {
                        continue;
                    }
                    let dst_base = gshape.at(n, c, iy as usize, 0);
                    for ox in 0..ow {
                        let ix = (ox * spec.stride + kw * spec.dilation) as isize - pad;
                        if ix < 0 || ix >= gshape.w as isize {
                            continue;
                        }
                        grad_input[dst_base + ix as usize] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(
    input: &[f32],
    ishape: Shape,
    weights: &[f32],
    bias: Option<&[f32]>,
    spec: &ConvSpec,
) -> Result<(Vec<f32>, Shape)> {
    spec.validate()?;
    if ishape.c != spec.in_ch {
        return Err(EmberError::ShapeMismatch(format!(
            "conv expects {} input channels, got {}",
            spec.in_ch, ishape.c
        )));
    }
    if weights.len() != spec.weight_len() {
        return Err(EmberError::ShapeMismatch(format!(
            "conv weight length {} (expected {})",
            weights.len(),
            spec.weight_len()
        )));
    }
    if let Some(b) = bias {
        if b.len() != spec.out_ch {
            return Err(EmberError::ShapeMismatch(format!(
                "conv bias length {} (expected {})",
                b.len(),
                spec.out_ch
            )));
        }
    }

    let oshape = spec.out_shape(ishape);
    let (oh, ow) = (oshape.h, oshape.w);
    let pix = oh * ow;
    let cg = spec.in_ch / spec.groups;
    let og = spec.out_ch / spec.groups;
    let rows = cg * spec.kernel * spec.kernel;

    let mut out = vec![0.0f32; oshape.len()];
    let mut col = vec![0.0f32; rows * pix];

    for n in 0..ishape.n {
        for g in 0..spec.groups {
            im2col(input, ishape, spec, n, g, &mut col);
            for oc_local in 0..og {
                let oc = g * og + oc_local;
                let wrow = &weights[oc * rows..(oc + 1) * rows];
                let dst = &mut out[oshape.at(n, oc, 0, 0)..oshape.at(n, oc, 0, 0) + pix];
                if let Some(b) = bias {
                    dst.fill(b[oc]);
                }
                for (r, &a) in wrow.iter().enumerate() {
                    if a == 0.0 {
                        continue;
                    }
                    let src = &col[r * pix..(r + 1) * pix];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += a * s;
                    }
                }
            }
        }
    }
    Ok((out, oshape))
}

pub struct ConvGrads {
    pub input: Vec<f32>,
    pub weights: Vec<f32>,
    pub bias: Option<Vec<f32>>,
}

pub fn conv2d_backward(
    grad_out: &[f32],
    input: &[f32],
    ishape: Shape,
    weights: &[f32],
    spec: &ConvSpec,
) -> Result<ConvGrads> {
    spec.validate()?;
    let oshape = spec.out_shape(ishape);
    if grad_out.len() != oshape.len() {
        return Err(EmberError::ShapeMismatch(format!(
            "grad length {} for output shape {oshape}",
            grad_out.len()
        )));
    }
    let pix = oshape.h * oshape.w;
    let cg = spec.in_ch / spec.groups;
    let og = spec.out_ch / spec.groups;
    let rows = cg * spec.kernel * spec.kernel;

    let mut grad_input = vec![0.0f32; ishape.len()];
    let mut grad_w = vec![0.0f32; weights.len()];
    let mut grad_b = spec.has_bias.then(|| vec![0.0f32; spec.out_ch]);

    let mut col = vec![0.0f32; rows * pix];
    let mut gcol = vec![0.0f32; rows * pix];

    for n in 0..ishape.n {
        for g in 0..spec.groups {
            im2col(input, ishape, spec, n, g, &mut col);
            gcol.fill(0.0);
            for oc_local in 0..og {
                let oc = g * og + oc_local;
                let go = &grad_out[oshape.at(n, oc, 0, 0)..oshape.at(n, oc, 0, 0) + pix];
                if let Some(gb) = grad_b.as_deref_mut() {
                    gb[oc] += go.iter().sum::<f32>();
                }
                let w_slice = &weights[oc * rows..(oc + 1) * rows];
                let gw_slice = &mut grad_w[oc * rows..(oc + 1) * rows];
                for r in 0..rows {
                    let src = &col[r * pix..(r + 1) * pix];
                    gw_slice[r] += go.iter().zip(src).map(|(&a, &b)| a * b).sum::<f32>();
                    let a = w_slice[r];
                    if a != 0.0 {
                        let gc = &mut gcol[r * pix..(r + 1) * pix];
                        for (d, &s) in gc.iter_mut().zip(go) {
                            *d += a * s;
                        }
                    }
                }
            }
            col2im_add(&gcol, ishape, spec, n, g, &mut grad_input);
        }
    }
    Ok(ConvGrads {
        input: grad_input,
        weights: grad_w,
        bias: grad_b,
    })
}

/// Brute-force direct convolution, kept deliberately naive: it is the
/// reference the fast path is checked against.
pub fn conv2d_reference(
    input: &[f32],
    ishape: Shape,
    weights: &[f32],
    bias: Option<&[f32]>,
    spec: &ConvSpec,
) -> Result<(Vec<f32>, Shape)> {
    spec.validate()?;
    let oshape = spec.out_shape(ishape);
    let cg = spec.in_ch / spec.groups;
    let og = spec.out_ch / spec.groups;
    let k = spec.kernel;
    let pad = spec.padding() as isize;
    let mut out = vec![0.0f32; oshape.len()];
    for n in 0..ishape.n {
        for oc in 0..spec.out_ch {
            let g = oc / og;
            for oy in 0..oshape.h {
                for ox in 0..oshape.w {
                    let mut acc = bias.map_or(0.0, |b| b[oc]);
                    for c_local in 0..cg {
                        let c = g * cg + c_local;
                        for kh in 0..k {
                            for kw in 0..k {
                                let iy = (oy * spec.stride + kh * spec.dilation) as isize - pad;
                                let ix = (ox * spec.stride + kw * spec.dilation) as isize - pad;
                                if iy < 0
                                    || iy >= ishape.h as isize
                                    || ix < 0
                                    || ix >= ishape.w as isize
                                {
                                    continue;
                                }
                                let wv = weights
                                    [((oc * cg + c_local) * k + kh) * k + kw];
                                acc += wv * input[ishape.at(n, c, iy as usize, ix as usize)];
                            }
                        }
                    }
                    out[oshape.at(n, oc, oy, ox)] = acc;
                }
            }
        }
    }
    Ok((out, oshape))
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

pub struct BnCache {
    pub xhat: Vec<f32>,
    pub inv_std: Vec<f32>,
    pub count_per_channel: usize,
}

/// Training-mode batch norm: normalizes with batch statistics and
/// updates the running estimates in place (unbiased variance for the
/// running estimate, biased for normalization).
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_train_forward(
    input: &[f32],
    shape: Shape,
    gamma: &[f32],
    beta: &[f32],
    running_mean: &mut [f32],
    running_var: &mut [f32],
    eps: f32,
    momentum: f32,
) -> (Vec<f32>, BnCache) {
    let c = shape.c;
    let m = shape.n * shape.h * shape.w;
    let hw = shape.h * shape.w;
    let mut out = vec![0.0f32; input.len()];
    let mut xhat = vec![0.0f32; input.len()];
    let mut inv_std = vec![0.0f32; c];

    for ch in 0..c {
        let mut sum = 0.0f64;
        let mut sq = 0.0f64;
        for n in 0..shape.n {
            let base = shape.at(n, ch, 0, 0);
            for &v in &input[base..base + hw] {
                sum += v as f64;
                sq += (v as f64) * (v as f64);
            }
        }
        let mean = sum / m as f64;
        let var = (sq / m as f64 - mean * mean).max(0.0);
        let istd = 1.0 / (var + eps as f64).sqrt();
        inv_std[ch] = istd as f32;

        let unbiased = if m > 1 {
            var * m as f64 / (m - 1) as f64
        } else {
            var
        };
        running_mean[ch] = (1.0 - momentum) * running_mean[ch] + momentum * mean as f32;
        running_var[ch] = (1.0 - momentum) * running_var[ch] + momentum * unbiased as f32;

        for n in 0..shape.n {
            let base = shape.at(n, ch, 0, 0);
            for i in base..base + hw {
                let xh = ((input[i] as f64 - mean) * istd) as f32;
                xhat[i] = xh;
                out[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    (
        out,
        BnCache {
            xhat,
            inv_std,
            count_per_channel: m,
        },
    )
}

/// Inference-mode batch norm using the stored running statistics.
pub fn batchnorm_eval_forward(
    input: &[f32],
    shape: Shape,
    gamma: &[f32],
    beta: &[f32],
    running_mean: &[f32],
    running_var: &[f32],
    eps: f32,
) -> Vec<f32> {
    let hw = shape.h * shape.w;
    let mut out = vec![0.0f32; input.len()];
    for ch in 0..shape.c {
        let istd = 1.0 / (running_var[ch] + eps).sqrt();
        let scale = gamma[ch] * istd;
        let shift = beta[ch] - running_mean[ch] * scale;
        for n in 0..shape.n {
            let base = shape.at(n, ch, 0, 0);
            for i in base..base + hw {
                out[i] = input[i] * scale + shift;
            }
        }
    }
    out
}

pub struct BnGrads {
    pub input: Vec<f32>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

pub fn batchnorm_backward(
    grad_out: &[f32],
    shape: Shape,
    gamma: &[f32],
    cache: &BnCache,
) -> BnGrads {
    let c = shape.c;
    let hw = shape.h * shape.w;
    let m = cache.count_per_channel as f32;
    let mut grad_input = vec![0.0f32; grad_out.len()];
    let mut grad_gamma = vec![0.0f32; c];
    let mut grad_beta = vec![0.0f32; c];

    for ch in 0..c {
        let mut sum_dy = 0.0f32;
        let mut sum_dy_xhat = 0.0f32;
        for n in 0..shape.n {
            let base = shape.at(n, ch, 0, 0);
            for i in base..base + hw {
                sum_dy += grad_out[i];
                sum_dy_xhat += grad_out[i] * cache.xhat[i];
            }
        }
        grad_gamma[ch] = sum_dy_xhat;
        grad_beta[ch] = sum_dy;
        let k = gamma[ch] * cache.inv_std[ch];
        for n in 0..shape.n {
            let base = shape.at(n, ch, 0, 0);
            for i in base..base + hw {
                grad_input[i] =
                    k * (grad_out[i] - sum_dy / m - cache.xhat[i] * sum_dy_xhat / m);
            }
        }
    }
    BnGrads {
        input: grad_input,
        gamma: grad_gamma,
        beta: grad_beta,
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ActKind {
    ReLU,
    Elu { alpha: f32 },
    /// Learnable per-channel negative slope; the slope vector lives in
    /// the parameter store.
    PRelu,
    HardSwish,
}

impl ActKind {
    pub fn parse(s: &str) -> Result<ActKind> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(ActKind::ReLU),
            "elu" => Ok(ActKind::Elu { alpha: 1.0 }),
            "prelu" => Ok(ActKind::PRelu),
            "hardswish" => Ok(ActKind::HardSwish),
            other => Err(EmberError::InvalidConfig(format!(
                "unknown activation `{other}` (valid: relu, elu, prelu, hardswish)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ActKind::ReLU => "relu",
            ActKind::Elu { .. } => "elu",
            ActKind::PRelu => "prelu",
            ActKind::HardSwish => "hardswish",
        }
    }
}

/// Elementwise activation. `slopes` is the per-channel PReLU parameter
/// and must match the channel count for PReLU.
pub fn activation_forward(
    input: &[f32],
    shape: Shape,
    kind: ActKind,
    slopes: Option<&[f32]>,
) -> Result<Vec<f32>> {
    if let ActKind::PRelu = kind {
        let s = slopes.ok_or_else(|| {
            EmberError::ShapeMismatch("PReLU requires a slope vector".into())
        })?;
        if s.len() != shape.c {
            return Err(EmberError::ShapeMismatch(format!(
                "PReLU slope count {} for {} channels",
                s.len(),
                shape.c
            )));
        }
    }
    let hw = shape.h * shape.w;
    let mut out = vec![0.0f32; input.len()];
    match kind {
        ActKind::ReLU => {
            for (o, &x) in out.iter_mut().zip(input) {
                *o = x.max(0.0);
            }
        }
        ActKind::Elu { alpha } => {
            for (o, &x) in out.iter_mut().zip(input) {
                *o = if x > 0.0 { x } else { alpha * (x.exp() - 1.0) };
            }
        }
        ActKind::PRelu => {
            let slopes = slopes.unwrap();
            for n in 0..shape.n {
                for c in 0..shape.c {
                    let a = slopes[c];
                    let base = shape.at(n, c, 0, 0);
                    for i in base..base + hw {
                        let x = input[i];
                        out[i] = if x > 0.0 { x } else { a * x };
                    }
                }
            }
        }
        ActKind::HardSwish => {
            for (o, &x) in out.iter_mut().zip(input) {
                *o = x * (x + 3.0).clamp(0.0, 6.0) / 6.0;
            }
        }
    }
    Ok(out)
}

pub struct ActGrads {
    pub input: Vec<f32>,
    /// Per-channel slope gradient, PReLU only.
    pub slopes: Option<Vec<f32>>,
}

/// Backward of `activation_forward`. At the kink (x == 0) the positive
/// branch's derivative is used, i.e. the right derivative.
pub fn activation_backward(
    grad_out: &[f32],
    input: &[f32],
    shape: Shape,
    kind: ActKind,
    slopes: Option<&[f32]>,
) -> Result<ActGrads> {
    let hw = shape.h * shape.w;
    let mut grad_input = vec![0.0f32; input.len()];
    let mut grad_slopes = None;
    match kind {
        ActKind::ReLU => {
            for ((gi, &x), &g) in grad_input.iter_mut().zip(input).zip(grad_out) {
                *gi = if x >= 0.0 { g } else { 0.0 };
            }
        }
        ActKind::Elu { alpha } => {
            for ((gi, &x), &g) in grad_input.iter_mut().zip(input).zip(grad_out) {
                *gi = if x >= 0.0 { g } else { g * alpha * x.exp() };
            }
        }
        ActKind::PRelu => {
            let s = slopes.ok_or_else(|| {
                EmberError::ShapeMismatch("PReLU requires a slope vector".into())
            })?;
            if s.len() != shape.c {
                return Err(EmberError::ShapeMismatch(format!(
                    "PReLU slope count {} for {} channels",
                    s.len(),
                    shape.c
                )));
            }
            let mut gs = vec![0.0f32; shape.c];
            for n in 0..shape.n {
                for c in 0..shape.c {
                    let a = s[c];
                    let base = shape.at(n, c, 0, 0);
                    for i in base..base + hw {
                        let x = input[i];
                        if x >= 0.0 {
                            grad_input[i] = grad_out[i];
                        } else {
                            grad_input[i] = a * grad_out[i];
                            gs[c] += x * grad_out[i];
                        }
                    }
                }
            }
            grad_slopes = Some(gs);
        }
        ActKind::HardSwish => {
            for ((gi, &x), &g) in grad_input.iter_mut().zip(input).zip(grad_out) {
                *gi = if x < -3.0 {
                    0.0
                } else if x < 3.0 {
                    g * (2.0 * x + 3.0) / 6.0
                } else {
                    g
                };
            }
        }
    }
    Ok(ActGrads {
        input: grad_input,
        slopes: grad_slopes,
    })
}

// ---------------------------------------------------------------------------
// Bilinear resize (align_corners = false)
// ---------------------------------------------------------------------------

/// Source index and interpolation weight for one output coordinate:
/// returns (lo, hi, weight_of_hi).
#[inline]
pub fn bilinear_source(o: usize, scale: f32, in_len: usize) -> (usize, usize, f32) {
    let src = (o as f32 + 0.5) * scale - 0.5;
    if src <= 0.0 {
        return (0, 0, 0.0);
    }
    let f = src.floor();
    let i0 = (f as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - f)
}

pub fn bilinear_upsample_forward(
    input: &[f32],
    ishape: Shape,
    out_h: usize,
    out_w: usize,
) -> (Vec<f32>, Shape) {
    let oshape = Shape::new(ishape.n, ishape.c, out_h, out_w);
    let scale_h = ishape.h as f32 / out_h as f32;
    let scale_w = ishape.w as f32 / out_w as f32;
    let mut out = vec![0.0f32; oshape.len()];
    for n in 0..ishape.n {
        for c in 0..ishape.c {
            for oy in 0..out_h {
                let (y0, y1, wy) = bilinear_source(oy, scale_h, ishape.h);
                for ox in 0..out_w {
                    let (x0, x1, wx) = bilinear_source(ox, scale_w, ishape.w);
                    let v00 = input[ishape.at(n, c, y0, x0)];
                    let v01 = input[ishape.at(n, c, y0, x1)];
                    let v10 = input[ishape.at(n, c, y1, x0)];
                    let v11 = input[ishape.at(n, c, y1, x1)];
                    let top = v00 + wx * (v01 - v00);
                    let bot = v10 + wx * (v11 - v10);
                    out[oshape.at(n, c, oy, ox)] = top + wy * (bot - top);
                }
            }
        }
    }
    (out, oshape)
}

pub fn bilinear_upsample_backward(
    grad_out: &[f32],
    oshape: Shape,
    ishape: Shape,
) -> Vec<f32> {
    let scale_h = ishape.h as f32 / oshape.h as f32;
    let scale_w = ishape.w as f32 / oshape.w as f32;
    let mut grad_input = vec![0.0f32; ishape.len()];
    for n in 0..ishape.n {
        for c in 0..ishape.c {
            for oy in 0..oshape.h {
                let (y0, y1, wy) = bilinear_source(oy, scale_h, ishape.h);
                for ox in 0..oshape.w {
                    let (x0, x1, wx) = bilinear_source(ox, scale_w, ishape.w);
                    let g = grad_out[oshape.at(n, c, oy, ox)];
                    grad_input[ishape.at(n, c, y0, x0)] += g * (1.0 - wy) * (1.0 - wx);
                    grad_input[ishape.at(n, c, y0, x1)] += g * (1.0 - wy) * wx;
                    grad_input[ishape.at(n, c, y1, x0)] += g * wy * (1.0 - wx);
                    grad_input[ishape.at(n, c, y1, x1)] += g * wy * wx;
                }
            }
        }
    }
    grad_input
}

// ---------------------------------------------------------------------------
// Pool / concat / add
// ---------------------------------------------------------------------------

pub fn global_avg_pool_forward(input: &[f32], shape: Shape) -> (Vec<f32>, Shape) {
    let oshape = Shape::new(shape.n, shape.c, 1, 1);
    let hw = (shape.h * shape.w) as f32;
    let mut out = vec![0.0f32; oshape.len()];
    for n in 0..shape.n {
        for c in 0..shape.c {
            let base = shape.at(n, c, 0, 0);
            let s: f32 = input[base..base + shape.h * shape.w].iter().sum();
            out[oshape.at(n, c, 0, 0)] = s / hw;
        }
    }
    (out, oshape)
}

pub fn global_avg_pool_backward(grad_out: &[f32], ishape: Shape) -> Vec<f32> {
    let hw = ishape.h * ishape.w;
    let inv = 1.0 / hw as f32;
    let mut grad_input = vec![0.0f32; ishape.len()];
    for n in 0..ishape.n {
        for c in 0..ishape.c {
            let g = grad_out[(n * ishape.c + c)] * inv;
            let base = ishape.at(n, c, 0, 0);
            for v in &mut grad_input[base..base + hw] {
                *v = g;
            }
        }
    }
    grad_input
}

pub fn concat_forward(inputs: &[(&[f32], Shape)]) -> Result<(Vec<f32>, Shape)> {
    let first = inputs
        .first()
        .ok_or_else(|| EmberError::ShapeMismatch("concat of zero inputs".into()))?
        .1;
    let mut total_c = 0;
    for (_, s) in inputs {
        if s.n != first.n || s.h != first.h || s.w != first.w {
            return Err(EmberError::ShapeMismatch(format!(
                "concat inputs disagree: {s} vs {first}"
            )));
        }
        total_c += s.c;
    }
    let oshape = Shape::new(first.n, total_c, first.h, first.w);
    let hw = first.h * first.w;
    let mut out = vec![0.0f32; oshape.len()];
    for n in 0..first.n {
        let mut c_off = 0;
        for (data, s) in inputs {
            for c in 0..s.c {
                let src = s.at(n, c, 0, 0);
                let dst = oshape.at(n, c_off + c, 0, 0);
                out[dst..dst + hw].copy_from_slice(&data[src..src + hw]);
            }
            c_off += s.c;
        }
    }
    Ok((out, oshape))
}

pub fn concat_backward(grad_out: &[f32], oshape: Shape, in_shapes: &[Shape]) -> Vec<Vec<f32>> {
    let hw = oshape.h * oshape.w;
    let mut grads: Vec<Vec<f32>> = in_shapes.iter().map(|s| vec![0.0f32; s.len()]).collect();
    for n in 0..oshape.n {
        let mut c_off = 0;
        for (gi, s) in grads.iter_mut().zip(in_shapes) {
            for c in 0..s.c {
                let src = oshape.at(n, c_off + c, 0, 0);
                let dst = s.at(n, c, 0, 0);
                gi[dst..dst + hw].copy_from_slice(&grad_out[src..src + hw]);
            }
            c_off += s.c;
        }
    }
    grads
}

pub fn add_forward(a: &[f32], b: &[f32], shape_a: Shape, shape_b: Shape) -> Result<Vec<f32>> {
    if shape_a != shape_b {
        return Err(EmberError::ShapeMismatch(format!(
            "residual add of {shape_a} and {shape_b}"
        )));
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| x + y).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(shape: Shape) -> Vec<f32> {
        vec![1.0; shape.len()]
    }

    #[test]
    fn identity_1x1_conv() {
        let spec = ConvSpec {
            in_ch: 1,
            out_ch: 1,
            kernel: 1,
            stride: 1,
            dilation: 1,
            groups: 1,
            has_bias: false,
        };
        let shape = Shape::new(1, 1, 3, 3);
        let input: Vec<f32> = (0..9).map(|i| i as f32).collect();
        let (out, oshape) = conv2d_forward(&input, shape, &[1.0], None, &spec).unwrap();
        assert_eq!(oshape, shape);
        assert_eq!(out, input);
    }

    #[test]
    fn ones_3x3_kernel_counts_neighbors() {
        let spec = ConvSpec {
            in_ch: 1,
            out_ch: 1,
            kernel: 3,
            stride: 1,
            dilation: 1,
            groups: 1,
            has_bias: false,
        };
        let shape = Shape::new(1, 1, 3, 3);
        let (out, _) = conv2d_forward(&ones(shape), shape, &ones(Shape::new(1, 1, 3, 3)), None, &spec)
            .unwrap();
        // each output counts the in-bounds taps: corners 4, edges 6, center 9
        assert_eq!(out, vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn dilated_conv_matches_reference() {
        let spec = ConvSpec {
            in_ch: 1,
            out_ch: 1,
            kernel: 3,
            stride: 1,
            dilation: 2,
            groups: 1,
            has_bias: false,
        };
        let shape = Shape::new(1, 1, 5, 5);
        let input = ones(shape);
        let w = ones(Shape::new(1, 1, 3, 3));
        let (fast, s1) = conv2d_forward(&input, shape, &w, None, &spec).unwrap();
        let (slow, s2) = conv2d_reference(&input, shape, &w, None, &spec).unwrap();
        assert_eq!(s1, s2);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let spec = ConvSpec {
            in_ch: 2,
            out_ch: 3,
            kernel: 3,
            stride: 1,
            dilation: 1,
            groups: 1,
            has_bias: true,
        };
        let shape = Shape::new(1, 2, 4, 4);
        let input: Vec<f32> = (0..shape.len()).map(|i| (i as f32).sin()).collect();
        let w: Vec<f32> = (0..spec.weight_len()).map(|i| (i as f32).cos()).collect();
        let grads =
            conv2d_backward(&vec![0.0; spec.out_shape(shape).len()], &input, shape, &w, &spec)
                .unwrap();
        assert!(grads.input.iter().all(|&x| x == 0.0));
        assert!(grads.weights.iter().all(|&x| x == 0.0));
        assert!(grads.bias.unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identity_conv_backward_passes_grad() {
        let spec = ConvSpec {
            in_ch: 1,
            out_ch: 1,
            kernel: 1,
            stride: 1,
            dilation: 1,
            groups: 1,
            has_bias: false,
        };
        let shape = Shape::new(1, 1, 2, 2);
        let input = vec![0.5, -1.0, 2.0, 0.0];
        let grad_out = vec![1.0, 2.0, 3.0, 4.0];
        let grads = conv2d_backward(&grad_out, &input, shape, &[1.0], &spec).unwrap();
        assert_eq!(grads.input, grad_out);
    }

    #[test]
    fn activation_values() {
        let shape = Shape::new(1, 1, 1, 3);
        let x = vec![-2.0, 0.0, 3.0];
        let relu = activation_forward(&x, shape, ActKind::ReLU, None).unwrap();
        assert_eq!(relu, vec![0.0, 0.0, 3.0]);

        let elu = activation_forward(&[-1.0], Shape::new(1, 1, 1, 1), ActKind::Elu { alpha: 1.0 }, None)
            .unwrap();
        assert!((elu[0] - (-0.632_120_6)).abs() < 1e-6);

        let prelu = activation_forward(
            &[-2.0],
            Shape::new(1, 1, 1, 1),
            ActKind::PRelu,
            Some(&[0.25]),
        )
        .unwrap();
        assert_eq!(prelu[0], -0.5);
    }

    #[test]
    fn prelu_slope_mismatch_is_error() {
        let shape = Shape::new(1, 2, 1, 1);
        assert!(activation_forward(&[1.0, 2.0], shape, ActKind::PRelu, Some(&[0.25])).is_err());
    }

    #[test]
    fn prelu_accumulates_slope_grads_per_channel() {
        let shape = Shape::new(1, 2, 1, 2);
        let x = vec![-1.0, 2.0, -3.0, -4.0];
        let g = vec![1.0, 1.0, 1.0, 2.0];
        let grads =
            activation_backward(&g, &x, shape, ActKind::PRelu, Some(&[0.5, 0.25])).unwrap();
        // channel 0: only x=-1 negative -> -1*1; channel 1: -3*1 + -4*2 = -11
        assert_eq!(grads.slopes.unwrap(), vec![-1.0, -11.0]);
        assert_eq!(grads.input, vec![0.5, 1.0, 0.25, 0.5]);
    }

    #[test]
    fn bilinear_2x2_to_4x4_closed_form() {
        let ishape = Shape::new(1, 1, 2, 2);
        let input = vec![0.0, 1.0, 2.0, 3.0];
        let (out, oshape) = bilinear_upsample_forward(&input, ishape, 4, 4);
        assert_eq!(oshape, Shape::new(1, 1, 4, 4));
        let expected = [
            0.0, 0.25, 0.75, 1.0, //
            0.5, 0.75, 1.25, 1.5, //
            1.5, 1.75, 2.25, 2.5, //
            2.0, 2.25, 2.75, 3.0,
        ];
        for (a, e) in out.iter().zip(expected) {
            assert!((a - e).abs() < 1e-6, "{out:?}");
        }
    }

    #[test]
    fn upsample_of_constant_is_constant() {
        let ishape = Shape::new(1, 2, 3, 3);
        let input = vec![7.5; ishape.len()];
        let (out, _) = bilinear_upsample_forward(&input, ishape, 9, 5);
        assert!(out.iter().all(|&v| (v - 7.5).abs() < 1e-6));
    }

    #[test]
    fn pool_and_backward() {
        let shape = Shape::new(1, 1, 2, 2);
        let (out, oshape) = global_avg_pool_forward(&[1.0, 2.0, 3.0, 6.0], shape);
        assert_eq!(oshape, Shape::new(1, 1, 1, 1));
        assert_eq!(out, vec![3.0]);
        let gi = global_avg_pool_backward(&[4.0], shape);
        assert_eq!(gi, vec![1.0; 4]);
    }

    #[test]
    fn concat_splits_back() {
        let a = (vec![1.0f32, 2.0], Shape::new(1, 1, 1, 2));
        let b = (vec![3.0f32, 4.0, 5.0, 6.0], Shape::new(1, 2, 1, 2));
        let (out, oshape) = concat_forward(&[(&a.0, a.1), (&b.0, b.1)]).unwrap();
        assert_eq!(oshape.c, 3);
        assert_eq!(out, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let grads = concat_backward(&out, oshape, &[a.1, b.1]);
        assert_eq!(grads[0], a.0);
        assert_eq!(grads[1], b.0);
    }
}
