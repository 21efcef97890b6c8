use super::{mismatch, Result, Tensor, TensorError};

/// Variance floor added inside the batch-norm square root.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the current batch in the running-statistics update.
pub const BN_MOMENTUM: f64 = 0.1;

fn out_extent(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

/// Output positions `o` in `[lo, hi)` whose input index `o*stride + kk - pad`
/// falls inside `[0, len)`.
fn valid_range(out_len: usize, len: usize, kk: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if kk >= pad {
        0
    } else {
        (pad - kk).div_ceil(stride)
    };
    // largest o with o*stride + kk - pad <= len - 1
    let limit = len + pad;
    let hi = if limit <= kk {
        0
    } else {
        ((limit - kk - 1) / stride + 1).min(out_len)
    };
    (lo, hi.max(lo))
}

/// 2-D cross-correlation of a `Cin×H×W` map with `Cout×Cin×kh×kw` filters.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let geom = ConvGeom::new(input, weight, bias, stride, pad)?;
    let ConvGeom {
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        oh,
        ow,
    } = geom;
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0; cout * oh * ow];
    for o in 0..cout {
        let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        plane.fill(bias.data()[o]);
        for c in 0..cin {
            let xin = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..kh {
                let (oy_lo, oy_hi) = valid_range(oh, h, ky, stride, pad);
                for kx in 0..kw {
                    let wv = wt[((o * cin + c) * kh + ky) * kw + kx];
                    let (ox_lo, ox_hi) = valid_range(ow, w, kx, stride, pad);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        let irow = &xin[iy * w..(iy + 1) * w];
                        if stride == 1 {
                            let ix0 = ox_lo + kx - pad;
                            let n = ox_hi - ox_lo;
                            for (ov, iv) in orow[ox_lo..ox_hi].iter_mut().zip(&irow[ix0..ix0 + n]) {
                                *ov += wv * iv;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                orow[ox] += wv * irow[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[cout, oh, ow], out)
}

#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(
        input: &Tensor,
        weight: &Tensor,
        bias: &Tensor,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (cin, h, w) = input.dims3()?;
        let (cout, wcin, kh, kw) = match weight.shape()[..] {
            [a, b, c, d] => (a, b, c, d),
            _ => {
                return Err(mismatch(
                    "conv2d",
                    format!("weight must be rank 4, got {:?}", weight.shape()),
                ))
            }
        };
        if wcin != cin {
            return Err(mismatch(
                "conv2d",
                format!("weight expects {wcin} input channels, input has {cin}"),
            ));
        }
        if bias.shape() != [cout] {
            return Err(mismatch(
                "conv2d",
                format!("bias {:?} for {cout} output channels", bias.shape()),
            ));
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                detail: "stride must be >= 1".into(),
            });
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(TensorError::WindowTooLarge {
                op: "conv2d",
                k: kh.max(kw),
                h: h + 2 * pad,
                w: w + 2 * pad,
            });
        }
        Ok(Self {
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            oh: out_extent(h, kh, stride, pad),
            ow: out_extent(w, kw, stride, pad),
        })
    }
}

pub struct Conv2dGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Gradients of [`conv2d`] given the upstream gradient of its output.
/// The input gradient is skipped when `need_input` is false.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
    need_input: bool,
) -> Result<Conv2dGrads> {
    let ConvGeom {
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        oh,
        ow,
    } = ConvGeom::new(input, weight, bias, stride, pad)?;
    if grad_out.shape() != [cout, oh, ow] {
        return Err(mismatch(
            "conv2d_backward",
            format!(
                "upstream {:?}, expected {:?}",
                grad_out.shape(),
                [cout, oh, ow]
            ),
        ));
    }
    let x = input.data();
    let wt = weight.data();
    let go = grad_out.data();
    let mut gw = vec![0.0; wt.len()];
    let mut gb = vec![0.0; cout];
    let mut gx = if need_input {
        vec![0.0; x.len()]
    } else {
        Vec::new()
    };
    for o in 0..cout {
        let gplane = &go[o * oh * ow..(o + 1) * oh * ow];
        gb[o] = gplane.iter().sum();
        for c in 0..cin {
            let xin = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..kh {
                let (oy_lo, oy_hi) = valid_range(oh, h, ky, stride, pad);
                for kx in 0..kw {
                    let widx = ((o * cin + c) * kh + ky) * kw + kx;
                    let wv = wt[widx];
                    let (ox_lo, ox_hi) = valid_range(ow, w, kx, stride, pad);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let mut acc = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        let irow = &xin[iy * w..(iy + 1) * w];
                        if stride == 1 {
                            let ix0 = ox_lo + kx - pad;
                            let n = ox_hi - ox_lo;
                            acc += grow[ox_lo..ox_hi]
                                .iter()
                                .zip(&irow[ix0..ix0 + n])
                                .map(|(g, v)| g * v)
                                .sum::<f64>();
                            if need_input {
                                let xrow = &mut gx[c * h * w + iy * w..c * h * w + (iy + 1) * w];
                                for (gv, g) in
                                    xrow[ix0..ix0 + n].iter_mut().zip(&grow[ox_lo..ox_hi])
                                {
                                    *gv += wv * g;
                                }
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = ox * stride + kx - pad;
                                acc += grow[ox] * irow[ix];
                                if need_input {
                                    gx[c * h * w + iy * w + ix] += wv * grow[ox];
                                }
                            }
                        }
                    }
                    gw[widx] = acc;
                }
            }
        }
    }
    Ok(Conv2dGrads {
        input: if need_input {
            Some(Tensor::new(input.shape(), gx)?)
        } else {
            None
        },
        weight: Tensor::new(weight.shape(), gw)?,
        bias: Tensor::new(&[cout], gb)?,
    })
}

fn pool_dims(
    op: &'static str,
    input: &Tensor,
    k: usize,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (c, h, w) = input.dims3()?;
    if k == 0 || k > h || k > w {
        return Err(TensorError::WindowTooLarge { op, k, h, w });
    }
    Ok((c, h, w, h - k + 1, w - k + 1))
}

/// Stride-1, unpadded `k×k` mean pooling: `H×W -> (H-k+1)×(W-k+1)`.
pub fn avg_pool2d(input: &Tensor, k: usize) -> Result<Tensor> {
    let (c, h, w, oh, ow) = pool_dims("avg_pool2d", input, k)?;
    if k == 1 {
        return Ok(input.clone());
    }
    let x = input.data();
    let norm = 1.0 / (k * k) as f64;
    let mut rows = vec![0.0; h * ow];
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            for ox in 0..ow {
                rows[y * ow + ox] = row[ox..ox + k].iter().sum();
            }
        }
        let oplane = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            let orow = &mut oplane[oy * ow..(oy + 1) * ow];
            for dy in 0..k {
                for (o, r) in orow
                    .iter_mut()
                    .zip(&rows[(oy + dy) * ow..(oy + dy + 1) * ow])
                {
                    *o += r;
                }
            }
            for o in orow.iter_mut() {
                *o *= norm;
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

pub fn avg_pool2d_backward(input_shape: &[usize], k: usize, grad_out: &Tensor) -> Result<Tensor> {
    let (c, h, w) = match input_shape[..] {
        [c, h, w] => (c, h, w),
        _ => return Err(mismatch("avg_pool2d_backward", "input must be rank 3")),
    };
    if k == 1 {
        return Ok(grad_out.clone());
    }
    let (oh, ow) = (h - k + 1, w - k + 1);
    if grad_out.shape() != [c, oh, ow] {
        return Err(mismatch("avg_pool2d_backward", "upstream shape"));
    }
    let norm = 1.0 / (k * k) as f64;
    let go = grad_out.data();
    let mut cols = vec![0.0; h * ow];
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        cols.fill(0.0);
        let gplane = &go[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            let grow = &gplane[oy * ow..(oy + 1) * ow];
            for dy in 0..k {
                for (t, g) in cols[(oy + dy) * ow..(oy + dy + 1) * ow]
                    .iter_mut()
                    .zip(grow)
                {
                    *t += g * norm;
                }
            }
        }
        let xplane = &mut gx[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let xrow = &mut xplane[y * w..(y + 1) * w];
            for ox in 0..ow {
                let t = cols[y * ow + ox];
                for v in &mut xrow[ox..ox + k] {
                    *v += t;
                }
            }
        }
    }
    Tensor::new(input_shape, gx)
}

/// Stride-1, unpadded `k×k` max pooling.
pub fn max_pool2d(input: &Tensor, k: usize) -> Result<Tensor> {
    max_pool2d_with_argmax(input, k).map(|(t, _)| t)
}

/// Max pooling that also returns, per output element, the flat input index
/// of the selected maximum.
pub fn max_pool2d_with_argmax(input: &Tensor, k: usize) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w, oh, ow) = pool_dims("max_pool2d", input, k)?;
    let x = input.data();
    let mut rows = vec![0usize; h * ow];
    let mut out = vec![0.0; c * oh * ow];
    let mut arg = vec![0usize; c * oh * ow];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for ox in 0..ow {
                let mut best = base + y * w + ox;
                for dx in 1..k {
                    let i = base + y * w + ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                rows[y * ow + ox] = best;
            }
        }
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = rows[oy * ow + ox];
                for dy in 1..k {
                    let i = rows[(oy + dy) * ow + ox];
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                let o = (ch * oh + oy) * ow + ox;
                out[o] = x[best];
                arg[o] = best;
            }
        }
    }
    Ok((Tensor::new(&[c, oh, ow], out)?, arg))
}

pub(crate) fn max_pool2d_backward(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor,
) -> Result<Tensor> {
    let mut gx = Tensor::zeros(input_shape);
    let d = gx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] += g;
    }
    Ok(gx)
}

/// Softmax over every element of the tensor, regardless of shape.
pub fn softmax_flat(logits: &Tensor) -> Tensor {
    let m = logits
        .data()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.data().iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    Tensor::new(logits.shape(), exps.into_iter().map(|e| e / s).collect()).expect("shape unchanged")
}

/// Softmax along the leading axis, independently for each trailing position.
pub fn softmax_axis0(logits: &Tensor) -> Result<Tensor> {
    if logits.rank() < 2 {
        return Err(mismatch("softmax_axis0", "needs rank >= 2"));
    }
    let a = logits.shape()[0];
    let inner = logits.len() / a;
    let x = logits.data();
    let mut out = vec![0.0; x.len()];
    for j in 0..inner {
        let m = (0..a)
            .map(|i| x[i * inner + j])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for i in 0..a {
            let e = (x[i * inner + j] - m).exp();
            out[i * inner + j] = e;
            s += e;
        }
        for i in 0..a {
            out[i * inner + j] /= s;
        }
    }
    Tensor::new(logits.shape(), out)
}

#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    w0: f64,
    w1: f64,
}

/// Half-pixel-centre interpolation taps along one axis.
fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let w1 = src - i0 as f64;
            Tap {
                i0,
                i1,
                w0: 1.0 - w1,
                w1,
            }
        })
        .collect()
}

/// Bilinear resize of a `C×H×W` map (align-corners off).
pub fn resize_bilinear(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(TensorError::InvalidArgument {
            op: "resize_bilinear",
            detail: "output extents must be >= 1".into(),
        });
    }
    if (out_h, out_w) == (h, w) {
        return Ok(input.clone());
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let x = input.data();
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                // lerp form, so constant inputs come back bit-exact
                let (p00, p01) = (plane[a.i0 * w + b.i0], plane[a.i0 * w + b.i1]);
                let (p10, p11) = (plane[a.i1 * w + b.i0], plane[a.i1 * w + b.i1]);
                let top = p00 + b.w1 * (p01 - p00);
                let bot = p10 + b.w1 * (p11 - p10);
                out[(ch * out_h + oy) * out_w + ox] = top + a.w1 * (bot - top);
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

pub fn resize_bilinear_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let (c, h, w) = match input_shape[..] {
        [c, h, w] => (c, h, w),
        _ => return Err(mismatch("resize_bilinear_backward", "input must be rank 3")),
    };
    let (gc, out_h, out_w) = grad_out.dims3()?;
    if gc != c {
        return Err(mismatch("resize_bilinear_backward", "channel count"));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(grad_out.clone());
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let g = grad_out.data();
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &mut gx[ch * h * w..(ch + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let v = g[(ch * out_h + oy) * out_w + ox];
                plane[a.i0 * w + b.i0] += a.w0 * b.w0 * v;
                plane[a.i0 * w + b.i1] += a.w0 * b.w1 * v;
                plane[a.i1 * w + b.i0] += a.w1 * b.w0 * v;
                plane[a.i1 * w + b.i1] += a.w1 * b.w1 * v;
            }
        }
    }
    Tensor::new(input_shape, gx)
}

/// `y = W·x + b` for a single vector.
pub fn fully_connected(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if x.rank() != 1 {
        return Err(mismatch("fully_connected", "input must be a vector"));
    }
    let y = linear(x, weight, Some(bias))?;
    y.into_reshape(&[weight.shape()[0]])
}

/// Row-wise affine map `X·Wᵀ + b` for `X` of shape `[B×Din]` (or `[Din]`,
/// treated as a batch of one). Returns `[B×Dout]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (dout, din) = weight.dims2()?;
    let (b, xin) = match x.shape()[..] {
        [d] => (1, d),
        [b, d] => (b, d),
        _ => return Err(mismatch("linear", format!("input {:?}", x.shape()))),
    };
    if xin != din {
        return Err(mismatch(
            "linear",
            format!("weight expects {din} inputs, got {xin}"),
        ));
    }
    if let Some(bias) = bias {
        if bias.shape() != [dout] {
            return Err(mismatch("linear", format!("bias {:?}", bias.shape())));
        }
    }
    let xd = x.data();
    let wd = weight.data();
    let mut out = vec![0.0; b * dout];
    for r in 0..b {
        let xr = &xd[r * din..(r + 1) * din];
        for o in 0..dout {
            let dot: f64 = wd[o * din..(o + 1) * din]
                .iter()
                .zip(xr)
                .map(|(w, v)| w * v)
                .sum();
            out[r * dout + o] = dot + bias.map_or(0.0, |bb| bb.data()[o]);
        }
    }
    Tensor::new(&[b, dout], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Running mean and (unbiased) variance for a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl BatchNormStats {
    pub fn new(dim: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[dim]),
            var: Tensor::ones(&[dim]),
        }
    }
}

pub(crate) struct BatchNormForward {
    pub out: Tensor,
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

pub(crate) fn batch_norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &mut BatchNormStats,
    mode: NormMode,
) -> Result<BatchNormForward> {
    let (b, d) = x.dims2()?;
    if gamma.shape() != [d] || beta.shape() != [d] || stats.mean.shape() != [d] {
        return Err(mismatch("batch_norm", format!("feature dim {d}")));
    }
    let xd = x.data();
    let (mean, inv_std): (Vec<f64>, Vec<f64>) = match mode {
        NormMode::Train => {
            if b < 2 {
                return Err(TensorError::BatchTooSmall(b));
            }
            let mut mean = vec![0.0; d];
            let mut var = vec![0.0; d];
            for j in 0..d {
                let m = (0..b).map(|r| xd[r * d + j]).sum::<f64>() / b as f64;
                let v = (0..b).map(|r| (xd[r * d + j] - m).powi(2)).sum::<f64>() / b as f64;
                mean[j] = m;
                var[j] = v;
            }
            let unbias = b as f64 / (b - 1) as f64;
            for j in 0..d {
                let rm = &mut stats.mean.data_mut()[j];
                *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean[j];
                let rv = &mut stats.var.data_mut()[j];
                *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * var[j] * unbias;
            }
            let inv = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            (mean, inv)
        }
        NormMode::Eval => (
            stats.mean.data().to_vec(),
            stats
                .var
                .data()
                .iter()
                .map(|v| 1.0 / (v + BN_EPS).sqrt())
                .collect(),
        ),
    };
    let mut xhat = vec![0.0; b * d];
    let mut out = vec![0.0; b * d];
    for r in 0..b {
        for j in 0..d {
            let h = (xd[r * d + j] - mean[j]) * inv_std[j];
            xhat[r * d + j] = h;
            out[r * d + j] = gamma.data()[j] * h + beta.data()[j];
        }
    }
    Ok(BatchNormForward {
        out: Tensor::new(&[b, d], out)?,
        xhat: Tensor::new(&[b, d], xhat)?,
        inv_std,
    })
}

/// Batch normalization of a `[B×D]` batch of vectors.
///
/// Train mode normalizes with the biased batch variance and folds the batch
/// statistics into `stats`; eval mode normalizes with `stats` unchanged.
pub fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &mut BatchNormStats,
    mode: NormMode,
) -> Result<Tensor> {
    batch_norm_forward(x, gamma, beta, stats, mode).map(|f| f.out)
}
