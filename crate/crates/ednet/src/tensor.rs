//! Dense NCHW float tensors and the kernel library the detector blocks compose:
//! convolution (naive trust anchor + im2col/GEMM fast path), pooling,
//! activations, inference batchnorm, nearest upsampling and channel concat.
//!
//! All operations are pure functions: same inputs always produce bit-identical
//! outputs, so they are safe to call concurrently from any number of threads.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};

/// Peak per-call conv workspace in bytes, updated by the GEMM lowering and the
/// quantized conv path. The bench subcommand reads this to compare the float
/// and int8 working-set sizes.
pub static CONV_WORKSPACE_PEAK: AtomicUsize = AtomicUsize::new(0);

pub(crate) fn note_workspace(bytes: usize) {
    CONV_WORKSPACE_PEAK.fetch_max(bytes, Ordering::Relaxed);
}

pub fn reset_workspace_peak() {
    CONV_WORKSPACE_PEAK.store(0, Ordering::Relaxed);
}

pub fn workspace_peak() -> usize {
    CONV_WORKSPACE_PEAK.load(Ordering::Relaxed)
}

/// Dense 4-D feature map, row-major NCHW.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "all dims must be >= 1, got {n}x{c}x{h}x{w}"
            )));
        }
        let expect = n * c * h * w;
        if data.len() != expect {
            return Err(Error::Shape(format!(
                "data length {} != {n}*{c}*{h}*{w} = {expect}",
                data.len()
            )));
        }
        Ok(Self { n, c, h, w, data })
    }

    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self::filled(n, c, h, w, 0.0)
    }

    pub fn filled(n: usize, c: usize, h: usize, w: usize, v: f32) -> Self {
        assert!(n >= 1 && c >= 1 && h >= 1 && w >= 1, "all dims must be >= 1");
        Self { n, c, h, w, data: vec![v; n * c * h * w] }
    }

    pub fn from_fn(
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(n * c * h * w);
        for in_ in 0..n {
            for ic in 0..c {
                for iy in 0..h {
                    for ix in 0..w {
                        data.push(f(in_, ic, iy, ix));
                    }
                }
            }
        }
        Self { n, c, h, w, data }
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    #[inline]
    pub fn n(&self) -> usize { self.n }
    #[inline]
    pub fn c(&self) -> usize { self.c }
    #[inline]
    pub fn h(&self) -> usize { self.h }
    #[inline]
    pub fn w(&self) -> usize { self.w }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }

    /// One image-channel plane as a contiguous slice.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let base = (n * self.c + c) * self.h * self.w;
        &self.data[base..base + self.h * self.w]
    }

    /// Channels [c0, c1) of one image as a contiguous slice.
    pub fn channel_range(&self, n: usize, c0: usize, c1: usize) -> &[f32] {
        let hw = self.h * self.w;
        let base = (n * self.c + c0) * hw;
        &self.data[base..base + (c1 - c0) * hw]
    }

    /// Copies channels [c0, c1) into a standalone tensor.
    pub fn slice_channels(&self, c0: usize, c1: usize) -> Tensor {
        assert!(c0 < c1 && c1 <= self.c);
        let hw = self.h * self.w;
        let cs = c1 - c0;
        let mut data = Vec::with_capacity(self.n * cs * hw);
        for in_ in 0..self.n {
            data.extend_from_slice(self.channel_range(in_, c0, c1));
        }
        Tensor { n: self.n, c: cs, h: self.h, w: self.w, data }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Convolution geometry. Dilation is fixed at 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvParams {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl ConvParams {
    pub fn new(k: usize, stride: usize, padding: usize) -> Self {
        Self { kernel: (k, k), stride: (stride, stride), padding: (padding, padding), groups: 1 }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 || self.groups == 0 {
            return Err(Error::Shape(format!(
                "kernel/stride/groups must be positive: k={kh}x{kw} s={sh}x{sw} g={}",
                self.groups
            )));
        }
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(Error::Shape(format!(
                "kernel {kh}x{kw} does not fit input {h}x{w} with padding {ph}x{pw}"
            )));
        }
        let oh = (h + 2 * ph - kh) / sh + 1;
        let ow = (w + 2 * pw - kw) / sw + 1;
        Ok((oh, ow))
    }
}

fn validate_conv(input: &Tensor, weight: &Tensor, bias: Option<&[f32]>, p: &ConvParams) -> Result<(usize, usize)> {
    let (_, c_in, h, w) = input.shape();
    let (out_c, wc, kh, kw) = weight.shape();
    if (kh, kw) != p.kernel {
        return Err(Error::Shape(format!(
            "weight kernel {kh}x{kw} != params kernel {}x{}",
            p.kernel.0, p.kernel.1
        )));
    }
    if c_in % p.groups != 0 || out_c % p.groups != 0 {
        return Err(Error::Shape(format!(
            "channels not divisible by groups: in={c_in} out={out_c} groups={}",
            p.groups
        )));
    }
    if wc != c_in / p.groups {
        return Err(Error::Shape(format!(
            "weight expects {wc} input channels per group, input has {c_in}/{} = {}",
            p.groups,
            c_in / p.groups
        )));
    }
    if let Some(b) = bias {
        if b.len() != out_c {
            return Err(Error::Shape(format!(
                "bias length {} != out channels {out_c}",
                b.len()
            )));
        }
    }
    p.out_dims(h, w)
}

/// 16-lane partial-sum dot product. The fixed lane structure keeps the
/// reduction order deterministic while letting the compiler vectorize it.
#[inline]
fn dot16(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 16];
    let chunks = a.len() / 16;
    for i in 0..chunks {
        let ab = &a[i * 16..i * 16 + 16];
        let bb = &b[i * 16..i * 16 + 16];
        for j in 0..16 {
            acc[j] += ab[j] * bb[j];
        }
    }
    let mut tail = 0.0f32;
    for k in chunks * 16..a.len() {
        tail += a[k] * b[k];
    }
    let mut pairs = [0.0f32; 8];
    for j in 0..8 {
        pairs[j] = acc[2 * j] + acc[2 * j + 1];
    }
    let q0 = (pairs[0] + pairs[1]) + (pairs[2] + pairs[3]);
    let q1 = (pairs[4] + pairs[5]) + (pairs[6] + pairs[7]);
    (q0 + q1) + tail
}

/// Workspace cap for the im2col strip buffer (floats).
const STRIP_FLOATS: usize = 2 * 1024 * 1024;

/// 2-D convolution, im2col + GEMM lowering. Zero padding, f32 accumulation.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&[f32]>, p: &ConvParams) -> Result<Tensor> {
    let (oh, ow) = validate_conv(input, weight, bias, p)?;
    let (n, c_in, h, w) = input.shape();
    let out_c = weight.n();
    let g = p.groups;
    let cg = c_in / g;
    let og = out_c / g;
    let (kh, kw) = p.kernel;
    let (sh, sw) = p.stride;
    let (ph, pw) = p.padding;
    let k_len = cg * kh * kw;

    let rows_per_strip = (STRIP_FLOATS / (k_len * ow)).clamp(1, oh);
    let mut cols = vec![0.0f32; rows_per_strip * ow * k_len];
    note_workspace(cols.len() * 4);

    let mut out = Tensor::zeros(n, out_c, oh, ow);
    let hw = h * w;
    let ohw = oh * ow;

    for in_ in 0..n {
        for gi in 0..g {
            let mut oy0 = 0;
            while oy0 < oh {
                let oy1 = (oy0 + rows_per_strip).min(oh);
                // Patch-major im2col: each output pixel's receptive field is a
                // contiguous K-slice ordered (channel, ky, kx), matching the
                // weight row layout so the GEMM is a plain dot per output.
                for oy in oy0..oy1 {
                    for ox in 0..ow {
                        let patch = &mut cols[((oy - oy0) * ow + ox) * k_len..((oy - oy0) * ow + ox + 1) * k_len];
                        let iy0 = (oy * sh) as isize - ph as isize;
                        let ix0 = (ox * sw) as isize - pw as isize;
                        let mut idx = 0;
                        for ic in 0..cg {
                            let plane = &input.data[(in_ * c_in + gi * cg + ic) * hw..(in_ * c_in + gi * cg + ic + 1) * hw];
                            for ky in 0..kh {
                                let iy = iy0 + ky as isize;
                                if iy < 0 || iy >= h as isize {
                                    patch[idx..idx + kw].fill(0.0);
                                    idx += kw;
                                    continue;
                                }
                                let row = &plane[iy as usize * w..(iy as usize + 1) * w];
                                for kx in 0..kw {
                                    let ix = ix0 + kx as isize;
                                    patch[idx] = if ix < 0 || ix >= w as isize { 0.0 } else { row[ix as usize] };
                                    idx += 1;
                                }
                            }
                        }
                    }
                }
                let npix = (oy1 - oy0) * ow;
                for oc in 0..og {
                    let oc_abs = gi * og + oc;
                    let w_row = &weight.data[oc_abs * k_len..(oc_abs + 1) * k_len];
                    let b = bias.map_or(0.0, |b| b[oc_abs]);
                    let out_plane = &mut out.data[(in_ * out_c + oc_abs) * ohw + oy0 * ow..(in_ * out_c + oc_abs) * ohw + oy0 * ow + npix];
                    for (pix, o) in out_plane.iter_mut().enumerate() {
                        *o = dot16(w_row, &cols[pix * k_len..(pix + 1) * k_len]) + b;
                    }
                }
                oy0 = oy1;
            }
        }
    }
    Ok(out)
}

/// Naive direct-loop convolution: the trust anchor the GEMM path is checked
/// against. Scalar accumulation in (channel, ky, kx) order.
pub fn conv2d_direct(input: &Tensor, weight: &Tensor, bias: Option<&[f32]>, p: &ConvParams) -> Result<Tensor> {
    let (oh, ow) = validate_conv(input, weight, bias, p)?;
    let (n, c_in, h, w) = input.shape();
    let out_c = weight.n();
    let g = p.groups;
    let cg = c_in / g;
    let og = out_c / g;
    let (kh, kw) = p.kernel;
    let (sh, sw) = p.stride;
    let (ph, pw) = p.padding;

    let mut out = Tensor::zeros(n, out_c, oh, ow);
    for in_ in 0..n {
        for oc_abs in 0..out_c {
            let gi = oc_abs / og;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f32;
                    for ic in 0..cg {
                        for ky in 0..kh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += input.at(in_, gi * cg + ic, iy as usize, ix as usize)
                                    * weight.at(oc_abs, ic, ky, kx);
                            }
                        }
                    }
                    *out.at_mut(in_, oc_abs, oy, ox) = acc + bias.map_or(0.0, |b| b[oc_abs]);
                }
            }
        }
    }
    Ok(out)
}

fn pool(input: &Tensor, k: usize, stride: usize, pad: usize, avg: bool) -> Result<Tensor> {
    if k == 0 {
        return Err(Error::Shape("pool kernel must be positive".into()));
    }
    let p = ConvParams::new(k, stride, pad);
    let (n, c, h, w) = input.shape();
    let (oh, ow) = p.out_dims(h, w)?;
    let mut out = Tensor::zeros(n, c, oh, ow);
    let inv = 1.0 / (k * k) as f32;
    for in_ in 0..n {
        for ic in 0..c {
            let plane = input.plane(in_, ic);
            for oy in 0..oh {
                for ox in 0..ow {
                    let iy0 = (oy * stride) as isize - pad as isize;
                    let ix0 = (ox * stride) as isize - pad as isize;
                    let v = if avg {
                        // count-include-pad: padded cells contribute 0 and the
                        // divisor is always k*k
                        let mut sum = 0.0f32;
                        for ky in 0..k {
                            let iy = iy0 + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = ix0 + kx as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                sum += plane[iy as usize * w + ix as usize];
                            }
                        }
                        sum * inv
                    } else {
                        // padding is -inf: it never wins the max
                        let mut m = f32::NEG_INFINITY;
                        for ky in 0..k {
                            let iy = iy0 + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = ix0 + kx as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                m = m.max(plane[iy as usize * w + ix as usize]);
                            }
                        }
                        m
                    };
                    *out.at_mut(in_, ic, oy, ox) = v;
                }
            }
        }
    }
    Ok(out)
}

pub fn maxpool2d(input: &Tensor, k: usize, stride: usize, pad: usize) -> Result<Tensor> {
    pool(input, k, stride, pad, false)
}

pub fn avgpool2d(input: &Tensor, k: usize, stride: usize, pad: usize) -> Result<Tensor> {
    pool(input, k, stride, pad, true)
}

#[inline]
pub fn sigmoid_scalar(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu_scalar(x: f32) -> f32 {
    x * sigmoid_scalar(x)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(silu_scalar)
}

pub fn silu_inplace(x: &mut Tensor) {
    for v in x.data_mut() {
        *v = silu_scalar(*v);
    }
}

/// Per-channel inference batchnorm parameters.
#[derive(Debug, Clone)]
pub struct BnParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f32,
}

impl BnParams {
    pub fn identity(c: usize) -> Self {
        Self { gamma: vec![1.0; c], beta: vec![0.0; c], mean: vec![0.0; c], var: vec![1.0; c], eps: 0.0 }
    }

    fn check(&self, c: usize) -> Result<()> {
        for (name, v) in [
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("mean", &self.mean),
            ("var", &self.var),
        ] {
            if v.len() != c {
                return Err(Error::Shape(format!(
                    "batchnorm {name} length {} != channels {c}",
                    v.len()
                )));
            }
        }
        Ok(())
    }
}

/// y = gamma * (x - mean) / sqrt(var + eps) + beta, per channel.
pub fn batchnorm_infer(input: &Tensor, bn: &BnParams) -> Result<Tensor> {
    let (n, c, h, w) = input.shape();
    bn.check(c)?;
    let mut out = input.clone();
    let hw = h * w;
    for in_ in 0..n {
        for ic in 0..c {
            let scale = bn.gamma[ic] / (bn.var[ic] + bn.eps).sqrt();
            let shift = bn.beta[ic] - bn.mean[ic] * scale;
            let base = (in_ * c + ic) * hw;
            for v in &mut out.data[base..base + hw] {
                *v = *v * scale + shift;
            }
        }
    }
    Ok(out)
}

/// Folds batchnorm into the preceding conv's weights and bias, so that
/// conv(folded) == bn(conv(original)).
pub fn fold_bn_into_conv(weight: &Tensor, bias: Option<&[f32]>, bn: &BnParams) -> Result<(Tensor, Vec<f32>)> {
    let (out_c, cg, kh, kw) = weight.shape();
    bn.check(out_c)?;
    let mut w2 = weight.clone();
    let mut b2 = vec![0.0f32; out_c];
    let klen = cg * kh * kw;
    for oc in 0..out_c {
        let scale = bn.gamma[oc] / (bn.var[oc] + bn.eps).sqrt();
        for v in &mut w2.data[oc * klen..(oc + 1) * klen] {
            *v *= scale;
        }
        let b = bias.map_or(0.0, |b| b[oc]);
        b2[oc] = (b - bn.mean[oc]) * scale + bn.beta[oc];
    }
    Ok((w2, b2))
}

/// Doubles h and w by pixel replication.
pub fn upsample_nearest2x(input: &Tensor) -> Tensor {
    let (n, c, h, w) = input.shape();
    let mut out = Tensor::zeros(n, c, 2 * h, 2 * w);
    for in_ in 0..n {
        for ic in 0..c {
            let src = input.plane(in_, ic);
            for y in 0..2 * h {
                let sy = y / 2;
                let dst_base = ((in_ * c + ic) * 2 * h + y) * 2 * w;
                for x in 0..2 * w {
                    out.data[dst_base + x] = src[sy * w + x / 2];
                }
            }
        }
    }
    out
}

/// Stacks tensors along the channel dim in argument order.
pub fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs.first().ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
    let (n, _, h, w) = first.shape();
    let mut c_total = 0;
    for t in inputs {
        let (tn, tc, th, tw) = t.shape();
        if (tn, th, tw) != (n, h, w) {
            return Err(Error::Shape(format!(
                "concat inputs disagree: {tn}x{tc}x{th}x{tw} vs batch {n}, spatial {h}x{w}"
            )));
        }
        c_total += tc;
    }
    let mut data = Vec::with_capacity(n * c_total * h * w);
    for in_ in 0..n {
        for t in inputs {
            data.extend_from_slice(t.channel_range(in_, 0, t.c()));
        }
    }
    Tensor::new(n, c_total, h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_close, rng, uniform_tensor};
    use rand::Rng;

    #[test]
    fn conv_identity_kernel() {
        let x = uniform_tensor(&mut rng(1), 1, 1, 4, 4, 1.0);
        let w = Tensor::new(1, 1, 1, 1, vec![1.0]).unwrap();
        let y = conv2d(&x, &w, None, &ConvParams::new(1, 1, 0)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut r = rng(2);
        let x = uniform_tensor(&mut r, 2, 3, 8, 8, 1.0);
        let w = uniform_tensor(&mut r, 5, 3, 3, 3, 1.0);
        let bias: Vec<f32> = (0..5).map(|_| r.gen_range(-1.0..1.0)).collect();
        let p = ConvParams::new(3, 2, 1);
        let fast = conv2d(&x, &w, Some(&bias), &p).unwrap();
        let naive = conv2d_direct(&x, &w, Some(&bias), &p).unwrap();
        assert_eq!(fast.shape(), (2, 5, 4, 4));
        assert_close(fast.data(), naive.data(), 1e-5);
    }

    #[test]
    fn conv_grouped_matches_naive() {
        let mut r = rng(3);
        let x = uniform_tensor(&mut r, 1, 8, 7, 9, 1.0);
        let w = uniform_tensor(&mut r, 8, 1, 3, 3, 1.0);
        let p = ConvParams::new(3, 1, 1).with_groups(8);
        let fast = conv2d(&x, &w, None, &p).unwrap();
        let naive = conv2d_direct(&x, &w, None, &p).unwrap();
        assert_close(fast.data(), naive.data(), 1e-5);
    }

    #[test]
    fn strip_pair_equals_rank1_depthwise() {
        let mut r = rng(4);
        let c = 6;
        let k = 7;
        let x = uniform_tensor(&mut r, 1, c, 12, 12, 1.0);
        let w_row = uniform_tensor(&mut r, c, 1, 1, k, 1.0);
        let w_col = uniform_tensor(&mut r, c, 1, k, 1, 1.0);
        let p_row = ConvParams { kernel: (1, k), stride: (1, 1), padding: (0, k / 2), groups: c };
        let p_col = ConvParams { kernel: (k, 1), stride: (1, 1), padding: (k / 2, 0), groups: c };
        let y_strips = conv2d(&conv2d(&x, &w_row, None, &p_row).unwrap(), &w_col, None, &p_col).unwrap();

        // rank-1 outer product kernel w_col * w_row^T per channel
        let w_full = Tensor::from_fn(c, 1, k, k, |ch, _, ky, kx| {
            w_col.at(ch, 0, ky, 0) * w_row.at(ch, 0, 0, kx)
        });
        let p_full = ConvParams::new(k, 1, k / 2).with_groups(c);
        let y_full = conv2d_direct(&x, &w_full, None, &p_full).unwrap();
        assert_close(y_strips.data(), y_full.data(), 1e-5);
    }

    #[test]
    fn conv_shape_errors_name_dims() {
        let x = Tensor::zeros(1, 3, 4, 4);
        let w = Tensor::zeros(4, 2, 3, 3);
        let err = conv2d(&x, &w, None, &ConvParams::new(3, 1, 1)).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
    }

    #[test]
    fn maxpool_constant_and_raster() {
        let x = Tensor::filled(1, 1, 6, 6, 3.0);
        let y = maxpool2d(&x, 5, 1, 2).unwrap();
        assert_eq!(y, x);

        let x = Tensor::from_fn(1, 1, 4, 4, |_, _, y, x| (y * 4 + x) as f32);
        let y = maxpool2d(&x, 2, 2, 0).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn maxpool_matches_naive_oracle() {
        let mut r = rng(5);
        let x = uniform_tensor(&mut r, 1, 2, 9, 9, 1.0);
        let y = maxpool2d(&x, 5, 1, 2).unwrap();
        // window-scan oracle
        for c in 0..2 {
            for oy in 0..9usize {
                for ox in 0..9usize {
                    let mut m = f32::NEG_INFINITY;
                    for ky in 0..5usize {
                        for kx in 0..5usize {
                            let iy = oy as isize + ky as isize - 2;
                            let ix = ox as isize + kx as isize - 2;
                            if iy >= 0 && iy < 9 && ix >= 0 && ix < 9 {
                                m = m.max(x.at(0, c, iy as usize, ix as usize));
                            }
                        }
                    }
                    assert_eq!(y.at(0, c, oy, ox), m);
                }
            }
        }
    }

    #[test]
    fn maxpool_rejects_zero_kernel() {
        assert!(maxpool2d(&Tensor::zeros(1, 1, 4, 4), 0, 1, 0).is_err());
    }

    #[test]
    fn avgpool_count_include_pad() {
        let x = Tensor::filled(1, 1, 5, 5, 1.0);
        let y = avgpool2d(&x, 3, 1, 1).unwrap();
        assert!((y.at(0, 0, 0, 0) - 4.0 / 9.0).abs() < 1e-6);
        assert!((y.at(0, 0, 0, 2) - 6.0 / 9.0).abs() < 1e-6);
        assert!((y.at(0, 0, 2, 2) - 1.0).abs() < 1e-6);

        let c = Tensor::filled(1, 1, 6, 6, 2.0);
        let yc = avgpool2d(&c, 3, 1, 0).unwrap();
        assert!(yc.data().iter().all(|v| (v - 2.0).abs() < 1e-6));
    }

    #[test]
    fn avgpool_matches_naive_oracle() {
        let mut r = rng(6);
        let x = uniform_tensor(&mut r, 1, 2, 8, 7, 1.0);
        let y = avgpool2d(&x, 3, 2, 1).unwrap();
        for c in 0..2 {
            for oy in 0..y.h() {
                for ox in 0..y.w() {
                    let mut sum = 0.0;
                    for ky in 0..3usize {
                        for kx in 0..3usize {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if iy >= 0 && iy < 8 && ix >= 0 && ix < 7 {
                                sum += x.at(0, c, iy as usize, ix as usize);
                            }
                        }
                    }
                    assert!((y.at(0, c, oy, ox) - sum / 9.0).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn activation_values() {
        assert_eq!(silu_scalar(0.0), 0.0);
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!((silu_scalar(10.0) - 9.999_546).abs() < 1e-4);
        // scan: sigmoid in (0,1) up to f32 saturation, silu above its global
        // minimum bound, never NaN
        let mut x = -20.0f32;
        while x <= 20.0 {
            let s = sigmoid_scalar(x);
            assert!((0.0..=1.0).contains(&s) && s.is_finite());
            if x.abs() <= 15.0 {
                assert!(s > 0.0 && s < 1.0);
            }
            assert!(silu_scalar(x) >= -0.2785);
            x += 1e-3;
        }
    }

    #[test]
    fn batchnorm_identity_and_hand_case() {
        let x = uniform_tensor(&mut rng(7), 1, 3, 4, 4, 2.0);
        let y = batchnorm_infer(&x, &BnParams::identity(3)).unwrap();
        assert_eq!(y, x);

        let x = Tensor::filled(1, 1, 1, 1, 5.0);
        let bn = BnParams { gamma: vec![2.0], beta: vec![1.0], mean: vec![3.0], var: vec![4.0], eps: 0.0 };
        let y = batchnorm_infer(&x, &bn).unwrap();
        assert!((y.at(0, 0, 0, 0) - 3.0).abs() < 1e-6);
    }

    #[test]
    fn bn_fold_matches_unfused() {
        let mut r = rng(8);
        let x = uniform_tensor(&mut r, 1, 3, 6, 6, 1.0);
        let w = uniform_tensor(&mut r, 4, 3, 3, 3, 1.0);
        let bn = BnParams {
            gamma: (0..4).map(|_| r.gen_range(0.5..1.5)).collect(),
            beta: (0..4).map(|_| r.gen_range(-0.5..0.5)).collect(),
            mean: (0..4).map(|_| r.gen_range(-0.5..0.5)).collect(),
            var: (0..4).map(|_| r.gen_range(0.1..2.0)).collect(),
            eps: 1e-5,
        };
        let p = ConvParams::new(3, 1, 1);
        let unfused = batchnorm_infer(&conv2d(&x, &w, None, &p).unwrap(), &bn).unwrap();
        let (wf, bf) = fold_bn_into_conv(&w, None, &bn).unwrap();
        let fused = conv2d(&x, &wf, Some(&bf), &p).unwrap();
        assert_close(fused.data(), unfused.data(), 1e-5);
    }

    #[test]
    fn bn_length_mismatch_errors() {
        let bn = BnParams { gamma: vec![1.0], beta: vec![0.0; 2], mean: vec![0.0; 2], var: vec![1.0; 2], eps: 0.0 };
        assert!(batchnorm_infer(&Tensor::zeros(1, 2, 2, 2), &bn).is_err());
    }

    #[test]
    fn upsample_and_concat() {
        let x = Tensor::filled(1, 1, 1, 1, 7.0);
        let y = upsample_nearest2x(&x);
        assert_eq!(y.shape(), (1, 1, 2, 2));
        assert!(y.data().iter().all(|&v| v == 7.0));

        let a = uniform_tensor(&mut rng(9), 1, 3, 4, 4, 1.0);
        let b = uniform_tensor(&mut rng(10), 1, 5, 4, 4, 1.0);
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), (1, 8, 4, 4));
        assert_eq!(cat.channel_range(0, 0, 3), a.data());

        let bad = Tensor::zeros(1, 2, 3, 4);
        assert!(concat_channels(&[&a, &bad]).is_err());
    }

    #[test]
    fn upsample_then_avgpool_is_identity() {
        let x = uniform_tensor(&mut rng(11), 1, 2, 5, 5, 1.0);
        let y = avgpool2d(&upsample_nearest2x(&x), 2, 2, 0).unwrap();
        assert_close(y.data(), x.data(), 1e-6);
    }
}
