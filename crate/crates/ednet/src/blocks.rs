//! The detector's block zoo: ConvBNSiLU, SCDown, SPPF, PSA, partial
//! convolution, Context Anchor Attention, the FCA bottleneck and C2f-FCA.
//!
//! Blocks are stateless transforms over (input, weights). Weights live in a
//! flat name -> tensor map; each block declares its slot schema (names and
//! shapes) so weight sets can be validated and generated mechanically.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{
    avgpool2d, concat_channels, fold_bn_into_conv, maxpool2d, sigmoid_scalar, silu_inplace,
    BnParams, ConvParams, Tensor,
};

/// Batchnorm epsilon used throughout the graph.
pub const BN_EPS: f32 = 1e-3;

pub type WeightMap = BTreeMap<String, Tensor>;

/// A declared weight slot: fully-qualified name plus expected shape
/// (4-d for conv kernels, 1-d for vectors).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Read access into a weight map under a node prefix.
#[derive(Clone, Copy)]
pub struct WeightView<'a> {
    map: &'a WeightMap,
    prefix: &'a str,
}

impl<'a> WeightView<'a> {
    pub fn new(map: &'a WeightMap, prefix: &'a str) -> Self {
        Self { map, prefix }
    }

    pub fn full_name(&self, slot: &str) -> String {
        if self.prefix.is_empty() {
            slot.to_string()
        } else {
            format!("{}.{}", self.prefix, slot)
        }
    }

    pub fn get(&self, slot: &str) -> Result<&'a Tensor> {
        let name = self.full_name(slot);
        self.map
            .get(&name)
            .ok_or_else(|| Error::Schema(format!("missing weight slot '{name}'")))
    }

    fn vec(&self, slot: &str, len: usize) -> Result<Vec<f32>> {
        let t = self.get(slot)?;
        if t.len() != len {
            return Err(Error::Schema(format!(
                "slot '{}' has {} elements, expected {len}",
                self.full_name(slot),
                t.len()
            )));
        }
        Ok(t.data().to_vec())
    }
}

/// Routes conv executions so the quantization layer can observe or replace
/// them. The default float executor just runs the GEMM lowering.
pub trait ConvExec {
    fn conv(
        &mut self,
        site: &str,
        x: &Tensor,
        weight: &Tensor,
        bias: Option<&[f32]>,
        p: &ConvParams,
    ) -> Result<Tensor>;
}

/// Plain float execution.
pub struct FloatExec;

impl ConvExec for FloatExec {
    fn conv(
        &mut self,
        _site: &str,
        x: &Tensor,
        weight: &Tensor,
        bias: Option<&[f32]>,
        p: &ConvParams,
    ) -> Result<Tensor> {
        crate::tensor::conv2d(x, weight, bias, p)
    }
}

fn bn_params(w: &WeightView, unit: &str, c: usize) -> Result<BnParams> {
    Ok(BnParams {
        gamma: w.vec(&format!("{unit}.bn.gamma"), c)?,
        beta: w.vec(&format!("{unit}.bn.beta"), c)?,
        mean: w.vec(&format!("{unit}.bn.mean"), c)?,
        var: w.vec(&format!("{unit}.bn.var"), c)?,
        eps: BN_EPS,
    })
}

/// Conv + folded batchnorm, optional SiLU. The workhorse unit every block
/// is assembled from.
fn conv_bn_unit(
    ctx: &mut dyn ConvExec,
    w: &WeightView,
    unit: &str,
    x: &Tensor,
    p: &ConvParams,
    act: bool,
) -> Result<Tensor> {
    let weight = w.get(&format!("{unit}.weight"))?;
    let oc = weight.n();
    let bn = bn_params(w, unit, oc)?;
    let (wf, bf) = fold_bn_into_conv(weight, None, &bn)?;
    let mut y = ctx.conv(&w.full_name(unit), x, &wf, Some(&bf), p)?;
    if act {
        silu_inplace(&mut y);
    }
    Ok(y)
}

fn plain_conv_unit(
    ctx: &mut dyn ConvExec,
    w: &WeightView,
    unit: &str,
    x: &Tensor,
    p: &ConvParams,
) -> Result<Tensor> {
    let weight = w.get(&format!("{unit}.weight"))?;
    let bias = w.vec(&format!("{unit}.bias"), weight.n())?;
    ctx.conv(&w.full_name(unit), x, weight, Some(&bias), p)
}

fn push_conv_bn_slots(out: &mut Vec<SlotSpec>, prefix: &str, unit: &str, oc: usize, cg: usize, kh: usize, kw: usize) {
    let base = if prefix.is_empty() { unit.to_string() } else { format!("{prefix}.{unit}") };
    out.push(SlotSpec { name: format!("{base}.weight"), shape: vec![oc, cg, kh, kw] });
    for p in ["gamma", "beta", "mean", "var"] {
        out.push(SlotSpec { name: format!("{base}.bn.{p}"), shape: vec![oc] });
    }
}

fn push_plain_conv_slots(out: &mut Vec<SlotSpec>, prefix: &str, unit: &str, oc: usize, cg: usize, kh: usize, kw: usize) {
    let base = if prefix.is_empty() { unit.to_string() } else { format!("{prefix}.{unit}") };
    out.push(SlotSpec { name: format!("{base}.weight"), shape: vec![oc, cg, kh, kw] });
    out.push(SlotSpec { name: format!("{base}.bias"), shape: vec![oc] });
}

// ---------------------------------------------------------------------------
// ConvBNSiLU

#[derive(Debug, Clone, Copy)]
pub struct ConvBnSilu {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvBnSilu {
    pub fn slots(&self) -> Vec<SlotSpec> {
        let mut v = Vec::new();
        push_conv_bn_slots(&mut v, "", "conv", self.c_out, self.c_in, self.k, self.k);
        v
    }

    pub fn forward(&self, ctx: &mut dyn ConvExec, w: &WeightView, x: &Tensor) -> Result<Tensor> {
        let p = ConvParams::new(self.k, self.stride, self.k / 2);
        conv_bn_unit(ctx, w, "conv", x, &p, true)
    }
}

pub fn conv_bn_silu(x: &Tensor, w: &WeightView, c_out: usize, k: usize, stride: usize) -> Result<Tensor> {
    ConvBnSilu { c_in: x.c(), c_out, k, stride }.forward(&mut FloatExec, w, x)
}

// ---------------------------------------------------------------------------
// SCDown: 1x1 channel projection then stride-2 depthwise 3x3

#[derive(Debug, Clone, Copy)]
pub struct ScDown {
    pub c_in: usize,
    pub c_out: usize,
}

impl ScDown {
    pub fn slots(&self) -> Vec<SlotSpec> {
        let mut v = Vec::new();
        push_conv_bn_slots(&mut v, "", "cv1", self.c_out, self.c_in, 1, 1);
        push_conv_bn_slots(&mut v, "", "cv2", self.c_out, 1, 3, 3);
        v
    }

    pub fn forward(&self, ctx: &mut dyn ConvExec, w: &WeightView, x: &Tensor) -> Result<Tensor> {
        if x.c() != self.c_in {
            return Err(Error::Schema(format!(
                "scdown expects {} input channels, got {}",
                self.c_in,
                x.c()
            )));
        }
        let y = conv_bn_unit(ctx, w, "cv1", x, &ConvParams::new(1, 1, 0), true)?;
        conv_bn_unit(ctx, w, "cv2", &y, &ConvParams::new(3, 2, 1).with_groups(self.c_out), false)
    }
}

pub fn scdown(x: &Tensor, w: &WeightView, c_out: usize) -> Result<Tensor> {
    ScDown { c_in: x.c(), c_out }.forward(&mut FloatExec, w, x)
}

// ---------------------------------------------------------------------------
// SPPF: three sequential 5x5 maxpools, concat, fuse

#[derive(Debug, Clone, Copy)]
pub struct Sppf {
    pub c_in: usize,
    pub c_out: usize,
}

impl Sppf {
    fn hidden(&self) -> usize {
        self.c_in / 2
    }

    pub fn slots(&self) -> Vec<SlotSpec> {
        let mut v = Vec::new();
        push_conv_bn_slots(&mut v, "", "cv1", self.hidden(), self.c_in, 1, 1);
        push_conv_bn_slots(&mut v, "", "cv2", self.c_out, 4 * self.hidden(), 1, 1);
        v
    }

    pub fn forward(&self, ctx: &mut dyn ConvExec, w: &WeightView, x: &Tensor) -> Result<Tensor> {
        let y0 = conv_bn_unit(ctx, w, "cv1", x, &ConvParams::new(1, 1, 0), true)?;
        let y1 = maxpool2d(&y0, 5, 1, 2)?;
        let y2 = maxpool2d(&y1, 5, 1, 2)?;
        let y3 = maxpool2d(&y2, 5, 1, 2)?;
        let cat = concat_channels(&[&y0, &y1, &y2, &y3])?;
        conv_bn_unit(ctx, w, "cv2", &cat, &ConvParams::new(1, 1, 0), true)
    }
}

pub fn sppf(x: &Tensor, w: &WeightView, c_out: usize) -> Result<Tensor> {
    Sppf { c_in: x.c(), c_out }.forward(&mut FloatExec, w, x)
}

// ---------------------------------------------------------------------------
// PSA: half the channels pass through one self-attention + FFN stage

#[derive(Debug, Clone, Copy)]
pub struct Psa {
    pub channels: usize,
    pub heads: usize,
}

impl Psa {
    fn hidden(&self) -> usize {
        self.channels / 2
    }

    pub fn check(&self) -> Result<()> {
        let h = self.hidden();
        if self.channels % 2 != 0 {
            return Err(Error::Schema(format!("psa channels {} must be even", self.channels)));
        }
        if self.heads == 0 || h % self.heads != 0 {
            return Err(Error::Schema(format!(
                "psa hidden {h} not divisible by {} heads",
                self.heads
            )));
        }
        if (h / self.heads) % 2 != 0 {
            return Err(Error::Schema(format!(
                "psa head dim {} must be even",
                h / self.heads
            )));
        }
        Ok(())
    }

    pub fn slots(&self) -> Vec<SlotSpec> {
        let h = self.hidden();
        let mut v = Vec::new();
        push_conv_bn_slots(&mut v, "", "cv1", 2 * h, self.channels, 1, 1);
        push_conv_bn_slots(&mut v, "", "cv2", self.channels, 2 * h, 1, 1);
        push_plain_conv_slots(&mut v, "", "attn.qkv", 2 * h, h, 1, 1);
        push_plain_conv_slots(&mut v, "", "attn.proj", h, h, 1, 1);
        push_plain_conv_slots(&mut v, "", "attn.pe", h, 1, 3, 3);
        push_conv_bn_slots(&mut v, "", "ffn1", 2 * h, h, 1, 1);
        push_conv_bn_slots(&mut v, "", "ffn2", h, 2 * h, 1, 1);
        v
    }

    pub fn forward(&self, ctx: &mut dyn ConvExec, w: &WeightView, x: &Tensor) -> Result<Tensor> {
        self.check()?;
        let h = self.hidden();
        let y = conv_bn_unit(ctx, w, "cv1", x, &ConvParams::new(1, 1, 0), true)?;
        let a = y.slice_channels(0, h);
        let mut b = y.slice_channels(h, 2 * h);

        // attention branch with residual
        let qkv = plain_conv_unit(ctx, w, "attn.qkv", &b, &ConvParams::new(1, 1, 0))?;
        let attn_out = self.attention(&qkv, &b, ctx, w)?;
        let proj = plain_conv_unit(ctx, w, "attn.proj", &attn_out, &ConvParams::new(1, 1, 0))?;
        for (bv, pv) in b.data_mut().iter_mut().zip(proj.data()) {
            *bv += pv;
        }

        // pointwise FFN with residual
        let f = conv_bn_unit(ctx, w, "ffn1", &b, &ConvParams::new(1, 1, 0), true)?;
        let f = conv_bn_unit(ctx, w, "ffn2", &f, &ConvParams::new(1, 1, 0), false)?;
        for (bv, fv) in b.data_mut().iter_mut().zip(f.data()) {
            *bv += fv;
        }

        let cat = concat_channels(&[&a, &b])?;
        conv_bn_unit(ctx, w, "cv2", &cat, &ConvParams::new(1, 1, 0), true)
    }

    /// Per-head scaled dot-product over the h*w positions. `qkv` carries
    /// [q | k | v] channel blocks of sizes [h/2, h/2, h]; v additionally
    /// receives a depthwise positional-encoding conv.
    fn attention(
        &self,
        qkv: &Tensor,
        v_shape: &Tensor,
        ctx: &mut dyn ConvExec,
        w: &WeightView,
    ) -> Result<Tensor> {
        let h = self.hidden();
        let hd = h / self.heads;
        let kd = hd / 2;
        let (n, _, hh, ww) = v_shape.shape();
        let npos = hh * ww;

        let q_all = qkv.slice_channels(0, h / 2);
        let k_all = qkv.slice_channels(h / 2, h);
        let v_all = qkv.slice_channels(h, 2 * h);
        let pe = plain_conv_unit(ctx, w, "attn.pe", &v_all, &ConvParams::new(3, 1, 1).with_groups(h))?;

        let mut out = Tensor::zeros(n, h, hh, ww);
        let scale = 1.0 / (kd as f32).sqrt();
        let mut scores = vec![0.0f32; npos];
        for in_ in 0..n {
            for head in 0..self.heads {
                let q = q_all.channel_range(in_, head * kd, (head + 1) * kd);
                let k = k_all.channel_range(in_, head * kd, (head + 1) * kd);
                let v = v_all.channel_range(in_, head * hd, (head + 1) * hd);
                for i in 0..npos {
                    for (j, s) in scores.iter_mut().enumerate() {
                        let mut dot = 0.0f32;
                        for c in 0..kd {
                            dot += q[c * npos + i] * k[c * npos + j];
                        }
                        *s = dot * scale;
                    }
                    softmax_inplace(&mut scores);
                    for c in 0..hd {
                        let vrow = &v[c * npos..(c + 1) * npos];
                        let mut acc = 0.0f32;
                        for (j, &a) in scores.iter().enumerate() {
                            acc += a * vrow[j];
                        }
                        *out.at_mut(in_, head * hd + c, i / ww, i % ww) = acc;
                    }
                }
            }
        }
        for (ov, pv) in out.data_mut().iter_mut().zip(pe.data()) {
            *ov += pv;
        }
        Ok(out)
    }
}

/// Numerically-stable softmax (max subtraction), normalized to sum 1.
pub(crate) fn softmax_inplace(xs: &mut [f32]) {
    let m = xs.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut z = 0.0f32;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    for x in xs.iter_mut() {
        *x /= z;
    }
}

pub fn psa(x: &Tensor, w: &WeightView, heads: usize) -> Result<Tensor> {
    Psa { channels: x.c(), heads }.forward(&mut FloatExec, w, x)
}

// ---------------------------------------------------------------------------
// Partial convolution: 3x3 spatial mixing on a channel slice

#[derive(Debug, Clone, Copy)]
pub struct PartialConv {
    pub channels: usize,
    pub ratio: f64,
}

impl PartialConv {
    pub fn mixed_channels(&self) -> usize {
        ((self.channels as f64 * self.ratio) as usize).max(1)
    }

    pub fn slots(&self, prefix: &str) -> Vec<SlotSpec> {
        let cp = self.mixed_channels();
        let mut v = Vec::new();
        push_plain_conv_slots(&mut v, prefix, "conv", cp, cp, 3, 3);
        v
    }

    pub fn forward(&self, ctx: &mut dyn ConvExec, w: &WeightView, x: &Tensor) -> Result<Tensor> {
        let cp = self.mixed_channels();
        if cp == x.c() {
            return plain_conv_unit(ctx, w, "conv", x, &ConvParams::new(3, 1, 1));
        }
        let head = x.slice_channels(0, cp);
        let tail = x.slice_channels(cp, x.c());
        let mixed = plain_conv_unit(ctx, w, "conv", &head, &ConvParams::new(3, 1, 1))?;
        concat_channels(&[&mixed, &tail])
    }
}

pub fn partial_conv(x: &Tensor, w: &WeightView, ratio: f64) -> Result<Tensor> {
    PartialConv { channels: x.c(), ratio }.forward(&mut FloatExec, w, x)
}

// ---------------------------------------------------------------------------
// Context Anchor Attention (CAA)

/// CAA geometry: strip kernel length must be odd so the strip paddings
/// preserve spatial dims. `mid_channels` is the width of the internal
/// pooled-feature path.
#[derive(Debug, Clone, Copy)]
pub struct CaaConfig {
    pub k_b: usize,
    pub channels: usize,
    pub mid_channels: usize,
}

impl CaaConfig {
    pub fn new(channels: usize) -> Self {
        Self { k_b: 11, channels, mid_channels: channels * 3 / 2 }
    }

    pub fn check(&self) -> Result<()> {
        if self.k_b < 3 || self.k_b % 2 == 0 {
            return Err(Error::Schema(format!("caa strip kernel {} must be odd and >= 3", self.k_b)));
        }
        Ok(())
    }

    pub fn slots(&self, prefix: &str) -> Vec<SlotSpec> {
        let (c, m) = (self.channels, self.mid_channels);
        let mut v = Vec::new();
        push_conv_bn_slots(&mut v, prefix, "conv1", m, c, 1, 1);
        push_plain_conv_slots(&mut v, prefix, "dw_w", m, 1, 1, self.k_b);
        push_plain_conv_slots(&mut v, prefix, "dw_h", m, 1, self.k_b, 1);
        push_plain_conv_slots(&mut v, prefix, "conv2", c, m, 1, 1);
        v
    }
}

/// The attention map A in (0,1)^{c x h x w}: local average pooling, pointwise
/// projection, two depthwise strip convolutions, pointwise back-projection,
/// sigmoid.
pub fn caa_map(ctx: &mut dyn ConvExec, w: &WeightView, cfg: &CaaConfig, x: &Tensor) -> Result<Tensor> {
    cfg.check()?;
    let kb = cfg.k_b;
    let pooled = avgpool2d(x, 7, 1, 3)?;
    let f_pool = conv_bn_unit(ctx, w, "conv1", &pooled, &ConvParams::new(1, 1, 0), true)?;
    let m = cfg.mid_channels;
    let p_row = ConvParams { kernel: (1, kb), stride: (1, 1), padding: (0, kb / 2), groups: m };
    let f_w = plain_conv_unit(ctx, w, "dw_w", &f_pool, &p_row)?;
    let p_col = ConvParams { kernel: (kb, 1), stride: (1, 1), padding: (kb / 2, 0), groups: m };
    let f_h = plain_conv_unit(ctx, w, "dw_h", &f_w, &p_col)?;
    let logits = plain_conv_unit(ctx, w, "conv2", &f_h, &ConvParams::new(1, 1, 0))?;
    Ok(logits.map(sigmoid_scalar))
}

/// caa(x) = A(x) elementwise-multiplied with x.
pub fn caa(x: &Tensor, w: &WeightView, cfg: &CaaConfig) -> Result<Tensor> {
    let a = caa_map(&mut FloatExec, w, cfg, x)?;
    let mut out = x.clone();
    for (o, g) in out.data_mut().iter_mut().zip(a.data()) {
        *o *= g;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// FCA bottleneck: partial conv -> pointwise FFN -> CAA gate -> residual

#[derive(Debug, Clone, Copy)]
pub struct FcaBottleneck {
    pub channels: usize,
    pub partial_ratio: f64,
    pub expansion: usize,
    pub k_b: usize,
}

impl FcaBottleneck {
    pub fn new(channels: usize) -> Self {
        Self { channels, partial_ratio: 0.25, expansion: 2, k_b: 11 }
    }

    fn pconv(&self) -> PartialConv {
        PartialConv { channels: self.channels, ratio: self.partial_ratio }
    }

    fn caa_cfg(&self) -> CaaConfig {
        CaaConfig { k_b: self.k_b, ..CaaConfig::new(self.channels) }
    }

    pub fn slots(&self, prefix: &str) -> Vec<SlotSpec> {
        let c = self.channels;
        let e = self.expansion * c;
        let mut v = self.pconv().slots(&join(prefix, "pconv"));
        push_conv_bn_slots(&mut v, prefix, "pw1", e, c, 1, 1);
        push_conv_bn_slots(&mut v, prefix, "pw2", c, e, 1, 1);
        v.extend(self.caa_cfg().slots(&join(prefix, "caa")));
        v
    }

    pub fn forward(&self, ctx: &mut dyn ConvExec, w: &WeightView, x: &Tensor) -> Result<Tensor> {
        if x.c() != self.channels {
            return Err(Error::Schema(format!(
                "fca bottleneck expects {} channels, got {} (residual requires equal in/out)",
                self.channels,
                x.c()
            )));
        }
        let sub_pc = w.sub("pconv");
        let mixed = self.pconv().forward(ctx, &sub_pc.view(), x)?;
        let z = conv_bn_unit(ctx, w, "pw1", &mixed, &ConvParams::new(1, 1, 0), true)?;
        let z = conv_bn_unit(ctx, w, "pw2", &z, &ConvParams::new(1, 1, 0), false)?;
        let sub_caa = w.sub("caa");
        let a = caa_map(ctx, &sub_caa.view(), &self.caa_cfg(), &z)?;
        let mut out = x.clone();
        for ((o, zv), av) in out.data_mut().iter_mut().zip(z.data()).zip(a.data()) {
            *o += zv * av;
        }
        Ok(out)
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<'a> WeightView<'a> {
    fn sub(&self, name: &str) -> OwnedView<'a> {
        OwnedView { map: self.map, prefix: self.full_name(name) }
    }
}

/// WeightView with an owned prefix, produced when descending into sub-blocks.
pub struct OwnedView<'a> {
    map: &'a WeightMap,
    prefix: String,
}

impl<'a> OwnedView<'a> {
    pub fn view(&self) -> WeightView<'_> {
        WeightView { map: self.map, prefix: &self.prefix }
    }
}

pub fn fca_bottleneck(x: &Tensor, w: &WeightView, cfg: &FcaBottleneck) -> Result<Tensor> {
    cfg.forward(&mut FloatExec, w, x)
}

// ---------------------------------------------------------------------------
// C2f-FCA: split, chain bottlenecks, concat everything, fuse

#[derive(Debug, Clone, Copy)]
pub struct C2fFca {
    pub c_in: usize,
    pub c_out: usize,
    pub n: usize,
    /// false falls back to the plain two-conv bottleneck
    pub use_fca: bool,
    pub partial_ratio: f64,
    pub k_b: usize,
}

impl C2fFca {
    pub fn new(c_in: usize, c_out: usize, n: usize) -> Self {
        Self { c_in, c_out, n, use_fca: true, partial_ratio: 0.25, k_b: 11 }
    }

    fn hidden(&self) -> usize {
        self.c_out / 2
    }

    fn bottleneck(&self) -> FcaBottleneck {
        FcaBottleneck {
            channels: self.hidden(),
            partial_ratio: self.partial_ratio,
            expansion: 2,
            k_b: self.k_b,
        }
    }

    pub fn slots(&self) -> Vec<SlotSpec> {
        let h = self.hidden();
        let mut v = Vec::new();
        push_conv_bn_slots(&mut v, "", "cv1", 2 * h, self.c_in, 1, 1);
        push_conv_bn_slots(&mut v, "", "cv2", self.c_out, (2 + self.n) * h, 1, 1);
        for i in 0..self.n {
            if self.use_fca {
                v.extend(self.bottleneck().slots(&format!("m{i}")));
            } else {
                push_conv_bn_slots(&mut v, "", &format!("m{i}.cv1"), h, h, 3, 3);
                push_conv_bn_slots(&mut v, "", &format!("m{i}.cv2"), h, h, 3, 3);
            }
        }
        v
    }

    pub fn forward(&self, ctx: &mut dyn ConvExec, w: &WeightView, x: &Tensor) -> Result<Tensor> {
        if self.n < 1 {
            return Err(Error::Schema("c2f requires n >= 1 bottlenecks".into()));
        }
        let h = self.hidden();
        let y = conv_bn_unit(ctx, w, "cv1", x, &ConvParams::new(1, 1, 0), true)?;
        let mut parts: Vec<Tensor> = vec![y.slice_channels(0, h), y.slice_channels(h, 2 * h)];
        for i in 0..self.n {
            let prev = parts.last().unwrap();
            let next = if self.use_fca {
                let sub = w.sub(&format!("m{i}"));
                self.bottleneck().forward(ctx, &sub.view(), prev)?
            } else {
                let a = conv_bn_unit(ctx, w, &format!("m{i}.cv1"), prev, &ConvParams::new(3, 1, 1), true)?;
                let mut b = conv_bn_unit(ctx, w, &format!("m{i}.cv2"), &a, &ConvParams::new(3, 1, 1), true)?;
                for (bv, pv) in b.data_mut().iter_mut().zip(prev.data()) {
                    *bv += pv;
                }
                b
            };
            parts.push(next);
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        let cat = concat_channels(&refs)?;
        conv_bn_unit(ctx, w, "cv2", &cat, &ConvParams::new(1, 1, 0), true)
    }
}

pub fn c2f_fca(x: &Tensor, w: &WeightView, c_out: usize, n: usize) -> Result<Tensor> {
    C2fFca::new(x.c(), c_out, n).forward(&mut FloatExec, w, x)
}

// ---------------------------------------------------------------------------
// Detection head: box branch (bin logits) + class branch, concatenated

#[derive(Debug, Clone, Copy)]
pub struct Detect {
    pub c_in: usize,
    pub box_hidden: usize,
    pub cls_hidden: usize,
    pub num_classes: usize,
    pub reg_bins: usize,
}

impl Detect {
    pub fn out_channels(&self) -> usize {
        4 * self.reg_bins + self.num_classes
    }

    pub fn slots(&self) -> Vec<SlotSpec> {
        let mut v = Vec::new();
        push_conv_bn_slots(&mut v, "", "box0", self.box_hidden, self.c_in, 3, 3);
        push_conv_bn_slots(&mut v, "", "box1", self.box_hidden, self.box_hidden, 3, 3);
        push_plain_conv_slots(&mut v, "", "box2", 4 * self.reg_bins, self.box_hidden, 1, 1);
        push_conv_bn_slots(&mut v, "", "cls0", self.cls_hidden, self.c_in, 3, 3);
        push_conv_bn_slots(&mut v, "", "cls1", self.cls_hidden, self.cls_hidden, 3, 3);
        push_plain_conv_slots(&mut v, "", "cls2", self.num_classes, self.cls_hidden, 1, 1);
        v
    }

    pub fn forward(&self, ctx: &mut dyn ConvExec, w: &WeightView, x: &Tensor) -> Result<Tensor> {
        let b = conv_bn_unit(ctx, w, "box0", x, &ConvParams::new(3, 1, 1), true)?;
        let b = conv_bn_unit(ctx, w, "box1", &b, &ConvParams::new(3, 1, 1), true)?;
        let b = plain_conv_unit(ctx, w, "box2", &b, &ConvParams::new(1, 1, 0))?;
        let c = conv_bn_unit(ctx, w, "cls0", x, &ConvParams::new(3, 1, 1), true)?;
        let c = conv_bn_unit(ctx, w, "cls1", &c, &ConvParams::new(3, 1, 1), true)?;
        let c = plain_conv_unit(ctx, w, "cls2", &c, &ConvParams::new(1, 1, 0))?;
        concat_channels(&[&b, &c])
    }
}

// ---------------------------------------------------------------------------
// Schema helpers

pub fn slot_elements(s: &SlotSpec) -> usize {
    s.shape.iter().product()
}

/// Validates `map` against a schema: every slot present with the declared
/// shape, no extraneous entries.
pub fn validate_weights(map: &WeightMap, slots: &[SlotSpec]) -> Result<()> {
    for s in slots {
        let t = map
            .get(&s.name)
            .ok_or_else(|| Error::Schema(format!("missing weight slot '{}'", s.name)))?;
        let got: Vec<usize> = match s.shape.len() {
            1 => vec![t.len()],
            _ => {
                let (a, b, c, d) = t.shape();
                vec![a, b, c, d]
            }
        };
        if got != s.shape {
            return Err(Error::Schema(format!(
                "slot '{}' has shape {:?}, expected {:?}",
                s.name, got, s.shape
            )));
        }
    }
    if map.len() != slots.len() {
        let declared: std::collections::BTreeSet<&str> = slots.iter().map(|s| s.name.as_str()).collect();
        for name in map.keys() {
            if !declared.contains(name.as_str()) {
                return Err(Error::Schema(format!("extraneous weight slot '{name}'")));
            }
        }
    }
    Ok(())
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic per-slot initialization: conv weights and biases uniform in
/// [-1/sqrt(fan_in), 1/sqrt(fan_in)]; batchnorm slots get stable positive
/// statistics so synthetic forward passes stay bounded.
pub fn random_weights(slots: &[SlotSpec], seed: u64) -> WeightMap {
    let mut map = WeightMap::new();
    for s in slots {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&s.name));
        let n = slot_elements(s);
        let data: Vec<f32> = if s.name.ends_with(".bn.gamma") {
            (0..n).map(|_| rng.gen_range(0.8..1.2)).collect()
        } else if s.name.ends_with(".bn.beta") || s.name.ends_with(".bn.mean") {
            (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect()
        } else if s.name.ends_with(".bn.var") {
            (0..n).map(|_| rng.gen_range(0.5..1.5)).collect()
        } else {
            // fan_in of the owning conv; bias vectors reuse their conv's bound
            let fan_in: usize = if s.shape.len() == 4 {
                s.shape[1] * s.shape[2] * s.shape[3]
            } else {
                s.shape[0]
            };
            let b = 1.0 / (fan_in as f32).sqrt();
            (0..n).map(|_| rng.gen_range(-b..b)).collect()
        };
        let t = match s.shape.len() {
            4 => Tensor::new(s.shape[0], s.shape[1], s.shape[2], s.shape[3], data).unwrap(),
            _ => Tensor::new(1, 1, 1, n, data).unwrap(),
        };
        map.insert(s.name.clone(), t);
    }
    map
}

/// Sum of declared slot element counts; `folded` counts each batchnorm as its
/// two affine parameters (the other two fold away at inference).
pub fn param_count_slots(slots: &[SlotSpec], folded: bool) -> usize {
    let mut total = 0;
    for s in slots {
        let is_bn_stat = s.name.ends_with(".bn.mean") || s.name.ends_with(".bn.var");
        if folded && is_bn_stat {
            continue;
        }
        total += slot_elements(s);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{batchnorm_infer, conv2d, silu};
    use crate::testutil::{assert_close, rng, uniform_tensor};

    fn prefixed(slots: Vec<SlotSpec>, prefix: &str) -> Vec<SlotSpec> {
        slots
            .into_iter()
            .map(|mut s| {
                s.name = format!("{prefix}.{}", s.name);
                s
            })
            .collect()
    }

    #[test]
    fn conv_bn_silu_matches_unfused_oracle() {
        let blk = ConvBnSilu { c_in: 3, c_out: 4, k: 3, stride: 2 };
        let map = random_weights(&blk.slots(), 5);
        let w = WeightView::new(&map, "");
        let x = uniform_tensor(&mut rng(6), 1, 3, 8, 8, 1.0);
        let y = blk.forward(&mut FloatExec, &w, &x).unwrap();

        let kernel = map.get("conv.weight").unwrap();
        let bn = BnParams {
            gamma: map["conv.bn.gamma"].data().to_vec(),
            beta: map["conv.bn.beta"].data().to_vec(),
            mean: map["conv.bn.mean"].data().to_vec(),
            var: map["conv.bn.var"].data().to_vec(),
            eps: BN_EPS,
        };
        let raw = conv2d(&x, kernel, None, &ConvParams::new(3, 2, 1)).unwrap();
        let oracle = silu(&batchnorm_infer(&raw, &bn).unwrap());
        assert_close(y.data(), oracle.data(), 1e-5);
        assert_eq!(y.shape(), (1, 4, 4, 4));
    }

    #[test]
    fn conv_bn_silu_zero_weights_zero_output() {
        let blk = ConvBnSilu { c_in: 2, c_out: 3, k: 3, stride: 1 };
        let mut map = WeightMap::new();
        for s in blk.slots() {
            let n = slot_elements(&s);
            let fill = if s.name.ends_with(".bn.var") { 1.0 } else { 0.0 };
            let t = match s.shape.len() {
                4 => Tensor::filled(s.shape[0], s.shape[1], s.shape[2], s.shape[3], fill),
                _ => Tensor::filled(1, 1, 1, n, fill),
            };
            map.insert(s.name, t);
        }
        let w = WeightView::new(&map, "");
        let x = uniform_tensor(&mut rng(7), 1, 2, 5, 5, 1.0);
        let y = blk.forward(&mut FloatExec, &w, &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_bn_silu_missing_slot_names_it() {
        let blk = ConvBnSilu { c_in: 2, c_out: 3, k: 1, stride: 1 };
        let mut map = random_weights(&blk.slots(), 1);
        map.remove("conv.bn.var");
        let w = WeightView::new(&map, "");
        let err = blk.forward(&mut FloatExec, &w, &Tensor::zeros(1, 2, 4, 4)).unwrap_err();
        assert!(err.to_string().contains("conv.bn.var"), "{err}");
    }

    #[test]
    fn scdown_shape_and_param_count() {
        let blk = ScDown { c_in: 64, c_out: 128 };
        let map = random_weights(&blk.slots(), 2);
        let w = WeightView::new(&map, "");
        let x = uniform_tensor(&mut rng(8), 1, 64, 40, 40, 1.0);
        let y = blk.forward(&mut FloatExec, &w, &x).unwrap();
        assert_eq!(y.shape(), (1, 128, 20, 20));

        // exact slot sum: pointwise + depthwise + two bn quads
        let expect = 64 * 128 + 128 * 9 + 2 * 4 * 128;
        assert_eq!(param_count_slots(&blk.slots(), false), expect);
    }

    #[test]
    fn scdown_delta_kernel_subsamples() {
        // identity pointwise + centered delta depthwise = stride-2 subsample
        let c = 4;
        let blk = ScDown { c_in: c, c_out: c };
        let mut map = WeightMap::new();
        map.insert(
            "cv1.weight".into(),
            Tensor::from_fn(c, c, 1, 1, |o, i, _, _| if o == i { 1.0 } else { 0.0 }),
        );
        map.insert(
            "cv2.weight".into(),
            Tensor::from_fn(c, 1, 3, 3, |_, _, y, x| if (y, x) == (1, 1) { 1.0 } else { 0.0 }),
        );
        for unit in ["cv1", "cv2"] {
            map.insert(format!("{unit}.bn.gamma"), Tensor::filled(1, 1, 1, c, 1.0));
            map.insert(format!("{unit}.bn.beta"), Tensor::filled(1, 1, 1, c, 0.0));
            map.insert(format!("{unit}.bn.mean"), Tensor::filled(1, 1, 1, c, 0.0));
            map.insert(format!("{unit}.bn.var"), Tensor::filled(1, 1, 1, c, 1.0 - BN_EPS));
        }
        let w = WeightView::new(&map, "");
        // positive input so the cv1 silu is invertible enough to reason about:
        // silu(v) for v from a known grid, then subsampled
        let x = Tensor::from_fn(1, c, 8, 8, |_, ci, y, xx| (ci * 100 + y * 8 + xx) as f32 * 0.01 + 1.0);
        let y = blk.forward(&mut FloatExec, &w, &x).unwrap();
        assert_eq!(y.shape(), (1, c, 4, 4));
        for ci in 0..c {
            for yy in 0..4 {
                for xx in 0..4 {
                    let expect = crate::tensor::silu_scalar(x.at(0, ci, yy * 2, xx * 2));
                    assert!((y.at(0, ci, yy, xx) - expect).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn sppf_equals_parallel_spp() {
        let blk = Sppf { c_in: 16, c_out: 16 };
        let map = random_weights(&blk.slots(), 3);
        let w = WeightView::new(&map, "");
        let x = uniform_tensor(&mut rng(9), 1, 16, 12, 12, 1.0);

        // reproduce the middle concat from parallel pools with k = 5, 9, 13
        let y0 = conv_bn_unit(&mut FloatExec, &w, "cv1", &x, &ConvParams::new(1, 1, 0), true).unwrap();
        let seq1 = maxpool2d(&y0, 5, 1, 2).unwrap();
        let seq2 = maxpool2d(&seq1, 5, 1, 2).unwrap();
        let seq3 = maxpool2d(&seq2, 5, 1, 2).unwrap();
        let par1 = maxpool2d(&y0, 5, 1, 2).unwrap();
        let par2 = maxpool2d(&y0, 9, 1, 4).unwrap();
        let par3 = maxpool2d(&y0, 13, 1, 6).unwrap();
        assert_eq!(seq1, par1);
        assert_eq!(seq2, par2);
        assert_eq!(seq3, par3);

        let y = blk.forward(&mut FloatExec, &w, &x).unwrap();
        assert_eq!(y.shape(), (1, 16, 12, 12), "spatial dims preserved");
    }

    #[test]
    fn sppf_constant_input_constant_branches() {
        let blk = Sppf { c_in: 8, c_out: 8 };
        let map = random_weights(&blk.slots(), 4);
        let w = WeightView::new(&map, "");
        let x = Tensor::filled(1, 8, 6, 6, 0.7);
        let y0 = conv_bn_unit(&mut FloatExec, &w, "cv1", &x, &ConvParams::new(1, 1, 0), true).unwrap();
        let pooled = maxpool2d(&y0, 5, 1, 2).unwrap();
        assert_eq!(pooled, y0, "constant channels are invariant under maxpool");
        blk.forward(&mut FloatExec, &w, &x).unwrap();
    }

    #[test]
    fn psa_shape_and_divisibility() {
        let blk = Psa { channels: 64, heads: 2 };
        let map = random_weights(&blk.slots(), 5);
        let w = WeightView::new(&map, "");
        let x = uniform_tensor(&mut rng(10), 1, 64, 5, 5, 1.0);
        let y = blk.forward(&mut FloatExec, &w, &x).unwrap();
        assert_eq!(y.shape(), x.shape());

        let bad = Psa { channels: 64, heads: 3 };
        assert!(bad.check().is_err());
    }

    #[test]
    fn softmax_rows_normalize() {
        let mut r = rng(11);
        use rand::Rng;
        for _ in 0..100 {
            let mut row: Vec<f32> = (0..17).map(|_| r.gen_range(-30.0..30.0)).collect();
            softmax_inplace(&mut row);
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn psa_single_position_attention_is_identity_mixing() {
        // with h = w = 1 the softmax over one key is 1, so the attention
        // output is exactly v (+ positional conv of v)
        let blk = Psa { channels: 8, heads: 1 };
        let map = random_weights(&blk.slots(), 6);
        let w = WeightView::new(&map, "");
        let x = uniform_tensor(&mut rng(12), 1, 8, 1, 1, 1.0);

        let h = 4;
        let y = conv_bn_unit(&mut FloatExec, &w, "cv1", &x, &ConvParams::new(1, 1, 0), true).unwrap();
        let b = y.slice_channels(h, 2 * h);
        let qkv = plain_conv_unit(&mut FloatExec, &w, "attn.qkv", &b, &ConvParams::new(1, 1, 0)).unwrap();
        let v_part = qkv.slice_channels(h, 2 * h);
        let pe = plain_conv_unit(&mut FloatExec, &w, "attn.pe", &v_part, &ConvParams::new(3, 1, 1).with_groups(h)).unwrap();
        let attn = blk.attention(&qkv, &b, &mut FloatExec, &w).unwrap();
        for i in 0..h {
            let expect = v_part.at(0, i, 0, 0) + pe.at(0, i, 0, 0);
            assert!((attn.at(0, i, 0, 0) - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn partial_conv_untouched_slice_and_degenerate_ratio() {
        let pc = PartialConv { channels: 8, ratio: 0.25 };
        let map = random_weights(&prefixed(pc.slots(""), "p"), 7);
        let w = WeightView::new(&map, "p");
        let x = uniform_tensor(&mut rng(13), 1, 8, 6, 6, 1.0);
        let y = pc.forward(&mut FloatExec, &w, &x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(
            y.channel_range(0, 2, 8),
            x.channel_range(0, 2, 8),
            "untouched channels pass through bit-identically"
        );

        // ratio 1 degenerates to a plain 3x3 conv
        let pc_full = PartialConv { channels: 4, ratio: 1.0 };
        let map = random_weights(&prefixed(pc_full.slots(""), "p"), 8);
        let w = WeightView::new(&map, "p");
        let x = uniform_tensor(&mut rng(14), 1, 4, 5, 5, 1.0);
        let y = pc_full.forward(&mut FloatExec, &w, &x).unwrap();
        let kernel = map.get("p.conv.weight").unwrap();
        let bias = map.get("p.conv.bias").unwrap();
        let oracle = conv2d(&x, kernel, Some(bias.data()), &ConvParams::new(3, 1, 1)).unwrap();
        assert_close(y.data(), oracle.data(), 1e-6);
    }

    #[test]
    fn partial_conv_flop_ratio() {
        // multiply-adds of the mixed slice vs a hypothetical full conv
        let (c, h, w) = (32usize, 10usize, 10usize);
        let pc = PartialConv { channels: c, ratio: 0.25 };
        let cp = pc.mixed_channels();
        let mixed_flops = cp * cp * 9 * h * w;
        let full_flops = c * c * 9 * h * w;
        assert_eq!(mixed_flops * 16, full_flops);
    }

    #[test]
    fn caa_zero_logits_gate_half() {
        let cfg = CaaConfig::new(6);
        let mut map = random_weights(&prefixed(cfg.slots(""), "g"), 9);
        // zero the final conv so every pre-activation is 0 -> A = 0.5
        let conv2 = map.get_mut("g.conv2.weight").unwrap();
        conv2.data_mut().fill(0.0);
        map.get_mut("g.conv2.bias").unwrap().data_mut().fill(0.0);
        let w = WeightView::new(&map, "g");
        let x = uniform_tensor(&mut rng(15), 1, 6, 7, 7, 1.0);
        let y = caa(&x, &w, &cfg).unwrap();
        let halved: Vec<f32> = x.data().iter().map(|v| v * 0.5).collect();
        assert_close(y.data(), &halved, 1e-6);
    }

    #[test]
    fn caa_gate_shrinks_magnitudes() {
        let cfg = CaaConfig::new(4);
        let map = random_weights(&prefixed(cfg.slots(""), "g"), 10);
        let w = WeightView::new(&map, "g");
        let x = uniform_tensor(&mut rng(16), 1, 4, 9, 9, 2.0);
        let y = caa(&x, &w, &cfg).unwrap();
        for (yv, xv) in y.data().iter().zip(x.data()) {
            assert!(yv.abs() <= xv.abs());
        }
        // gate at zero input is exactly zero output
        let zeros = Tensor::zeros(1, 4, 9, 9);
        let yz = caa(&zeros, &w, &cfg).unwrap();
        assert!(yz.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn caa_strip_pair_matches_rank1_kernel() {
        let cfg = CaaConfig { k_b: 7, channels: 4, mid_channels: 6 };
        let map = random_weights(&prefixed(cfg.slots(""), "g"), 11);
        let w = WeightView::new(&map, "g");
        let x = uniform_tensor(&mut rng(17), 1, 4, 10, 10, 1.0);

        let pooled = avgpool2d(&x, 7, 1, 3).unwrap();
        let f_pool = conv_bn_unit(&mut FloatExec, &w, "conv1", &pooled, &ConvParams::new(1, 1, 0), true).unwrap();
        let m = cfg.mid_channels;
        let kb = cfg.k_b;
        let p_row = ConvParams { kernel: (1, kb), stride: (1, 1), padding: (0, kb / 2), groups: m };
        let f_w = plain_conv_unit(&mut FloatExec, &w, "dw_w", &f_pool, &p_row).unwrap();
        let p_col = ConvParams { kernel: (kb, 1), stride: (1, 1), padding: (kb / 2, 0), groups: m };
        let f_h = plain_conv_unit(&mut FloatExec, &w, "dw_h", &f_w, &p_col).unwrap();

        // one k_b x k_b rank-1 depthwise conv; biases composed accordingly
        let wr = map.get("g.dw_w.weight").unwrap();
        let wc = map.get("g.dw_h.weight").unwrap();
        let br = map.get("g.dw_w.bias").unwrap();
        let bc = map.get("g.dw_h.bias").unwrap();
        let full = Tensor::from_fn(m, 1, kb, kb, |ch, _, ky, kx| wc.at(ch, 0, ky, 0) * wr.at(ch, 0, 0, kx));
        // bias of row pass propagates through the column kernel's sum
        let bias: Vec<f32> = (0..m)
            .map(|ch| {
                let col_sum: f32 = (0..kb).map(|ky| wc.at(ch, 0, ky, 0)).sum();
                bc.data()[ch] + br.data()[ch] * col_sum
            })
            .collect();
        let p_full = ConvParams::new(kb, 1, kb / 2).with_groups(m);
        let oracle = conv2d(&f_pool, &full, Some(&bias), &p_full).unwrap();
        // interior only: the strip pair pads intermediate results, the rank-1
        // kernel pads inputs, which differ within k_b/2 of the border
        let margin = kb / 2;
        for ch in 0..m {
            for y in margin..10 - margin {
                for x_ in margin..10 - margin {
                    assert!((f_h.at(0, ch, y, x_) - oracle.at(0, ch, y, x_)).abs() <= 1e-5);
                }
            }
        }
    }

    #[test]
    fn fca_zero_weights_is_identity() {
        let blk = FcaBottleneck::new(8);
        let mut map = random_weights(&prefixed(blk.slots(""), "f"), 12);
        for (_, t) in map.iter_mut() {
            t.data_mut().fill(0.0);
        }
        // keep bn variances sane
        for s in prefixed(blk.slots(""), "f") {
            if s.name.ends_with(".bn.var") {
                map.get_mut(&s.name).unwrap().data_mut().fill(1.0);
            }
        }
        let w = WeightView::new(&map, "f");
        let x = uniform_tensor(&mut rng(18), 1, 8, 6, 6, 1.0);
        let y = blk.forward(&mut FloatExec, &w, &x).unwrap();
        assert_eq!(y, x, "zeroed bottleneck must be the pure residual");
    }

    #[test]
    fn fca_param_count_below_plain_bottleneck() {
        for c in [64usize, 128, 256] {
            let fca = FcaBottleneck::new(c);
            let fca_params = param_count_slots(&fca.slots(""), false);
            // standard C2f bottleneck: two 3x3 convs with bn
            let plain = 2 * (c * c * 9 + 4 * c);
            assert!(
                fca_params < plain,
                "c={c}: fca {fca_params} >= plain {plain}"
            );
        }
    }

    #[test]
    fn c2f_fca_shapes_and_collapse() {
        let blk = C2fFca::new(64, 64, 1);
        let map = random_weights(&blk.slots(), 13);
        let w = WeightView::new(&map, "");
        let x = uniform_tensor(&mut rng(19), 1, 64, 8, 8, 1.0);
        let y = blk.forward(&mut FloatExec, &w, &x).unwrap();
        assert_eq!(y.shape(), (1, 64, 8, 8));
        // pre-cv2 concat width: (2 + n) * 32
        let cv2 = map.get("cv2.weight").unwrap();
        assert_eq!(cv2.c(), 96);

        // zeroed bottlenecks collapse every chained entry onto half 2
        let blk = C2fFca::new(16, 16, 3);
        let mut map = random_weights(&blk.slots(), 14);
        for (name, t) in map.iter_mut() {
            if name.starts_with("m") {
                if name.ends_with(".bn.var") {
                    t.data_mut().fill(1.0);
                } else {
                    t.data_mut().fill(0.0);
                }
            }
        }
        let w = WeightView::new(&map, "");
        let x = uniform_tensor(&mut rng(20), 1, 16, 5, 5, 1.0);
        let y = conv_bn_unit(&mut FloatExec, &w, "cv1", &x, &ConvParams::new(1, 1, 0), true).unwrap();
        let half2 = y.slice_channels(8, 16);
        let b1 = FcaBottleneck::new(8)
            .forward(&mut FloatExec, &WeightView::new(&map, "m0"), &half2)
            .unwrap();
        assert_eq!(b1, half2);
    }

    #[test]
    fn c2f_param_count_closed_form() {
        let blk = C2fFca::new(32, 32, 3);
        let total = param_count_slots(&blk.slots(), false);
        let h = 16usize;
        let fca = param_count_slots(&FcaBottleneck::new(h).slots(""), false);
        let expect = (32 * 2 * h + 4 * 2 * h) + ((2 + 3) * h * 32 + 4 * 32) + 3 * fca;
        assert_eq!(total, expect);
    }

    #[test]
    fn validate_weights_catches_extraneous() {
        let blk = ConvBnSilu { c_in: 2, c_out: 2, k: 1, stride: 1 };
        let mut map = random_weights(&blk.slots(), 15);
        assert!(validate_weights(&map, &blk.slots()).is_ok());
        map.insert("rogue".into(), Tensor::zeros(1, 1, 1, 1));
        let err = validate_weights(&map, &blk.slots()).unwrap_err();
        assert!(err.to_string().contains("rogue"));
    }
}
