//! Post-training INT8 quantization: symmetric per-output-channel weights,
//! asymmetric per-tensor activations, integer convolution with float
//! requantization, plus an IEEE binary16 round-trip for half-precision
//! weight storage. Attention-bearing sites stay in float.

use std::collections::BTreeMap;

use crate::blocks::ConvExec;
use crate::error::{Error, Result};
use crate::graph::NetGraph;
use crate::tensor::{conv2d, ConvParams, Tensor};

/// Asymmetric per-tensor activation quantization to u8.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
}

impl QuantParams {
    /// Derives u8 parameters from an observed value range. The range is
    /// widened to include zero so that zero is exactly representable.
    pub fn from_range(min: f32, max: f32) -> Self {
        let lo = min.min(0.0);
        let hi = max.max(0.0);
        let span = (hi - lo).max(1e-12);
        let scale = span / 255.0;
        let zero_point = (-lo / scale).round_ties_even() as i32;
        Self { scale, zero_point: zero_point.clamp(0, 255) }
    }

    pub fn quantize(&self, x: f32) -> u8 {
        let q = (x / self.scale).round_ties_even() as i32 + self.zero_point;
        q.clamp(0, 255) as u8
    }

    pub fn dequantize(&self, q: u8) -> f32 {
        (q as i32 - self.zero_point) as f32 * self.scale
    }
}

/// Symmetric per-output-channel weight quantization to i8.
#[derive(Debug, Clone)]
pub struct QuantWeight {
    pub data: Vec<i8>,
    pub shape: (usize, usize, usize, usize),
    pub scales: Vec<f32>,
}

pub fn quantize_weight(w: &Tensor) -> QuantWeight {
    let (oc, cg, kh, kw) = w.shape();
    let per = cg * kh * kw;
    let mut scales = Vec::with_capacity(oc);
    let mut data = Vec::with_capacity(w.len());
    for o in 0..oc {
        let row = &w.data()[o * per..(o + 1) * per];
        let maxabs = row.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        let scale = if maxabs > 0.0 { maxabs / 127.0 } else { 1.0 };
        scales.push(scale);
        for &v in row {
            let q = (v / scale).round_ties_even() as i32;
            data.push(q.clamp(-127, 127) as i8);
        }
    }
    QuantWeight { data, shape: (oc, cg, kh, kw), scales }
}

pub fn dequantize_weight(qw: &QuantWeight) -> Tensor {
    let (oc, cg, kh, kw) = qw.shape;
    let per = cg * kh * kw;
    let data: Vec<f32> = qw
        .data
        .iter()
        .enumerate()
        .map(|(i, &q)| q as f32 * qw.scales[i / per])
        .collect();
    Tensor::new(oc, cg, kh, kw, data).unwrap()
}

/// Signal-to-quantization-noise ratio in dB between a reference signal and
/// its reconstruction.
pub fn sqnr_db(reference: &[f32], reconstructed: &[f32]) -> f64 {
    let mut sig = 0.0f64;
    let mut noise = 0.0f64;
    for (&r, &x) in reference.iter().zip(reconstructed) {
        sig += (r as f64) * (r as f64);
        let e = (r - x) as f64;
        noise += e * e;
    }
    if noise == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (sig / noise).log10()
    }
}

// ---------------------------------------------------------------------------
// Range observation

/// Tracks the value range of a tensor stream. Keeps a deterministic strided
/// subsample so a high-percentile clip can be computed without storing
/// everything.
#[derive(Debug, Clone)]
pub struct Observer {
    pub min: f32,
    pub max: f32,
    sample: Vec<f32>,
    seen: usize,
    stride: usize,
}

const OBSERVER_CAP: usize = 1 << 16;

impl Observer {
    pub fn new() -> Self {
        Self { min: f32::INFINITY, max: f32::NEG_INFINITY, sample: Vec::new(), seen: 0, stride: 1 }
    }

    pub fn observe(&mut self, xs: &[f32]) {
        for &v in xs {
            self.min = self.min.min(v);
            self.max = self.max.max(v);
            if self.seen % self.stride == 0 {
                self.sample.push(v);
                if self.sample.len() >= 2 * OBSERVER_CAP {
                    // decimate: keep every other sample, double the stride
                    let mut i = 0;
                    self.sample.retain(|_| {
                        i += 1;
                        i % 2 == 1
                    });
                    self.stride *= 2;
                }
            }
            self.seen += 1;
        }
    }

    /// Quantization range: full min/max, or a symmetric percentile clip of
    /// the subsampled distribution (e.g. 0.9999).
    pub fn range(&self, percentile: Option<f64>) -> (f32, f32) {
        if self.seen == 0 {
            return (0.0, 0.0);
        }
        match percentile {
            None => (self.min, self.max),
            Some(p) => {
                let mut s = self.sample.clone();
                s.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let n = s.len();
                let lo_idx = (((1.0 - p) * n as f64) as usize).min(n - 1);
                let hi_idx = ((p * n as f64) as usize).min(n - 1);
                (s[lo_idx], s[hi_idx])
            }
        }
    }
}

impl Default for Observer {
    fn default() -> Self {
        Self::new()
    }
}

// ---------------------------------------------------------------------------
// Integer convolution

/// Largest fan-in whose worst-case |accumulator| is guaranteed to fit i32:
/// each term is at most 255 * 127.
pub fn max_safe_fan_in() -> usize {
    (i32::MAX as usize) / (255 * 127)
}

/// Integer conv at one quantized site: the float input is quantized with
/// `qin`, convolved against i8 weights with i32 accumulation, the result is
/// rescaled with float multipliers, bias added, and finally snapped onto the
/// `qout` grid (returned dequantized so float ops can follow).
pub fn qconv2d(
    x: &Tensor,
    qw: &QuantWeight,
    bias: &[f32],
    p: &ConvParams,
    qin: QuantParams,
    qout: QuantParams,
) -> Result<Tensor> {
    let (xn, xc, _, _) = x.shape();
    let (oc, cg, kh, kw) = qw.shape;
    if xc != cg * p.groups {
        return Err(Error::Shape(format!(
            "qconv input channels {xc} incompatible with weight {cg}x{} groups",
            p.groups
        )));
    }
    if bias.len() != oc {
        return Err(Error::Shape(format!("qconv bias len {} != {oc}", bias.len())));
    }
    let fan_in = cg * kh * kw;
    if fan_in > max_safe_fan_in() {
        return Err(Error::AccumulatorOverflow(format!(
            "fan-in {fan_in} exceeds the i32-safe bound {}",
            max_safe_fan_in()
        )));
    }
    let (oh, ow) = p.out_dims(x.h(), x.w())?;

    // quantize input once, centered at the zero point (fits i16)
    let xq: Vec<i16> = x
        .data()
        .iter()
        .map(|&v| (qin.quantize(v) as i32 - qin.zero_point) as i16)
        .collect();
    crate::tensor::note_workspace(xq.len() * std::mem::size_of::<i16>());
    let (sh, sw) = p.stride;
    let (ph, pw) = p.padding;
    let oc_per_g = oc / p.groups;
    let plane = x.h() * x.w();

    let mut out = Tensor::zeros(xn, oc, oh, ow);
    for n in 0..xn {
        for g in 0..p.groups {
            for ocg in 0..oc_per_g {
                let o = g * oc_per_g + ocg;
                let wrow = &qw.data[o * fan_in..(o + 1) * fan_in];
                let m = qin.scale * qw.scales[o];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc: i32 = 0;
                        let y0 = (oy * sh) as isize - ph as isize;
                        let x0 = (ox * sw) as isize - pw as isize;
                        let mut wi = 0usize;
                        for ci in 0..cg {
                            let base = (n * xc + g * cg + ci) * plane;
                            for ky in 0..kh {
                                let yy = y0 + ky as isize;
                                if yy < 0 || yy >= x.h() as isize {
                                    wi += kw;
                                    continue;
                                }
                                let row = base + yy as usize * x.w();
                                for kx in 0..kw {
                                    let xx = x0 + kx as isize;
                                    if xx >= 0 && xx < x.w() as isize {
                                        acc += xq[row + xx as usize] as i32 * wrow[wi] as i32;
                                    }
                                    wi += 1;
                                }
                            }
                        }
                        let y = acc as f32 * m + bias[o];
                        *out.at_mut(n, o, oy, ox) = qout.dequantize(qout.quantize(y));
                    }
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Calibration + quantized execution over the graph

/// Sites carrying attention math are kept in float: the softmax/value mixing
/// is precision-sensitive and a small fraction of total compute.
pub fn site_stays_float(site: &str) -> bool {
    site.starts_with("psa.") || site.contains(".attn.")
}

pub struct SiteObserver {
    pub input: Observer,
    pub output: Observer,
    pub weight: Option<(Tensor, Vec<f32>, ConvParams)>,
}

/// Float execution that records per-site activation ranges and captures the
/// (batchnorm-folded) weights as they stream past.
pub struct CalibExec {
    pub sites: BTreeMap<String, SiteObserver>,
}

impl CalibExec {
    pub fn new() -> Self {
        Self { sites: BTreeMap::new() }
    }
}

impl Default for CalibExec {
    fn default() -> Self {
        Self::new()
    }
}

impl ConvExec for CalibExec {
    fn conv(
        &mut self,
        site: &str,
        x: &Tensor,
        weight: &Tensor,
        bias: Option<&[f32]>,
        p: &ConvParams,
    ) -> Result<Tensor> {
        let y = conv2d(x, weight, bias, p)?;
        if !site_stays_float(site) {
            let entry = self.sites.entry(site.to_string()).or_insert_with(|| SiteObserver {
                input: Observer::new(),
                output: Observer::new(),
                weight: None,
            });
            entry.input.observe(x.data());
            entry.output.observe(y.data());
            if entry.weight.is_none() {
                entry.weight = Some((
                    weight.clone(),
                    bias.map(|b| b.to_vec()).unwrap_or_else(|| vec![0.0; weight.n()]),
                    *p,
                ));
            }
        }
        Ok(y)
    }
}

#[derive(Debug, Clone)]
pub struct QuantSite {
    pub weight: QuantWeight,
    pub bias: Vec<f32>,
    pub qin: QuantParams,
    pub qout: QuantParams,
}

#[derive(Debug, Clone, Default)]
pub struct QuantizedModel {
    pub sites: BTreeMap<String, QuantSite>,
}

/// Per-site weight SQNR entry from quantization.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SiteReport {
    pub site: String,
    pub weight_sqnr_db: f64,
    pub in_scale: f32,
    pub out_scale: f32,
}

/// Calibrates on the given images and freezes integer parameters for every
/// quantizable conv site.
pub fn quantize_model(
    graph: &NetGraph,
    weights: &crate::blocks::WeightMap,
    calib_images: &[Tensor],
    percentile: Option<f64>,
) -> Result<(QuantizedModel, Vec<SiteReport>)> {
    if calib_images.is_empty() {
        return Err(Error::InvalidArg("quantization needs at least one calibration image".into()));
    }
    let mut calib = CalibExec::new();
    for img in calib_images {
        graph.forward(img, weights, &mut calib)?;
    }
    let mut model = QuantizedModel::default();
    let mut reports = Vec::new();
    for (site, obs) in calib.sites {
        let (w, bias, _p) = obs.weight.expect("weight captured during calibration");
        let qw = quantize_weight(&w);
        let deq = dequantize_weight(&qw);
        let sqnr = sqnr_db(w.data(), deq.data());
        let (imin, imax) = obs.input.range(percentile);
        let (omin, omax) = obs.output.range(percentile);
        let qin = QuantParams::from_range(imin, imax);
        let qout = QuantParams::from_range(omin, omax);
        reports.push(SiteReport {
            site: site.clone(),
            weight_sqnr_db: sqnr,
            in_scale: qin.scale,
            out_scale: qout.scale,
        });
        model.sites.insert(site, QuantSite { weight: qw, bias, qin, qout });
    }
    Ok((model, reports))
}

/// Runs quantized kernels at calibrated sites, float elsewhere.
pub struct QuantExec<'a> {
    pub model: &'a QuantizedModel,
}

impl ConvExec for QuantExec<'_> {
    fn conv(
        &mut self,
        site: &str,
        x: &Tensor,
        weight: &Tensor,
        bias: Option<&[f32]>,
        p: &ConvParams,
    ) -> Result<Tensor> {
        match self.model.sites.get(site) {
            Some(s) => qconv2d(x, &s.weight, &s.bias, p, s.qin, s.qout),
            None => conv2d(x, weight, bias, p),
        }
    }
}

// ---------------------------------------------------------------------------
// IEEE binary16

/// f32 -> binary16 bits with round-to-nearest-even; overflow saturates to
/// infinity, subnormals are preserved.
pub fn f32_to_f16_bits(x: f32) -> u16 {
    let bits = x.to_bits();
    let sign = ((bits >> 16) & 0x8000) as u16;
    let exp = ((bits >> 23) & 0xff) as i32;
    let frac = bits & 0x007f_ffff;

    if exp == 0xff {
        // inf / nan
        return if frac == 0 { sign | 0x7c00 } else { sign | 0x7e00 };
    }
    let unbiased = exp - 127;
    if unbiased >= 16 {
        // overflows binary16 range (max normal 65504): check the exact
        // boundary where rounding still reaches infinity
        return sign | 0x7c00;
    }
    if unbiased >= -14 {
        // normal range: round 23-bit fraction to 10 bits
        let mut mant = frac >> 13;
        let rem = frac & 0x1fff;
        let halfway = 0x1000;
        if rem > halfway || (rem == halfway && (mant & 1) == 1) {
            mant += 1;
        }
        let mut e16 = (unbiased + 15) as u32;
        if mant == 0x400 {
            mant = 0;
            e16 += 1;
            if e16 >= 31 {
                return sign | 0x7c00;
            }
        }
        return sign | ((e16 as u16) << 10) | (mant as u16);
    }
    if unbiased >= -25 {
        // subnormal: shift the implicit leading 1 into the fraction
        let full = frac | 0x0080_0000;
        // mant = full * 2^(unbiased+1): bits below the 10-bit mantissa drop
        let shift = (-1 - unbiased) as u32;
        let mant = full >> shift;
        let rem = full & ((1 << shift) - 1);
        let halfway = 1u32 << (shift - 1);
        let mut m = mant;
        if rem > halfway || (rem == halfway && (m & 1) == 1) {
            m += 1;
        }
        // a subnormal rounding up to 0x400 becomes the smallest normal, which
        // the bit pattern encodes naturally
        return sign | (m as u16);
    }
    // underflows to (signed) zero
    sign
}

pub fn f16_bits_to_f32(h: u16) -> f32 {
    let sign = ((h as u32) & 0x8000) << 16;
    let exp = ((h >> 10) & 0x1f) as u32;
    let frac = (h & 0x3ff) as u32;
    let bits = if exp == 0x1f {
        sign | 0x7f80_0000 | (frac << 13)
    } else if exp == 0 {
        if frac == 0 {
            sign
        } else {
            // renormalize the subnormal
            let mut e = -14i32;
            let mut f = frac;
            while f & 0x400 == 0 {
                f <<= 1;
                e -= 1;
            }
            f &= 0x3ff;
            sign | (((e + 127) as u32) << 23) | (f << 13)
        }
    } else {
        sign | ((exp + 127 - 15) << 23) | (frac << 13)
    };
    f32::from_bits(bits)
}

pub fn fp16_roundtrip(x: f32) -> f32 {
    f16_bits_to_f32(f32_to_f16_bits(x))
}
