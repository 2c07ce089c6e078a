//! Whole-network graph: variant scaling rules, backbone/neck/head topology,
//! weight schema assembly, parameter counting and the forward pass.

use serde::Serialize;

use crate::blocks::{
    param_count_slots, C2fFca, ConvBnSilu, ConvExec, Detect, FloatExec, Psa, ScDown, SlotSpec,
    Sppf, WeightMap, WeightView,
};
use crate::decode::REG_BINS;
use crate::error::{Error, Result};
use crate::tensor::{concat_channels, upsample_nearest2x, Tensor};

/// Model scale family, smallest to largest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Tiny,
    N,
    S,
    M,
    B,
    L,
    X,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Tiny,
        Variant::N,
        Variant::S,
        Variant::M,
        Variant::B,
        Variant::L,
        Variant::X,
    ];

    /// (depth multiplier, width multiplier, channel cap)
    pub fn scales(self) -> (f64, f64, usize) {
        match self {
            Variant::Tiny => (0.20, 0.25, 512),
            Variant::N => (0.33, 0.25, 1024),
            Variant::S => (0.33, 0.50, 1024),
            Variant::M => (0.67, 0.75, 768),
            Variant::B => (0.67, 1.00, 512),
            Variant::L => (1.00, 1.00, 512),
            Variant::X => (1.00, 1.25, 512),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Tiny => "tiny",
            Variant::N => "n",
            Variant::S => "s",
            Variant::M => "m",
            Variant::B => "b",
            Variant::L => "l",
            Variant::X => "x",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        let v = match s.to_ascii_lowercase().as_str() {
            "tiny" => Variant::Tiny,
            "n" => Variant::N,
            "s" => Variant::S,
            "m" => Variant::M,
            "b" => Variant::B,
            "l" => Variant::L,
            "x" => Variant::X,
            other => {
                return Err(Error::InvalidArg(format!(
                    "unknown variant '{other}' (expected tiny|n|s|m|b|l|x)"
                )))
            }
        };
        Ok(v)
    }
}

/// Full model configuration: a variant plus the ablation toggles.
#[derive(Debug, Clone, Copy)]
pub struct VariantConfig {
    pub variant: Variant,
    pub num_classes: usize,
    /// route the SPPF output (not PSA) into the last downsampling concat
    pub use_ccs: bool,
    /// add the extra high-resolution stride-4 detection level
    pub use_xsmall_head: bool,
    /// FCA bottlenecks; false falls back to plain two-conv bottlenecks
    pub use_fca: bool,
    pub k_b: usize,
    pub partial_ratio: f64,
}

impl VariantConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            num_classes: 10,
            use_ccs: true,
            use_xsmall_head: true,
            use_fca: true,
            k_b: 11,
            partial_ratio: 0.25,
        }
    }

    /// Stage channel widths c1..c5 (strides 2..32): each base width is capped,
    /// then scaled by the width multiplier and rounded.
    pub fn channels(&self) -> [usize; 5] {
        let (_, w, cap) = self.variant.scales();
        let mut out = [0usize; 5];
        for (i, base) in [64usize, 128, 256, 512, 1024].iter().enumerate() {
            out[i] = ((base.min(&cap).to_owned() as f64) * w).round() as usize;
        }
        out
    }

    /// (n1, n2, nn): repeat counts for shallow backbone stages, deep backbone
    /// stages, and neck fusion blocks.
    pub fn repeats(&self) -> (usize, usize, usize) {
        let (d, _, _) = self.variant.scales();
        let scale = |n: f64| ((n * d).round() as usize).max(1);
        (scale(6.0), scale(9.0), scale(4.0))
    }
}

/// One layer of the network. `inputs` are node indices; node 0 is the image.
#[derive(Debug)]
pub struct Node {
    pub name: String,
    pub inputs: Vec<usize>,
    pub op: Op,
    pub out_c: usize,
    /// downsampling factor relative to the input image
    pub out_stride: usize,
}

#[derive(Debug)]
pub enum Op {
    Input,
    Conv(ConvBnSilu),
    C2f(C2fFca),
    ScDown(ScDown),
    Sppf(Sppf),
    Psa(Psa),
    Upsample,
    Concat,
    Detect(Detect),
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Conv(_) => "conv",
            Op::C2f(c) => {
                if c.use_fca {
                    "c2f_fca"
                } else {
                    "c2f"
                }
            }
            Op::ScDown(_) => "scdown",
            Op::Sppf(_) => "sppf",
            Op::Psa(_) => "psa",
            Op::Upsample => "upsample",
            Op::Concat => "concat",
            Op::Detect(_) => "detect",
        }
    }

    fn slots(&self) -> Vec<SlotSpec> {
        match self {
            Op::Input | Op::Upsample | Op::Concat => Vec::new(),
            Op::Conv(b) => b.slots(),
            Op::C2f(b) => b.slots(),
            Op::ScDown(b) => b.slots(),
            Op::Sppf(b) => b.slots(),
            Op::Psa(b) => b.slots(),
            Op::Detect(b) => b.slots(),
        }
    }

    fn forward(&self, ctx: &mut dyn ConvExec, w: &WeightView, xs: &[&Tensor]) -> Result<Tensor> {
        match self {
            Op::Input => Err(Error::Shape("input node is not executable".into())),
            Op::Conv(b) => b.forward(ctx, w, xs[0]),
            Op::C2f(b) => b.forward(ctx, w, xs[0]),
            Op::ScDown(b) => b.forward(ctx, w, xs[0]),
            Op::Sppf(b) => b.forward(ctx, w, xs[0]),
            Op::Psa(b) => b.forward(ctx, w, xs[0]),
            Op::Upsample => Ok(upsample_nearest2x(xs[0])),
            Op::Concat => concat_channels(xs),
            Op::Detect(b) => b.forward(ctx, w, xs[0]),
        }
    }
}

pub struct NetGraph {
    pub cfg: VariantConfig,
    pub nodes: Vec<Node>,
    /// detect-node indices, finest stride first
    pub heads: Vec<usize>,
    /// stride per detect head, same order
    pub head_strides: Vec<usize>,
}

/// PSA head count: one head per 64 hidden channels, minimum one.
fn psa_heads(hidden: usize) -> usize {
    (hidden / 64).max(1)
}

pub fn build(cfg: &VariantConfig) -> NetGraph {
    let [c1, c2, c3, c4, c5] = cfg.channels();
    let (n1, n2, nn) = cfg.repeats();

    let mut nodes: Vec<Node> = Vec::new();
    let push = |nodes: &mut Vec<Node>, name: &str, inputs: Vec<usize>, op: Op, out_c: usize, out_stride: usize| {
        nodes.push(Node { name: name.to_string(), inputs, op, out_c, out_stride });
        nodes.len() - 1
    };
    let c2f = |c_in: usize, c_out: usize, n: usize| {
        Op::C2f(C2fFca {
            c_in,
            c_out,
            n,
            use_fca: cfg.use_fca,
            partial_ratio: cfg.partial_ratio,
            k_b: cfg.k_b,
        })
    };

    let input = push(&mut nodes, "input", vec![], Op::Input, 3, 1);

    // backbone
    let s0 = push(&mut nodes, "stem0", vec![input], Op::Conv(ConvBnSilu { c_in: 3, c_out: c1, k: 3, stride: 2 }), c1, 2);
    let s1 = push(&mut nodes, "stem1", vec![s0], Op::Conv(ConvBnSilu { c_in: c1, c_out: c2, k: 3, stride: 2 }), c2, 4);
    let b2 = push(&mut nodes, "b2", vec![s1], c2f(c2, c2, n1), c2, 4);
    let d3 = push(&mut nodes, "down3", vec![b2], Op::Conv(ConvBnSilu { c_in: c2, c_out: c3, k: 3, stride: 2 }), c3, 8);
    let b4 = push(&mut nodes, "b4", vec![d3], c2f(c3, c3, n2), c3, 8);
    let d5 = push(&mut nodes, "down5", vec![b4], Op::ScDown(ScDown { c_in: c3, c_out: c4 }), c4, 16);
    let b6 = push(&mut nodes, "b6", vec![d5], c2f(c4, c4, n2), c4, 16);
    let d7 = push(&mut nodes, "down7", vec![b6], Op::ScDown(ScDown { c_in: c4, c_out: c5 }), c5, 32);
    let b8 = push(&mut nodes, "b8", vec![d7], c2f(c5, c5, n1), c5, 32);
    let sppf = push(&mut nodes, "sppf", vec![b8], Op::Sppf(Sppf { c_in: c5, c_out: c5 }), c5, 32);
    let psa = push(&mut nodes, "psa", vec![sppf], Op::Psa(Psa { channels: c5, heads: psa_heads(c5 / 2) }), c5, 32);

    // top-down path
    let up4 = push(&mut nodes, "up_p4", vec![psa], Op::Upsample, c5, 16);
    let cat4 = push(&mut nodes, "cat_p4", vec![up4, b6], Op::Concat, c5 + c4, 16);
    let t4 = push(&mut nodes, "n_p4", vec![cat4], c2f(c5 + c4, c4, nn), c4, 16);
    let up3 = push(&mut nodes, "up_p3", vec![t4], Op::Upsample, c4, 8);
    let cat3 = push(&mut nodes, "cat_p3", vec![up3, b4], Op::Concat, c4 + c3, 8);
    let t3 = push(&mut nodes, "n_p3", vec![cat3], c2f(c4 + c3, c3, nn), c3, 8);

    let mut head_levels: Vec<(usize, usize, usize)> = Vec::new(); // (node, channels, stride)

    // bottom-up path; the extra stride-4 level extends it one step higher
    let pan_start = if cfg.use_xsmall_head {
        let up2 = push(&mut nodes, "up_p2", vec![t3], Op::Upsample, c3, 4);
        let cat2 = push(&mut nodes, "cat_p2", vec![up2, b2], Op::Concat, c3 + c2, 4);
        let t2 = push(&mut nodes, "n_p2", vec![cat2], c2f(c3 + c2, c2, nn), c2, 4);
        head_levels.push((t2, c2, 4));
        let dn3 = push(&mut nodes, "down_p3", vec![t2], Op::ScDown(ScDown { c_in: c2, c_out: c2 }), c2, 8);
        let catd3 = push(&mut nodes, "cat_d3", vec![dn3, t3], Op::Concat, c2 + c3, 8);
        push(&mut nodes, "n_d3", vec![catd3], c2f(c2 + c3, c3, nn), c3, 8)
    } else {
        t3
    };
    head_levels.push((pan_start, c3, 8));
    let dn4 = push(&mut nodes, "down_p4", vec![pan_start], Op::ScDown(ScDown { c_in: c3, c_out: c3 }), c3, 16);
    let catd4 = push(&mut nodes, "cat_d4", vec![dn4, t4], Op::Concat, c3 + c4, 16);
    let f4 = push(&mut nodes, "n_d4", vec![catd4], c2f(c3 + c4, c4, nn), c4, 16);
    head_levels.push((f4, c4, 16));
    let dn5 = push(&mut nodes, "down_p5", vec![f4], Op::ScDown(ScDown { c_in: c4, c_out: c4 }), c4, 32);
    // cross concat: reuse the pre-attention SPPF features at the deepest fuse
    let deep_src = if cfg.use_ccs { sppf } else { psa };
    let catd5 = push(&mut nodes, "cat_d5", vec![dn5, deep_src], Op::Concat, c4 + c5, 32);
    let f5 = push(&mut nodes, "n_d5", vec![catd5], c2f(c4 + c5, c5, nn), c5, 32);
    head_levels.push((f5, c5, 32));

    // shared head widths come from the finest level
    let c_first = head_levels[0].1;
    let box_hidden = (c_first / 4).max(64);
    let cls_hidden = c_first.max(100);
    let mut heads = Vec::new();
    let mut head_strides = Vec::new();
    for (node, c, stride) in head_levels {
        let det = Detect {
            c_in: c,
            box_hidden,
            cls_hidden,
            num_classes: cfg.num_classes,
            reg_bins: REG_BINS,
        };
        let h = push(&mut nodes, &format!("head_s{stride}"), vec![node], Op::Detect(det), det.out_channels(), stride);
        heads.push(h);
        head_strides.push(stride);
    }

    NetGraph { cfg: *cfg, nodes, heads, head_strides }
}

impl NetGraph {
    pub fn node_by_name(&self, name: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.name == name)
    }

    /// Every weight slot of the network, names prefixed with the node name.
    pub fn slots(&self) -> Vec<SlotSpec> {
        let mut out = Vec::new();
        for node in &self.nodes {
            for mut s in node.op.slots() {
                s.name = format!("{}.{}", node.name, s.name);
                out.push(s);
            }
        }
        out
    }

    /// Inference-time parameter count. `folded` counts batchnorm as its two
    /// affine parameters; otherwise all four per-channel statistics count.
    pub fn param_count(&self, folded: bool) -> usize {
        param_count_slots(&self.slots(), folded)
    }

    pub fn validate_weights(&self, weights: &WeightMap) -> Result<()> {
        crate::blocks::validate_weights(weights, &self.slots())
    }

    /// Deterministic synthetic weights: conv kernels and biases uniform in
    /// +-1/sqrt(fan_in); batchnorm is the identity transform.
    pub fn init_weights(&self, seed: u64) -> WeightMap {
        use rand::{Rng, SeedableRng};
        let mut map = WeightMap::new();
        for s in self.slots() {
            let n: usize = s.shape.iter().product();
            let data: Vec<f32> = if s.name.ends_with(".bn.gamma") || s.name.ends_with(".bn.var") {
                vec![1.0; n]
            } else if s.name.ends_with(".bn.beta") || s.name.ends_with(".bn.mean") {
                vec![0.0; n]
            } else {
                let fan_in: usize = if s.shape.len() == 4 {
                    s.shape[1] * s.shape[2] * s.shape[3]
                } else {
                    s.shape[0]
                };
                let b = 1.0 / (fan_in as f32).sqrt();
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&s.name));
                (0..n).map(|_| rng.gen_range(-b..b)).collect()
            };
            let t = match s.shape.len() {
                4 => Tensor::new(s.shape[0], s.shape[1], s.shape[2], s.shape[3], data).unwrap(),
                _ => Tensor::new(1, 1, 1, n, data).unwrap(),
            };
            map.insert(s.name, t);
        }
        map
    }

    /// Runs the network, returning head maps finest stride first.
    pub fn forward(&self, x: &Tensor, weights: &WeightMap, ctx: &mut dyn ConvExec) -> Result<Vec<Tensor>> {
        if x.c() != 3 {
            return Err(Error::Shape(format!("expected 3 input channels, got {}", x.c())));
        }
        if x.h() % 32 != 0 || x.w() % 32 != 0 || x.h() == 0 || x.w() == 0 {
            return Err(Error::Shape(format!(
                "input {}x{} must be a positive multiple of 32",
                x.w(),
                x.h()
            )));
        }

        // free each intermediate right after its final consumer
        let mut last_use = vec![0usize; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            for &j in &node.inputs {
                last_use[j] = i;
            }
        }
        for &h in &self.heads {
            last_use[h] = usize::MAX;
        }

        let mut values: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        values[0] = Some(x.clone());
        for i in 1..self.nodes.len() {
            let node = &self.nodes[i];
            let inputs: Vec<&Tensor> = node
                .inputs
                .iter()
                .map(|&j| values[j].as_ref().expect("topological order violated"))
                .collect();
            let w = WeightView::new(weights, &node.name);
            let out = node.op.forward(ctx, &w, &inputs)?;
            if out.c() != node.out_c {
                return Err(Error::Shape(format!(
                    "node '{}' produced {} channels, declared {}",
                    node.name,
                    out.c(),
                    node.out_c
                )));
            }
            values[i] = Some(out);
            for &j in &node.inputs {
                if last_use[j] == i {
                    values[j] = None;
                }
            }
        }
        Ok(self
            .heads
            .iter()
            .map(|&h| values[h].take().expect("head retained"))
            .collect())
    }

    pub fn forward_float(&self, x: &Tensor, weights: &WeightMap) -> Result<Vec<Tensor>> {
        self.forward(x, weights, &mut FloatExec)
    }

    /// Multiply-accumulate estimate for conv work at the given square input
    /// size (attention matmuls excluded; they are a rounding error here).
    pub fn macs(&self, img: usize) -> u64 {
        let mut total: u64 = 0;
        for node in &self.nodes {
            let hw = (img / node.out_stride) as u64;
            for s in node.op.slots() {
                if s.shape.len() == 4 {
                    let wparams: u64 = s.shape.iter().product::<usize>() as u64;
                    // kernels named under upsampled sub-paths still run at the
                    // node's output resolution in this topology
                    total += wparams * hw * hw;
                }
            }
        }
        total
    }

    pub fn summary(&self, img: usize) -> Summary {
        let layers = self
            .nodes
            .iter()
            .map(|n| LayerSummary {
                name: n.name.clone(),
                op: n.op.kind().to_string(),
                inputs: n.inputs.iter().map(|&i| self.nodes[i].name.clone()).collect(),
                out_channels: n.out_c,
                stride: n.out_stride,
                params: param_count_slots(&n.op.slots(), true),
            })
            .collect();
        Summary {
            variant: self.cfg.variant.name().to_string(),
            num_classes: self.cfg.num_classes,
            use_ccs: self.cfg.use_ccs,
            use_xsmall_head: self.cfg.use_xsmall_head,
            use_fca: self.cfg.use_fca,
            image_size: img,
            params_folded: self.param_count(true),
            params_unfolded: self.param_count(false),
            gmacs: self.macs(img) as f64 / 1e9,
            head_strides: self.head_strides.clone(),
            head_grids: self.head_strides.iter().map(|s| img / s).collect(),
            layers,
        }
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[derive(Debug, Serialize)]
pub struct LayerSummary {
    pub name: String,
    pub op: String,
    pub inputs: Vec<String>,
    pub out_channels: usize,
    pub stride: usize,
    pub params: usize,
}

#[derive(Debug, Serialize)]
pub struct Summary {
    pub variant: String,
    pub num_classes: usize,
    pub use_ccs: bool,
    pub use_xsmall_head: bool,
    pub use_fca: bool,
    pub image_size: usize,
    pub params_folded: usize,
    pub params_unfolded: usize,
    pub gmacs: f64,
    pub head_strides: Vec<usize>,
    pub head_grids: Vec<usize>,
    pub layers: Vec<LayerSummary>,
}

impl Summary {
    pub fn render_text(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "variant {}  classes {}  ccs {}  xsmall {}  fca {}",
            self.variant, self.num_classes, self.use_ccs, self.use_xsmall_head, self.use_fca
        );
        let _ = writeln!(
            out,
            "{:<10} {:<9} {:>8} {:>7} {:>10}  inputs",
            "name", "op", "out_ch", "stride", "params"
        );
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{:<10} {:<9} {:>8} {:>7} {:>10}  {}",
                l.name,
                l.op,
                l.out_channels,
                l.stride,
                l.params,
                l.inputs.join(",")
            );
        }
        let _ = writeln!(
            out,
            "params {:.2}M (inference) / {:.2}M (with bn stats)  ~{:.1} GMACs @ {}",
            self.params_folded as f64 / 1e6,
            self.params_unfolded as f64 / 1e6,
            self.gmacs,
            self.image_size
        );
        let _ = writeln!(
            out,
            "heads: strides {:?} -> grids {:?}",
            self.head_strides, self.head_grids
        );
        out
    }
}
