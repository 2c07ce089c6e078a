//! Command-line front end: model summaries, synthetic data and weight
//! generation, detection, evaluation, benchmarking, quantization and the
//! loss gradient check.
//!
//! Exit codes: 0 success, 2 usage errors, 3 malformed input data,
//! 4 internal failures.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use ednet::blocks::{FloatExec, WeightMap};
use ednet::decode::{decode, inject_oracle, Detection, REG_BINS};
use ednet::graph::{build, NetGraph, Variant, VariantConfig};
use ednet::io::image::{draw_box, letterbox, read_ppm, write_ppm};
use ednet::io::scene::{arr_of, bbox_of, generate_scene, read_jsonl, write_jsonl, GtRecord, PredRecord};
use ednet::io::weights::{load_quantized, load_weights, save_quantized, save_weights};
use ednet::loss::{fit_box, gradient_check, BBox};
use ednet::metrics::{map_at, map_coco, EvalSample};
use ednet::quant::{quantize_model, QuantExec, QuantizedModel};
use ednet::tensor::{reset_workspace_peak, workspace_peak, Tensor};
use ednet::{Error, Result};

#[derive(Parser)]
#[command(name = "ednet", version, about = "CPU inference and tooling for a small-target detector")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the layer table and parameter/MAC budget of a variant
    Summary(SummaryArgs),
    /// Write a deterministic synthetic weight file
    GenWeights(GenWeightsArgs),
    /// Render synthetic scenes with exact box annotations
    GenScenes(GenScenesArgs),
    /// Run detection on one image
    Detect(DetectArgs),
    /// Score predictions against ground truth
    Eval(EvalArgs),
    /// Time forward passes and report working-set sizes
    Bench(BenchArgs),
    /// Calibrate and write an int8 model
    Quantize(QuantizeArgs),
    /// Verify loss gradients against finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// Model scale: tiny|n|s|m|b|l|x
    #[arg(long, default_value = "n")]
    variant: String,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Disable the cross-stage concat rewiring
    #[arg(long)]
    no_ccs: bool,
    /// Drop the extra stride-4 detection level
    #[arg(long)]
    no_xsmall: bool,
    /// Use plain bottlenecks instead of attention-gated ones
    #[arg(long)]
    no_fca: bool,
}

impl ModelArgs {
    fn config(&self) -> Result<VariantConfig> {
        let mut cfg = VariantConfig::new(Variant::parse(&self.variant)?);
        cfg.num_classes = self.classes;
        cfg.use_ccs = !self.no_ccs;
        cfg.use_xsmall_head = !self.no_xsmall;
        cfg.use_fca = !self.no_fca;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SummaryArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 640)]
    img: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GenWeightsArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Store binary16 payloads instead of f32
    #[arg(long)]
    half: bool,
}

#[derive(Args)]
struct GenScenesArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 640)]
    size: usize,
    #[arg(long, default_value_t = 12)]
    max_objects: usize,
}

#[derive(Args)]
struct DetectArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Seed for synthetic weights when --weights is absent
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 640)]
    img: usize,
    #[arg(long, default_value_t = 0.25)]
    conf: f64,
    #[arg(long, default_value_t = 300)]
    topk: usize,
    /// Bypass the network: build head maps from this ground-truth file and
    /// decode them (tests the decode path end to end)
    #[arg(long)]
    inject_oracle: Option<PathBuf>,
    #[arg(long)]
    out_json: Option<PathBuf>,
    #[arg(long)]
    out_ppm: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// "coco" for the 0.50:0.05:0.95 sweep, else one threshold like "0.5"
    #[arg(long, default_value = "0.5")]
    iou: String,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 640)]
    img: usize,
    #[arg(long, default_value_t = 3)]
    runs: usize,
    /// Worker threads (defaults to EDNET_THREADS or 1); images are
    /// distributed across threads, results stay bit-identical
    #[arg(long)]
    threads: Option<usize>,
    /// Also run this quantized model and compare
    #[arg(long)]
    quantized: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct QuantizeArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    weights: PathBuf,
    /// Directory of calibration .ppm images
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 640)]
    img: usize,
    /// Clip activation ranges at this percentile (e.g. 0.9999)
    #[arg(long)]
    percentile: Option<f64>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    step: f64,
    /// Also run the box-fitting convergence demo
    #[arg(long)]
    fit: bool,
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Schema(_) | Error::Format { .. } | Error::Json(_) => 3,
                _ => 4,
            };
            std::process::exit(code);
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Summary(a) => cmd_summary(a),
        Cmd::GenWeights(a) => cmd_gen_weights(a),
        Cmd::GenScenes(a) => cmd_gen_scenes(a),
        Cmd::Detect(a) => cmd_detect(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Quantize(a) => cmd_quantize(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn cmd_summary(a: SummaryArgs) -> Result<()> {
    let g = build(&a.model.config()?);
    let s = g.summary(a.img);
    if a.json {
        println!("{}", serde_json::to_string_pretty(&s)?);
    } else {
        print!("{}", s.render_text());
    }
    Ok(())
}

fn cmd_gen_weights(a: GenWeightsArgs) -> Result<()> {
    let g = build(&a.model.config()?);
    let weights = g.init_weights(a.seed);
    save_weights(&a.out, &weights, a.half)?;
    println!(
        "wrote {} slots ({:.2}M params) to {}",
        weights.len(),
        g.param_count(true) as f64 / 1e6,
        a.out.display()
    );
    Ok(())
}

fn cmd_gen_scenes(a: GenScenesArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out_dir)?;
    let mut gt: Vec<GtRecord> = Vec::new();
    for i in 0..a.count {
        let scene = generate_scene(a.seed.wrapping_add(i as u64), a.size, a.max_objects);
        let image_id = format!("scene_{i:03}");
        write_ppm(&a.out_dir.join(format!("{image_id}.ppm")), &scene.image)?;
        for ann in &scene.annotations {
            gt.push(GtRecord {
                image_id: image_id.clone(),
                class_id: ann.class_id,
                bbox: arr_of(&ann.bbox),
            });
        }
    }
    let gt_path = a.out_dir.join("gt.jsonl");
    write_jsonl(&gt_path, &gt)?;
    println!(
        "wrote {} scenes and {} annotations to {}",
        a.count,
        gt.len(),
        a.out_dir.display()
    );
    Ok(())
}

fn image_id_of(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn load_or_init(g: &NetGraph, weights: &Option<PathBuf>, seed: u64) -> Result<WeightMap> {
    let map = match weights {
        Some(p) => load_weights(p)?,
        None => g.init_weights(seed),
    };
    g.validate_weights(&map)?;
    Ok(map)
}

fn cmd_detect(a: DetectArgs) -> Result<()> {
    let cfg = a.model.config()?;
    let g = build(&cfg);
    let img = read_ppm(&a.image)?;
    let (input, tf) = letterbox(&img, a.img, a.img)?;
    let image_id = image_id_of(&a.image);

    let maps: Vec<Tensor> = match &a.inject_oracle {
        Some(gt_path) => {
            let gts: Vec<GtRecord> = read_jsonl(gt_path)?;
            let anns: Vec<(BBox, usize)> = gts
                .iter()
                .filter(|r| r.image_id == image_id)
                .map(|r| (tf.map_box(&bbox_of(r.bbox)), r.class_id))
                .collect();
            let mut maps: Vec<Tensor> = g
                .head_strides
                .iter()
                .map(|&s| Tensor::zeros(1, 4 * REG_BINS + cfg.num_classes, a.img / s, a.img / s))
                .collect();
            let injected = inject_oracle(&mut maps, &g.head_strides, &anns)?;
            eprintln!("oracle: injected {injected}/{} annotations", anns.len());
            maps
        }
        None => {
            let weights = load_or_init(&g, &a.weights, a.seed)?;
            g.forward_float(&input, &weights)?
        }
    };

    let map_refs: Vec<&Tensor> = maps.iter().collect();
    let dets = decode(&map_refs, &g.head_strides, a.conf, a.topk)?;
    let unmapped: Vec<Detection> = dets
        .iter()
        .map(|d| Detection { bbox: tf.unmap_box(&d.bbox), ..*d })
        .collect();
    println!("{} detections", unmapped.len());
    for d in unmapped.iter().take(20) {
        println!(
            "  class {:>2} score {:.3}  [{:.1}, {:.1}, {:.1}, {:.1}]",
            d.class_id, d.score, d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2
        );
    }

    if let Some(p) = &a.out_json {
        let recs: Vec<PredRecord> = unmapped
            .iter()
            .map(|d| PredRecord {
                image_id: image_id.clone(),
                class_id: d.class_id,
                score: d.score,
                bbox: arr_of(&d.bbox),
            })
            .collect();
        write_jsonl(p, &recs)?;
    }
    if let Some(p) = &a.out_ppm {
        let mut vis = img;
        for d in &unmapped {
            draw_box(&mut vis, &d.bbox, [1.0, 1.0, 1.0]);
        }
        write_ppm(p, &vis)?;
    }
    Ok(())
}

fn validate_box(idx: usize, what: &str, b: [f64; 4]) -> Result<()> {
    if b.iter().any(|v| !v.is_finite()) || b[2] < b[0] || b[3] < b[1] {
        return Err(Error::Schema(format!("{what} record {}: malformed box {b:?}", idx + 1)));
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let preds: Vec<PredRecord> = read_jsonl(&a.pred)?;
    let gts: Vec<GtRecord> = read_jsonl(&a.gt)?;
    for (i, p) in preds.iter().enumerate() {
        validate_box(i, "prediction", p.bbox)?;
        if !(0.0..=1.0).contains(&p.score) {
            return Err(Error::Schema(format!("prediction record {}: score {} outside [0,1]", i + 1, p.score)));
        }
    }
    for (i, g) in gts.iter().enumerate() {
        validate_box(i, "ground-truth", g.bbox)?;
    }

    let mut samples: BTreeMap<String, EvalSample> = BTreeMap::new();
    for g in &gts {
        samples
            .entry(g.image_id.clone())
            .or_default()
            .ground_truths
            .push((bbox_of(g.bbox), g.class_id));
    }
    for p in &preds {
        samples.entry(p.image_id.clone()).or_default().detections.push(Detection {
            bbox: bbox_of(p.bbox),
            class_id: p.class_id,
            score: p.score,
        });
    }
    let samples: Vec<EvalSample> = samples.into_values().collect();
    let num_classes = gts
        .iter()
        .map(|g| g.class_id + 1)
        .chain(preds.iter().map(|p| p.class_id + 1))
        .max()
        .unwrap_or(1);

    if a.iou == "coco" {
        let (m50, m5095) = map_coco(&samples, num_classes);
        println!("mAP@50      {m50:.6}");
        println!("mAP@50-95   {m5095:.6}");
    } else {
        let t: f64 = a
            .iou
            .parse()
            .map_err(|_| Error::InvalidArg(format!("--iou '{}' is neither a number nor 'coco'", a.iou)))?;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArg(format!("--iou {t} outside [0,1]")));
        }
        let m = map_at(&samples, num_classes, t);
        println!("mAP@{:.0}      {m:.6}", t * 100.0);
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct BenchMode {
    mode: String,
    runs: usize,
    threads: usize,
    per_run_ms: Vec<f64>,
    mean_ms: f64,
    checksum: f64,
    workspace_peak_bytes: usize,
}

#[derive(serde::Serialize)]
struct BenchReport {
    variant: String,
    image_size: usize,
    params: usize,
    gmacs: f64,
    modes: Vec<BenchMode>,
}

fn bench_inputs(runs: usize, img: usize, seed: u64) -> Vec<Tensor> {
    use rand::{Rng, SeedableRng};
    (0..runs)
        .map(|i| {
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            Tensor::from_fn(1, 3, img, img, |_, _, _, _| r.gen_range(0.0..1.0))
        })
        .collect()
}

fn checksum(maps: &[Tensor]) -> f64 {
    maps.iter().flat_map(|m| m.data()).map(|&v| v as f64).sum()
}

fn bench_mode(
    g: &NetGraph,
    weights: &WeightMap,
    quant: Option<&QuantizedModel>,
    inputs: &[Tensor],
    threads: usize,
) -> Result<BenchMode> {
    reset_workspace_peak();
    let threads = threads.max(1);
    // strided split: thread t runs inputs t, t+threads, ...; per-image work is
    // pure, so the checksum is independent of the thread count
    let chunks: Vec<Result<Vec<(usize, f64, f64)>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                scope.spawn(move || {
                    let mut out = Vec::new();
                    for i in (t..inputs.len()).step_by(threads) {
                        let clock = Instant::now();
                        let maps = match quant {
                            Some(m) => g.forward(&inputs[i], weights, &mut QuantExec { model: m })?,
                            None => g.forward(&inputs[i], weights, &mut FloatExec)?,
                        };
                        out.push((i, clock.elapsed().as_secs_f64() * 1e3, checksum(&maps)));
                    }
                    Ok(out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("bench worker panicked")).collect()
    });
    let mut per_run: Vec<(f64, f64)> = vec![(0.0, 0.0); inputs.len()];
    for chunk in chunks {
        for (i, ms, sum) in chunk? {
            per_run[i] = (ms, sum);
        }
    }
    let per_run_ms: Vec<f64> = per_run.iter().map(|r| r.0).collect();
    let mean_ms = per_run_ms.iter().sum::<f64>() / per_run_ms.len() as f64;
    Ok(BenchMode {
        mode: if quant.is_some() { "int8".into() } else { "float".into() },
        runs: inputs.len(),
        threads: threads.max(1),
        per_run_ms,
        mean_ms,
        checksum: per_run.iter().map(|r| r.1).sum(),
        workspace_peak_bytes: workspace_peak(),
    })
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let cfg = a.model.config()?;
    let g = build(&cfg);
    let weights = load_or_init(&g, &a.weights, a.seed)?;
    let threads = a
        .threads
        .or_else(|| std::env::var("EDNET_THREADS").ok().and_then(|v| v.parse().ok()))
        .unwrap_or(1);
    let inputs = bench_inputs(a.runs.max(1), a.img, 1234);

    let mut modes = vec![bench_mode(&g, &weights, None, &inputs, threads)?];
    if let Some(qpath) = &a.quantized {
        let model = load_quantized(qpath)?;
        modes.push(bench_mode(&g, &weights, Some(&model), &inputs, threads)?);
    }
    let report = BenchReport {
        variant: cfg.variant.name().into(),
        image_size: a.img,
        params: g.param_count(true),
        gmacs: g.macs(a.img) as f64 / 1e9,
        modes,
    };
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!(
            "variant {}  {:.2}M params  ~{:.1} GMACs @ {}",
            report.variant,
            report.params as f64 / 1e6,
            report.gmacs,
            report.image_size
        );
        for m in &report.modes {
            println!(
                "{:<6} {} run(s) x {} thread(s): mean {:.1} ms  checksum {:.6e}  workspace {:.1} MiB",
                m.mode,
                m.runs,
                m.threads,
                m.mean_ms,
                m.checksum,
                m.workspace_peak_bytes as f64 / (1024.0 * 1024.0)
            );
        }
    }
    Ok(())
}

fn cmd_quantize(a: QuantizeArgs) -> Result<()> {
    let cfg = a.model.config()?;
    let g = build(&cfg);
    let weights = load_weights(&a.weights)?;
    g.validate_weights(&weights)?;

    let mut paths: Vec<PathBuf> = std::fs::read_dir(&a.images)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == "ppm").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidArg(format!(
            "no .ppm calibration images in {}",
            a.images.display()
        )));
    }
    let mut calib = Vec::new();
    for p in &paths {
        let img = read_ppm(p)?;
        let (boxed, _) = letterbox(&img, a.img, a.img)?;
        calib.push(boxed);
    }
    let (model, reports) = quantize_model(&g, &weights, &calib, a.percentile)?;
    save_quantized(&a.out, &model)?;
    let min = reports.iter().map(|r| r.weight_sqnr_db).fold(f64::INFINITY, f64::min);
    let mean = reports.iter().map(|r| r.weight_sqnr_db).sum::<f64>() / reports.len() as f64;
    println!(
        "quantized {} sites from {} image(s); weight sqnr min {:.1} dB mean {:.1} dB -> {}",
        model.sites.len(),
        calib.len(),
        min,
        mean,
        a.out.display()
    );
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let report = gradient_check(a.trials, a.seed, a.step);
    println!(
        "gradcheck: {} trials, {} evaluated, {} skipped at kinks, max rel err {:.3e}",
        report.trials, report.evaluated, report.skipped_kinks, report.max_rel_err
    );
    if report.max_rel_err > 1e-4 {
        return Err(Error::InvalidArg(format!(
            "gradient check failed: max rel err {:.3e}",
            report.max_rel_err
        )));
    }
    if a.fit {
        let gt = BBox::new(40.0, 30.0, 90.0, 85.0);
        let start = BBox::new(10.0, 12.0, 25.0, 30.0);
        let (fitted, iou, steps) = fit_box(&start, &gt, 500);
        println!(
            "fit: iou {:.4} after {} steps -> [{:.2}, {:.2}, {:.2}, {:.2}]",
            iou, steps, fitted.x1, fitted.y1, fitted.x2, fitted.y2
        );
    }
    Ok(())
}
