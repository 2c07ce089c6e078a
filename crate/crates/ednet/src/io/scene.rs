//! Synthetic aerial-style scene generator and the JSONL record types used to
//! exchange ground truth and predictions.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{iou, BBox};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 10;

/// Object palette: 5 colors x 2 shapes = 10 classes.
/// class_id = color * 2 + shape (0 = rectangle, 1 = ellipse).
const COLORS: [[f32; 3]; 5] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.75, 0.20],
    [0.20, 0.30, 0.90],
    [0.90, 0.80, 0.10],
    [0.80, 0.20, 0.85],
];

pub fn class_name(class_id: usize) -> String {
    let shape = if class_id % 2 == 0 { "rect" } else { "ellipse" };
    let color = ["red", "green", "blue", "yellow", "magenta"][(class_id / 2).min(4)];
    format!("{color}_{shape}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub bbox: BBox,
    pub class_id: usize,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub image: Tensor,
    pub annotations: Vec<Annotation>,
}

/// Generates one deterministic scene: textured background plus randomly
/// placed non-overlapping rectangles and ellipses, most of them small.
pub fn generate_scene(seed: u64, size: usize, max_objects: usize) -> Scene {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut image = background(&mut r, size);
    let n_objects = r.gen_range((max_objects / 2).max(1)..=max_objects.max(1));
    let mut annotations: Vec<Annotation> = Vec::new();

    'place: for _ in 0..n_objects {
        for _attempt in 0..30 {
            // small-target regime: most boxes 8..48 px a side
            let small = r.gen_bool(0.7);
            let (lo, hi) = if small { (8.0, 48.0) } else { (48.0, 160.0) };
            let bw: f64 = r.gen_range(lo..hi);
            let bh: f64 = r.gen_range(lo..hi);
            if bw >= size as f64 - 2.0 || bh >= size as f64 - 2.0 {
                continue;
            }
            let x1 = r.gen_range(1.0..(size as f64 - bw - 1.0));
            let y1 = r.gen_range(1.0..(size as f64 - bh - 1.0));
            let bbox = BBox::new(x1, y1, x1 + bw, y1 + bh);
            if annotations.iter().any(|a| iou(&a.bbox, &bbox) > 0.05) {
                continue;
            }
            let color_idx = r.gen_range(0..COLORS.len());
            let shape = r.gen_range(0..2usize);
            let class_id = color_idx * 2 + shape;
            draw_object(&mut image, &bbox, COLORS[color_idx], shape == 1, &mut r);
            annotations.push(Annotation { bbox, class_id });
            continue 'place;
        }
        // crowded image: give up on this object
    }
    Scene { image, annotations }
}

fn background(r: &mut ChaCha8Rng, size: usize) -> Tensor {
    // low-frequency vertical gradient plus per-pixel noise, kept in a dull
    // gray-brown band so objects stand out
    let base: [f32; 3] = [r.gen_range(0.35..0.5), r.gen_range(0.35..0.5), r.gen_range(0.3..0.45)];
    let mut t = Tensor::zeros(1, 3, size, size);
    for y in 0..size {
        let grad = 0.06 * (y as f32 / size as f32 - 0.5);
        for x in 0..size {
            let noise = r.gen_range(-0.04..0.04f32);
            for c in 0..3 {
                *t.at_mut(0, c, y, x) = (base[c] + grad + noise).clamp(0.0, 1.0);
            }
        }
    }
    t
}

fn draw_object(img: &mut Tensor, b: &BBox, color: [f32; 3], ellipse: bool, r: &mut ChaCha8Rng) {
    let jitter: f32 = r.gen_range(-0.08..0.08);
    let (cx, cy) = b.center();
    let (rx, ry) = (b.width() / 2.0, b.height() / 2.0);
    let x1 = b.x1.floor().max(0.0) as usize;
    let y1 = b.y1.floor().max(0.0) as usize;
    let x2 = (b.x2.ceil() as usize).min(img.w());
    let y2 = (b.y2.ceil() as usize).min(img.h());
    for y in y1..y2 {
        for x in x1..x2 {
            if ellipse {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                if dx * dx + dy * dy > 1.0 {
                    continue;
                }
            }
            for c in 0..3 {
                *img.at_mut(0, c, y, x) = (color[c] + jitter).clamp(0.0, 1.0);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// JSONL records

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GtRecord {
    pub image_id: String,
    pub class_id: usize,
    /// [x1, y1, x2, y2] in source-image pixels
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PredRecord {
    pub image_id: String,
    pub class_id: usize,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

pub fn bbox_of(arr: [f64; 4]) -> BBox {
    BBox::new(arr[0], arr[1], arr[2], arr[3])
}

pub fn arr_of(b: &BBox) -> [f64; 4] {
    [b.x1, b.y1, b.x2, b.y2]
}

/// Reads one JSON record per line; errors carry the 1-based line number.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(&line).map_err(|e| {
            Error::Schema(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
