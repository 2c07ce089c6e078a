//! PPM (P6) image reading/writing, bilinear letterbox resizing and the
//! coordinate transform for mapping detections back to source pixels.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::loss::BBox;
use crate::tensor::Tensor;

/// Pad color used outside the letterboxed content area.
pub const PAD_GRAY: f32 = 114.0 / 255.0;

/// Reads a binary P6 PPM into a (1, 3, h, w) tensor scaled to [0, 1].
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_ppm(&bytes)
}

pub fn parse_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0usize;
    let mut token = |what: &str| -> Result<String> {
        // skip whitespace and '#' comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Schema(format!("ppm: unexpected end of header reading {what}")));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    let magic = token("magic")?;
    if magic != "P6" {
        return Err(Error::Schema(format!("ppm: magic '{magic}', only binary P6 is supported")));
    }
    let parse_dim = |s: String, what: &str| -> Result<usize> {
        s.parse::<usize>()
            .map_err(|_| Error::Schema(format!("ppm: invalid {what} '{s}'")))
    };
    let w = parse_dim(token("width")?, "width")?;
    let h = parse_dim(token("height")?, "height")?;
    let maxval = parse_dim(token("maxval")?, "maxval")?;
    if maxval != 255 {
        return Err(Error::Schema(format!("ppm: maxval {maxval}, expected 255")));
    }
    if w == 0 || h == 0 {
        return Err(Error::Schema(format!("ppm: degenerate size {w}x{h}")));
    }
    // exactly one whitespace byte separates header and payload
    pos += 1;
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(Error::Schema(format!(
            "ppm: payload has {} bytes, {need} required for {w}x{h}",
            bytes.len().saturating_sub(pos)
        )));
    }
    let pix = &bytes[pos..pos + need];
    let mut t = Tensor::zeros(1, 3, h, w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                *t.at_mut(0, c, y, x) = pix[(y * w + x) * 3 + c] as f32 / 255.0;
            }
        }
    }
    Ok(t)
}

pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    if img.c() != 3 || img.n() != 1 {
        return Err(Error::Shape(format!("ppm writer expects (1,3,h,w), got {:?}", img.shape())));
    }
    let (h, w) = (img.h(), img.w());
    let mut out = Vec::with_capacity(32 + w * h * 3);
    out.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = (img.at(0, c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
                out.push(v);
            }
        }
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Bilinear resize with half-pixel-centered sampling and edge clamping.
pub fn bilinear_resize(img: &Tensor, ow: usize, oh: usize) -> Result<Tensor> {
    if ow == 0 || oh == 0 {
        return Err(Error::InvalidArg("resize target must be positive".into()));
    }
    let (n, c, ih, iw) = img.shape();
    let sx = iw as f64 / ow as f64;
    let sy = ih as f64 / oh as f64;
    let mut out = Tensor::zeros(n, c, oh, ow);
    for ni in 0..n {
        for ci in 0..c {
            let src = img.plane(ni, ci);
            for oy in 0..oh {
                let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (ih - 1) as f64);
                let y0 = fy.floor() as usize;
                let y1 = (y0 + 1).min(ih - 1);
                let wy = (fy - y0 as f64) as f32;
                for ox in 0..ow {
                    let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (iw - 1) as f64);
                    let x0 = fx.floor() as usize;
                    let x1 = (x0 + 1).min(iw - 1);
                    let wx = (fx - x0 as f64) as f32;
                    let top = src[y0 * iw + x0] * (1.0 - wx) + src[y0 * iw + x1] * wx;
                    let bot = src[y1 * iw + x0] * (1.0 - wx) + src[y1 * iw + x1] * wx;
                    *out.at_mut(ni, ci, oy, ox) = top * (1.0 - wy) + bot * wy;
                }
            }
        }
    }
    Ok(out)
}

/// Mapping from letterboxed coordinates back to the source image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub scale: f64,
    pub pad_x: f64,
    pub pad_y: f64,
    pub orig_w: usize,
    pub orig_h: usize,
}

impl Transform {
    /// Maps a box from network input coordinates to source pixels, clamped to
    /// the source extent.
    pub fn unmap_box(&self, b: &BBox) -> BBox {
        let f = |v: f64, pad: f64, lim: usize| ((v - pad) / self.scale).clamp(0.0, lim as f64);
        BBox {
            x1: f(b.x1, self.pad_x, self.orig_w),
            y1: f(b.y1, self.pad_y, self.orig_h),
            x2: f(b.x2, self.pad_x, self.orig_w),
            y2: f(b.y2, self.pad_y, self.orig_h),
        }
    }

    /// Maps a source-pixel box into network input coordinates.
    pub fn map_box(&self, b: &BBox) -> BBox {
        BBox {
            x1: b.x1 * self.scale + self.pad_x,
            y1: b.y1 * self.scale + self.pad_y,
            x2: b.x2 * self.scale + self.pad_x,
            y2: b.y2 * self.scale + self.pad_y,
        }
    }
}

/// Aspect-preserving resize onto a (tw, th) canvas, gray-padded and centered.
pub fn letterbox(img: &Tensor, tw: usize, th: usize) -> Result<(Tensor, Transform)> {
    let (_, c, ih, iw) = img.shape();
    if c != 3 {
        return Err(Error::Shape(format!("letterbox expects 3 channels, got {c}")));
    }
    let scale = (tw as f64 / iw as f64).min(th as f64 / ih as f64);
    let rw = ((iw as f64 * scale).round() as usize).clamp(1, tw);
    let rh = ((ih as f64 * scale).round() as usize).clamp(1, th);
    let resized = bilinear_resize(img, rw, rh)?;
    let pad_x = (tw - rw) / 2;
    let pad_y = (th - rh) / 2;
    let mut out = Tensor::filled(1, 3, th, tw, PAD_GRAY);
    for ci in 0..3 {
        for y in 0..rh {
            for x in 0..rw {
                *out.at_mut(0, ci, y + pad_y, x + pad_x) = resized.at(0, ci, y, x);
            }
        }
    }
    Ok((
        out,
        Transform {
            scale,
            pad_x: pad_x as f64,
            pad_y: pad_y as f64,
            orig_w: iw,
            orig_h: ih,
        },
    ))
}

/// Draws a 1px box outline (in-place) in image coordinates.
pub fn draw_box(img: &mut Tensor, b: &BBox, color: [f32; 3]) {
    let (h, w) = (img.h(), img.w());
    let x1 = (b.x1.round().max(0.0) as usize).min(w.saturating_sub(1));
    let x2 = (b.x2.round().max(0.0) as usize).min(w.saturating_sub(1));
    let y1 = (b.y1.round().max(0.0) as usize).min(h.saturating_sub(1));
    let y2 = (b.y2.round().max(0.0) as usize).min(h.saturating_sub(1));
    for x in x1..=x2 {
        for c in 0..3 {
            *img.at_mut(0, c, y1, x) = color[c];
            *img.at_mut(0, c, y2, x) = color[c];
        }
    }
    for y in y1..=y2 {
        for c in 0..3 {
            *img.at_mut(0, c, y, x1) = color[c];
            *img.at_mut(0, c, y, x2) = color[c];
        }
    }
}
