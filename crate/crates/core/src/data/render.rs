//! Deterministic scene rendering plus PPM/PGM file handling.
//!
//! Layout on an S x S canvas: a central glyph box whose shape and color
//! come from `object_id`, a periodic background texture from
//! `background_id`, small fixed-position corner markers for attributes, a
//! secondary glyph offset by the relation code, and finally a global,
//! exactly invertible style transform (channel rotation plus a power-of-two
//! contrast scale).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::data::scene::LatentScene;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const OBJECT_PALETTE: [[f64; 3]; 4] = [
    [0.85, 0.10, 0.15], // crimson
    [0.10, 0.35, 0.90], // azure
    [0.95, 0.70, 0.10], // amber
    [0.10, 0.70, 0.40], // viridian
];

const BACKGROUND_PALETTE: [[f64; 3]; 8] = [
    [0.35, 0.70, 0.30],
    [0.75, 0.80, 0.85],
    [0.15, 0.45, 0.60],
    [0.85, 0.75, 0.45],
    [0.55, 0.65, 0.25],
    [0.50, 0.50, 0.55],
    [0.30, 0.55, 0.35],
    [0.70, 0.85, 0.90],
];

const ATTRIBUTE_PALETTE: [[f64; 3]; 8] = [
    [0.95, 0.95, 0.20],
    [0.20, 0.95, 0.95],
    [0.95, 0.20, 0.95],
    [0.98, 0.55, 0.15],
    [0.15, 0.15, 0.95],
    [0.95, 0.15, 0.15],
    [0.15, 0.95, 0.15],
    [0.90, 0.90, 0.90],
];

const SECONDARY_COLOR: [f64; 3] = [0.92, 0.92, 0.88];

/// (channel rotation, contrast scale) per style id; scales are powers of two
/// so the transform inverts bit-exactly.
const STYLES: [(usize, f64); 4] = [(0, 1.0), (1, 1.0), (0, 0.5), (2, 0.25)];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PixelRegion {
    /// Central glyph box driven by `object_id`.
    Glyph,
    /// Any of the four possible secondary-glyph zones.
    Relation,
    /// Attribute marker strip.
    Marker,
    /// Untouched periodic texture.
    Background,
}

fn glyph_box(s: usize) -> (usize, usize) {
    (s / 4, 3 * s / 4)
}

/// Secondary glyph bounds (y0, y1, x0, x1) for a relation code.
fn relation_box(code: usize, s: usize) -> (usize, usize, usize, usize) {
    let side = s / 8;
    let (cy, cx) = match code {
        0 => (s / 2, s / 8),         // left
        1 => (s / 2, 7 * s / 8),     // right
        2 => (s / 8, s / 2),         // above
        _ => (7 * s / 8, s / 2),     // below
    };
    (cy - side / 2, cy + side / 2, cx - side / 2, cx + side / 2)
}

fn marker_box(slot: usize, s: usize) -> (usize, usize, usize, usize) {
    let cell = s / 8;
    let size = (s / 16).max(1);
    (s - 1 - size, s - 1, slot * cell + 1, slot * cell + 1 + size)
}

/// Classifies a pixel for the region-dependency contracts: glyph pixels may
/// change only with `object_id`, marker pixels only with attributes, and
/// pure-background pixels only with `background_id` (before styling).
pub fn pixel_region(y: usize, x: usize, s: usize) -> PixelRegion {
    let (lo, hi) = glyph_box(s);
    if y >= lo && y < hi && x >= lo && x < hi {
        return PixelRegion::Glyph;
    }
    for code in 0..4 {
        let (y0, y1, x0, x1) = relation_box(code, s);
        if y >= y0 && y < y1 && x >= x0 && x < x1 {
            return PixelRegion::Relation;
        }
    }
    for slot in 0..super::scene::ATTRIBUTE_COUNT {
        let (y0, y1, x0, x1) = marker_box(slot, s);
        if y >= y0 && y < y1 && x >= x0 && x < x1 {
            return PixelRegion::Marker;
        }
    }
    PixelRegion::Background
}

fn inside_shape(kind: usize, y: f64, x: f64, cy: f64, cx: f64, r: f64) -> bool {
    match kind {
        0 => (y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r, // disc
        1 => (y - cy).abs() <= 0.8 * r && (x - cx).abs() <= 0.8 * r, // block
        2 => {
            // wedge: triangle widening downward
            let dy = y - (cy - r);
            dy >= 0.0 && dy <= 2.0 * r && (x - cx).abs() <= dy / 2.0
        }
        _ => (y - cy).abs() + (x - cx).abs() <= r, // rhomb
    }
}

fn background_texel(background_id: usize, y: usize, x: usize) -> [f64; 3] {
    let base = BACKGROUND_PALETTE[background_id];
    let dark = [base[0] * 0.6, base[1] * 0.6, base[2] * 0.6];
    let period = 2 + background_id % 4;
    let on = if background_id < 4 {
        // stripes, horizontal or diagonal
        let line = if background_id % 2 == 0 { y } else { y + x };
        (line / period) % 2 == 0
    } else {
        ((y / period) % 2) == ((x / period) % 2) // checker
    };
    if on {
        base
    } else {
        dark
    }
}

/// Apply style `style_id` to an unstyled pixel; exactly invertible.
fn style_pixel(style_id: usize, rgb: [f64; 3]) -> [f64; 3] {
    let (rot, scale) = STYLES[style_id];
    let mut out = [0.0; 3];
    for c in 0..3 {
        out[(c + rot) % 3] = rgb[c] * scale;
    }
    out
}

/// Undo a style transform, bit for bit.
pub fn unstyle_pixel(style_id: usize, rgb: [f64; 3]) -> [f64; 3] {
    let (rot, scale) = STYLES[style_id];
    let mut out = [0.0; 3];
    for c in 0..3 {
        out[c] = rgb[(c + rot) % 3] / scale;
    }
    out
}

/// Render a scene to a `[3,S,S]` tensor with values in `[0,1]`; a pure function
/// of the scene's factor ids.
pub fn render_image(scene: &LatentScene, image_size: usize) -> Result<Tensor> {
    let s = image_size;
    if s < 16 || s % 16 != 0 {
        return Err(Error::InvalidConfig(format!(
            "image size {s} must be a positive multiple of 16"
        )));
    }
    let shape_kind = scene.object_id % 4;
    let obj_color = OBJECT_PALETTE[scene.object_id / 4];
    let (lo, hi) = glyph_box(s);
    let center = (s as f64 - 1.0) / 2.0;
    let radius = s as f64 / 4.0 - 1.0;

    let mut data = vec![0.0; 3 * s * s];
    let mut put = |y: usize, x: usize, rgb: [f64; 3]| {
        for c in 0..3 {
            data[c * s * s + y * s + x] = rgb[c];
        }
    };

    for y in 0..s {
        for x in 0..s {
            let mut rgb = background_texel(scene.background_id, y, x);
            if y >= lo && y < hi && x >= lo && x < hi {
                if inside_shape(shape_kind, y as f64, x as f64, center, center, radius) {
                    rgb = obj_color;
                }
            }
            put(y, x, rgb);
        }
    }

    let (y0, y1, x0, x1) = relation_box(scene.relation, s);
    for y in y0..y1 {
        for x in x0..x1 {
            put(y, x, SECONDARY_COLOR);
        }
    }

    for &attr in &scene.attributes {
        let (y0, y1, x0, x1) = marker_box(attr, s);
        for y in y0..y1 {
            for x in x0..x1 {
                put(y, x, ATTRIBUTE_PALETTE[attr]);
            }
        }
    }

    for y in 0..s {
        for x in 0..s {
            let rgb = [
                data[y * s + x],
                data[s * s + y * s + x],
                data[2 * s * s + y * s + x],
            ];
            let styled = style_pixel(scene.style_id, rgb);
            for c in 0..3 {
                data[c * s * s + y * s + x] = styled[c];
            }
        }
    }

    Ok(Tensor::from_parts(vec![3, s, s], data))
}

/// Write a `[3,S,S]` tensor as binary 8-bit PPM (P6).
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 || shape[1] != shape[2] {
        return Err(Error::ShapeMismatch(format!(
            "PPM writer expects [3,S,S], got {shape:?}"
        )));
    }
    let s = shape[1];
    let mut bytes = format!("P6\n{s} {s}\n255\n").into_bytes();
    let data = image.data();
    for y in 0..s {
        for x in 0..s {
            for c in 0..3 {
                let v = (data[c * s * s + y * s + x] * 255.0).round().clamp(0.0, 255.0);
                bytes.push(v as u8);
            }
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a binary 8-bit PPM back into a `[3,S,S]` tensor in `[0,1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Parse {
        line: 0,
        message: format!("{}: {msg}", path.display()),
    };
    let mut pos = 0usize;
    let mut field = |bytes: &[u8]| -> Option<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start).then(|| String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if field(&bytes).as_deref() != Some("P6") {
        return Err(bad("not a P6 PPM"));
    }
    let w: usize = field(&bytes).and_then(|v| v.parse().ok()).ok_or_else(|| bad("bad width"))?;
    let h: usize = field(&bytes).and_then(|v| v.parse().ok()).ok_or_else(|| bad("bad height"))?;
    let maxval: usize = field(&bytes).and_then(|v| v.parse().ok()).ok_or_else(|| bad("bad maxval"))?;
    if w != h || maxval != 255 {
        return Err(bad("expected square image with maxval 255"));
    }
    pos += 1; // single whitespace after maxval
    if bytes.len() < pos + 3 * w * h {
        return Err(bad("truncated pixel data"));
    }
    let mut data = vec![0.0; 3 * w * h];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[c * w * h + y * w + x] = bytes[pos + (y * w + x) * 3 + c] as f64 / 255.0;
            }
        }
    }
    Ok(Tensor::from_parts(vec![3, h, w], data))
}

/// Write per-patch scores as a binary PGM (P5) heatmap on the patch grid,
/// scaled to `[0,255]`.
pub fn write_pgm(path: &Path, grid: usize, scores: &[f64]) -> Result<()> {
    if scores.len() != grid * grid {
        return Err(Error::ShapeMismatch(format!(
            "{} scores do not fill a {grid}x{grid} grid",
            scores.len()
        )));
    }
    let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let mut bytes = format!("P5\n{grid} {grid}\n255\n").into_bytes();
    for &v in scores {
        let scaled = if span > 0.0 { (v - min) / span * 255.0 } else { 0.0 };
        bytes.push(scaled.round().clamp(0.0, 255.0) as u8);
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}
