//! PNG output. Every figure carries the config hash and its checkpoint as text chunks.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use distill_core::{Error, Result};

pub fn write_png(
    path: &Path,
    (width, height, channels): (usize, usize, usize),
    bytes: &[u8],
    text: &[(&str, &str)],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(match channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::Shape(format!("cannot write {c}-channel PNG"))),
    });
    enc.set_depth(png::BitDepth::Eight);
    let fail = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    for (k, v) in text {
        enc.add_text_chunk(k.to_string(), v.to_string()).map_err(fail)?;
    }
    let mut w = enc.write_header().map_err(fail)?;
    w.write_image_data(bytes).map_err(fail)?;
    w.finish().map_err(fail)
}

/// Evenly spaced hues for `n` classes.
fn class_color(k: usize, n: usize) -> [u8; 3] {
    let h = k as f64 / n.max(1) as f64 * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [r, g, b].map(|c: f64| (c * 220.0).round() as u8)
}

/// A `size x size` RGB scatter plot of `points`, coloured by label.
pub fn scatter(points: &[[f64; 2]], labels: &[usize], size: usize) -> Vec<u8> {
    let mut img = vec![255u8; size * size * 3];
    if points.is_empty() {
        return img;
    }
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    let bounds = |k: usize| {
        let lo = points.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
        (lo, (hi - lo).max(1e-12))
    };
    let (bx, by) = (bounds(0), bounds(1));
    let margin = 8.0;
    let span = size as f64 - 2.0 * margin - 2.0;
    for (p, &l) in points.iter().zip(labels) {
        let x = (margin + (p[0] - bx.0) / bx.1 * span) as usize;
        let y = (margin + (1.0 - (p[1] - by.0) / by.1) * span) as usize;
        let c = class_color(l, classes);
        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let at = ((y + dy) * size + x + dx) * 3;
            img[at..at + 3].copy_from_slice(&c);
        }
    }
    img
}
