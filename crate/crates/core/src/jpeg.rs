//! Lossy JPEG-style compression (block DCT + quantisation only) and a
//! blockiness measure for the 8×8 grid artifacts it leaves behind.
//!
//! No chroma subsampling and no entropy coding: the output is the decoded
//! image a real baseline JPEG round trip would produce at the same tables.

use std::sync::OnceLock;

use crate::error::{validation, Result};
use crate::image::Image;

pub const BLOCK: usize = 8;

/// Annex K luminance table, row-major (not zig-zag).
pub const BASE_LUMINANCE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

pub type Block = [[f64; 8]; 8];

/// 8×8 quantisation table, row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuantTable(pub [u16; 64]);

impl QuantTable {
    pub fn entry(&self, row: usize, col: usize) -> u16 {
        self.0[row * 8 + col]
    }
}

/// Quality parameter plus the digest of the raw source it was applied to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompressionRecord {
    pub qp: u8,
    pub source_hash: String,
}

fn dct_matrix() -> &'static Block {
    static M: OnceLock<Block> = OnceLock::new();
    M.get_or_init(|| {
        let mut m = [[0.0; 8]; 8];
        for (u, row) in m.iter_mut().enumerate() {
            let alpha = if u == 0 { (1.0f64 / 8.0).sqrt() } else { 0.5 };
            for (x, v) in row.iter_mut().enumerate() {
                *v = alpha * (((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI) / 16.0).cos();
            }
        }
        m
    })
}

/// Orthonormal 2-D type-II DCT: `C · B · Cᵀ`.
pub fn dct8(block: &Block) -> Block {
    let c = dct_matrix();
    let mut tmp = [[0.0; 8]; 8];
    for u in 0..8 {
        for x in 0..8 {
            tmp[u][x] = (0..8).map(|y| c[u][y] * block[y][x]).sum();
        }
    }
    let mut out = [[0.0; 8]; 8];
    for u in 0..8 {
        for v in 0..8 {
            out[u][v] = (0..8).map(|x| tmp[u][x] * c[v][x]).sum();
        }
    }
    out
}

/// Inverse of [`dct8`]: `Cᵀ · F · C`.
pub fn idct8(coeffs: &Block) -> Block {
    let c = dct_matrix();
    let mut tmp = [[0.0; 8]; 8];
    for y in 0..8 {
        for v in 0..8 {
            tmp[y][v] = (0..8).map(|u| c[u][y] * coeffs[u][v]).sum();
        }
    }
    let mut out = [[0.0; 8]; 8];
    for y in 0..8 {
        for x in 0..8 {
            out[y][x] = (0..8).map(|v| tmp[y][v] * c[v][x]).sum();
        }
    }
    out
}

/// IJG quality scaling of the base luminance table.
pub fn quant_table_for_quality(quality: u32) -> Result<QuantTable> {
    if !(1..=100).contains(&quality) {
        return validation(format!("JPEG quality must be in [1, 100], got {quality}"));
    }
    let scale = if quality < 50 { 5000 / quality } else { 200 - 2 * quality };
    let mut table = [0u16; 64];
    for (dst, &base) in table.iter_mut().zip(BASE_LUMINANCE.iter()) {
        let v = (base as u32 * scale + 50) / 100;
        *dst = v.clamp(1, 255) as u16;
    }
    Ok(QuantTable(table))
}

fn check_dims(img: &Image) -> Result<()> {
    if img.width() % BLOCK != 0 || img.height() % BLOCK != 0 {
        return validation(format!(
            "image dimensions must be multiples of 8, got {}x{}",
            img.width(),
            img.height()
        ));
    }
    Ok(())
}

fn clamp_u8(v: f64) -> f64 {
    v.round().clamp(0.0, 255.0)
}

fn rgb_to_ycbcr(p: &[u8]) -> [f64; 3] {
    let (r, g, b) = (p[0] as f64, p[1] as f64, p[2] as f64);
    [
        0.299 * r + 0.587 * g + 0.114 * b,
        128.0 - 0.168_736 * r - 0.331_264 * g + 0.5 * b,
        128.0 + 0.5 * r - 0.418_688 * g - 0.081_312 * b,
    ]
}

fn ycbcr_to_rgb(y: f64, cb: f64, cr: f64) -> [u8; 3] {
    let r = y + 1.402 * (cr - 128.0);
    let g = y - 0.344_136 * (cb - 128.0) - 0.714_136 * (cr - 128.0);
    let b = y + 1.772 * (cb - 128.0);
    [clamp_u8(r) as u8, clamp_u8(g) as u8, clamp_u8(b) as u8]
}

/// Quantises one 8-bit plane in place, block by block.
fn quantize_plane(plane: &mut [f64], width: usize, height: usize, table: &QuantTable) {
    for by in (0..height).step_by(BLOCK) {
        for bx in (0..width).step_by(BLOCK) {
            let mut block = [[0.0; 8]; 8];
            for (y, row) in block.iter_mut().enumerate() {
                for (x, v) in row.iter_mut().enumerate() {
                    *v = plane[(by + y) * width + bx + x] - 128.0;
                }
            }
            let mut coeffs = dct8(&block);
            for (u, row) in coeffs.iter_mut().enumerate() {
                for (v, c) in row.iter_mut().enumerate() {
                    let q = table.entry(u, v) as f64;
                    *c = (*c / q).round() * q;
                }
            }
            let rec = idct8(&coeffs);
            for (y, row) in rec.iter().enumerate() {
                for (x, v) in row.iter().enumerate() {
                    plane[(by + y) * width + bx + x] = clamp_u8(v + 128.0);
                }
            }
        }
    }
}

/// Decoded result of a baseline JPEG round trip at quality `qp`.
///
/// BT.601 full-range YCbCr, 8-bit planes, every channel quantised with the
/// scaled luminance table. Pure and deterministic.
pub fn compress(img: &Image, qp: u32) -> Result<Image> {
    check_dims(img)?;
    let table = quant_table_for_quality(qp)?;
    let (w, h) = (img.width(), img.height());
    let mut planes = [vec![0.0; w * h], vec![0.0; w * h], vec![0.0; w * h]];
    for (i, p) in img.pixels().chunks_exact(3).enumerate() {
        let ycc = rgb_to_ycbcr(p);
        for c in 0..3 {
            planes[c][i] = clamp_u8(ycc[c]);
        }
    }
    for plane in planes.iter_mut() {
        quantize_plane(plane, w, h, &table);
    }
    let mut pixels = Vec::with_capacity(w * h * 3);
    for i in 0..w * h {
        pixels.extend_from_slice(&ycbcr_to_rgb(planes[0][i], planes[1][i], planes[2][i]));
    }
    Image::new(w, h, pixels)
}

/// Excess of mean absolute luma step across the 8-pixel grid over the mean
/// step everywhere else, floored at zero. Horizontal and vertical steps are
/// pooled.
pub fn blockiness(img: &Image) -> Result<f64> {
    check_dims(img)?;
    let (w, h) = (img.width(), img.height());
    let luma = img.luma();
    let (mut on_sum, mut on_n, mut off_sum, mut off_n) = (0.0, 0usize, 0.0, 0usize);
    let mut tally = |step: f64, on_grid: bool| {
        if on_grid {
            on_sum += step;
            on_n += 1;
        } else {
            off_sum += step;
            off_n += 1;
        }
    };
    for y in 0..h {
        for x in 0..w - 1 {
            tally((luma[y * w + x + 1] - luma[y * w + x]).abs(), (x + 1) % BLOCK == 0);
        }
    }
    for y in 0..h - 1 {
        for x in 0..w {
            tally((luma[(y + 1) * w + x] - luma[y * w + x]).abs(), (y + 1) % BLOCK == 0);
        }
    }
    if on_n == 0 || off_n == 0 {
        return Ok(0.0);
    }
    Ok((on_sum / on_n as f64 - off_sum / off_n as f64).max(0.0))
}

/// Compresses and records provenance.
pub fn compress_with_record(img: &Image, qp: u32) -> Result<(Image, CompressionRecord)> {
    let out = compress(img, qp)?;
    Ok((
        out,
        CompressionRecord {
            qp: qp as u8,
            source_hash: img.digest(),
        },
    ))
}

pub fn mse(a: &Image, b: &Image) -> f64 {
    let n = a.pixels().len().max(1) as f64;
    a.pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / n
}
