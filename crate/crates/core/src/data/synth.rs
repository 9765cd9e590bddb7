//! Procedural "real" and "fake" images.
//!
//! Real images mix a smooth Gaussian noise field with a few soft-edged
//! shapes, then add fine grain. Fakes share the same content generator but
//! pass the content through a 2×2 average-down / nearest-neighbour-up cycle
//! before the grain, leaving the period-2 fingerprint typical of upsampling
//! decoders.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::image::Image;

pub const IMAGE_SIZE: usize = 64;

/// Knobs of the generator. `strength` is the fake fingerprint blend.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FingerprintConfig {
    pub strength: f64,
    /// Grain standard deviation is drawn per image from `[grain_lo, grain_hi]`.
    pub grain_lo: f64,
    pub grain_hi: f64,
}

impl Default for FingerprintConfig {
    fn default() -> Self {
        FingerprintConfig {
            strength: 0.5,
            grain_lo: 4.0,
            grain_hi: 12.0,
        }
    }
}

/// Seeds the per-image generator; image `i` of a set seeded `s` uses `s + i`.
pub fn image_rng(seed: u64) -> ChaCha8Rng {
    // splitmix64 finaliser decorrelates consecutive seeds
    let mut z = seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

type Planes = [Vec<f64>; 3];

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i - 1;
    }
    if i >= n {
        i = 2 * n - i - 1;
    }
    i.clamp(0, n - 1) as usize
}

fn blur(field: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; field.len()];
    for y in 0..size {
        for x in 0..size {
            tmp[y * size + x] = k
                .iter()
                .enumerate()
                .map(|(j, w)| w * field[y * size + reflect(x as isize + j as isize - r, size)])
                .sum();
        }
    }
    let mut out = vec![0.0; field.len()];
    for y in 0..size {
        for x in 0..size {
            out[y * size + x] = k
                .iter()
                .enumerate()
                .map(|(j, w)| w * tmp[reflect(y as isize + j as isize - r, size) * size + x])
                .sum();
        }
    }
    out
}

fn smooth_field(rng: &mut ChaCha8Rng, size: usize, sigma: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let white: Vec<f64> = (0..size * size).map(|_| normal.sample(rng)).collect();
    let mut f = blur(&white, size, sigma);
    let mean = f.iter().sum::<f64>() / f.len() as f64;
    let sd = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / f.len() as f64).sqrt();
    f.iter_mut().for_each(|v| *v = (*v - mean) / sd.max(1e-12));
    f
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Grain-free content planes.
fn content(rng: &mut ChaCha8Rng, size: usize) -> Planes {
    let base: [f64; 3] = [rng.gen_range(50.0..200.0), rng.gen_range(50.0..200.0), rng.gen_range(50.0..200.0)];
    let sigma = rng.gen_range(1.5..6.0);
    let luma = smooth_field(rng, size, sigma);
    let amp = rng.gen_range(5.0..40.0);
    let mut planes: Planes = std::array::from_fn(|_| vec![0.0; size * size]);
    for (c, plane) in planes.iter_mut().enumerate() {
        let gain = rng.gen_range(0.8..1.2);
        let sigma = rng.gen_range(3.0..6.0);
        let chroma = smooth_field(rng, size, sigma);
        let camp = rng.gen_range(3.0..10.0);
        for i in 0..size * size {
            plane[i] = base[c] + gain * amp * luma[i] + camp * chroma[i];
        }
    }
    let shapes = rng.gen_range(0..=3);
    for _ in 0..shapes {
        let colour: [f64; 3] = [rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0)];
        let (cx, cy) = (rng.gen_range(0.0..size as f64), rng.gen_range(0.0..size as f64));
        let radius = rng.gen_range(6.0..22.0);
        let aspect = rng.gen_range(0.5..1.0);
        let soft = rng.gen_range(0.7..2.5);
        let is_rect = rng.gen_bool(0.5);
        let opacity = rng.gen_range(0.5..1.0);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 + 0.5 - cx, (y as f64 + 0.5 - cy) / aspect);
                // signed distance to the boundary, negative inside
                let d = if is_rect {
                    dx.abs().max(dy.abs()) - radius
                } else {
                    (dx * dx + dy * dy).sqrt() - radius
                };
                let a = opacity * smoothstep(0.5 - d / (2.0 * soft));
                if a > 0.0 {
                    for c in 0..3 {
                        let p = &mut planes[c][y * size + x];
                        *p = (1.0 - a) * *p + a * colour[c];
                    }
                }
            }
        }
    }
    planes
}

/// 2×2 box average followed by nearest-neighbour ×2 upsampling.
pub fn down_up(plane: &[f64], size: usize) -> Vec<f64> {
    let mut out = vec![0.0; plane.len()];
    for by in (0..size).step_by(2) {
        for bx in (0..size).step_by(2) {
            let m = (plane[by * size + bx]
                + plane[by * size + bx + 1]
                + plane[(by + 1) * size + bx]
                + plane[(by + 1) * size + bx + 1])
                / 4.0;
            for (y, x) in [(by, bx), (by, bx + 1), (by + 1, bx), (by + 1, bx + 1)] {
                out[y * size + x] = m;
            }
        }
    }
    out
}

fn finish(mut planes: Planes, rng: &mut ChaCha8Rng, cfg: &FingerprintConfig, size: usize) -> Image {
    let sigma = if cfg.grain_hi > cfg.grain_lo {
        rng.gen_range(cfg.grain_lo..cfg.grain_hi)
    } else {
        cfg.grain_lo
    };
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).unwrap();
        for plane in planes.iter_mut() {
            for v in plane.iter_mut() {
                *v += normal.sample(rng);
            }
        }
    }
    let mut pixels = Vec::with_capacity(size * size * 3);
    for i in 0..size * size {
        for plane in &planes {
            pixels.push(plane[i].round().clamp(0.0, 255.0) as u8);
        }
    }
    Image::new(size, size, pixels).expect("generator produces well-formed images")
}

/// One image from generator seed `seed`; `fake_strength = None` gives a real image.
pub fn generate_one(seed: u64, fake_strength: Option<f64>, cfg: &FingerprintConfig) -> Image {
    let mut rng = image_rng(seed);
    let mut planes = content(&mut rng, IMAGE_SIZE);
    if let Some(s) = fake_strength {
        for plane in planes.iter_mut() {
            let du = down_up(plane, IMAGE_SIZE);
            for (p, d) in plane.iter_mut().zip(du) {
                *p = (1.0 - s) * *p + s * d;
            }
        }
    }
    finish(planes, &mut rng, cfg, IMAGE_SIZE)
}

/// `count` real images from generator seeds `seed .. seed + count`.
pub fn gen_real(seed: u64, count: usize) -> Vec<Image> {
    let cfg = FingerprintConfig::default();
    (0..count as u64).map(|i| generate_one(seed + i, None, &cfg)).collect()
}

/// `count` fakes over the same seeds as [`gen_real`], blended at `strength`.
pub fn gen_fake(seed: u64, count: usize, strength: f64) -> crate::Result<Vec<Image>> {
    if !(strength > 0.0 && strength <= 1.0) {
        return crate::error::validation(format!("fingerprint strength must be in (0, 1], got {strength}"));
    }
    let cfg = FingerprintConfig::default();
    Ok((0..count as u64)
        .map(|i| generate_one(seed + i, Some(strength), &cfg))
        .collect())
}

/// Mean row/column power spectrum of the luma (64 DFT bins, bin k = k/64 cycles/px).
pub fn luma_power_spectrum(img: &Image) -> Vec<f64> {
    let n = img.width();
    let luma = img.luma();
    let mean = luma.iter().sum::<f64>() / luma.len() as f64;
    let mut power = vec![0.0; n];
    let twiddle: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let a = -std::f64::consts::TAU * k as f64 / n as f64;
            (a.cos(), a.sin())
        })
        .collect();
    let mut line = vec![0.0; n];
    for dir in 0..2 {
        for r in 0..n {
            for (i, v) in line.iter_mut().enumerate() {
                let (y, x) = if dir == 0 { (r, i) } else { (i, r) };
                *v = luma[y * n + x] - mean;
            }
            for (k, p) in power.iter_mut().enumerate() {
                let (mut re, mut im) = (0.0, 0.0);
                for (i, v) in line.iter().enumerate() {
                    let (c, s) = twiddle[(k * i) % n];
                    re += v * c;
                    im += v * s;
                }
                *p += (re * re + im * im) / (2 * n) as f64;
            }
        }
    }
    power
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        assert_eq!(gen_real(10, 2), gen_real(10, 2));
        assert_ne!(gen_real(10, 1), gen_real(11, 1));
        assert_eq!(gen_fake(3, 2, 0.7).unwrap(), gen_fake(3, 2, 0.7).unwrap());
    }

    #[test]
    fn vanishing_strength_recovers_the_base_image() {
        let real = gen_real(42, 3);
        let cfg = FingerprintConfig::default();
        let faint: Vec<Image> = (0..3).map(|i| generate_one(42 + i, Some(1e-9), &cfg)).collect();
        assert_eq!(real, faint);
    }

    #[test]
    fn rejects_out_of_range_strength() {
        assert!(gen_fake(0, 1, 0.0).is_err());
        assert!(gen_fake(0, 1, 1.5).is_err());
    }

    #[test]
    fn down_up_is_block_constant() {
        let plane: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let du = down_up(&plane, 4);
        assert_eq!(du[0], du[1]);
        assert_eq!(du[0], du[4]);
        assert_eq!(du[0], (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
    }
}
