use plada_core::data::{gen_fake, gen_real};
use plada_core::image::Image;
use plada_core::jpeg::{blockiness, compress, dct8, idct8, mse};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const QUALITIES: [u32; 6] = [10, 30, 50, 70, 90, 100];

/// Ten real and ten fake synthetic images from a seed range no dataset uses by default.
fn corpus() -> Vec<Image> {
    let mut v = gen_real(90_000, 10);
    v.extend(gen_fake(90_010, 10, 0.5).unwrap());
    v
}

fn unit_block(k: usize) -> [[f64; 8]; 8] {
    let mut b = [[0.0; 8]; 8];
    b[k / 8][k % 8] = 1.0;
    b
}

#[test]
fn dct_basis_is_orthonormal() {
    let basis: Vec<Vec<f64>> = (0..64).map(|k| dct8(&unit_block(k)).iter().flatten().copied().collect()).collect();
    for i in 0..64 {
        for j in 0..64 {
            let dot: f64 = basis[i].iter().zip(&basis[j]).map(|(a, b)| a * b).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((dot - want).abs() <= 1e-9, "<{i},{j}> = {dot}");
        }
    }
}

#[test]
fn dct_round_trip_on_pixel_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let mut b = [[0.0; 8]; 8];
        for v in b.iter_mut().flatten() {
            *v = rng.gen_range(-128.0..128.0);
        }
        let back = idct8(&dct8(&b));
        for (a, c) in b.iter().flatten().zip(back.iter().flatten()) {
            assert!((a - c).abs() <= 1e-9);
        }
    }
}

#[test]
fn mse_does_not_increase_with_quality() {
    for (i, img) in corpus().iter().enumerate() {
        let errs: Vec<f64> = QUALITIES.iter().map(|&q| mse(img, &compress(img, q).unwrap())).collect();
        for w in errs.windows(2) {
            assert!(w[1] <= w[0], "image {i}: {errs:?}");
        }
    }
}

#[test]
fn low_quality_is_blockier_on_every_corpus_image() {
    for (i, img) in corpus().iter().enumerate() {
        let b30 = blockiness(&compress(img, 30).unwrap()).unwrap();
        let b90 = blockiness(&compress(img, 90).unwrap()).unwrap();
        assert!(b30 > b90, "image {i}: q30 {b30} vs q90 {b90}");
    }
}

/// The coefficient grid is still rounded at quality 100 and the 8-bit YCbCr
/// planes add their own rounding, so a few pixels move by more than 2 levels.
/// Observed over these 50 images: max 4, and about 0.45% of channels beyond 2.
#[test]
fn quality_100_is_near_lossless() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst, mut beyond, mut total) = (0u8, 0usize, 0usize);
    for _ in 0..50 {
        let px: Vec<u8> = (0..64 * 64 * 3).map(|_| rng.gen()).collect();
        let img = Image::new(64, 64, px).unwrap();
        let out = compress(&img, 100).unwrap();
        for (a, b) in img.pixels().iter().zip(out.pixels()) {
            let d = a.abs_diff(*b);
            worst = worst.max(d);
            beyond += usize::from(d > 2);
            total += 1;
        }
    }
    assert!(worst <= 4, "max deviation {worst}");
    assert!((beyond as f64) < 1e-2 * total as f64, "{beyond} of {total} beyond 2");
}
