//! 8-bit RGB images and binary PPM (P6) serialisation.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{validation, Result};

/// Row-major interleaved RGB, 8 bits per channel.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return validation(format!("image dimensions must be positive, got {width}x{height}"));
        }
        if pixels.len() != width * height * 3 {
            return validation(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            ));
        }
        Ok(Image { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Hex SHA-256 of the dimensions and pixel bytes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.width as u64).to_le_bytes());
        h.update((self.height as u64).to_le_bytes());
        h.update(&self.pixels);
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Full-range BT.601 luma per pixel, unrounded.
    pub fn luma(&self) -> Vec<f64> {
        self.pixels
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    }

    pub fn write_ppm<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.pixels)?;
        Ok(())
    }

    pub fn read_ppm<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut header = Vec::new();
        while header.len() < 4 {
            let mut line = String::new();
            if r.read_line(&mut line)? == 0 {
                return validation("truncated PPM header");
            }
            let line = line.split('#').next().unwrap_or("");
            header.extend(line.split_whitespace().map(str::to_owned));
        }
        if header[0] != "P6" {
            return validation(format!("expected binary PPM magic P6, got {}", header[0]));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| crate::Error::Validation(format!("bad PPM header field {s:?}")))
        };
        let (width, height, maxval) = (parse(&header[1])?, parse(&header[2])?, parse(&header[3])?);
        if maxval != 255 {
            return validation(format!("only maxval 255 is supported, got {maxval}"));
        }
        let mut pixels = vec![0u8; width * height * 3];
        r.read_exact(&mut pixels)?;
        Self::new(width, height, pixels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_ppm(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_ppm(std::fs::File::open(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_and_header_comments() {
        let mut img = Image::filled(8, 16, [1, 2, 3]).unwrap();
        img.set_pixel(3, 5, [250, 0, 9]);
        let mut buf = Vec::new();
        img.write_ppm(&mut buf).unwrap();
        assert!(buf.starts_with(b"P6\n8 16\n255\n"));
        assert_eq!(Image::read_ppm(&buf[..]).unwrap(), img);

        let mut commented = b"P6\n# made by hand\n8 16\n255\n".to_vec();
        commented.extend_from_slice(img.pixels());
        assert_eq!(Image::read_ppm(&commented[..]).unwrap(), img);
    }

    #[test]
    fn rejects_bad_buffers() {
        assert!(Image::new(8, 8, vec![0; 10]).is_err());
        assert!(Image::read_ppm(&b"P3\n1 1\n255\n"[..]).is_err());
        assert!(Image::read_ppm(&b"P6\n2 2\n255\n\x00"[..]).is_err());
    }
}
