//! Grayscale raster with PGM (P5) input/output and area resampling.

use std::io::Write;
use std::path::Path;

use crate::bolf::BoundingBox;
use crate::error::{Error, Result};

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: u32,
    height: u32,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, pixels: Vec<f64>) -> Result<Self> {
        let expected = width as usize * height as usize;
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if pixels.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, value: f64) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, value: f64) {
        let w = self.width as usize;
        self.pixels[y as usize * w + x as usize] = value;
    }

    pub fn full_box(&self) -> BoundingBox {
        BoundingBox::full(self.width, self.height)
    }

    /// Copies out the region covered by `bbox`.
    pub fn crop(&self, bbox: &BoundingBox) -> Result<GrayImage> {
        bbox.check_within(self.width, self.height)?;
        let (w, h) = (bbox.width(), bbox.height());
        let mut pixels = Vec::with_capacity(w as usize * h as usize);
        for y in bbox.y0..bbox.y1 {
            let row = y as usize * self.width as usize;
            pixels.extend_from_slice(&self.pixels[row + bbox.x0 as usize..row + bbox.x1 as usize]);
        }
        GrayImage::new(w, h, pixels)
    }

    /// Area-weighted resampling: each output pixel is the mean of the source
    /// area it covers. Works for both shrinking and enlarging.
    pub fn resize(&self, width: u32, height: u32) -> GrayImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let wx = area_weights(self.width as usize, width as usize);
        let wy = area_weights(self.height as usize, height as usize);
        let sw = self.width as usize;

        let mut horizontal = vec![0.0; width as usize * self.height as usize];
        for y in 0..self.height as usize {
            let src = &self.pixels[y * sw..(y + 1) * sw];
            let dst = &mut horizontal[y * width as usize..(y + 1) * width as usize];
            for (out, taps) in dst.iter_mut().zip(&wx) {
                *out = taps.iter().map(|&(i, w)| src[i] * w).sum();
            }
        }

        let mut pixels = vec![0.0; width as usize * height as usize];
        for (oy, taps) in wy.iter().enumerate() {
            let dst = &mut pixels[oy * width as usize..(oy + 1) * width as usize];
            for &(sy, w) in taps {
                let src = &horizontal[sy * width as usize..(sy + 1) * width as usize];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s * w;
                }
            }
        }
        GrayImage {
            width,
            height,
            pixels,
        }
    }

    /// Crops `bbox` and resamples it to a `side`×`side` square, flattened row-major.
    pub fn crop_resized(&self, bbox: &BoundingBox, side: usize) -> Result<Vec<f64>> {
        let side = side as u32;
        Ok(self.crop(bbox)?.resize(side, side).into_pixels())
    }

    /// Rounds every pixel to the nearest 8-bit level.
    pub fn quantize_8bit(&mut self) {
        for p in &mut self.pixels {
            *p = to_u8(*p) as f64 / 255.0;
        }
    }

    pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        decode_pgm(&bytes)
    }

    /// Writes an 8-bit binary PGM.
    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes: Vec<u8> = self.pixels.iter().map(|&v| to_u8(v)).collect();
        write_file(path.as_ref(), &encode_pgm_header(self.width, self.height, 255), &bytes)
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// For each destination index, the source indices and weights that average
/// the covered interval.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let start = d as f64 * scale;
            let end = (d + 1) as f64 * scale;
            let first = start.floor() as usize;
            let last = (end.ceil() as usize).min(src);
            let mut taps = Vec::with_capacity(last - first);
            for s in first..last {
                let lo = start.max(s as f64);
                let hi = end.min((s + 1) as f64);
                if hi > lo {
                    taps.push((s, (hi - lo) / scale));
                }
            }
            taps
        })
        .collect()
}

fn encode_pgm_header(width: u32, height: u32, maxval: u32) -> Vec<u8> {
    format!("P5\n{width} {height}\n{maxval}\n").into_bytes()
}

fn write_file(path: &Path, header: &[u8], body: &[u8]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(header)
        .and_then(|_| file.write_all(body))
        .map_err(|e| Error::io(path, e))
}

/// Writes a 16-bit binary PGM (big-endian samples, maxval 65535).
pub fn write_pgm16(path: impl AsRef<Path>, width: u32, height: u32, samples: &[u16]) -> Result<()> {
    let path = path.as_ref();
    if samples.len() != width as usize * height as usize {
        return Err(Error::DimensionMismatch {
            expected: width as usize * height as usize,
            actual: samples.len(),
        });
    }
    let body: Vec<u8> = samples.iter().flat_map(|s| s.to_be_bytes()).collect();
    write_file(path, &encode_pgm_header(width, height, 65535), &body)
}

/// Decodes a binary PGM with maxval up to 65535, normalizing to `[0, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let mut cursor = 0usize;
    let magic = next_token(bytes, &mut cursor)?;
    if magic != b"P5" {
        return Err(Error::format("PGM", "missing P5 magic"));
    }
    let width = parse_header_number(bytes, &mut cursor, "width")?;
    let height = parse_header_number(bytes, &mut cursor, "height")?;
    let maxval = parse_header_number(bytes, &mut cursor, "maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format("PGM", format!("maxval {maxval} out of range")));
    }
    // exactly one whitespace byte separates the header from the raster
    cursor += 1;
    let count = width as usize * height as usize;
    let sample_bytes = if maxval < 256 { 1 } else { 2 };
    let raster = bytes
        .get(cursor..cursor + count * sample_bytes)
        .ok_or_else(|| Error::format("PGM", "truncated raster"))?;
    let scale = maxval as f64;
    let pixels = if sample_bytes == 1 {
        raster.iter().map(|&b| b as f64 / scale).collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / scale)
            .collect()
    };
    GrayImage::new(width, height, pixels)
}

fn next_token<'a>(bytes: &'a [u8], cursor: &mut usize) -> Result<&'a [u8]> {
    loop {
        match bytes.get(*cursor) {
            Some(b'#') => {
                while let Some(&b) = bytes.get(*cursor) {
                    *cursor += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            Some(b) if b.is_ascii_whitespace() => *cursor += 1,
            Some(_) => break,
            None => return Err(Error::format("PGM", "truncated header")),
        }
    }
    let start = *cursor;
    while bytes.get(*cursor).is_some_and(|b| !b.is_ascii_whitespace()) {
        *cursor += 1;
    }
    Ok(&bytes[start..*cursor])
}

fn parse_header_number(bytes: &[u8], cursor: &mut usize, field: &str) -> Result<u32> {
    let token = next_token(bytes, cursor)?;
    std::str::from_utf8(token)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format("PGM", format!("bad {field}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_roundtrip_is_exact_for_quantized_images() {
        let pixels: Vec<f64> = (0..12).map(|i| (i * 20) as f64 / 255.0).collect();
        let img = GrayImage::new(4, 3, pixels).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        img.write_pgm(&path).unwrap();
        assert_eq!(GrayImage::read_pgm(&path).unwrap(), img);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5\n# a comment\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255]);
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!(img.pixels(), &[0.0, 1.0]);
    }

    #[test]
    fn sixteen_bit_samples_decode_big_endian() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.pgm");
        write_pgm16(&path, 2, 1, &[0, 65535]).unwrap();
        let img = GrayImage::read_pgm(&path).unwrap();
        assert_eq!(img.pixels(), &[0.0, 1.0]);
    }

    #[test]
    fn truncated_raster_is_rejected() {
        let bytes = b"P5 3 3 255\n\x00\x01".to_vec();
        assert!(matches!(decode_pgm(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn resize_preserves_mean_and_constants() {
        let pixels: Vec<f64> = (0..35).map(|i| (i % 7) as f64 / 7.0).collect();
        let img = GrayImage::new(7, 5, pixels).unwrap();
        let mean = |p: &[f64]| p.iter().sum::<f64>() / p.len() as f64;
        for (w, h) in [(3, 2), (14, 10), (32, 32)] {
            let r = img.resize(w, h);
            assert!((mean(r.pixels()) - mean(img.pixels())).abs() < 1e-12);
        }
        let flat = GrayImage::filled(9, 4, 0.25).resize(32, 32);
        assert!(flat.pixels().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn downscale_by_integer_factor_averages_blocks() {
        let img = GrayImage::new(4, 2, vec![0.0, 1.0, 0.2, 0.4, 1.0, 0.0, 0.6, 0.8]).unwrap();
        let r = img.resize(2, 1);
        assert!((r.pixels()[0] - 0.5).abs() < 1e-15);
        assert!((r.pixels()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn crop_extracts_half_open_region() {
        let pixels: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let img = GrayImage::new(4, 4, pixels).unwrap();
        let c = img.crop(&BoundingBox::new(1, 1, 3, 3).unwrap()).unwrap();
        assert_eq!(c.pixels(), &[5.0, 6.0, 9.0, 10.0]);
    }
}
