//! Dense 8-bit rasters and the binary Netpbm codecs (P5 grayscale, P6 RGB).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Axis-aligned word rectangle in pixel coordinates: `[x, y, width, height]`.
pub type BoxXywh = [u32; 4];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32) -> Self {
        Self::filled(width, height, 0)
    }

    pub fn filled(width: u32, height: u32, value: u8) -> Self {
        GrayImage {
            width,
            height,
            data: vec![value; width as usize * height as usize],
        }
    }

    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if data.len() != width as usize * height as usize {
            return Err(Error::Shape(format!(
                "gray buffer of {} bytes for {width}x{height}",
                data.len()
            )));
        }
        Ok(GrayImage { width, height, data })
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: u8) {
        self.data[y as usize * self.width as usize + x as usize] = v;
    }

    pub fn crop(&self, bbox: BoxXywh) -> Result<GrayImage> {
        check_box(bbox, self.width, self.height)?;
        let [bx, by, bw, bh] = bbox;
        let mut data = Vec::with_capacity(bw as usize * bh as usize);
        for y in by..by + bh {
            let row = y as usize * self.width as usize;
            data.extend_from_slice(&self.data[row + bx as usize..row + (bx + bw) as usize]);
        }
        GrayImage::from_raw(bw, bh, data)
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (magic, w, h, body) = parse_netpbm(&bytes).map_err(|reason| Error::ImageFormat {
            path: path.to_path_buf(),
            reason,
        })?;
        if magic != b'5' {
            return Err(Error::ImageFormat {
                path: path.to_path_buf(),
                reason: "expected binary PGM (P5)".into(),
            });
        }
        let need = w as usize * h as usize;
        if body.len() < need {
            return Err(Error::ImageFormat {
                path: path.to_path_buf(),
                reason: format!("pixel data truncated: {} of {need} bytes", body.len()),
            });
        }
        GrayImage::from_raw(w, h, body[..need].to_vec())
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

impl RgbImage {
    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize * 3);
        for _ in 0..width as usize * height as usize {
            data.extend_from_slice(&rgb);
        }
        RgbImage { width, height, data }
    }

    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if data.len() != width as usize * height as usize * 3 {
            return Err(Error::Shape(format!(
                "rgb buffer of {} bytes for {width}x{height}",
                data.len()
            )));
        }
        Ok(RgbImage { width, height, data })
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// ITU-R BT.601 luma, rounded to nearest.
    pub fn to_gray(&self) -> GrayImage {
        let data = self.data.chunks_exact(3).map(|p| luma(p[0], p[1], p[2])).collect();
        GrayImage {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn crop(&self, bbox: BoxXywh) -> Result<RgbImage> {
        check_box(bbox, self.width, self.height)?;
        let [bx, by, bw, bh] = bbox;
        let mut data = Vec::with_capacity(bw as usize * bh as usize * 3);
        for y in by..by + bh {
            let row = (y as usize * self.width as usize + bx as usize) * 3;
            data.extend_from_slice(&self.data[row..row + bw as usize * 3]);
        }
        RgbImage::from_raw(bw, bh, data)
    }

    /// Outline `bbox` with a `stroke`-pixel border drawn inside the box.
    pub fn draw_box_outline(&mut self, bbox: BoxXywh, stroke: u32, rgb: [u8; 3]) {
        let [bx, by, bw, bh] = bbox;
        for y in by..(by + bh).min(self.height) {
            for x in bx..(bx + bw).min(self.width) {
                let dx = (x - bx).min(bx + bw - 1 - x);
                let dy = (y - by).min(by + bh - 1 - y);
                if dx < stroke || dy < stroke {
                    self.set(x, y, rgb);
                }
            }
        }
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_ppm(&bytes).map_err(|reason| Error::ImageFormat {
            path: path.to_path_buf(),
            reason,
        })
    }

    pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<Self, String> {
        let (magic, w, h, body) = parse_netpbm(bytes)?;
        if magic != b'6' {
            return Err("expected binary PPM (P6)".into());
        }
        let need = w as usize * h as usize * 3;
        if body.len() < need {
            return Err(format!("pixel data truncated: {} of {need} bytes", body.len()));
        }
        Ok(RgbImage {
            width: w,
            height: h,
            data: body[..need].to_vec(),
        })
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode_ppm()).map_err(|e| Error::io(path, e))
    }
}

#[inline]
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    let y = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
    y.round().clamp(0.0, 255.0) as u8
}

pub fn check_box(bbox: BoxXywh, width: u32, height: u32) -> Result<()> {
    let [x, y, w, h] = bbox;
    let fits = w > 0 && h > 0 && (x as u64 + w as u64) <= width as u64 && (y as u64 + h as u64) <= height as u64;
    if fits {
        Ok(())
    } else {
        Err(Error::BoxOutOfBounds {
            bbox,
            width,
            height,
            context: String::new(),
        })
    }
}

/// Splits a binary Netpbm file into (format digit, width, height, raster).
/// Only maxval 255 is accepted.
fn parse_netpbm(bytes: &[u8]) -> std::result::Result<(u8, u32, u32, &[u8]), String> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err("missing Netpbm magic".into());
    }
    let magic = bytes[1];
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        // whitespace and '#' comments between header tokens
        loop {
            match bytes.get(pos) {
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err("header truncated".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let token = std::str::from_utf8(&bytes[start..pos]).map_err(|e| e.to_string())?;
        *field = token.parse().map_err(|_| format!("bad header token {token:?}"))?;
    }
    if fields[2] != 255 {
        return Err(format!("unsupported maxval {}", fields[2]));
    }
    match bytes.get(pos) {
        Some(c) if c.is_ascii_whitespace() => pos += 1,
        _ => return Err("missing whitespace after header".into()),
    }
    Ok((magic, fields[0], fields[1], &bytes[pos..]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_with_comment() {
        let img = RgbImage::from_raw(2, 1, vec![1, 2, 3, 250, 251, 252]).unwrap();
        let bytes = img.encode_ppm();
        assert_eq!(&bytes[..11], b"P6\n2 1\n255\n");
        assert_eq!(RgbImage::decode_ppm(&bytes).unwrap(), img);

        let commented = b"P6\n# made by hand\n2 1\n255\n\x01\x02\x03\xfa\xfb\xfc";
        assert_eq!(RgbImage::decode_ppm(commented).unwrap(), img);
    }

    #[test]
    fn rejects_truncated_and_wrong_kind() {
        assert!(RgbImage::decode_ppm(b"P6\n2 2\n255\n\x00\x00").is_err());
        assert!(RgbImage::decode_ppm(b"P5\n1 1\n255\n\x00").is_err());
        assert!(RgbImage::decode_ppm(b"P6\n1 1\n65535\n\x00\x00\x00").is_err());
    }

    #[test]
    fn outline_is_two_pixels_inside_box() {
        let mut img = RgbImage::filled(10, 10, [0, 0, 0]);
        img.draw_box_outline([1, 1, 8, 8], 2, [0, 0, 255]);
        assert_eq!(img.get(1, 1), [0, 0, 255]);
        assert_eq!(img.get(2, 5), [0, 0, 255]);
        assert_eq!(img.get(3, 5), [0, 0, 0]);
        assert_eq!(img.get(8, 8), [0, 0, 255]);
        assert_eq!(img.get(0, 0), [0, 0, 0]);
        assert_eq!(img.get(9, 5), [0, 0, 0]);
    }

    #[test]
    fn box_validation() {
        assert!(check_box([0, 0, 10, 10], 10, 10).is_ok());
        assert!(check_box([1, 0, 10, 10], 10, 10).is_err());
        assert!(check_box([0, 0, 0, 5], 10, 10).is_err());
    }
}
