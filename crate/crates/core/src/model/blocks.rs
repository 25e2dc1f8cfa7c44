//! Word patch to fixed-size model blocks.

use crate::error::Result;
use crate::image::{BoxXywh, RgbImage};

use super::ModelConfig;

/// Floor on the contrast scale so flat patches are not blown up into noise.
const MIN_SCALE: f64 = 0.1;

/// A float image plane stack, `[channels, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Planes {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

/// Crops a word and normalizes it: subtract the luma median, orient so ink is
/// positive, divide by a robust contrast.
pub fn normalized_patch(image: &RgbImage, bbox: BoxXywh, channels: usize) -> Result<Planes> {
    let crop = image.crop(bbox)?;
    let gray = crop.to_gray();
    let mut luma: Vec<f64> = gray.data.iter().map(|&v| v as f64 / 255.0).collect();
    luma.sort_by(f64::total_cmp);
    let median = quantile(&luma, 0.5);
    let (lo, hi) = (quantile(&luma, 0.01) - median, quantile(&luma, 0.99) - median);
    let sign = if -lo > hi { -1.0 } else { 1.0 };
    let mut dev: Vec<f64> = luma.iter().map(|v| (v - median).abs()).collect();
    dev.sort_by(f64::total_cmp);
    let scale = quantile(&dev, 0.99).max(MIN_SCALE);
    let k = sign / scale;

    let (w, h) = (crop.width as usize, crop.height as usize);
    let data = if channels == 1 {
        gray.data.iter().map(|&v| (v as f64 / 255.0 - median) * k).collect()
    } else {
        let mut out = vec![0.0; 3 * w * h];
        for (i, px) in crop.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * w * h + i] = (px[c] as f64 / 255.0 - median) * k;
            }
        }
        out
    };
    Ok(Planes {
        channels,
        height: h,
        width: w,
        data,
    })
}

/// Left edges, in patch pixels, of the blocks covering a patch of the given
/// size: `ceil(width / block_width)` blocks, the last one right-aligned.
/// A patch narrower than one block gets a single centered block.
pub fn block_offsets(width: usize, height: usize, aspect: f64) -> (f64, Vec<f64>) {
    let bw = height as f64 * aspect;
    let w = width as f64;
    if w <= bw {
        return (bw, vec![(w - bw) / 2.0]);
    }
    let n = (w / bw).ceil() as usize;
    let offsets = (0..n)
        .map(|i| if i + 1 == n { w - bw } else { i as f64 * bw })
        .collect();
    (bw, offsets)
}

/// Resampling taps for one axis: output `j` reads `taps[j]` as (index, weight).
/// The filter is a triangle widened by the downscale factor; samples outside
/// `[0, len)` read as background and still count in the normalization.
fn taps(len: usize, start: f64, span: f64, out: usize) -> Vec<Vec<(usize, f64)>> {
    let step = span / out as f64;
    let radius = step.max(1.0);
    (0..out)
        .map(|j| {
            let center = start + (j as f64 + 0.5) * step - 0.5;
            let lo = (center - radius).floor() as i64 + 1;
            let hi = (center + radius).ceil() as i64 - 1;
            let mut total = 0.0;
            let mut v = Vec::new();
            for i in lo..=hi {
                let wgt = 1.0 - ((i as f64 - center) / radius).abs();
                if wgt <= 0.0 {
                    continue;
                }
                total += wgt;
                if i >= 0 && (i as usize) < len {
                    v.push((i as usize, wgt));
                }
            }
            for t in &mut v {
                t.1 /= total;
            }
            v
        })
        .collect()
}

/// Resamples the window `[x0, x0 + span_w) x [0, height)` of `src` to
/// `out_h x out_w`.
pub fn resample(src: &Planes, x0: f64, span_w: f64, out_h: usize, out_w: usize) -> Vec<f64> {
    let tx = taps(src.width, x0, span_w, out_w);
    let ty = taps(src.height, 0.0, src.height as f64, out_h);
    let mut out = vec![0.0; src.channels * out_h * out_w];
    let mut rows = vec![0.0; src.height * out_w];
    for c in 0..src.channels {
        let plane = &src.data[c * src.height * src.width..(c + 1) * src.height * src.width];
        for y in 0..src.height {
            let row = &plane[y * src.width..(y + 1) * src.width];
            for (j, t) in tx.iter().enumerate() {
                rows[y * out_w + j] = t.iter().map(|&(i, wgt)| row[i] * wgt).sum();
            }
        }
        let dst = &mut out[c * out_h * out_w..(c + 1) * out_h * out_w];
        for (i, t) in ty.iter().enumerate() {
            for j in 0..out_w {
                dst[i * out_w + j] = t.iter().map(|&(y, wgt)| rows[y * out_w + j] * wgt).sum();
            }
        }
    }
    out
}

/// Cuts one word into model blocks, each `channels * block_height * block_width`.
pub fn word_blocks(image: &RgbImage, bbox: BoxXywh, cfg: &ModelConfig) -> Result<Vec<Vec<f64>>> {
    let patch = normalized_patch(image, bbox, cfg.channels)?;
    let (span, offsets) = block_offsets(patch.width, patch.height, cfg.aspect());
    Ok(offsets
        .into_iter()
        .map(|x0| resample(&patch, x0, span, cfg.block_height, cfg.block_width))
        .collect())
}
