//! Letter-thickness voting: a hand-crafted bold detector.
//!
//! Each word patch is binarized, thinned to a one-pixel skeleton and
//! distance-transformed. The distances sampled at skeleton pixels estimate the
//! stroke half-width of the word. A word is voted bold when its mean sample
//! exceeds the image-wide median by `alpha` standard deviations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{BoxXywh, GrayImage, RgbImage};

/// Letter foreground mask; `true` is ink.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: u32,
    pub height: u32,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: u32, height: u32) -> Self {
        BinaryMask {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width as usize * height as usize {
            return Err(Error::Shape(format!("{} mask bits for {width}x{height}", bits.len())));
        }
        Ok(BinaryMask { width, height, bits })
    }

    /// Parses rows of `#` (ink) and `.` (background).
    pub fn from_ascii(rows: &[&str]) -> Self {
        let height = rows.len() as u32;
        let width = rows.first().map_or(0, |r| r.len()) as u32;
        let bits = rows.iter().flat_map(|r| r.bytes().map(|c| c == b'#')).collect();
        BinaryMask { width, height, bits }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Binarization {
    pub mask: BinaryMask,
    pub threshold: u8,
    /// No usable contrast: the mask is empty.
    pub degenerate: bool,
}

/// Otsu threshold `t` over the 256-bin histogram: the split `{v <= t} | {v > t}`
/// maximizing between-class variance (first maximum wins).
/// `None` when the patch has a single intensity.
pub fn otsu_threshold(patch: &GrayImage) -> Option<u8> {
    let mut hist = [0u64; 256];
    for &v in &patch.data {
        hist[v as usize] += 1;
    }
    let total = patch.data.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &h)| i as f64 * h as f64).sum();
    let mut w_dark = 0.0;
    let mut sum_dark = 0.0;
    let mut best: Option<(u8, f64)> = None;
    for (t, &h) in hist.iter().enumerate().take(255) {
        w_dark += h as f64;
        sum_dark += t as f64 * h as f64;
        let w_light = total - w_dark;
        if w_dark == 0.0 || w_light == 0.0 {
            continue;
        }
        let diff = sum_dark / w_dark - (sum_all - sum_dark) / w_light;
        let between = w_dark * w_light * diff * diff;
        if best.is_none_or(|(_, b)| between > b) {
            best = Some((t as u8, between));
        }
    }
    best.map(|(t, _)| t)
}

/// Otsu binarization with the minority side taken as letter foreground
/// (dark wins an exact 50/50 split).
pub fn binarize(patch: &GrayImage) -> Binarization {
    let Some(t) = otsu_threshold(patch) else {
        return Binarization {
            mask: BinaryMask::new(patch.width, patch.height),
            threshold: patch.data.first().copied().unwrap_or(0),
            degenerate: true,
        };
    };
    let dark = patch.data.iter().filter(|&&v| v <= t).count();
    let light = patch.data.len() - dark;
    let ink_is_dark = dark <= light;
    let bits = patch.data.iter().map(|&v| (v <= t) == ink_is_dark).collect();
    Binarization {
        mask: BinaryMask {
            width: patch.width,
            height: patch.height,
            bits,
        },
        threshold: t,
        degenerate: false,
    }
}

/// Zhang-Suen thinning, iterated to a fixpoint. Pixels outside the mask are
/// background.
pub fn skeletonize(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = (mask.width as i64, mask.height as i64);
    let mut cur = mask.bits.clone();
    let at = |bits: &[bool], x: i64, y: i64| -> u8 {
        (x >= 0 && y >= 0 && x < w && y < h && bits[(y * w + x) as usize]) as u8
    };
    let mut doomed = Vec::new();
    loop {
        let mut changed = false;
        for pass in 0..2 {
            doomed.clear();
            for y in 0..h {
                for x in 0..w {
                    if !cur[(y * w + x) as usize] {
                        continue;
                    }
                    // P2..P9 clockwise from north
                    let n = [
                        at(&cur, x, y - 1),
                        at(&cur, x + 1, y - 1),
                        at(&cur, x + 1, y),
                        at(&cur, x + 1, y + 1),
                        at(&cur, x, y + 1),
                        at(&cur, x - 1, y + 1),
                        at(&cur, x - 1, y),
                        at(&cur, x - 1, y - 1),
                    ];
                    let b: u8 = n.iter().sum();
                    if !(2..=6).contains(&b) {
                        continue;
                    }
                    let a = (0..8).filter(|&i| n[i] == 0 && n[(i + 1) % 8] == 1).count();
                    if a != 1 {
                        continue;
                    }
                    let (p2, p4, p6, p8) = (n[0], n[2], n[4], n[6]);
                    let keep = if pass == 0 {
                        p2 * p4 * p6 != 0 || p4 * p6 * p8 != 0
                    } else {
                        p2 * p4 * p8 != 0 || p2 * p6 * p8 != 0
                    };
                    if !keep {
                        doomed.push((y * w + x) as usize);
                    }
                }
            }
            for &i in &doomed {
                cur[i] = false;
            }
            changed |= !doomed.is_empty();
        }
        if !changed {
            break;
        }
    }
    BinaryMask {
        width: mask.width,
        height: mask.height,
        bits: cur,
    }
}

/// Per-pixel real-valued grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RealGrid {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
}

impl RealGrid {
    #[inline]
    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.data[y as usize * self.width as usize + x as usize]
    }
}

/// Exact squared Euclidean distance from each foreground pixel to the nearest
/// background pixel; everything beyond the border is background. Two separable
/// passes: a column scan, then a lower envelope of parabolas along each row,
/// with envelope breakpoints compared as exact fractions.
pub fn squared_distance_transform(mask: &BinaryMask) -> Vec<u64> {
    let (w, h) = (mask.width as usize, mask.height as usize);
    // column pass: distance to nearest background in the same column
    let mut col = vec![0i64; w * h];
    for x in 0..w {
        let mut run = 0i64;
        for y in 0..h {
            run = if mask.bits[y * w + x] { run + 1 } else { 0 };
            col[y * w + x] = run;
        }
        let mut run = 0i64;
        for y in (0..h).rev() {
            run = if mask.bits[y * w + x] { run + 1 } else { 0 };
            col[y * w + x] = col[y * w + x].min(run);
        }
    }

    let mut out = vec![0u64; w * h];
    // sites at -1 and w are the virtual background border (f = 0)
    let n = w + 2;
    let mut f = vec![0i64; n];
    let mut v = vec![0i64; n];
    let mut z: Vec<Frac> = vec![Frac::NEG_INF; n + 1];
    for y in 0..h {
        for x in 0..w {
            let g = col[y * w + x];
            f[x + 1] = g * g;
        }
        f[0] = 0;
        f[n - 1] = 0;
        let site = |i: usize| i as i64 - 1;

        let mut k = 0usize;
        v[0] = 0;
        z[0] = Frac::NEG_INF;
        z[1] = Frac::POS_INF;
        for qi in 1..n {
            let q = site(qi);
            let fq = f[qi];
            let s = loop {
                let vi = v[k] as usize;
                let p = site(vi);
                let s = Frac::new((fq + q * q) - (f[vi] + p * p), 2 * (q - p));
                if s <= z[k] && k > 0 {
                    k -= 1;
                } else {
                    break s;
                }
            };
            k += 1;
            v[k] = qi as i64;
            z[k] = s;
            z[k + 1] = Frac::POS_INF;
        }
        k = 0;
        for x in 0..w {
            let xc = x as i64;
            while z[k + 1].lt_int(xc) {
                k += 1;
            }
            let vi = v[k] as usize;
            let dx = xc - site(vi);
            out[y * w + x] = (dx * dx + f[vi]) as u64;
        }
    }
    for (o, &b) in out.iter_mut().zip(&mask.bits) {
        if !b {
            *o = 0;
        }
    }
    out
}

/// Exact envelope breakpoint `num / den`, `den > 0`, or +/- infinity.
#[derive(Clone, Copy, Debug)]
struct Frac {
    num: i64,
    den: i64,
}

impl Frac {
    const NEG_INF: Frac = Frac { num: -1, den: 0 };
    const POS_INF: Frac = Frac { num: 1, den: 0 };

    fn new(num: i64, den: i64) -> Self {
        if den < 0 {
            Frac { num: -num, den: -den }
        } else {
            Frac { num, den }
        }
    }

    fn lt_int(self, x: i64) -> bool {
        if self.den == 0 {
            return self.num < 0;
        }
        self.num < x * self.den
    }
}

impl PartialEq for Frac {
    fn eq(&self, other: &Self) -> bool {
        self.partial_cmp(other) == Some(std::cmp::Ordering::Equal)
    }
}

impl PartialOrd for Frac {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        use std::cmp::Ordering::*;
        Some(match (self.den == 0, other.den == 0) {
            (true, true) => self.num.signum().cmp(&other.num.signum()),
            (true, false) => {
                if self.num < 0 {
                    Less
                } else {
                    Greater
                }
            }
            (false, true) => {
                if other.num < 0 {
                    Greater
                } else {
                    Less
                }
            }
            (false, false) => (self.num as i128 * other.den as i128).cmp(&(other.num as i128 * self.den as i128)),
        })
    }
}

pub fn distance_transform(mask: &BinaryMask) -> RealGrid {
    RealGrid {
        width: mask.width,
        height: mask.height,
        data: squared_distance_transform(mask)
            .into_iter()
            .map(|d| (d as f64).sqrt())
            .collect(),
    }
}

/// Distance-transform values sampled at the skeleton pixels of one word.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ThicknessProfile {
    pub word: usize,
    pub samples: Vec<f64>,
    /// Binarization found no contrast.
    pub degenerate: bool,
}

impl ThicknessProfile {
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mean(&self) -> Option<f64> {
        if self.samples.is_empty() {
            None
        } else {
            Some(self.samples.iter().sum::<f64>() / self.samples.len() as f64)
        }
    }
}

pub fn thickness(patch: &GrayImage) -> ThicknessProfile {
    let bin = binarize(patch);
    if bin.degenerate {
        return ThicknessProfile {
            word: 0,
            samples: Vec::new(),
            degenerate: true,
        };
    }
    let skel = skeletonize(&bin.mask);
    let dist = distance_transform(&bin.mask);
    let samples = skel
        .bits
        .iter()
        .zip(&dist.data)
        .filter(|(&s, _)| s)
        .map(|(_, &d)| d)
        .collect();
    ThicknessProfile {
        word: 0,
        samples,
        degenerate: false,
    }
}

/// Thickness profiles for every word box of an image, in box order.
pub fn image_profiles(image: &RgbImage, boxes: &[BoxXywh]) -> Result<Vec<ThicknessProfile>> {
    let gray = image.to_gray();
    boxes
        .par_iter()
        .enumerate()
        .map(|(i, &b)| {
            let patch = gray.crop(b)?;
            Ok(ThicknessProfile {
                word: i,
                ..thickness(&patch)
            })
        })
        .collect()
}

/// Which sample set the spread term of the vote is computed over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// Population standard deviation of all pooled skeleton samples.
    #[default]
    Pooled,
    /// Population standard deviation of the per-word mean thicknesses.
    WordMeans,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageThicknessStats {
    pub profiles: Vec<ThicknessProfile>,
    /// Median of the pooled samples.
    pub median: f64,
    pub sigma: f64,
    pub sigma_mode: SigmaMode,
}

impl ImageThicknessStats {
    pub fn new(profiles: Vec<ThicknessProfile>, sigma_mode: SigmaMode) -> Result<Self> {
        let mut pooled: Vec<f64> = profiles.iter().flat_map(|p| p.samples.iter().copied()).collect();
        if pooled.is_empty() {
            return Err(Error::UnusableImage);
        }
        pooled.sort_by(f64::total_cmp);
        let n = pooled.len();
        let median = if n % 2 == 1 {
            pooled[n / 2]
        } else {
            (pooled[n / 2 - 1] + pooled[n / 2]) / 2.0
        };
        let sigma = match sigma_mode {
            SigmaMode::Pooled => population_std(&pooled),
            SigmaMode::WordMeans => {
                let means: Vec<f64> = profiles.iter().filter_map(ThicknessProfile::mean).collect();
                population_std(&means)
            }
        };
        Ok(ImageThicknessStats {
            profiles,
            median,
            sigma,
            sigma_mode,
        })
    }

    /// `median + alpha * sigma`; an infinite alpha yields +inf even when sigma is 0.
    pub fn threshold(&self, alpha: f64) -> f64 {
        if alpha == f64::INFINITY {
            return f64::INFINITY;
        }
        self.median + alpha * self.sigma
    }
}

fn population_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// Labels each word 1 (bold) iff its mean thickness strictly exceeds
/// `median + alpha * sigma`. Words with empty profiles are 0.
pub fn vote(stats: &ImageThicknessStats, alpha: f64) -> Vec<u8> {
    let thr = stats.threshold(alpha);
    stats
        .profiles
        .iter()
        .map(|p| p.mean().is_some_and(|m| m > thr) as u8)
        .collect()
}

/// Profiles -> stats -> vote. An image with no usable skeleton anywhere
/// labels every word non-bold.
pub fn vote_profiles(profiles: Vec<ThicknessProfile>, alpha: f64, mode: SigmaMode) -> Vec<u8> {
    let n = profiles.len();
    match ImageThicknessStats::new(profiles, mode) {
        Ok(stats) => vote(&stats, alpha),
        Err(_) => vec![0; n],
    }
}
