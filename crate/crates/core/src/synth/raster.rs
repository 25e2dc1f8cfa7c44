//! Anti-aliased stroke rasterization and photometric nuisances.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::image::RgbImage;

/// 2-D affine map `p -> A p + t` from design units to pixels.
#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub a: [[f64; 2]; 2],
    pub t: [f64; 2],
}

impl Affine {
    /// Uniform `scale`, rotation `angle` (radians) about design point `pivot`,
    /// which lands at pixel `anchor`.
    pub fn similarity(scale: f64, angle: f64, pivot: [f64; 2], anchor: [f64; 2]) -> Self {
        let (s, c) = angle.sin_cos();
        let a = [[scale * c, -scale * s], [scale * s, scale * c]];
        let t = [
            anchor[0] - (a[0][0] * pivot[0] + a[0][1] * pivot[1]),
            anchor[1] - (a[1][0] * pivot[0] + a[1][1] * pivot[1]),
        ];
        Affine { a, t }
    }

    #[inline]
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.a[0][0] * p[0] + self.a[0][1] * p[1] + self.t[0],
            self.a[1][0] * p[0] + self.a[1][1] * p[1] + self.t[1],
        ]
    }
}

/// Ink coverage in `[0, 1]` per pixel.
pub struct Coverage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl Coverage {
    pub fn new(width: u32, height: u32) -> Self {
        Coverage {
            width,
            height,
            data: vec![0.0; width as usize * height as usize],
        }
    }

    /// Draws a round-capped segment of pixel width `stroke`. Pixel centers sit
    /// at integer coordinates; coverage ramps over one pixel at the edge.
    pub fn segment(&mut self, p: [f64; 2], q: [f64; 2], stroke: f64) {
        let half = stroke / 2.0;
        let reach = half + 1.0;
        let x0 = (p[0].min(q[0]) - reach).floor().max(0.0) as i64;
        let x1 = (p[0].max(q[0]) + reach).ceil().min(self.width as f64 - 1.0) as i64;
        let y0 = (p[1].min(q[1]) - reach).floor().max(0.0) as i64;
        let y1 = (p[1].max(q[1]) + reach).ceil().min(self.height as f64 - 1.0) as i64;
        let (dx, dy) = (q[0] - p[0], q[1] - p[1]);
        let len2 = dx * dx + dy * dy;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (px, py) = (x as f64 - p[0], y as f64 - p[1]);
                let t = if len2 > 0.0 {
                    ((px * dx + py * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (ex, ey) = (px - t * dx, py - t * dy);
                let d = (ex * ex + ey * ey).sqrt();
                let c = (half + 0.5 - d).clamp(0.0, 1.0) as f32;
                let i = y as usize * self.width as usize + x as usize;
                if c > self.data[i] {
                    self.data[i] = c;
                }
            }
        }
    }

    pub fn polyline(&mut self, pts: &[[f64; 2]], stroke: f64) {
        if pts.len() == 1 {
            self.segment(pts[0], pts[0], stroke);
        }
        for w in pts.windows(2) {
            self.segment(w[0], w[1], stroke);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Photometry {
    pub background: [u8; 3],
    pub ink: [u8; 3],
    /// Relative brightness swing of a linear illumination ramp.
    pub illumination: f64,
    /// Ramp direction in radians.
    pub illumination_angle: f64,
    /// Additive Gaussian noise, in 8-bit intensity units.
    pub noise_sigma: f64,
}

/// Composites coverage over the background and applies illumination and noise.
pub fn compose<R: Rng>(cov: &Coverage, ph: &Photometry, rng: &mut R) -> RgbImage {
    let (w, h) = (cov.width, cov.height);
    let mut img = RgbImage::filled(w, h, [0, 0, 0]);
    let (dirx, diry) = (ph.illumination_angle.cos(), ph.illumination_angle.sin());
    let half_extent = 0.5 * ((w as f64).powi(2) + (h as f64).powi(2)).sqrt().max(1.0);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let normal = (ph.noise_sigma > 0.0).then(|| Normal::new(0.0, ph.noise_sigma).expect("finite sigma"));
    for y in 0..h {
        for x in 0..w {
            let c = cov.data[y as usize * w as usize + x as usize] as f64;
            let ramp = ((x as f64 - cx) * dirx + (y as f64 - cy) * diry) / half_extent;
            let gain = 1.0 + ph.illumination * ramp;
            let mut px = [0u8; 3];
            for ch in 0..3 {
                let base = ph.background[ch] as f64 * (1.0 - c) + ph.ink[ch] as f64 * c;
                let mut v = base * gain;
                if let Some(n) = &normal {
                    v += n.sample(rng);
                }
                px[ch] = v.round().clamp(0.0, 255.0) as u8;
            }
            img.set(x, y, px);
        }
    }
    img
}
