use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::glyph::Polyline;
use super::raster::{compose, Affine, Coverage, Photometry};
use super::{image_file_name, NoiseConfig, SplitAssigner, SynthImage, WordRecord};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pose {
    Rock,
    Paper,
    Scissors,
}

impl Pose {
    pub const ALL: [Pose; 3] = [Pose::Rock, Pose::Paper, Pose::Scissors];

    pub fn beats(self, other: Pose) -> bool {
        matches!(
            (self, other),
            (Pose::Rock, Pose::Scissors) | (Pose::Scissors, Pose::Paper) | (Pose::Paper, Pose::Rock)
        )
    }
}

/// Per-element win targets of a two-player game.
pub fn rps_targets(a: Pose, b: Pose) -> [u8; 2] {
    [a.beats(b) as u8, b.beats(a) as u8]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RpsConfig {
    pub seed: u64,
    /// Number of games, split 80/15/5 unless `split_sizes` is given.
    pub sequences: usize,
    /// Explicit train/test/val game counts.
    pub split_sizes: Option<[usize; 3]>,
    /// Icon box `[width, height]` in pixels.
    pub icon: [u32; 2],
    pub noise: NoiseConfig,
}

impl Default for RpsConfig {
    fn default() -> Self {
        RpsConfig {
            seed: 0,
            sequences: 1000,
            split_sizes: None,
            icon: [48, 64],
            noise: NoiseConfig {
                rotation_deg: 15.0,
                polarity_inversion: 0.0,
                ..NoiseConfig::default()
            },
        }
    }
}

const DESIGN: [f64; 2] = [12.0, 16.0];

fn circle(c: [f64; 2], r: f64) -> Polyline {
    (0..=24)
        .map(|i| {
            let t = 2.0 * PI * i as f64 / 24.0;
            [c[0] + r * t.cos(), c[1] + r * t.sin()]
        })
        .collect()
}

fn icon_strokes(pose: Pose) -> Vec<Polyline> {
    match pose {
        // closed fist with knuckle creases
        Pose::Rock => vec![
            circle([6.0, 8.5], 4.5),
            vec![[3.5, 7.0], [8.5, 7.0]],
            vec![[3.5, 9.5], [8.5, 9.5]],
        ],
        // open palm with five fingers
        Pose::Paper => {
            let mut v: Vec<Polyline> = vec![(0..=12)
                .map(|i| {
                    let t = PI * i as f64 / 12.0;
                    [6.0 + 4.0 * t.cos(), 10.5 + 4.0 * t.sin()]
                })
                .collect()];
            v.push(vec![[2.0, 10.5], [10.0, 10.5]]);
            for k in 0..5 {
                let x = 2.0 + 2.0 * k as f64;
                v.push(vec![[x, 10.5], [1.0 + 2.5 * k as f64, 1.0]]);
            }
            v
        }
        // two blades and two finger loops
        Pose::Scissors => vec![
            vec![[2.5, 1.0], [6.0, 9.0], [9.5, 1.0]],
            vec![[6.0, 9.0], [4.2, 10.8]],
            vec![[6.0, 9.0], [7.8, 10.8]],
            circle([3.8, 12.8], 2.0),
            circle([8.2, 12.8], 2.0),
        ],
    }
}

fn render_game(cfg: &RpsConfig, rng: &mut ChaCha8Rng) -> (crate::image::RgbImage, Vec<WordRecord>) {
    let [iw, ih] = cfg.icon;
    let gap = (iw / 6).max(2);
    let (w, h) = (2 * iw + 3 * gap, ih + 2 * gap);
    let mut cov = Coverage::new(w, h);
    let poses = [Pose::ALL[rng.random_range(0..3)], Pose::ALL[rng.random_range(0..3)]];
    let targets = rps_targets(poses[0], poses[1]);
    let px = iw as f64 / DESIGN[0];
    let mut words = Vec::with_capacity(2);
    for (k, &pose) in poses.iter().enumerate() {
        let x0 = gap + k as u32 * (iw + gap);
        let rot = if cfg.noise.rotation_deg > 0.0 {
            rng.random_range(-cfg.noise.rotation_deg..=cfg.noise.rotation_deg)
                .to_radians()
        } else {
            0.0
        };
        let zoom = rng.random_range(0.8..=1.0);
        let shift = [rng.random_range(-0.8..=0.8) * px, rng.random_range(-0.8..=0.8) * px];
        let stroke = rng.random_range(1.0..=1.6) * px * zoom;
        let anchor = [
            x0 as f64 + (iw - 1) as f64 / 2.0 + shift[0],
            gap as f64 + (ih - 1) as f64 / 2.0 + shift[1],
        ];
        let t = Affine::similarity(px * zoom, rot, [DESIGN[0] / 2.0, DESIGN[1] / 2.0], anchor);
        for line in icon_strokes(pose) {
            let pts: Vec<[f64; 2]> = line.iter().map(|&p| t.apply(p)).collect();
            cov.polyline(&pts, stroke);
        }
        words.push(WordRecord {
            bbox: [x0, gap, iw, ih],
            label: targets[k],
            stroke: Some(stroke),
            pose: Some(pose),
        });
    }
    let n = &cfg.noise;
    let light: [u8; 3] = std::array::from_fn(|_| rng.random_range(185..=250));
    let dark: [u8; 3] = std::array::from_fn(|_| rng.random_range(10..=90));
    let inverted = n.polarity_inversion > 0.0 && rng.random_bool(n.polarity_inversion);
    let (background, ink) = if inverted { (dark, light) } else { (light, dark) };
    let ph = Photometry {
        background,
        ink,
        illumination: if n.illumination > 0.0 {
            rng.random_range(0.0..=n.illumination)
        } else {
            0.0
        },
        illumination_angle: rng.random_range(0.0..2.0 * PI),
        noise_sigma: n.gaussian_sigma,
    };
    (compose(&cov, &ph, rng), words)
}

/// Renders two-icon games. Each game is one image whose two boxes form the
/// sequence; labels are the per-element win targets.
pub fn generate_rps(cfg: &RpsConfig) -> Result<Vec<SynthImage>> {
    let [iw, ih] = cfg.icon;
    if iw < 8 || ih < 8 {
        return Err(Error::Config(format!("icon {iw}x{ih} is too small")));
    }
    let splits = match cfg.split_sizes {
        Some([tr, te, va]) => {
            let mut v = vec![super::Split::Train; tr];
            v.extend(std::iter::repeat_n(super::Split::Test, te));
            v.extend(std::iter::repeat_n(super::Split::Val, va));
            v
        }
        None => {
            let mut a = SplitAssigner::new();
            (0..cfg.sequences).map(|_| a.assign(1)).collect()
        }
    };
    if splits.is_empty() {
        return Err(Error::Config("no games requested".into()));
    }
    Ok(splits
        .into_par_iter()
        .enumerate()
        .map(|(i, split)| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            let (image, words) = render_game(cfg, &mut rng);
            SynthImage {
                file: image_file_name(i),
                image,
                split,
                group: Some(i),
                words,
                base_stroke: None,
                bold_multiplier: None,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn explicit_split_sizes() {
        let cfg = RpsConfig {
            split_sizes: Some([3, 2, 1]),
            ..RpsConfig::default()
        };
        let games = generate_rps(&cfg).unwrap();
        let splits: Vec<_> = games.iter().map(|g| g.split).collect();
        use super::super::Split::*;
        assert_eq!(splits, vec![Train, Train, Train, Test, Test, Val]);
        for g in &games {
            let [a, b] = [g.words[0].pose.unwrap(), g.words[1].pose.unwrap()];
            assert_eq!(g.labels(), rps_targets(a, b).to_vec());
        }
    }
}
