//! Deterministic synthetic text images with bold-word labels, and the
//! rock-paper-scissors sequence task.

pub mod glyph;
pub mod raster;
mod rps;

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, LogNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{check_box, BoxXywh, RgbImage};
use glyph::{random_glyph, Glyph};
use raster::{Affine, Coverage, Photometry};

pub use rps::{generate_rps, rps_targets, Pose, RpsConfig};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Concentration of the per-image bold-ratio Beta distribution.
const RATIO_CONCENTRATION: f64 = 20.0;
/// Target train/test/val shares.
const SPLIT_SHARES: [(Split, f64); 3] = [(Split::Train, 0.80), (Split::Test, 0.15), (Split::Val, 0.05)];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Maximum relative brightness swing of the illumination ramp.
    pub illumination: f64,
    /// Additive Gaussian noise sigma in 8-bit units.
    pub gaussian_sigma: f64,
    /// Maximum absolute word rotation in degrees.
    pub rotation_deg: f64,
    pub polarity_inversion: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            illumination: 0.25,
            gaussian_sigma: 6.0,
            rotation_deg: 8.0,
            polarity_inversion: 0.1,
        }
    }
}

impl NoiseConfig {
    pub fn none() -> Self {
        NoiseConfig {
            illumination: 0.0,
            gaussian_sigma: 0.0,
            rotation_deg: 0.0,
            polarity_inversion: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub images: usize,
    /// Mean and standard deviation of the lognormal words-per-image law.
    pub words_mean: f64,
    pub words_std: f64,
    pub words_min: u32,
    pub words_max: u32,
    pub bold_ratio: f64,
    /// Per-image base stroke width, design units.
    pub base_stroke: [f64; 2],
    pub bold_multiplier: [f64; 2],
    /// Pixels per design unit, drawn per image.
    pub glyph_scale: [f64; 2],
    pub glyphs_per_word: [u32; 2],
    /// Rendered views per base layout; views always share a split.
    pub views_per_group: [u32; 2],
    /// Target text line width in pixels.
    pub line_width: [f64; 2],
    pub noise: NoiseConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            images: 100,
            words_mean: 32.0,
            words_std: 42.0,
            words_min: 1,
            words_max: 701,
            bold_ratio: 0.10,
            base_stroke: [1.0, 4.0],
            bold_multiplier: [1.4, 2.2],
            glyph_scale: [2.0, 2.6],
            glyphs_per_word: [3, 10],
            views_per_group: [1, 3],
            line_width: [900.0, 1600.0],
            noise: NoiseConfig::default(),
        }
    }
}

fn check_range<T: PartialOrd + Copy + std::fmt::Debug>(name: &str, r: [T; 2], lo: T, hi: T) -> Result<()> {
    if !(r[0] >= lo && r[0] <= r[1] && r[1] <= hi) {
        return Err(Error::Config(format!(
            "{name} must satisfy {lo:?} <= lo <= hi <= {hi:?}, got {r:?}"
        )));
    }
    Ok(())
}

fn check_value(name: &str, v: f64, lo: f64, hi: f64) -> Result<()> {
    if !(v >= lo && v <= hi) {
        return Err(Error::Config(format!("{name} must lie in [{lo}, {hi}], got {v}")));
    }
    Ok(())
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.images == 0 {
            return Err(Error::Config("images must be positive".into()));
        }
        check_value("words_mean", self.words_mean, f64::MIN_POSITIVE, 1e6)?;
        check_value("words_std", self.words_std, 0.0, 1e6)?;
        check_range("words", [self.words_min, self.words_max], 1, u32::MAX)?;
        check_value("bold_ratio", self.bold_ratio, 0.0, 1.0)?;
        check_range("base_stroke", self.base_stroke, f64::MIN_POSITIVE, 64.0)?;
        if self.bold_multiplier[0] <= 1.0 {
            return Err(Error::Config("bold_multiplier must exceed 1".into()));
        }
        check_range("bold_multiplier", self.bold_multiplier, 1.0, 16.0)?;
        check_range("glyph_scale", self.glyph_scale, 0.25, 16.0)?;
        check_range("glyphs_per_word", self.glyphs_per_word, 1, 64)?;
        check_range("views_per_group", self.views_per_group, 1, 64)?;
        check_range("line_width", self.line_width, 16.0, 20000.0)?;
        let n = &self.noise;
        check_value("noise.illumination", n.illumination, 0.0, 0.9)?;
        check_value("noise.gaussian_sigma", n.gaussian_sigma, 0.0, 128.0)?;
        check_value("noise.rotation_deg", n.rotation_deg, 0.0, 45.0)?;
        check_value("noise.polarity_inversion", n.polarity_inversion, 0.0, 1.0)?;
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

fn uniform<R: Rng>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

#[derive(Clone, Debug)]
pub struct WordPlan {
    pub glyphs: Vec<Glyph>,
    pub bold: bool,
    /// Stroke width in design units.
    pub stroke: f64,
}

/// One base layout; every view of the group renders these words.
#[derive(Clone, Debug)]
pub struct GroupPlan {
    pub index: usize,
    pub split: Split,
    pub scale: f64,
    pub base_stroke: f64,
    pub multiplier: f64,
    pub line_width: f64,
    pub words: Vec<WordPlan>,
}

#[derive(Clone, Debug)]
pub struct ViewPlan {
    pub image: usize,
    pub group: usize,
    pub rotation: f64,
    pub photometry: Photometry,
}

#[derive(Clone, Debug)]
pub struct DatasetPlan {
    pub groups: Vec<GroupPlan>,
    pub views: Vec<ViewPlan>,
}

fn word_count<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> usize {
    let n = if cfg.words_std == 0.0 {
        cfg.words_mean
    } else {
        let s2 = (1.0 + (cfg.words_std / cfg.words_mean).powi(2)).ln();
        let mu = cfg.words_mean.ln() - s2 / 2.0;
        LogNormal::new(mu, s2.sqrt()).expect("valid lognormal").sample(rng)
    };
    (n.round() as u64).clamp(cfg.words_min as u64, cfg.words_max as u64) as usize
}

fn plan_group(cfg: &SynthConfig, index: usize, split: Split) -> GroupPlan {
    let mut rng = cfg.rng(1 + index as u64);
    let scale = uniform(&mut rng, cfg.glyph_scale);
    let base = uniform(&mut rng, cfg.base_stroke);
    let m = uniform(&mut rng, cfg.bold_multiplier);
    let line_width = uniform(&mut rng, cfg.line_width);
    let ratio = match cfg.bold_ratio {
        r if r <= 0.0 => 0.0,
        r if r >= 1.0 => 1.0,
        r => Beta::new(RATIO_CONCENTRATION * r, RATIO_CONCENTRATION * (1.0 - r))
            .expect("valid beta")
            .sample(&mut rng),
    };
    // jitter small enough that labels follow stroke > base * (1 + m) / 2
    let jitter = 0.05f64.min(0.5 * (m - 1.0) / (2.0 * m));
    let n = word_count(cfg, &mut rng);
    let words = (0..n)
        .map(|_| {
            let bold = rng.random_bool(ratio);
            let k = rng.random_range(cfg.glyphs_per_word[0]..=cfg.glyphs_per_word[1]);
            let glyphs = (0..k).map(|_| random_glyph(&mut rng)).collect();
            let j = 1.0 + rng.random_range(-jitter..=jitter);
            let stroke = if bold { base * m * j } else { base * j };
            WordPlan { glyphs, bold, stroke }
        })
        .collect();
    GroupPlan {
        index,
        split,
        scale,
        base_stroke: base,
        multiplier: m,
        line_width,
        words,
    }
}

fn plan_view<R: Rng>(cfg: &SynthConfig, image: usize, group: usize, rng: &mut R) -> ViewPlan {
    let n = &cfg.noise;
    let rotation = if n.rotation_deg > 0.0 {
        rng.random_range(-n.rotation_deg..=n.rotation_deg).to_radians()
    } else {
        0.0
    };
    let light: [u8; 3] = std::array::from_fn(|_| rng.random_range(185..=250));
    let dark: [u8; 3] = std::array::from_fn(|_| rng.random_range(10..=90));
    let inverted = n.polarity_inversion > 0.0 && rng.random_bool(n.polarity_inversion);
    let (background, ink) = if inverted { (dark, light) } else { (light, dark) };
    let illumination = if n.illumination > 0.0 {
        rng.random_range(0.0..=n.illumination)
    } else {
        0.0
    };
    let illumination_angle = rng.random_range(0.0..std::f64::consts::TAU);
    ViewPlan {
        image,
        group,
        rotation,
        photometry: Photometry {
            background,
            ink,
            illumination,
            illumination_angle,
            noise_sigma: n.gaussian_sigma,
        },
    }
}

/// Assigns each group (of `size` images) to the split furthest below its share.
pub(crate) struct SplitAssigner {
    counts: [usize; 3],
}

impl SplitAssigner {
    pub(crate) fn new() -> Self {
        SplitAssigner { counts: [0; 3] }
    }

    pub(crate) fn assign(&mut self, size: usize) -> Split {
        let total = (self.counts.iter().sum::<usize>() + size) as f64;
        let mut best = 0;
        let mut best_deficit = f64::NEG_INFINITY;
        for (i, (_, share)) in SPLIT_SHARES.iter().enumerate() {
            let deficit = share * total - self.counts[i] as f64;
            if deficit > best_deficit {
                best = i;
                best_deficit = deficit;
            }
        }
        self.counts[best] += size;
        SPLIT_SHARES[best].0
    }
}

/// Plans every image without rendering pixels.
pub fn plan_dataset(cfg: &SynthConfig) -> Result<DatasetPlan> {
    cfg.validate()?;
    let mut master = cfg.rng(0);
    let mut groups = Vec::new();
    let mut views = Vec::with_capacity(cfg.images);
    let mut splits = SplitAssigner::new();
    while views.len() < cfg.images {
        let g = groups.len();
        let want = master.random_range(cfg.views_per_group[0]..=cfg.views_per_group[1]) as usize;
        let size = want.min(cfg.images - views.len());
        let split = splits.assign(size);
        groups.push(plan_group(cfg, g, split));
        for _ in 0..size {
            let image = views.len();
            let mut rng = cfg.rng(view_stream(image));
            views.push(plan_view(cfg, image, g, &mut rng));
        }
    }
    Ok(DatasetPlan { groups, views })
}

fn view_stream(image: usize) -> u64 {
    (1 << 62) | image as u64
}

fn noise_stream(image: usize) -> u64 {
    (1 << 63) | image as u64
}

/// A word's pixel box and the map from its design coordinates to pixels.
#[derive(Clone, Copy, Debug)]
pub struct PlacedWord {
    pub bbox: BoxXywh,
    pub transform: Affine,
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub width: u32,
    pub height: u32,
    pub words: Vec<PlacedWord>,
}

/// Flows the group's words into rows for one view.
pub fn layout_view(group: &GroupPlan, view: &ViewPlan) -> Layout {
    let s = group.scale;
    let pad = (3.0 * s).round();
    let margin = (6.0 * s).round() as u32;
    let gap = (5.0 * s).round() as u32;
    let lead = (3.0 * s).round() as u32;
    let (sin, cos) = view.rotation.sin_cos();
    let sizes: Vec<(u32, u32, [f64; 2])> = group
        .words
        .iter()
        .map(|w| {
            let e = glyph::word_extent(w.glyphs.len(), w.stroke);
            let (hx, hy) = ((e[2] - e[0]) / 2.0, (e[3] - e[1]) / 2.0);
            let rx = s * (cos.abs() * hx + sin.abs() * hy);
            let ry = s * (sin.abs() * hx + cos.abs() * hy);
            let bw = (2.0 * (rx + pad)).ceil() as u32;
            let bh = (2.0 * (ry + pad)).ceil() as u32;
            (bw, bh, [(e[0] + e[2]) / 2.0, (e[1] + e[3]) / 2.0])
        })
        .collect();
    let widest = sizes.iter().map(|t| t.0).max().unwrap_or(1);
    let width = (group.line_width.round() as u32).max(widest + 2 * margin);

    let mut rows: Vec<Vec<usize>> = vec![Vec::new()];
    let mut x = margin;
    for (i, &(bw, _, _)) in sizes.iter().enumerate() {
        let row = rows.last_mut().expect("non-empty");
        if !row.is_empty() && x + bw > width - margin {
            rows.push(Vec::new());
            x = margin;
        }
        rows.last_mut().expect("non-empty").push(i);
        x += bw + gap;
    }

    let mut placed = vec![None; sizes.len()];
    let mut y = margin;
    for row in &rows {
        let row_h = row.iter().map(|&i| sizes[i].1).max().unwrap_or(0);
        let mut x = margin;
        for &i in row {
            let (bw, bh, center) = sizes[i];
            let by = y + (row_h - bh) / 2;
            let anchor = [x as f64 + (bw - 1) as f64 / 2.0, by as f64 + (bh - 1) as f64 / 2.0];
            placed[i] = Some(PlacedWord {
                bbox: [x, by, bw, bh],
                transform: Affine::similarity(s, view.rotation, center, anchor),
            });
            x += bw + gap;
        }
        y += row_h + lead;
    }
    let height = y - lead + margin;
    Layout {
        width,
        height,
        words: placed.into_iter().map(|p| p.expect("every word placed")).collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WordRecord {
    pub bbox: BoxXywh,
    pub label: u8,
    /// Rendered stroke width in pixels, when known.
    pub stroke: Option<f64>,
    pub pose: Option<Pose>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthImage {
    pub file: String,
    pub image: RgbImage,
    pub split: Split,
    pub group: Option<usize>,
    pub words: Vec<WordRecord>,
    /// Base stroke in pixels and the bold multiplier used for this image.
    pub base_stroke: Option<f64>,
    pub bold_multiplier: Option<f64>,
}

impl SynthImage {
    pub fn labels(&self) -> Vec<u8> {
        self.words.iter().map(|w| w.label).collect()
    }

    pub fn boxes(&self) -> Vec<BoxXywh> {
        self.words.iter().map(|w| w.bbox).collect()
    }
}

pub fn image_file_name(index: usize) -> String {
    format!("img_{index:05}.ppm")
}

/// Word records for a view, computed from geometry alone.
pub fn view_records(group: &GroupPlan, layout: &Layout) -> Vec<WordRecord> {
    group
        .words
        .iter()
        .zip(&layout.words)
        .map(|(w, p)| WordRecord {
            bbox: p.bbox,
            label: w.bold as u8,
            stroke: Some(w.stroke * group.scale),
            pose: None,
        })
        .collect()
}

pub fn render_view(cfg: &SynthConfig, plan: &DatasetPlan, image: usize) -> SynthImage {
    let view = &plan.views[image];
    let group = &plan.groups[view.group];
    let layout = layout_view(group, view);
    let mut cov = Coverage::new(layout.width, layout.height);
    let mut pts = Vec::new();
    for (w, p) in group.words.iter().zip(&layout.words) {
        let stroke_px = w.stroke * group.scale;
        let adv = glyph::advance(w.stroke);
        for (k, g) in w.glyphs.iter().enumerate() {
            let dx = k as f64 * adv;
            for line in &g.strokes {
                pts.clear();
                pts.extend(line.iter().map(|q| p.transform.apply([q[0] + dx, q[1]])));
                cov.polyline(&pts, stroke_px);
            }
        }
    }
    let mut rng = cfg.rng(noise_stream(image));
    let pixels = raster::compose(&cov, &view.photometry, &mut rng);
    SynthImage {
        file: image_file_name(image),
        image: pixels,
        split: group.split,
        group: Some(group.index),
        words: view_records(group, &layout),
        base_stroke: Some(group.base_stroke * group.scale),
        bold_multiplier: Some(group.multiplier),
    }
}

/// Renders the whole dataset in memory. Parallel and serial runs agree bit for bit.
pub fn generate_images(cfg: &SynthConfig) -> Result<Vec<SynthImage>> {
    let plan = plan_dataset(cfg)?;
    Ok((0..plan.views.len())
        .into_par_iter()
        .map(|i| render_view(cfg, &plan, i))
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Bold,
    Rps,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestWord {
    #[serde(rename = "box")]
    pub bbox: BoxXywh,
    pub label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stroke: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<Pose>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestImage {
    pub file: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_stroke: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bold_multiplier: Option<f64>,
    pub words: Vec<ManifestWord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default)]
    pub task: Task,
    pub images: Vec<ManifestImage>,
}

impl Manifest {
    /// `(positive labels, total words)`.
    pub fn label_counts(&self) -> (usize, usize) {
        let words = self.images.iter().flat_map(|i| &i.words);
        let (mut pos, mut total) = (0, 0);
        for w in words {
            pos += w.label as usize;
            total += 1;
        }
        (pos, total)
    }

    pub fn split_counts(&self) -> [(Split, usize); 3] {
        SPLIT_SHARES.map(|(s, _)| (s, self.images.iter().filter(|i| i.split == s).count()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

impl From<&SynthImage> for ManifestImage {
    fn from(img: &SynthImage) -> Self {
        ManifestImage {
            file: img.file.clone(),
            split: img.split,
            group: img.group,
            base_stroke: img.base_stroke,
            bold_multiplier: img.bold_multiplier,
            words: img
                .words
                .iter()
                .map(|w| ManifestWord {
                    bbox: w.bbox,
                    label: w.label,
                    stroke: w.stroke,
                    pose: w.pose,
                })
                .collect(),
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<PathBuf> {
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_json() + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Renders, writes images and `manifest.json` into `out_dir`.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    let plan = plan_dataset(cfg)?;
    create_dir(out_dir)?;
    let images = (0..plan.views.len())
        .into_par_iter()
        .map(|i| {
            let img = render_view(cfg, &plan, i);
            img.image.write_ppm(&out_dir.join(&img.file))?;
            Ok(ManifestImage::from(&img))
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        task: Task::Bold,
        images,
    };
    write_manifest(out_dir, &manifest)?;
    Ok(manifest)
}

/// Writes already rendered images with a manifest.
pub fn write_dataset(out_dir: &Path, task: Task, images: &[SynthImage]) -> Result<Manifest> {
    create_dir(out_dir)?;
    images
        .par_iter()
        .try_for_each(|img| img.image.write_ppm(&out_dir.join(&img.file)))?;
    let manifest = Manifest {
        task,
        images: images.iter().map(ManifestImage::from).collect(),
    };
    write_manifest(out_dir, &manifest)?;
    Ok(manifest)
}

/// A dataset on disk; images are decoded on demand.
#[derive(Clone, Debug)]
pub struct DatasetReader {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl DatasetReader {
    pub fn len(&self) -> usize {
        self.manifest.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.images.is_empty()
    }

    pub fn load(&self, index: usize) -> Result<SynthImage> {
        let entry = &self.manifest.images[index];
        let path = self.dir.join(&entry.file);
        let image = RgbImage::read_ppm(&path)?;
        for w in &entry.words {
            check_box(w.bbox, image.width, image.height).map_err(|e| match e {
                Error::BoxOutOfBounds {
                    bbox, width, height, ..
                } => Error::BoxOutOfBounds {
                    bbox,
                    width,
                    height,
                    context: format!(" in {}", entry.file),
                },
                e => e,
            })?;
        }
        Ok(SynthImage {
            file: entry.file.clone(),
            image,
            split: entry.split,
            group: entry.group,
            base_stroke: entry.base_stroke,
            bold_multiplier: entry.bold_multiplier,
            words: entry
                .words
                .iter()
                .map(|w| WordRecord {
                    bbox: w.bbox,
                    label: w.label,
                    stroke: w.stroke,
                    pose: w.pose,
                })
                .collect(),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<SynthImage>> + '_ {
        (0..self.len()).map(move |i| self.load(i))
    }

    /// Loads every image of one split.
    pub fn load_split(&self, split: Split) -> Result<Vec<SynthImage>> {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| self.manifest.images[i].split == split)
            .collect();
        idx.par_iter().map(|&i| self.load(i)).collect()
    }

    pub fn load_all(&self) -> Result<Vec<SynthImage>> {
        (0..self.len()).into_par_iter().map(|i| self.load(i)).collect()
    }
}

/// Reads and validates `manifest.json`; image files are opened lazily.
pub fn load_dataset(dir: &Path) -> Result<DatasetReader> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    for img in &manifest.images {
        if img.file.is_empty() || Path::new(&img.file).is_absolute() {
            return Err(Error::Manifest(format!("bad image file name {:?}", img.file)));
        }
        for w in &img.words {
            if w.label > 1 {
                return Err(Error::Manifest(format!(
                    "{}: label {} is not 0 or 1",
                    img.file, w.label
                )));
            }
        }
    }
    Ok(DatasetReader {
        dir: dir.to_path_buf(),
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            images: 6,
            words_mean: 8.0,
            words_std: 4.0,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn empty_ranges_are_rejected() {
        let mut c = small();
        c.base_stroke = [3.0, 2.0];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = small();
        c.images = 0;
        assert!(c.validate().is_err());
        let mut c = small();
        c.bold_multiplier = [1.0, 1.5];
        assert!(c.validate().is_err());
    }

    #[test]
    fn boxes_fit_inside_image() {
        let cfg = small();
        for img in generate_images(&cfg).unwrap() {
            for w in &img.words {
                check_box(w.bbox, img.image.width, img.image.height).unwrap();
            }
        }
    }

    #[test]
    fn views_share_group_split_and_labels() {
        let cfg = SynthConfig {
            images: 40,
            views_per_group: [3, 3],
            ..small()
        };
        let plan = plan_dataset(&cfg).unwrap();
        assert_eq!(plan.groups.len(), 14);
        for v in &plan.views {
            assert!(v.group < plan.groups.len());
        }
    }

    #[test]
    fn split_assigner_tracks_shares() {
        let mut a = SplitAssigner::new();
        let splits: Vec<Split> = (0..20).map(|_| a.assign(1)).collect();
        let count = |s| splits.iter().filter(|&&x| x == s).count();
        assert_eq!((count(Split::Train), count(Split::Test), count(Split::Val)), (16, 3, 1));
    }
}
