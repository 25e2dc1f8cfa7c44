//! Bold-class metrics, image-level accuracy and bold-ratio buckets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ConsentModel, ModelConfig};
use crate::train::{split_f1, train, EncodedSplit, TrainConfig};

/// Bold-ratio bucket edges; the last bucket is closed on the right.
pub const DEFAULT_BUCKETS: [f64; 6] = [0.0, 0.05, 0.1, 0.2, 0.5, 1.0];

/// Confusion counts with bold as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Counts {
    pub fn add(&mut self, pred: u8, truth: u8) {
        match (pred != 0, truth != 0) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a u8, &'a u8)>) -> Self {
        let mut c = Counts::default();
        for (&p, &t) in pairs {
            c.add(p, t);
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }
}

/// Ground truth and predicted labels of one image's words, in the same order.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageResult {
    pub truth: Vec<u8>,
    pub pred: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub lo: f64,
    pub hi: f64,
    pub images: usize,
    /// `None` when the bucket is empty.
    pub image_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    #[serde(flatten)]
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Pooled over all words.
    pub word_accuracy: f64,
    /// Per-image word accuracy averaged over images; never below `image_accuracy`.
    pub mean_word_accuracy: f64,
    pub image_accuracy: f64,
    pub images: usize,
    pub words: u64,
    pub buckets: Vec<Bucket>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text summary.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<24} {:>9} {:>9} {:>9} {:>10} {:>10}",
            "method", "precision", "recall", "f1", "word acc", "image acc"
        );
        let _ = writeln!(
            s,
            "{:<24} {:>9.4} {:>9.4} {:>9.4} {:>10.4} {:>10.4}",
            self.method, self.precision, self.recall, self.f1, self.word_accuracy, self.image_accuracy
        );
        let c = &self.counts;
        let _ = writeln!(s, "TP {}  FP {}  FN {}  TN {}", c.tp, c.fp, c.fn_, c.tn);
        let _ = writeln!(s, "{:<16} {:>7} {:>10}", "bold ratio", "images", "image acc");
        for b in &self.buckets {
            let close = if b.hi >= 1.0 { ']' } else { ')' };
            let acc = b.image_accuracy.map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
            let _ = writeln!(
                s,
                "{:<16} {:>7} {:>10}",
                format!("[{:.2}, {:.2}{close}", b.lo, b.hi),
                b.images,
                acc
            );
        }
        s
    }
}

fn bucket_index(edges: &[f64], r: f64) -> usize {
    let last = edges.len() - 2;
    (0..=last)
        .find(|&i| r >= edges[i] && (r < edges[i + 1] || (i == last && r <= edges[i + 1])))
        .unwrap_or(last)
}

/// Metrics over images whose predictions are already aligned with the truth.
pub fn evaluate_images(method: &str, images: &[ImageResult], edges: &[f64]) -> Result<EvalReport> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config(format!("bucket edges must increase, got {edges:?}")));
    }
    let mut counts = Counts::default();
    let mut correct_images = 0usize;
    let mut per_image_acc = Vec::with_capacity(images.len());
    let mut bucket_n = vec![0usize; edges.len() - 1];
    let mut bucket_ok = vec![0usize; edges.len() - 1];
    for img in images {
        if img.truth.len() != img.pred.len() {
            return Err(Error::Shape(format!(
                "{} predictions for {} words",
                img.pred.len(),
                img.truth.len()
            )));
        }
        for (&p, &t) in img.pred.iter().zip(&img.truth) {
            counts.add(p, t);
        }
        let right = img
            .pred
            .iter()
            .zip(&img.truth)
            .filter(|(p, t)| (**p != 0) == (**t != 0))
            .count();
        let ok = right == img.truth.len();
        per_image_acc.push(if img.truth.is_empty() {
            1.0
        } else {
            right as f64 / img.truth.len() as f64
        });
        let bold = img.truth.iter().filter(|&&t| t != 0).count();
        let r = if img.truth.is_empty() {
            0.0
        } else {
            bold as f64 / img.truth.len() as f64
        };
        let b = bucket_index(edges, r);
        bucket_n[b] += 1;
        if ok {
            correct_images += 1;
            bucket_ok[b] += 1;
        }
    }
    let buckets = (0..edges.len() - 1)
        .map(|i| Bucket {
            lo: edges[i],
            hi: edges[i + 1],
            images: bucket_n[i],
            image_accuracy: (bucket_n[i] > 0).then(|| bucket_ok[i] as f64 / bucket_n[i] as f64),
        })
        .collect();
    Ok(EvalReport {
        method: method.to_string(),
        counts,
        precision: counts.precision(),
        recall: counts.recall(),
        f1: counts.f1(),
        word_accuracy: counts.accuracy(),
        mean_word_accuracy: if images.is_empty() {
            0.0
        } else {
            crate::tensor::fsum(per_image_acc) / images.len() as f64
        },
        image_accuracy: if images.is_empty() {
            0.0
        } else {
            correct_images as f64 / images.len() as f64
        },
        images: images.len(),
        words: counts.total(),
        buckets,
    })
}

/// Identifies one word: the image's file name and the word's index in it.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WordKey {
    pub image: String,
    pub word: usize,
}

impl std::fmt::Display for WordKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}#{}", self.image, self.word)
    }
}

/// Ground-truth labels of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTruth {
    pub image: String,
    pub labels: Vec<u8>,
}

/// Checks that `predictions` cover exactly the ground-truth words, then scores.
pub fn evaluate(method: &str, predictions: &[(WordKey, u8)], truth: &[ImageTruth]) -> Result<EvalReport> {
    let mut pred: BTreeMap<&WordKey, u8> = BTreeMap::new();
    let mut extra = BTreeSet::new();
    for (k, p) in predictions {
        if pred.insert(k, *p).is_some() {
            extra.insert(k.to_string());
        }
    }
    let mut missing = Vec::new();
    let mut images = Vec::with_capacity(truth.len());
    let mut known = BTreeSet::new();
    for t in truth {
        let mut row = Vec::with_capacity(t.labels.len());
        for w in 0..t.labels.len() {
            let key = WordKey {
                image: t.image.clone(),
                word: w,
            };
            match pred.get(&key) {
                Some(&p) => row.push(p),
                None => missing.push(key.to_string()),
            }
            known.insert(key);
        }
        images.push(ImageResult {
            truth: t.labels.clone(),
            pred: row,
        });
    }
    extra.extend(pred.keys().filter(|k| !known.contains(**k)).map(|k| k.to_string()));
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::Coverage {
            missing,
            extra: extra.into_iter().collect(),
        });
    }
    evaluate_images(method, &images, &DEFAULT_BUCKETS)
}

/// Heads used by every ablation cell.
pub const ABLATION_HEADS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub embed_dim: usize,
    pub num_stacks: usize,
    /// Validation F1, absent when training failed.
    pub f1: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub embed_dims: Vec<usize>,
    pub stacks: Vec<usize>,
    /// Row-major: one row per embedding size.
    pub cells: Vec<AblationCell>,
    /// Index into `cells` of the best F1; earlier cells win ties.
    pub best: Option<usize>,
}

impl AblationGrid {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("grid serializes")
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:>8}", "d \\ T");
        for t in &self.stacks {
            let _ = write!(s, " {t:>8}");
        }
        s.push('\n');
        for (r, d) in self.embed_dims.iter().enumerate() {
            let _ = write!(s, "{d:>8}");
            for c in 0..self.stacks.len() {
                let i = r * self.stacks.len() + c;
                let mark = if self.best == Some(i) { "*" } else { " " };
                match self.cells[i].f1 {
                    Some(f) => {
                        let _ = write!(s, " {f:>7.4}{mark}");
                    }
                    None => {
                        let _ = write!(s, " {:>8}", "failed");
                    }
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Config of one ablation cell: `base` with the given width and depth,
/// `ABLATION_HEADS` heads and a 4x feed-forward layer.
pub fn ablation_config(base: &ModelConfig, embed_dim: usize, num_stacks: usize) -> ModelConfig {
    ModelConfig {
        embed_dim,
        num_heads: ABLATION_HEADS,
        num_stacks,
        ffn_hidden: 4 * embed_dim,
        ..base.clone()
    }
}

/// Trains one model per (embed_dim, stacks) cell with the same training
/// config and seed, scoring each on `val`. Cells run one after another;
/// each training run already uses the worker pool.
pub fn ablate(
    train_split: &EncodedSplit,
    val_split: &EncodedSplit,
    base: &ModelConfig,
    cfg: &TrainConfig,
    embed_dims: &[usize],
    stacks: &[usize],
) -> Result<AblationGrid> {
    if embed_dims.is_empty() || stacks.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if val_split.is_empty() {
        return Err(Error::EmptySplit("val"));
    }
    let mut cells = Vec::with_capacity(embed_dims.len() * stacks.len());
    for &d in embed_dims {
        for &t in stacks {
            let run = || -> Result<f64> {
                let model = ConsentModel::new(ablation_config(base, d, t), cfg.seed)?;
                let (model, _) = train(model, train_split, val_split, cfg, None)?;
                split_f1(&model, val_split, cfg.batch_size)
            };
            let (f1, error) = match run() {
                Ok(f) => (Some(f), None),
                Err(e) => (None, Some(e.to_string())),
            };
            cells.push(AblationCell {
                embed_dim: d,
                num_stacks: t,
                f1,
                error,
            });
        }
    }
    let best = cells
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.f1.map(|f| (i, f)))
        .fold(None, |acc: Option<(usize, f64)>, (i, f)| match acc {
            Some((_, bf)) if bf >= f => acc,
            _ => Some((i, f)),
        })
        .map(|(i, _)| i);
    Ok(AblationGrid {
        embed_dims: embed_dims.to_vec(),
        stacks: stacks.to_vec(),
        cells,
        best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_division_conventions() {
        let c = Counts::default();
        assert_eq!((c.precision(), c.recall(), c.f1()), (0.0, 0.0, 0.0));
        let c = Counts {
            tp: 0,
            fp: 0,
            fn_: 4,
            tn: 5,
        };
        assert_eq!((c.recall(), c.f1()), (0.0, 0.0));
    }

    #[test]
    fn bucket_edges() {
        let e = DEFAULT_BUCKETS;
        assert_eq!(bucket_index(&e, 0.0), 0);
        assert_eq!(bucket_index(&e, 0.05), 1);
        assert_eq!(bucket_index(&e, 0.1), 2);
        assert_eq!(bucket_index(&e, 0.5), 4);
        assert_eq!(bucket_index(&e, 1.0), 4);
    }

    #[test]
    fn coverage_errors_list_ids() {
        let truth = vec![ImageTruth {
            image: "a".into(),
            labels: vec![0, 1],
        }];
        let k = |i: &str, w| WordKey {
            image: i.into(),
            word: w,
        };
        let err = evaluate("m", &[(k("a", 0), 0), (k("b", 0), 1)], &truth).unwrap_err();
        match err {
            Error::Coverage { missing, extra } => {
                assert_eq!(missing, vec!["a#1".to_string()]);
                assert_eq!(extra, vec!["b#0".to_string()]);
            }
            e => panic!("unexpected {e}"),
        }
    }
}
