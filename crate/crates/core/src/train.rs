//! Fitting the sequence classifier, and alpha selection for the voting baseline.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{Counts, ImageResult};
use crate::image::{BoxXywh, RgbImage};
use crate::model::{
    aggregate_word_predictions, chunk_words, encode_words, save_model, Chunking, ConsentModel, LossKind, ModelConfig,
    Sequence, SequenceBatch, WordPrediction,
};
use crate::morphology::{image_profiles, vote_profiles, SigmaMode, ThicknessProfile};
use crate::synth::SynthImage;
use crate::tensor::{fsum, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub loss: LossKind,
    pub seed: u64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Chunk each image's words in a seeded random order instead of reading order.
    pub shuffle_words: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 8,
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            loss: LossKind::Focal {
                gamma: 2.0,
                alpha_bold: 0.75,
            },
            seed: 0,
            clip_norm: Some(1.0),
            checkpoint_every: 0,
            shuffle_words: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return fail("epochs must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        // lr = 0 is allowed: it freezes the parameters
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be a non-negative number");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("Adam betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return fail("eps must be positive");
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return fail("clip_norm must be positive");
            }
        }
        self.loss.validate()
    }

    fn chunking(&self, image: usize) -> Chunking {
        if self.shuffle_words {
            Chunking::Shuffled(self.seed ^ (image as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        } else {
            Chunking::ReadingOrder
        }
    }
}

/// Images of one split cut into model sequences.
#[derive(Clone, Debug)]
pub struct EncodedSplit {
    pub sequences: Vec<Sequence>,
    /// Ground truth per word; word ids index this.
    pub word_labels: Vec<u8>,
    /// Image index of every word.
    pub word_image: Vec<usize>,
    /// Word count per image.
    pub image_words: Vec<usize>,
}

impl EncodedSplit {
    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn num_words(&self) -> usize {
        self.word_labels.len()
    }
}

pub fn encode_split(images: &[SynthImage], model: &ModelConfig, cfg: &TrainConfig) -> Result<EncodedSplit> {
    let mut first = Vec::with_capacity(images.len());
    let mut n = 0;
    for img in images {
        first.push(n);
        n += img.words.len();
    }
    let per_image = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let labels = img.labels();
            let words = encode_words(&img.image, &img.boxes(), Some(&labels), first[i], model)?;
            Ok(chunk_words(words, model.max_seq_len, cfg.chunking(i)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = EncodedSplit {
        sequences: per_image.into_iter().flatten().collect(),
        word_labels: Vec::with_capacity(n),
        word_image: Vec::with_capacity(n),
        image_words: images.iter().map(|i| i.words.len()).collect(),
    };
    for (i, img) in images.iter().enumerate() {
        out.word_labels.extend(img.labels());
        out.word_image.extend(std::iter::repeat_n(i, img.words.len()));
    }
    Ok(out)
}

/// Per-word predictions for sequences whose word ids cover `0..num_words`.
pub fn predict_sequences(
    model: &ConsentModel,
    sequences: &[Sequence],
    num_words: usize,
    batch_size: usize,
) -> Result<Vec<WordPrediction>> {
    let chunks: Vec<&[Sequence]> = sequences.chunks(batch_size.max(1)).collect();
    let per_chunk = chunks
        .par_iter()
        .map(|chunk| {
            let refs: Vec<&Sequence> = chunk.iter().collect();
            let batch = SequenceBatch::new(&refs, model.config(), 0)?;
            let probs = model.predict(&batch)?;
            let mut out = Vec::new();
            for row in batch.real_rows() {
                out.push((
                    batch.word_ids[row].expect("real row has a word"),
                    probs.data()[row * 2 + 1],
                ));
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let (ids, ps): (Vec<usize>, Vec<f64>) = per_chunk.into_iter().flatten().unzip();
    aggregate_word_predictions(&ps, &ids, num_words)
}

/// Per-word predictions over a whole split, in word-id order.
pub fn predict_split(model: &ConsentModel, split: &EncodedSplit, batch_size: usize) -> Result<Vec<WordPrediction>> {
    predict_sequences(model, &split.sequences, split.num_words(), batch_size)
}

/// Classifies the words of one image given their boxes, in box order.
pub fn predict_image(model: &ConsentModel, image: &RgbImage, boxes: &[BoxXywh]) -> Result<Vec<WordPrediction>> {
    if boxes.is_empty() {
        return Ok(Vec::new());
    }
    let cfg = model.config();
    let words = encode_words(image, boxes, None, 0, cfg)?;
    let sequences = chunk_words(words, cfg.max_seq_len, Chunking::ReadingOrder);
    predict_sequences(model, &sequences, boxes.len(), 8)
}

/// Groups per-word predictions back into per-image results.
pub fn image_results(split: &EncodedSplit, preds: &[WordPrediction]) -> Vec<ImageResult> {
    let mut out: Vec<ImageResult> = split
        .image_words
        .iter()
        .map(|&n| ImageResult {
            truth: Vec::with_capacity(n),
            pred: Vec::with_capacity(n),
        })
        .collect();
    for p in preds {
        let img = split.word_image[p.word];
        out[img].truth.push(split.word_labels[p.word]);
        out[img].pred.push(p.label);
    }
    out
}

pub fn split_f1(model: &ConsentModel, split: &EncodedSplit, batch_size: usize) -> Result<f64> {
    let preds = predict_split(model, split, batch_size)?;
    let counts = Counts::from_pairs(preds.iter().map(|p| &p.label).zip(&split.word_labels));
    Ok(counts.f1())
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = fsum(grads.iter().flat_map(|g| g.data().iter().map(|v| v * v))).sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }
    norm
}

/// Adam moments for every parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(model: &ConsentModel) -> Self {
        let zeros: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Adam {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, model: &mut ConsentModel, grads: &[Tensor], cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (i, p) in model.params_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &g)) in p.value.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w -= cfg.learning_rate * mh / (vh.sqrt() + cfg.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Bold-class F1 on the validation split, when there is one.
    pub val_f1: Option<f64>,
    pub wall_time_s: f64,
    /// Position of the shuffling stream after the epoch, hex.
    pub rng_digest: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

impl TrainLog {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }
}

/// One optimizer step on a batch; returns the loss before the update.
pub fn train_step(model: &mut ConsentModel, adam: &mut Adam, batch: &SequenceBatch, cfg: &TrainConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let f = model.forward(&mut tape, batch, true)?;
    let labels = batch
        .labels
        .as_ref()
        .ok_or_else(|| Error::Shape("training batch has no labels".into()))?;
    let loss = cfg.loss.record(&mut tape, f.probs, labels, &batch.mask)?;
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    let mut g: Vec<Tensor> = f
        .params
        .iter()
        .map(|&v| grads.take(v).expect("every parameter has a gradient"))
        .collect();
    if let Some(c) = cfg.clip_norm {
        clip_gradients(&mut g, c);
    }
    adam.update(model, &g, cfg);
    Ok(value)
}

/// Adam on shuffled batches of train sequences. With a non-empty validation
/// split the model with the best validation F1 is returned; otherwise the
/// final one.
pub fn train(
    mut model: ConsentModel,
    train_split: &EncodedSplit,
    val_split: &EncodedSplit,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(ConsentModel, TrainLog)> {
    cfg.validate()?;
    if train_split.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, ConsentModel)> = None;
    let mut order: Vec<usize> = (0..train_split.sequences.len()).collect();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&Sequence> = idx.iter().map(|&i| &train_split.sequences[i]).collect();
            let batch = SequenceBatch::new(&refs, model.config(), 0)?;
            let loss = match train_step(&mut model, &mut adam, &batch, cfg) {
                Ok(l) if l.is_finite() => l,
                Ok(_) | Err(Error::NonFinite(_)) => return Err(Error::NonFiniteLoss { epoch, step }),
                Err(e) => return Err(e),
            };
            losses.push(loss);
        }
        let train_loss = fsum(losses.iter().copied()) / losses.len() as f64;
        let val_f1 = if val_split.is_empty() {
            None
        } else {
            Some(split_f1(&model, val_split, cfg.batch_size)?)
        };
        if let Some(f1) = val_f1 {
            if best.as_ref().is_none_or(|(b, _)| f1 > *b) {
                best = Some((f1, model.clone()));
                log.best_epoch = Some(epoch);
            }
        }
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                save_model(&model, &dir.join(format!("checkpoint_epoch{epoch:04}.cnsnt")))?;
            }
        }
        log.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_f1,
            wall_time_s: start.elapsed().as_secs_f64(),
            rng_digest: format!("{:032x}", rng.get_word_pos()),
        });
    }
    Ok((best.map_or(model, |(_, m)| m), log))
}

/// Alpha grid from 0.25 to 2.0 in steps of 0.25.
pub fn default_alpha_grid() -> Vec<f64> {
    (1..=8).map(|i| i as f64 * 0.25).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaChoice {
    pub alpha: f64,
    pub f1: f64,
    /// `(alpha, f1)` for every grid point, in grid order.
    pub scores: Vec<(f64, f64)>,
}

/// Thickness profiles of every word of every image.
pub fn dataset_profiles(images: &[SynthImage]) -> Result<Vec<Vec<ThicknessProfile>>> {
    images
        .par_iter()
        .map(|img| image_profiles(&img.image, &img.boxes()))
        .collect()
}

/// Picks the grid alpha with the best bold-class F1; ties go to the smaller alpha.
pub fn validate_alpha_profiles(
    profiles: &[Vec<ThicknessProfile>],
    labels: &[Vec<u8>],
    grid: &[f64],
    mode: SigmaMode,
) -> Result<AlphaChoice> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if profiles.is_empty() {
        return Err(Error::EmptySplit("val"));
    }
    let scores: Vec<(f64, f64)> = grid
        .iter()
        .map(|&alpha| {
            let mut c = Counts::default();
            for (p, l) in profiles.iter().zip(labels) {
                let votes = vote_profiles(p.clone(), alpha, mode);
                for (&v, &t) in votes.iter().zip(l) {
                    c.add(v, t);
                }
            }
            (alpha, c.f1())
        })
        .collect();
    let (alpha, f1) = scores
        .iter()
        .copied()
        .fold(None, |acc: Option<(f64, f64)>, (a, f)| match acc {
            Some((ba, bf)) if bf > f || (bf == f && ba <= a) => Some((ba, bf)),
            _ => Some((a, f)),
        })
        .expect("non-empty grid");
    Ok(AlphaChoice { alpha, f1, scores })
}

pub fn validate_alpha(val: &[SynthImage], grid: &[f64], mode: SigmaMode) -> Result<AlphaChoice> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let profiles = dataset_profiles(val)?;
    let labels: Vec<Vec<u8>> = val.iter().map(|i| i.labels()).collect();
    validate_alpha_profiles(&profiles, &labels, grid, mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![
            Tensor::new(vec![2], vec![3.0, 4.0]).unwrap(),
            Tensor::new(vec![1], vec![12.0]).unwrap(),
        ];
        assert_eq!(clip_gradients(&mut g, 1.0), 13.0);
        let n = fsum(g.iter().flat_map(|t| t.data().iter().map(|v| v * v))).sqrt();
        assert!(n <= 1.0 + 1e-9);
    }

    #[test]
    fn config_rejects_nonpositive_sizes() {
        let c = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_ok());
    }
}
