//! Grouping word blocks into padded sequence batches.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{BoxXywh, RgbImage};
use crate::tensor::Tensor;

use super::blocks::word_blocks;
use super::ModelConfig;

/// One word cut into blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedWord {
    pub id: usize,
    pub label: Option<u8>,
    pub blocks: Vec<Vec<f64>>,
}

/// Encodes the words of one image; ids run from `first_id` in box order.
pub fn encode_words(
    image: &RgbImage,
    boxes: &[BoxXywh],
    labels: Option<&[u8]>,
    first_id: usize,
    cfg: &ModelConfig,
) -> Result<Vec<EncodedWord>> {
    if let Some(l) = labels {
        if l.len() != boxes.len() {
            return Err(Error::Shape(format!("{} labels for {} boxes", l.len(), boxes.len())));
        }
    }
    boxes
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            Ok(EncodedWord {
                id: first_id + i,
                label: labels.map(|l| l[i]),
                blocks: word_blocks(image, b, cfg)?,
            })
        })
        .collect()
}

/// Consecutive blocks of one image, fed to the encoder as a set.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    /// Row-major `[len, block_len]`.
    pub blocks: Vec<f64>,
    pub labels: Option<Vec<u8>>,
    pub word_ids: Vec<usize>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.word_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.word_ids.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Chunking {
    /// Words in reading order.
    #[default]
    ReadingOrder,
    /// Words shuffled with the given seed before chunking.
    Shuffled(u64),
}

/// Packs an image's words into sequences of at most `max_len` blocks without
/// splitting a word, unless the word alone is longer than `max_len`.
pub fn chunk_words(mut words: Vec<EncodedWord>, max_len: usize, chunking: Chunking) -> Vec<Sequence> {
    if let Chunking::Shuffled(seed) = chunking {
        words.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let labeled = words.iter().all(|w| w.label.is_some());
    let mut out = Vec::new();
    let mut cur = Sequence {
        blocks: Vec::new(),
        labels: labeled.then(Vec::new),
        word_ids: Vec::new(),
    };
    let flush = |cur: &mut Sequence, out: &mut Vec<Sequence>| {
        if !cur.is_empty() {
            let empty = Sequence {
                blocks: Vec::new(),
                labels: labeled.then(Vec::new),
                word_ids: Vec::new(),
            };
            out.push(std::mem::replace(cur, empty));
        }
    };
    for w in words {
        if cur.len() + w.blocks.len() > max_len {
            flush(&mut cur, &mut out);
        }
        for b in w.blocks {
            if cur.len() == max_len {
                flush(&mut cur, &mut out);
            }
            cur.blocks.extend_from_slice(&b);
            cur.word_ids.push(w.id);
            if let Some(l) = cur.labels.as_mut() {
                l.push(w.label.unwrap_or(0));
            }
        }
    }
    flush(&mut cur, &mut out);
    out
}

/// Padded batch of sequences. Rows are ordered `(batch, position)`.
#[derive(Clone, Debug)]
pub struct SequenceBatch {
    pub batch: usize,
    pub seq: usize,
    /// `[batch, seq, channels, height, width]`; padding is zero.
    pub blocks: Tensor,
    /// `true` marks a real element.
    pub mask: Vec<bool>,
    pub labels: Option<Vec<u8>>,
    pub word_ids: Vec<Option<usize>>,
}

impl SequenceBatch {
    /// Pads every sequence to the longest one (or `min_len`, if larger).
    pub fn new(seqs: &[&Sequence], cfg: &ModelConfig, min_len: usize) -> Result<Self> {
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::Shape("batches need at least one non-empty sequence".into()));
        }
        let longest = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let seq = longest.max(min_len);
        if seq > cfg.max_seq_len {
            return Err(Error::Shape(format!(
                "sequence length {seq} exceeds max_seq_len {}",
                cfg.max_seq_len
            )));
        }
        let bl = cfg.block_len();
        let batch = seqs.len();
        let mut data = vec![0.0; batch * seq * bl];
        let mut mask = vec![false; batch * seq];
        let labeled = seqs.iter().all(|s| s.labels.is_some());
        let mut labels = vec![0u8; batch * seq];
        let mut word_ids = vec![None; batch * seq];
        for (b, s) in seqs.iter().enumerate() {
            if s.blocks.len() != s.len() * bl {
                return Err(Error::Shape(format!(
                    "sequence holds {} values for {} blocks of {bl}",
                    s.blocks.len(),
                    s.len()
                )));
            }
            let row = b * seq;
            data[row * bl..(row + s.len()) * bl].copy_from_slice(&s.blocks);
            for i in 0..s.len() {
                mask[row + i] = true;
                word_ids[row + i] = Some(s.word_ids[i]);
                if let Some(l) = &s.labels {
                    labels[row + i] = l[i];
                }
            }
        }
        let blocks = Tensor::new(vec![batch, seq, cfg.channels, cfg.block_height, cfg.block_width], data)?;
        Ok(SequenceBatch {
            batch,
            seq,
            blocks,
            mask,
            labels: labeled.then_some(labels),
            word_ids,
        })
    }

    /// Indices of real rows.
    pub fn real_rows(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }
}
