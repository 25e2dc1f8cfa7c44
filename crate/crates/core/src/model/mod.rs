//! The sequence classifier: a per-block conv feature extractor, a stack of
//! masked self-attention encoder layers, and a per-element softmax decoder.

pub mod batch;
pub mod blocks;
mod config;
mod io;
mod loss;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{AttentionLayout, Tape, Tensor, Var};

pub use batch::{chunk_words, encode_words, Chunking, EncodedWord, Sequence, SequenceBatch};
pub use config::{ModelConfig, CONV_WIDTHS};
pub use io::{load_model, save_model, MAGIC, VERSION};
pub use loss::{aggregate_word_predictions, bce_loss, focal_loss, LossKind, WordPrediction};

pub const LAYER_NORM_EPS: f64 = 1e-5;

const PHI_PARAMS: usize = 8;
const STACK_PARAMS: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsentModel {
    config: ModelConfig,
    params: Vec<Param>,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// One leaf per parameter, in [`ConsentModel::params`] order.
    pub params: Vec<Var>,
    /// `[batch * seq, d]`, zero at padded rows.
    pub embeddings: Var,
    pub encoded: Var,
    /// `[batch * seq, 2]`; column 1 is P(bold).
    pub probs: Var,
}

impl ConsentModel {
    /// Fresh model: weights uniform in `+-sqrt(1 / fan_in)`, biases 0,
    /// layer-norm gains 1.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .param_specs()
            .into_iter()
            .map(|(name, shape, fan_in)| {
                let value = if fan_in > 0 {
                    let a = (1.0 / fan_in as f64).sqrt();
                    Tensor::from_fn(&shape, |_| rng.random_range(-a..a))
                } else if name.ends_with(".gain") {
                    Tensor::full(&shape, 1.0)
                } else {
                    Tensor::zeros(&shape)
                };
                Param { name, value }
            })
            .collect();
        Ok(ConsentModel { config, params })
    }

    /// Builds a model from named tensors, checking them against the config.
    pub fn from_params(config: ModelConfig, params: Vec<Param>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != params.len() {
            return Err(Error::ModelMismatch(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for ((name, shape, _), p) in specs.iter().zip(&params) {
            if *name != p.name || shape.as_slice() != p.value.shape() {
                return Err(Error::ModelMismatch(format!(
                    "expected {name} {shape:?}, got {} {:?}",
                    p.name,
                    p.value.shape()
                )));
            }
            if !p.value.is_finite() {
                return Err(Error::ModelMismatch(format!("{name} holds non-finite values")));
            }
        }
        Ok(ConsentModel { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    /// Records every parameter as a leaf.
    pub fn param_leaves(&self, tape: &mut Tape, track_grads: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                let mut t = p.value.clone();
                t.set_requires_grad(track_grads);
                tape.leaf(t)
            })
            .collect()
    }

    /// Applies the feature extractor to every real block independently.
    /// Padded positions get zero embeddings.
    pub fn extract_features(&self, tape: &mut Tape, vars: &[Var], batch: &SequenceBatch) -> Result<Var> {
        let c = &self.config;
        let bs = batch.blocks.shape();
        if bs != [batch.batch, batch.seq, c.channels, c.block_height, c.block_width]
            || batch.mask.len() != batch.batch * batch.seq
        {
            return Err(Error::Shape(format!(
                "blocks {bs:?} do not match {}x{}x{} model blocks",
                c.channels, c.block_height, c.block_width
            )));
        }
        let rows = batch.real_rows();
        if rows.is_empty() {
            return Err(Error::Shape("batch has no real elements".into()));
        }
        let bl = c.block_len();
        let src = batch.blocks.data();
        let mut real = Vec::with_capacity(rows.len() * bl);
        for &r in &rows {
            real.extend_from_slice(&src[r * bl..(r + 1) * bl]);
        }
        let x = tape.leaf(Tensor::new(
            vec![rows.len(), c.channels, c.block_height, c.block_width],
            real,
        )?);
        let mut h = x;
        for stage in 0..CONV_WIDTHS.len() {
            h = tape.conv2d(h, vars[2 * stage], vars[2 * stage + 1])?;
            h = tape.relu(h)?;
            h = tape.max_pool2(h)?;
        }
        let pooled = tape.global_avg_pool(h)?;
        let e = tape.matmul(pooled, vars[6])?;
        let e = tape.add_bias(e, vars[7])?;
        let mut out = tape.scatter_rows(e, &rows, batch.mask.len())?;
        if c.sinusoidal_positions {
            let pe = tape.leaf(positional_table(batch, c.embed_dim));
            out = tape.add(out, pe)?;
        }
        Ok(out)
    }

    /// Runs the encoder stacks over `[batch * seq, d]` embeddings.
    pub fn encode(&self, tape: &mut Tape, vars: &[Var], x: Var, layout: &AttentionLayout) -> Result<Var> {
        let mut h = x;
        for t in 0..self.config.num_stacks {
            let p = &vars[PHI_PARAMS + t * STACK_PARAMS..PHI_PARAMS + (t + 1) * STACK_PARAMS];
            let q = linear(tape, h, p[0], p[1])?;
            let k = linear(tape, h, p[2], p[3])?;
            let v = linear(tape, h, p[4], p[5])?;
            let a = tape.attention(q, k, v, layout)?;
            let a = linear(tape, a, p[6], p[7])?;
            let r = tape.add(h, a)?;
            let n1 = tape.layer_norm(r, p[8], p[9], LAYER_NORM_EPS)?;
            let f = linear(tape, n1, p[10], p[11])?;
            let f = tape.relu(f)?;
            let f = linear(tape, f, p[12], p[13])?;
            let r = tape.add(n1, f)?;
            h = tape.layer_norm(r, p[14], p[15], LAYER_NORM_EPS)?;
        }
        Ok(h)
    }

    /// Per-element linear map to two logits and a softmax.
    pub fn decode(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let base = PHI_PARAMS + self.config.num_stacks * STACK_PARAMS;
        let logits = linear(tape, x, vars[base], vars[base + 1])?;
        tape.softmax(logits, 1)
    }

    pub fn forward(&self, tape: &mut Tape, batch: &SequenceBatch, track_grads: bool) -> Result<Forward> {
        let params = self.param_leaves(tape, track_grads);
        let embeddings = self.extract_features(tape, &params, batch)?;
        let layout = AttentionLayout {
            batch: batch.batch,
            seq: batch.seq,
            heads: self.config.num_heads,
            mask: batch.mask.clone(),
        };
        let encoded = self.encode(tape, &params, embeddings, &layout)?;
        let probs = self.decode(tape, &params, encoded)?;
        Ok(Forward {
            params,
            embeddings,
            encoded,
            probs,
        })
    }

    /// `[batch * seq, 2]` probabilities; rows of padded positions are
    /// meaningless.
    pub fn predict(&self, batch: &SequenceBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, batch, false)?;
        Ok(tape.value(f.probs).clone())
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

/// Sinusoidal encodings of each real element's position; zero on padding.
fn positional_table(batch: &SequenceBatch, d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[batch.batch * batch.seq, d]);
    let data = t.data_mut();
    for row in 0..batch.mask.len() {
        if !batch.mask[row] {
            continue;
        }
        let pos = (row % batch.seq) as f64;
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            data[row * d + i] = if i % 2 == 0 {
                (pos * freq).sin()
            } else {
                (pos * freq).cos()
            };
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            block_height: 8,
            block_width: 8,
            max_seq_len: 4,
            ..ModelConfig::with_dims(4, 2, 1)
        }
    }

    fn batch(cfg: &ModelConfig, blocks: Vec<Vec<f64>>) -> SequenceBatch {
        let n = blocks.len();
        let s = Sequence {
            blocks: blocks.concat(),
            labels: None,
            word_ids: (0..n).collect(),
        };
        SequenceBatch::new(&[&s], cfg, 0).unwrap()
    }

    #[test]
    fn zero_block_has_zero_embedding() {
        let cfg = tiny();
        let m = ConsentModel::new(cfg.clone(), 1).unwrap();
        let b = batch(&cfg, vec![vec![0.0; 64]]);
        let mut tape = Tape::new();
        let f = m.forward(&mut tape, &b, false).unwrap();
        assert!(tape.value(f.embeddings).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_decoder_gives_half() {
        let cfg = tiny();
        let mut m = ConsentModel::new(cfg.clone(), 1).unwrap();
        for p in m.params_mut().iter_mut().filter(|p| p.name.starts_with("psi")) {
            p.value.data_mut().fill(0.0);
        }
        let b = batch(&cfg, vec![(0..64).map(|v| v as f64 / 64.0).collect(); 3]);
        let probs = m.predict(&b).unwrap();
        assert!(probs.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn identical_blocks_share_embeddings() {
        let cfg = tiny();
        let m = ConsentModel::new(cfg.clone(), 5).unwrap();
        let blk: Vec<f64> = (0..64).map(|v| ((v * 7) % 11) as f64 / 11.0).collect();
        let b = batch(&cfg, vec![blk.clone(), vec![0.5; 64], blk]);
        let mut tape = Tape::new();
        let f = m.forward(&mut tape, &b, false).unwrap();
        let e = tape.value(f.embeddings).data();
        assert_eq!(e[0..4], e[8..12]);
    }

    #[test]
    fn wrong_block_shape_is_rejected() {
        let cfg = tiny();
        let m = ConsentModel::new(cfg.clone(), 1).unwrap();
        let other = ModelConfig {
            block_height: 16,
            ..cfg
        };
        let b = batch(&other, vec![vec![0.0; 128]]);
        assert!(matches!(m.predict(&b), Err(Error::Shape(_))));
    }
}
