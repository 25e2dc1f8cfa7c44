use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{fsum, Tape, Tensor, Var};

/// Training objective over per-element class probabilities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LossKind {
    #[default]
    Bce,
    Focal {
        gamma: f64,
        alpha_bold: f64,
    },
}

impl LossKind {
    pub fn validate(&self) -> Result<()> {
        if let LossKind::Focal { gamma, alpha_bold } = *self {
            if !(gamma >= 0.0 && gamma.is_finite()) {
                return Err(Error::Config(format!("focal gamma must be >= 0, got {gamma}")));
            }
            if !(alpha_bold > 0.0 && alpha_bold <= 1.0) {
                return Err(Error::Config(format!(
                    "alpha_bold must lie in (0, 1], got {alpha_bold}"
                )));
            }
        }
        Ok(())
    }

    fn gamma_weights(&self) -> (f64, [f64; 2]) {
        match *self {
            LossKind::Bce => (0.0, [1.0, 1.0]),
            LossKind::Focal { gamma, alpha_bold } => (gamma, [1.0 - alpha_bold, alpha_bold]),
        }
    }

    /// Records the loss on a tape.
    pub fn record(&self, tape: &mut Tape, probs: Var, labels: &[u8], mask: &[bool]) -> Result<Var> {
        self.validate()?;
        let (gamma, weights) = self.gamma_weights();
        let targets: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        tape.focal_nll(probs, &targets, mask, gamma, weights)
    }

    pub fn evaluate(&self, probs: &Tensor, labels: &[u8], mask: &[bool]) -> Result<f64> {
        let mut tape = Tape::new();
        let p = tape.leaf(probs.clone());
        let l = self.record(&mut tape, p, labels, mask)?;
        Ok(tape.value(l).item())
    }
}

/// Mean over unmasked elements of `-ln p(true class)`, with the probability
/// floored at 1e-12. `probs: [n, 2]`.
pub fn bce_loss(probs: &Tensor, labels: &[u8], mask: &[bool]) -> Result<f64> {
    LossKind::Bce.evaluate(probs, labels, mask)
}

/// Focal loss with class weight `alpha_bold` on bold targets and
/// `1 - alpha_bold` on the rest.
pub fn focal_loss(probs: &Tensor, labels: &[u8], mask: &[bool], gamma: f64, alpha_bold: f64) -> Result<f64> {
    LossKind::Focal { gamma, alpha_bold }.evaluate(probs, labels, mask)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WordPrediction {
    pub word: usize,
    pub p_bold: f64,
    pub label: u8,
}

/// Averages block P(bold) per word; a word is bold iff the mean is >= 0.5.
/// Word ids must be below `num_words` and every word needs a block.
pub fn aggregate_word_predictions(
    block_probs: &[f64],
    word_ids: &[usize],
    num_words: usize,
) -> Result<Vec<WordPrediction>> {
    if block_probs.len() != word_ids.len() {
        return Err(Error::Shape(format!(
            "{} block probabilities for {} word ids",
            block_probs.len(),
            word_ids.len()
        )));
    }
    let mut per_word: Vec<Vec<f64>> = vec![Vec::new(); num_words];
    for (&p, &w) in block_probs.iter().zip(word_ids) {
        per_word.get_mut(w).ok_or(Error::UnknownWordId(w))?.push(p);
    }
    let missing: Vec<String> = (0..num_words)
        .filter(|&w| per_word[w].is_empty())
        .map(|w| w.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Coverage {
            missing,
            extra: Vec::new(),
        });
    }
    Ok(per_word
        .into_iter()
        .enumerate()
        .map(|(word, ps)| {
            let p_bold = fsum(ps.iter().copied()) / ps.len() as f64;
            WordPrediction {
                word,
                p_bold,
                label: (p_bold >= 0.5) as u8,
            }
        })
        .collect())
}
