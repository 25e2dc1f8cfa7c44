use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Feature widths of the three convolution stages.
pub const CONV_WIDTHS: [usize; 3] = [8, 16, 32];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub block_height: usize,
    pub block_width: usize,
    /// 1 for grayscale input, 3 for RGB.
    pub channels: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    /// Encoder stacks; 0 gives the context-free variant where each word is
    /// classified from its own blocks alone.
    pub num_stacks: usize,
    pub ffn_hidden: usize,
    pub max_seq_len: usize,
    /// Adds sinusoidal position encodings after the feature extractor.
    /// Off by default; turning it on breaks permutation equivariance.
    pub sinusoidal_positions: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            block_height: 128,
            block_width: 96,
            channels: 1,
            embed_dim: 64,
            num_heads: 4,
            num_stacks: 4,
            ffn_hidden: 256,
            max_seq_len: 100,
            sinusoidal_positions: false,
        }
    }
}

impl ModelConfig {
    /// Defaults with `ffn_hidden = 4 * embed_dim`.
    pub fn with_dims(embed_dim: usize, num_heads: usize, num_stacks: usize) -> Self {
        ModelConfig {
            embed_dim,
            num_heads,
            num_stacks,
            ffn_hidden: 4 * embed_dim,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.block_height < 8 || self.block_width < 8 {
            return fail(format!(
                "blocks must be at least 8x8, got {}x{}",
                self.block_height, self.block_width
            ));
        }
        if self.channels != 1 && self.channels != 3 {
            return fail(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.ffn_hidden == 0 {
            return fail("ffn_hidden must be positive".into());
        }
        if self.max_seq_len == 0 {
            return fail("max_seq_len must be at least 1".into());
        }
        let dims = [
            self.block_height,
            self.block_width,
            self.channels,
            self.embed_dim,
            self.num_heads,
            self.num_stacks,
            self.ffn_hidden,
            self.max_seq_len,
        ];
        if dims.iter().any(|&v| v > u32::MAX as usize) {
            return fail("dimensions must fit in 32 bits".into());
        }
        Ok(())
    }

    pub fn block_len(&self) -> usize {
        self.channels * self.block_height * self.block_width
    }

    /// Block width over height.
    pub fn aspect(&self) -> f64 {
        self.block_width as f64 / self.block_height as f64
    }

    /// `(name, shape, fan_in)` of every parameter tensor, in file order.
    /// Biases and layer-norm affines report a fan-in of 0.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut v = Vec::new();
        let mut c_in = self.channels;
        for (i, &c) in CONV_WIDTHS.iter().enumerate() {
            v.push((format!("phi.conv{}.weight", i + 1), vec![c, c_in, 3, 3], c_in * 9));
            v.push((format!("phi.conv{}.bias", i + 1), vec![c], 0));
            c_in = c;
        }
        let d = self.embed_dim;
        v.push(("phi.proj.weight".into(), vec![c_in, d], c_in));
        v.push(("phi.proj.bias".into(), vec![d], 0));
        for t in 0..self.num_stacks {
            let p = |n: &str| format!("gamma.{t}.{n}");
            for n in ["wq", "wk", "wv", "wo"] {
                v.push((p(n), vec![d, d], d));
                v.push((p(&n.replacen('w', "b", 1)), vec![d], 0));
            }
            v.push((p("ln1.gain"), vec![d], 0));
            v.push((p("ln1.bias"), vec![d], 0));
            v.push((p("ffn.w1"), vec![d, self.ffn_hidden], d));
            v.push((p("ffn.b1"), vec![self.ffn_hidden], 0));
            v.push((p("ffn.w2"), vec![self.ffn_hidden, d], self.ffn_hidden));
            v.push((p("ffn.b2"), vec![d], 0));
            v.push((p("ln2.gain"), vec![d], 0));
            v.push((p("ln2.bias"), vec![d], 0));
        }
        v.push(("psi.weight".into(), vec![d, 2], d));
        v.push(("psi.bias".into(), vec![2], 0));
        v
    }

    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|(_, s, _)| s.iter().product::<usize>())
            .sum()
    }
}
