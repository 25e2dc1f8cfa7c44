use std::collections::HashMap;

use super::{gemm_nn, gemm_nt, gemm_tn, matmul_dims, ExactSum, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Geometry of a padded batch of sequences for masked self-attention.
/// Rows of the `[batch * seq, d]` operands are ordered sequence-major.
#[derive(Clone, Debug)]
pub struct AttentionLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    /// `true` marks a real (unpadded) position; length `batch * seq`.
    pub mask: Vec<bool>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Transpose(Var),
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    ScatterRows {
        x: Var,
        rows: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        /// Attention weights, `[batch, heads, seq, seq]`; zero for padding.
        probs: Vec<f64>,
    },
    FocalNll {
        probs: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        gamma: f64,
        weights: [f64; 2],
        count: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for a single reverse sweep.
///
/// Built fresh for every forward pass; [`Tape::backward`] consumes it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of one backward sweep, keyed by leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    map: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.map.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.map.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

fn check_finite(data: &[f64], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records an input. It receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, name: &'static str) -> Result<Var> {
        check_finite(&data, name)?;
        let needs_grad = self.inputs(&op).iter().any(|i| self.nodes[i.0].needs_grad);
        let value = Tensor::new(shape, data)?;
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match *op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddBias(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x)
            | Op::Transpose(x)
            | Op::GlobalAvgPool(x) => vec![x],
            Op::Softmax { x, .. } | Op::MaxPool2 { x, .. } | Op::ScatterRows { x, .. } => vec![x],
            Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
            Op::Conv2d { x, w, b } => vec![x, w, b],
            Op::Attention { q, k, v, .. } => vec![q, k, v],
            Op::FocalNll { probs, .. } => vec![probs],
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = matmul_dims(self.shape(a), self.shape(b))?;
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        self.push(vec![m, n], out, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("add {:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Add(a, b), "add")
    }

    /// Adds a 1-D bias along the last axis, repeated over all leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&1);
        if self.shape(bias) != [n] {
            return Err(Error::Shape(format!(
                "bias {:?} for input {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.value(bias).data();
        let out = self
            .value(x)
            .data()
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, c)| v + c))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::AddBias(x, bias), "add_bias")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("mul {:?} * {:?}", self.shape(a), self.shape(b))));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale(x, c), "scale")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Relu(x), "relu")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(vec![], vec![s], Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(vec![], vec![s], Op::Mean(x), "mean")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let data = t.into_data();
        self.push(shape.to_vec(), data, Op::Reshape(x), "reshape")
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::Shape(format!("transpose of rank-{} tensor", s.len())));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(vec![c, r], out, Op::Transpose(x), "transpose")
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("softmax axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    denom += e;
                }
                for j in 0..n {
                    out[at(j)] /= denom;
                }
            }
        }
        self.push(shape, out, Op::Softmax { x, outer, n, inner }, "softmax")
    }

    /// Normalizes over the last axis, then applies `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap_or(&1);
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::Shape(format!(
                "layer_norm affine {:?}/{:?} for input {shape:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = src.len() / n;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[r * n + j] = h;
                out[r * n + j] = g[j] * h + b[j];
            }
        }
        self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    /// 3x3 convolution, stride 1, zero padding 1.
    /// `x: [N, C, H, W]`, `w: [O, C, 3, 3]`, `b: [O]` -> `[N, O, H, W]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != 3 || ws[3] != 3 {
            return Err(Error::Shape(format!("conv2d input {xs:?} weight {ws:?}")));
        }
        if self.shape(b) != [ws[0]] {
            return Err(Error::Shape(format!("conv2d bias {:?}", self.shape(b))));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let o = ws[0];
        let hw = h * wd;
        let src = self.value(x).data();
        let wt = self.value(w).data();
        let bias = self.value(b).data();
        let mut out = vec![0.0; n * o * hw];
        let mut cols = vec![0.0; c * 9 * hw];
        for img in 0..n {
            im2col(&src[img * c * hw..(img + 1) * c * hw], c, h, wd, &mut cols);
            let dst = &mut out[img * o * hw..(img + 1) * o * hw];
            for (oc, plane) in dst.chunks_exact_mut(hw).enumerate() {
                plane.fill(bias[oc]);
            }
            gemm_nn(o, c * 9, hw, wt, &cols, dst);
        }
        self.push(vec![n, o, h, wd], out, Op::Conv2d { x, w, b }, "conv2d")
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::Shape(format!("max_pool2 input {s:?}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0; planes * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for p in 0..planes {
            let base = p * h * w;
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xo;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * w + 2 * xo + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    let oi = (p * oh + y) * ow + xo;
                    out[oi] = src[best];
                    argmax[oi] = best;
                }
            }
        }
        self.push(vec![s[0], s[1], oh, ow], out, Op::MaxPool2 { x, argmax }, "max_pool2")
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!("global_avg_pool input {s:?}")));
        }
        let hw = s[2] * s[3];
        let out = self
            .value(x)
            .data()
            .chunks_exact(hw)
            .map(|plane| plane.iter().sum::<f64>() / hw as f64)
            .collect();
        self.push(vec![s[0], s[1]], out, Op::GlobalAvgPool(x), "global_avg_pool")
    }

    /// Places row `i` of `x: [r, d]` at row `rows[i]` of a zero `[total, d]` output.
    pub fn scatter_rows(&mut self, x: Var, rows: &[usize], total: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != rows.len() || rows.iter().any(|&r| r >= total) {
            return Err(Error::Shape(format!(
                "scatter of {s:?} into {total} rows via {} indices",
                rows.len()
            )));
        }
        let d = s[1];
        let src = self.value(x).data();
        let mut out = vec![0.0; total * d];
        for (i, &r) in rows.iter().enumerate() {
            out[r * d..(r + 1) * d].copy_from_slice(&src[i * d..(i + 1) * d]);
        }
        self.push(
            vec![total, d],
            out,
            Op::ScatterRows { x, rows: rows.to_vec() },
            "scatter_rows",
        )
    }

    /// Masked multi-head scaled dot-product attention over `[batch * seq, d]`
    /// projections. Padded keys are excluded (the `-inf` logit case) and padded
    /// queries yield zero rows. Reductions over keys are exact sums, so the
    /// result does not depend on the order of positions.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: &AttentionLayout) -> Result<Var> {
        let s = self.shape(q).to_vec();
        let rows = layout.batch * layout.seq;
        if s.len() != 2
            || s[0] != rows
            || self.shape(k) != s.as_slice()
            || self.shape(v) != s.as_slice()
            || layout.mask.len() != rows
            || layout.heads == 0
            || !s[1].is_multiple_of(layout.heads)
        {
            return Err(Error::Shape(format!(
                "attention q {s:?} k {:?} v {:?} for layout {}x{} heads {}",
                self.shape(k),
                self.shape(v),
                layout.batch,
                layout.seq,
                layout.heads
            )));
        }
        let d = s[1];
        let (seq, heads) = (layout.seq, layout.heads);
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; rows * d];
        let mut probs = vec![0.0; layout.batch * heads * seq * seq];
        let mut acc = ExactSum::new();
        let mut logits = vec![0.0; seq];
        for b in 0..layout.batch {
            let real: Vec<usize> = (0..seq).filter(|&j| layout.mask[b * seq + j]).collect();
            for h in 0..heads {
                let off = h * hd;
                for i in real.iter().copied() {
                    let qi = &qd[(b * seq + i) * d + off..(b * seq + i) * d + off + hd];
                    let mut max = f64::NEG_INFINITY;
                    for &j in &real {
                        let kj = &kd[(b * seq + j) * d + off..(b * seq + j) * d + off + hd];
                        let l = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                        logits[j] = l;
                        max = max.max(l);
                    }
                    acc.clear();
                    for &j in &real {
                        logits[j] = (logits[j] - max).exp();
                        acc.add(logits[j]);
                    }
                    let denom = acc.value();
                    let prow = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    for &j in &real {
                        prow[j] = logits[j] / denom;
                    }
                    let orow = &mut out[(b * seq + i) * d + off..][..hd];
                    for (c, o) in orow.iter_mut().enumerate() {
                        acc.clear();
                        for &j in &real {
                            acc.add(prow[j] * vd[(b * seq + j) * d + off + c]);
                        }
                        *o = acc.value();
                    }
                }
            }
        }
        self.push(
            vec![rows, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                layout: layout.clone(),
                probs,
            },
            "attention",
        )
    }

    /// Mean over unmasked rows of `-w[t] * (1 - p_t)^gamma * ln(p_t)` with
    /// `p_t = probs[i, t]`. `p_t` is floored at 1e-12 in the value, so a
    /// perfect prediction costs exactly 0; outside `[1e-12, 1 - 1e-12]` the
    /// gradient is zero. `probs: [n, 2]`.
    pub fn focal_nll(
        &mut self,
        probs: Var,
        targets: &[usize],
        mask: &[bool],
        gamma: f64,
        weights: [f64; 2],
    ) -> Result<Var> {
        let s = self.shape(probs).to_vec();
        if s.len() != 2 || s[1] != 2 || targets.len() != s[0] || mask.len() != s[0] {
            return Err(Error::Shape(format!(
                "loss over probabilities {s:?} with {} targets and {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t > 1) {
            return Err(Error::Shape(format!("target class {t} out of range")));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::NoUnmaskedElements);
        }
        let p = self.value(probs).data();
        let mut total = 0.0;
        for i in 0..s[0] {
            if !mask[i] {
                continue;
            }
            let t = targets[i];
            let pt = p[i * 2 + t].clamp(1e-12, 1.0);
            total += -weights[t] * (1.0 - pt).powf(gamma) * pt.ln();
        }
        self.push(
            vec![],
            vec![total / count as f64],
            Op::FocalNll {
                probs,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                gamma,
                weights,
                count,
            },
            "focal_nll",
        )
    }

    /// Reverse sweep from a scalar `loss`. Every `requires_grad` leaf gets an
    /// entry; leaves the loss does not depend on get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop(idx, &g, &mut grads);
        }

        let mut map = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                let shape = node.value.shape().to_vec();
                let data = grads[i].take().unwrap_or_else(|| vec![0.0; node.value.numel()]);
                map.insert(Var(i), Tensor::new(shape, data)?);
            }
        }
        Ok(Gradients { map })
    }

    fn backprop(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut deposit = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if wants(a) {
                    let bv = self.value(b).data();
                    deposit(a, &mut |ga| gemm_nt(m, n, k, g, bv, ga));
                }
                if wants(b) {
                    let av = self.value(a).data();
                    deposit(b, &mut |gb| gemm_tn(k, m, n, av, g, gb));
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    deposit(v, &mut |gv| axpy(gv, g));
                }
            }
            &Op::AddBias(x, bias) => {
                deposit(x, &mut |gx| axpy(gx, g));
                let n = self.shape(bias)[0];
                deposit(bias, &mut |gb| {
                    for row in g.chunks_exact(n) {
                        axpy(gb, row);
                    }
                });
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                deposit(a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                deposit(b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            &Op::Scale(x, c) => deposit(x, &mut |gx| {
                for (o, &gi) in gx.iter_mut().zip(g) {
                    *o += c * gi;
                }
            }),
            &Op::Relu(x) => {
                let xv = self.value(x).data();
                deposit(x, &mut |gx| {
                    for i in 0..gx.len() {
                        if xv[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            &Op::Sum(x) => deposit(x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0])),
            &Op::Mean(x) => {
                let share = g[0] / self.value(x).numel() as f64;
                deposit(x, &mut |gx| gx.iter_mut().for_each(|o| *o += share));
            }
            &Op::Reshape(x) => deposit(x, &mut |gx| axpy(gx, g)),
            &Op::Transpose(x) => {
                let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
                deposit(x, &mut |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            &Op::Softmax { x, outer, n, inner } => {
                let y = node.value.data();
                deposit(x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let dot: f64 = (0..n).map(|j| y[at(j)] * g[at(j)]).sum();
                            for j in 0..n {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = self.shape(*gain)[0];
                let gv = self.value(*gain).data();
                deposit(*gain, &mut |gg| {
                    for (gr, hr) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                });
                deposit(*bias, &mut |gb| {
                    for gr in g.chunks_exact(n) {
                        axpy(gb, gr);
                    }
                });
                deposit(*x, &mut |gx| {
                    let mut dh = vec![0.0; n];
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        for j in 0..n {
                            dh[j] = gr[j] * gv[j];
                        }
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gx[r * n + j] += inv / n as f64 * (n as f64 * dh[j] - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                });
            }
            &Op::Conv2d { x, w, b } => {
                let xs = self.shape(x);
                let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let o = self.shape(w)[0];
                let hw = h * wd;
                deposit(b, &mut |gb| {
                    for img in 0..n {
                        for oc in 0..o {
                            gb[oc] += g[(img * o + oc) * hw..][..hw].iter().sum::<f64>();
                        }
                    }
                });
                let src = self.value(x).data();
                let wt = self.value(w).data();
                let mut cols = vec![0.0; c * 9 * hw];
                let mut dcols = vec![0.0; c * 9 * hw];
                let need_w = wants(w);
                let need_x = wants(x);
                let mut gw_acc = vec![0.0; if need_w { o * c * 9 } else { 0 }];
                let mut gx_acc = vec![0.0; if need_x { n * c * hw } else { 0 }];
                for img in 0..n {
                    let gout = &g[img * o * hw..(img + 1) * o * hw];
                    if need_w {
                        im2col(&src[img * c * hw..(img + 1) * c * hw], c, h, wd, &mut cols);
                        gemm_nt(o, hw, c * 9, gout, &cols, &mut gw_acc);
                    }
                    if need_x {
                        dcols.fill(0.0);
                        gemm_tn(c * 9, o, hw, wt, gout, &mut dcols);
                        col2im(&dcols, c, h, wd, &mut gx_acc[img * c * hw..(img + 1) * c * hw]);
                    }
                }
                if need_w {
                    deposit(w, &mut |gw| axpy(gw, &gw_acc));
                }
                if need_x {
                    deposit(x, &mut |gx| axpy(gx, &gx_acc));
                }
            }
            Op::MaxPool2 { x, argmax } => deposit(*x, &mut |gx| {
                for (oi, &src) in argmax.iter().enumerate() {
                    gx[src] += g[oi];
                }
            }),
            &Op::GlobalAvgPool(x) => {
                let s = self.shape(x);
                let hw = s[2] * s[3];
                deposit(x, &mut |gx| {
                    for (plane, &gi) in gx.chunks_exact_mut(hw).zip(g) {
                        let share = gi / hw as f64;
                        plane.iter_mut().for_each(|o| *o += share);
                    }
                });
            }
            Op::ScatterRows { x, rows } => {
                let d = self.shape(*x)[1];
                deposit(*x, &mut |gx| {
                    for (i, &r) in rows.iter().enumerate() {
                        axpy(&mut gx[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Attention { q, k, v, layout, probs } => {
                let (gq, gk, gv) = attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    layout,
                    probs,
                    g,
                );
                deposit(*q, &mut |t| axpy(t, &gq));
                deposit(*k, &mut |t| axpy(t, &gk));
                deposit(*v, &mut |t| axpy(t, &gv));
            }
            Op::FocalNll {
                probs,
                targets,
                mask,
                gamma,
                weights,
                count,
            } => {
                let p = self.value(*probs).data();
                let scale = g[0] / *count as f64;
                deposit(*probs, &mut |gp| {
                    for i in 0..targets.len() {
                        if !mask[i] {
                            continue;
                        }
                        let t = targets[i];
                        let raw = p[i * 2 + t];
                        let pt = clamp_prob(raw);
                        if pt != raw {
                            continue;
                        }
                        // d/dp of -w (1-p)^g ln p
                        let mut d = -(1.0 - pt).powf(*gamma) / pt;
                        if *gamma != 0.0 {
                            d += gamma * (1.0 - pt).powf(gamma - 1.0) * pt.ln();
                        }
                        gp[i * 2 + t] += scale * weights[t] * d;
                    }
                });
            }
        }
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(1e-12, 1.0 - 1e-12)
}

fn axpy(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Unfolds a `[C, H, W]` image into `[C*9, H*W]` columns for a padded 3x3 kernel.
fn im2col(src: &[f64], c: usize, h: usize, w: usize, cols: &mut [f64]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &src[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ch * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, d) in dst.iter_mut().enumerate() {
                        let sx = x as isize + kx as isize - 1;
                        *d = if sx < 0 || sx >= w as isize {
                            0.0
                        } else {
                            srow[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, dst: &mut [f64]) {
    let hw = h * w;
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ch * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            dst[ch * hw + sy as usize * w + sx as usize] += row[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    layout: &AttentionLayout,
    probs: &[f64],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (seq, heads) = (layout.seq, layout.heads);
    let d = q.len() / (layout.batch * seq);
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut gq = vec![0.0; q.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gv = vec![0.0; v.len()];
    let mut dlogit = vec![0.0; seq];
    for b in 0..layout.batch {
        let real: Vec<usize> = (0..seq).filter(|&j| layout.mask[b * seq + j]).collect();
        for h in 0..heads {
            let off = h * hd;
            for &i in &real {
                let prow = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                let gi = &g[(b * seq + i) * d + off..][..hd];
                let mut weighted = 0.0;
                for &j in &real {
                    let vj = &v[(b * seq + j) * d + off..][..hd];
                    let da: f64 = gi.iter().zip(vj).map(|(x, y)| x * y).sum();
                    dlogit[j] = da;
                    weighted += prow[j] * da;
                    let gvj = &mut gv[(b * seq + j) * d + off..][..hd];
                    for c in 0..hd {
                        gvj[c] += prow[j] * gi[c];
                    }
                }
                for &j in &real {
                    let dl = prow[j] * (dlogit[j] - weighted) * scale;
                    if dl == 0.0 {
                        continue;
                    }
                    let (ri, rj) = ((b * seq + i) * d + off, (b * seq + j) * d + off);
                    for c in 0..hd {
                        gq[ri + c] += dl * k[rj + c];
                        gk[rj + c] += dl * q[ri + c];
                    }
                }
            }
        }
    }
    (gq, gk, gv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_selector() {
        let mut tape = Tape::new();
        let eye = tape.leaf(t(&[2, 2], &[1., 0., 0., 1.]));
        let m = tape.leaf(t(&[2, 2], &[1., 2., 3., 4.]));
        let out = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1., 2., 3., 4.]);

        let sel = tape.leaf(t(&[2, 2], &[1., 0., 0., 0.]));
        let m2 = tape.leaf(t(&[2, 2], &[5., 6., 7., 8.]));
        let out = tape.matmul(sel, m2).unwrap();
        assert_eq!(tape.value(out).data(), &[5., 6., 0., 0.]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[0., 0.]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.leaf(t(&[2], &[1000., 0.]));
        let y = tape.softmax(x, 0).unwrap();
        let p = tape.value(y).data();
        assert!((p[0] - 1.0).abs() < 1e-300 + f64::EPSILON && p[1] < 1e-300);

        let x = tape.leaf(t(&[3], &[1., 2., 3.]));
        let y = tape.softmax(x, 0).unwrap();
        let z: f64 = [1f64, 2., 3.].iter().map(|v| v.exp()).sum();
        for (i, p) in tape.value(y).data().iter().enumerate() {
            assert!((p - ((i + 1) as f64).exp() / z).abs() < 1e-12);
        }
        assert!(tape.softmax(x, 1).is_err());
    }

    #[test]
    fn softmax_along_leading_axis() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[0., 1., 2., 0., 1., 2.]));
        let y = tape.softmax(x, 0).unwrap();
        assert!(tape.value(y).data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn layer_norm_cases() {
        let mut tape = Tape::new();
        let gain = tape.leaf(Tensor::full(&[4], 1.0));
        let bias = tape.leaf(Tensor::zeros(&[4]));
        let x = tape.leaf(Tensor::full(&[1, 4], 3.0));
        let y = tape.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let gain = tape.leaf(Tensor::full(&[2], 1.0));
        let bias = tape.leaf(Tensor::zeros(&[2]));
        let x = tape.leaf(t(&[1, 2], &[1., -1.]));
        let y = tape.layer_norm(x, gain, bias, 1e-12).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 1.0).abs() < 1e-9 && (v[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn backward_simple_rules() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[3], &[1., -2., 0.5]).with_grad());
        let s = tape.sum(w).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1., 1., 1.]);

        let mut tape = Tape::new();
        let w = tape.leaf(t(&[3], &[1., -2., 0.5]).with_grad());
        let unused = tape.leaf(t(&[2], &[4., 4.]).with_grad());
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq).unwrap();
        let half = tape.scale(s, 0.5).unwrap();
        let g = tape.backward(half).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1., -2., 0.5]);
        assert_eq!(g.get(unused).unwrap().data(), &[0., 0.]);
        assert!(matches!(tape.backward(half), Err(Error::TapeConsumed)));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[2], &[1., 2.]).with_grad());
        assert!(matches!(tape.backward(w), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn single_key_attention_is_value_path() {
        let mut tape = Tape::new();
        let q = tape.leaf(t(&[1, 2], &[3., -1.]));
        let k = tape.leaf(t(&[1, 2], &[0.5, 2.]));
        let v = tape.leaf(t(&[1, 2], &[7., 9.]));
        let layout = AttentionLayout {
            batch: 1,
            seq: 1,
            heads: 1,
            mask: vec![true],
        };
        let out = tape.attention(q, k, v, &layout).unwrap();
        assert_eq!(tape.value(out).data(), &[7., 9.]);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[f64::MAX]));
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite("scale"))));
    }
}
