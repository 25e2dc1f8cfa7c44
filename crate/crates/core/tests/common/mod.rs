#![allow(dead_code)]

use consent::morphology::BinaryMask;
use consent::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Relative error with a floor on the denominator so that entries whose true
/// gradient is ~0 are judged by absolute error instead.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Compares tape gradients with central differences at up to `points` random
/// entries of every input flagged `requires_grad`. Returns the worst relative error.
pub fn grad_check(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var, points: usize, seed: u64) -> f64 {
    let eval = |ts: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for (ti, t) in inputs.iter().enumerate() {
        if !t.requires_grad() {
            continue;
        }
        let analytic = grads.get(vars[ti]).unwrap().data().to_vec();
        let picks: Vec<usize> = if t.numel() <= points {
            (0..t.numel()).collect()
        } else {
            (0..points).map(|_| rng.random_range(0..t.numel())).collect()
        };
        for idx in picks {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[idx] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[idx] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[idx], numeric));
        }
    }
    worst
}

/// O(pixels^2) oracle: nearest background pixel, with a one-pixel background
/// frame standing in for "everything beyond the border".
pub fn brute_force_sq_edt(mask: &BinaryMask) -> Vec<u64> {
    let (w, h) = (mask.width as i64, mask.height as i64);
    let mut background = Vec::new();
    for y in -1..=h {
        for x in -1..=w {
            let inside = x >= 0 && y >= 0 && x < w && y < h;
            if !inside || !mask.bits[(y * w + x) as usize] {
                background.push((x, y));
            }
        }
    }
    let mut out = vec![0u64; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            if mask.bits[(y * w + x) as usize] {
                out[(y * w + x) as usize] = background
                    .iter()
                    .map(|&(bx, by)| ((bx - x).pow(2) + (by - y).pow(2)) as u64)
                    .min()
                    .unwrap();
            }
        }
    }
    out
}

pub fn random_mask(rng: &mut ChaCha8Rng, w: u32, h: u32, density: f64) -> BinaryMask {
    let bits = (0..w * h).map(|_| rng.random_bool(density)).collect();
    BinaryMask::from_bits(w, h, bits).unwrap()
}
