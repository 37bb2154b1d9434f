//! Independent oracles for the acceptance gate. Everything here computes
//! probabilities by explicit exponentiation and summation, sharing no code
//! with the library's log-sum-exp kernels, so agreement is evidence rather
//! than tautology.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// Softmax of one pixel's logit column, by plain exp-and-normalize.
fn pixel_probs(logits: &Array3<f64>, y: usize, x: usize) -> Vec<f64> {
    let c = logits.dim().0;
    let exps: Vec<f64> = (0..c).map(|k| logits[[k, y, x]].exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

/// Cross-entropy with the background mass pooled over `{0} ∪ old_classes`:
/// per-pixel negative log of the target probability, averaged over
/// non-ignored pixels. `old_classes` empty gives standard cross-entropy.
pub fn oracle_cross_entropy(
    logits: &Array3<f64>,
    target: &Array2<u8>,
    old_classes: &[usize],
    ignore_index: Option<u8>,
) -> f64 {
    let (_, h, w) = logits.dim();
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            let t = target[[y, x]];
            if Some(t) == ignore_index {
                continue;
            }
            let p = pixel_probs(logits, y, x);
            let mass = if t == 0 {
                p[0] + old_classes.iter().map(|&k| p[k]).sum::<f64>()
            } else {
                p[t as usize]
            };
            sum -= mass.ln();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Distillation oracle: teacher softmax over its own channels, student
/// softmax with the mass of channels the teacher lacks pooled into the
/// background, cross-entropy averaged over all pixels.
pub fn oracle_distillation(student: &Array3<f64>, teacher: &Array3<f64>) -> f64 {
    let (cs, h, w) = student.dim();
    let ct = teacher.dim().0;
    let mut sum = 0.0;
    for y in 0..h {
        for x in 0..w {
            let p = pixel_probs(student, y, x);
            let q = pixel_probs(teacher, y, x);
            let pooled_bg: f64 = p[0] + (ct..cs).map(|k| p[k]).sum::<f64>();
            let mut pixel = q[0] * pooled_bg.ln();
            for k in 1..ct {
                pixel += q[k] * p[k].ln();
            }
            sum -= pixel;
        }
    }
    sum / (h * w) as f64
}

/// Central-difference gradient of `f` with respect to `x`, one coordinate
/// at a time.
pub fn finite_difference<F>(x: &Array3<f64>, eps: f64, mut f: F) -> Array3<f64>
where
    F: FnMut(&Array3<f64>) -> f64,
{
    let mut grad = Array3::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in ndarray::indices(x.raw_dim()) {
        let orig = probe[idx];
        probe[idx] = orig + eps;
        let hi = f(&probe);
        probe[idx] = orig - eps;
        let lo = f(&probe);
        probe[idx] = orig;
        grad[idx] = (hi - lo) / (2.0 * eps);
    }
    grad
}

/// Symmetric relative error, floored so agreement near zero still counts.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Logits drawn uniformly from [-3, 3).
pub fn random_logits(rng: &mut ChaCha12Rng, c: usize, h: usize, w: usize) -> Array3<f64> {
    Array3::from_shape_fn((c, h, w), |_| rng.random_range(-3.0..3.0))
}

/// Labels drawn uniformly from the `c` class ids.
pub fn random_targets(rng: &mut ChaCha12Rng, c: usize, h: usize, w: usize) -> Array2<u8> {
    Array2::from_shape_fn((h, w), |_| rng.random_range(0..c as u8))
}
