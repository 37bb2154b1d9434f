//! Minimal neural-network building blocks with explicit forward and
//! backward passes over `ndarray` tensors. Activations are `[B, C, H, W]`.
//! Everything is generic over `f32`/`f64`: training runs in 32-bit, while
//! gradient checks run the identical code in 64-bit.

mod conv;
mod norm;

pub use conv::{Conv2d, ConvCache};
pub use norm::{GroupNorm, GroupNormCache};

use std::collections::BTreeMap;

use ndarray::{Array4, ArrayD, ArrayViewMutD, NdFloat};

/// One named trainable tensor paired with its gradient. `decay` marks
/// parameters subject to decoupled weight decay (convolution weights;
/// biases and normalization affines are exempt).
pub struct Param<'a, A: NdFloat> {
    pub name: String,
    pub value: ArrayViewMutD<'a, A>,
    pub grad: ArrayViewMutD<'a, A>,
    pub decay: bool,
}

pub fn relu_forward<A: NdFloat>(x: &Array4<A>) -> Array4<A> {
    x.mapv(|v| v.max(A::zero()))
}

/// Backward through ReLU given the forward *output* (the mask `y > 0`
/// equals `x > 0` except at exactly zero, where the subgradient is zero).
pub fn relu_backward<A: NdFloat>(y: &Array4<A>, grad_y: &Array4<A>) -> Array4<A> {
    let mut g = grad_y.clone();
    g.zip_mut_with(y, |g, &y| {
        if y <= A::zero() {
            *g = A::zero();
        }
    });
    g
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2x<A: NdFloat>(x: &Array4<A>) -> Array4<A> {
    let (b, c, h, w) = x.dim();
    let mut y = Array4::zeros((b, c, 2 * h, 2 * w));
    for bi in 0..b {
        for ci in 0..c {
            for yi in 0..h {
                for xi in 0..w {
                    let v = x[[bi, ci, yi, xi]];
                    y[[bi, ci, 2 * yi, 2 * xi]] = v;
                    y[[bi, ci, 2 * yi, 2 * xi + 1]] = v;
                    y[[bi, ci, 2 * yi + 1, 2 * xi]] = v;
                    y[[bi, ci, 2 * yi + 1, 2 * xi + 1]] = v;
                }
            }
        }
    }
    y
}

/// Backward of [`upsample2x`]: sum the four replicated cells.
pub fn upsample2x_backward<A: NdFloat>(grad_y: &Array4<A>) -> Array4<A> {
    let (b, c, h2, w2) = grad_y.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut g = Array4::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for yi in 0..h2 {
                for xi in 0..w2 {
                    g[[bi, ci, yi / 2, xi / 2]] += grad_y[[bi, ci, yi, xi]];
                }
            }
        }
    }
    g
}

/// Adam with decoupled weight decay. Moment state is keyed by parameter
/// name, so it survives classifier expansion for all untouched tensors and
/// starts fresh for resized ones.
#[derive(Debug, Clone)]
pub struct AdamW<A: NdFloat> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    steps: u64,
    state: BTreeMap<String, (ArrayD<A>, ArrayD<A>)>,
}

impl<A: NdFloat> AdamW<A> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            steps: 0,
            state: BTreeMap::new(),
        }
    }

    /// Advance the shared step counter; call once per batch, then feed
    /// every parameter through [`AdamW::update`].
    pub fn begin_step(&mut self) {
        self.steps += 1;
    }

    pub fn update(&mut self, mut p: Param<'_, A>) {
        let (m, v) = self
            .state
            .entry(p.name)
            .or_insert_with(|| {
                (
                    ArrayD::zeros(p.value.raw_dim()),
                    ArrayD::zeros(p.value.raw_dim()),
                )
            });
        if m.raw_dim() != p.value.raw_dim() {
            // Resized parameter (classifier expansion): restart its moments.
            *m = ArrayD::zeros(p.value.raw_dim());
            *v = ArrayD::zeros(p.value.raw_dim());
        }
        let b1 = A::from(self.beta1).expect("constant");
        let b2 = A::from(self.beta2).expect("constant");
        let one = A::one();
        let corr1 = A::from(1.0 - self.beta1.powi(self.steps as i32)).expect("constant");
        let corr2 = A::from(1.0 - self.beta2.powi(self.steps as i32)).expect("constant");
        let lr = A::from(self.lr).expect("constant");
        let eps = A::from(self.eps).expect("constant");
        let wd = A::from(self.weight_decay).expect("constant");

        ndarray::Zip::from(&mut *m).and(&p.grad).for_each(|m, &g| {
            *m = b1 * *m + (one - b1) * g;
        });
        ndarray::Zip::from(&mut *v).and(&p.grad).for_each(|v, &g| {
            *v = b2 * *v + (one - b2) * g * g;
        });
        let decay = p.decay;
        ndarray::Zip::from(&mut p.value)
            .and(&*m)
            .and(&*v)
            .for_each(|w, &m, &v| {
                let mhat = m / corr1;
                let vhat = v / corr2;
                let mut step = mhat / (vhat.sqrt() + eps);
                if decay {
                    step += wd * *w;
                }
                *w -= lr * step;
            });
    }

    pub fn step_count(&self) -> u64 {
        self.steps
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn relu_masks_forward_and_backward() {
        let x = array![[[[-1.0f64, 2.0], [0.0, 3.0]]]];
        let y = relu_forward(&x);
        assert_eq!(y, array![[[[0.0, 2.0], [0.0, 3.0]]]]);
        let g = relu_backward(&y, &array![[[[5.0, 5.0], [5.0, 5.0]]]]);
        assert_eq!(g, array![[[[0.0, 5.0], [0.0, 5.0]]]]);
    }

    #[test]
    fn upsample_replicates_and_backward_sums() {
        let x = array![[[[1.0f64, 2.0], [3.0, 4.0]]]];
        let y = upsample2x(&x);
        assert_eq!(y.dim(), (1, 1, 4, 4));
        assert_eq!(y[[0, 0, 0, 1]], 1.0);
        assert_eq!(y[[0, 0, 3, 3]], 4.0);
        let g = upsample2x_backward(&Array4::from_elem((1, 1, 4, 4), 1.0f64));
        assert_eq!(g, array![[[[4.0, 4.0], [4.0, 4.0]]]]);
    }

    #[test]
    fn adamw_minimizes_quadratic() {
        // One parameter tensor, objective 0.5 * ||w||^2, gradient w.
        let mut w = ndarray::ArrayD::from_elem(ndarray::IxDyn(&[3]), 1.0f64);
        let mut g = ndarray::ArrayD::zeros(ndarray::IxDyn(&[3]));
        let mut opt = AdamW::new(0.05, 0.0);
        for _ in 0..400 {
            g.assign(&w);
            opt.begin_step();
            opt.update(Param {
                name: "w".into(),
                value: w.view_mut(),
                grad: g.view_mut(),
                decay: false,
            });
        }
        assert!(w.iter().all(|v| v.abs() < 1e-3), "{w:?}");
    }

    #[test]
    fn adamw_decay_only_on_marked_params() {
        let mut w = ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1]), 2.0f64);
        let mut g = ndarray::ArrayD::zeros(ndarray::IxDyn(&[1]));
        let mut opt = AdamW::new(0.1, 0.5);
        opt.begin_step();
        opt.update(Param {
            name: "no_decay".into(),
            value: w.view_mut(),
            grad: g.view_mut(),
            decay: false,
        });
        assert_abs_diff_eq!(w[0], 2.0, epsilon = 1e-12);
        opt.update(Param {
            name: "decay".into(),
            value: w.view_mut(),
            grad: g.view_mut(),
            decay: true,
        });
        assert_abs_diff_eq!(w[0], 2.0 - 0.1 * 0.5 * 2.0, epsilon = 1e-12);
    }

    #[test]
    fn adamw_state_resets_on_resize() {
        let mut opt = AdamW::new(0.1, 0.0);
        let mut w = ndarray::ArrayD::from_elem(ndarray::IxDyn(&[2]), 1.0f64);
        let mut g = ndarray::ArrayD::from_elem(ndarray::IxDyn(&[2]), 1.0f64);
        opt.begin_step();
        opt.update(Param {
            name: "w".into(),
            value: w.view_mut(),
            grad: g.view_mut(),
            decay: false,
        });
        let mut w2 = ndarray::ArrayD::from_elem(ndarray::IxDyn(&[3]), 1.0f64);
        let mut g2 = ndarray::ArrayD::from_elem(ndarray::IxDyn(&[3]), 1.0f64);
        opt.begin_step();
        opt.update(Param {
            name: "w".into(),
            value: w2.view_mut(),
            grad: g2.view_mut(),
            decay: false,
        });
        assert!(w2.iter().all(|v| v.is_finite()));
    }
}
