//! Group normalization: per-sample statistics over channel groups, so
//! training and inference compute the same function and results do not
//! depend on batch composition.

use ndarray::{s, Array1, Array2, Array4, NdFloat};

use crate::error::{Error, Result};

use super::Param;

#[derive(Debug, Clone)]
pub struct GroupNorm<A: NdFloat> {
    pub groups: usize,
    pub eps: f64,
    pub gamma: Array1<A>,
    pub beta: Array1<A>,
    pub grad_gamma: Array1<A>,
    pub grad_beta: Array1<A>,
}

#[derive(Debug, Clone)]
pub struct GroupNormCache<A: NdFloat> {
    xhat: Array4<A>,
    /// `[B, groups]`.
    inv_std: Array2<A>,
}

impl<A: NdFloat> GroupNorm<A> {
    pub fn new(channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::invalid(format!(
                "groups {groups} must divide channels {channels}"
            )));
        }
        Ok(GroupNorm {
            groups,
            eps: 1e-5,
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            grad_gamma: Array1::zeros(channels),
            grad_beta: Array1::zeros(channels),
        })
    }

    pub fn forward(&self, x: &Array4<A>) -> Result<(Array4<A>, GroupNormCache<A>)> {
        let (b, c, h, w) = x.dim();
        if c != self.gamma.len() {
            return Err(Error::shape(format!(
                "group norm expects {} channels, got {c}",
                self.gamma.len()
            )));
        }
        let cs = c / self.groups;
        let m = A::from(cs * h * w).expect("group size fits the float type");
        let eps = A::from(self.eps).expect("constant");
        let mut xhat = Array4::zeros((b, c, h, w));
        let mut inv_std = Array2::zeros((b, self.groups));
        for bi in 0..b {
            for g in 0..self.groups {
                let span = s![bi, g * cs..(g + 1) * cs, .., ..];
                let chunk = x.slice(span);
                let mut mean = A::zero();
                for &v in chunk.iter() {
                    mean += v;
                }
                mean /= m;
                let mut var = A::zero();
                for &v in chunk.iter() {
                    let d = v - mean;
                    var += d * d;
                }
                var /= m;
                let istd = A::one() / (var + eps).sqrt();
                inv_std[[bi, g]] = istd;
                let mut target = xhat.slice_mut(span);
                target.assign(&chunk);
                target.mapv_inplace(|v| (v - mean) * istd);
            }
        }
        let mut y = xhat.clone();
        for (ci, mut plane) in y.axis_iter_mut(ndarray::Axis(1)).enumerate() {
            let (gamma, beta) = (self.gamma[ci], self.beta[ci]);
            plane.mapv_inplace(|v| gamma * v + beta);
        }
        Ok((y, GroupNormCache { xhat, inv_std }))
    }

    pub fn backward(&mut self, cache: &GroupNormCache<A>, grad_y: &Array4<A>) -> Result<Array4<A>> {
        let (b, c, h, w) = cache.xhat.dim();
        if grad_y.dim() != (b, c, h, w) {
            return Err(Error::shape(format!(
                "grad shape {:?} does not match activations {:?}",
                grad_y.dim(),
                (b, c, h, w)
            )));
        }
        let cs = c / self.groups;
        let m = A::from(cs * h * w).expect("group size fits the float type");
        for ci in 0..c {
            let gy = grad_y.slice(s![.., ci, .., ..]);
            let xh = cache.xhat.slice(s![.., ci, .., ..]);
            let mut gb = A::zero();
            let mut gg = A::zero();
            ndarray::Zip::from(&gy).and(&xh).for_each(|&g, &x| {
                gb += g;
                gg += g * x;
            });
            self.grad_beta[ci] += gb;
            self.grad_gamma[ci] += gg;
        }
        let mut gx = Array4::zeros((b, c, h, w));
        for bi in 0..b {
            for g in 0..self.groups {
                let span = s![bi, g * cs..(g + 1) * cs, .., ..];
                let xh = cache.xhat.slice(span);
                let gy = grad_y.slice(span);
                // ghat = gy * gamma per channel; reduce within the group.
                let mut sum_g = A::zero();
                let mut sum_gx = A::zero();
                for ci in 0..cs {
                    let gamma = self.gamma[g * cs + ci];
                    let gyc = gy.index_axis(ndarray::Axis(0), ci);
                    let xhc = xh.index_axis(ndarray::Axis(0), ci);
                    ndarray::Zip::from(&gyc).and(&xhc).for_each(|&gv, &xv| {
                        sum_g += gv * gamma;
                        sum_gx += gv * gamma * xv;
                    });
                }
                let mean_g = sum_g / m;
                let mean_gx = sum_gx / m;
                let istd = cache.inv_std[[bi, g]];
                let mut out = gx.slice_mut(span);
                for ci in 0..cs {
                    let gamma = self.gamma[g * cs + ci];
                    let gyc = gy.index_axis(ndarray::Axis(0), ci);
                    let xhc = xh.index_axis(ndarray::Axis(0), ci);
                    let mut oc = out.index_axis_mut(ndarray::Axis(0), ci);
                    ndarray::Zip::from(&mut oc)
                        .and(&gyc)
                        .and(&xhc)
                        .for_each(|o, &gv, &xv| {
                            *o = istd * (gv * gamma - mean_g - xv * mean_gx);
                        });
                }
            }
        }
        Ok(gx)
    }

    pub fn zero_grad(&mut self) {
        self.grad_gamma.fill(A::zero());
        self.grad_beta.fill(A::zero());
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(Param<'_, A>)) {
        f(Param {
            name: format!("{prefix}.gamma"),
            value: self.gamma.view_mut().into_dyn(),
            grad: self.grad_gamma.view_mut().into_dyn(),
            decay: false,
        });
        f(Param {
            name: format!("{prefix}.beta"),
            value: self.beta.view_mut().into_dyn(),
            grad: self.grad_beta.view_mut().into_dyn(),
            decay: false,
        });
    }
}
