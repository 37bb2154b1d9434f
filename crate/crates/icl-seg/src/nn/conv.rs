//! 2-D convolution via im2col and matrix multiplication.

use ndarray::{Array1, Array2, Array4, Axis, NdFloat};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

use super::Param;

/// Convolution layer over `[B, Cin, H, W]` inputs, `weight[Cout, Cin, KH,
/// KW]`, zero padding, uniform stride.
#[derive(Debug, Clone)]
pub struct Conv2d<A: NdFloat> {
    pub weight: Array4<A>,
    pub bias: Array1<A>,
    pub stride: usize,
    pub padding: usize,
    pub grad_weight: Array4<A>,
    pub grad_bias: Array1<A>,
}

/// Forward-pass state needed by the backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache<A: NdFloat> {
    /// Zero-padded input.
    padded: Array4<A>,
    out_hw: (usize, usize),
}

impl<A: NdFloat> Conv2d<A> {
    /// He-normal weight init scaled by fan-in, zero biases.
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let weight = Array4::from_shape_simple_fn(
            (out_channels, in_channels, kernel, kernel),
            || A::from(normal.sample(rng)).expect("sample fits"),
        );
        Conv2d {
            grad_weight: Array4::zeros(weight.raw_dim()),
            weight,
            bias: Array1::zeros(out_channels),
            stride,
            padding,
            grad_bias: Array1::zeros(out_channels),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    fn out_extent(&self, extent: usize, k: usize) -> Result<usize> {
        let padded = extent + 2 * self.padding;
        if k > padded {
            return Err(Error::shape(format!(
                "kernel {k} exceeds padded extent {padded}"
            )));
        }
        Ok((padded - k) / self.stride + 1)
    }

    pub fn forward(&self, x: &Array4<A>) -> Result<(Array4<A>, ConvCache<A>)> {
        let (b, cin, h, w) = x.dim();
        let (cout, wcin, kh, kw) = self.weight.dim();
        if cin != wcin {
            return Err(Error::shape(format!(
                "conv expects {wcin} input channels, got {cin}"
            )));
        }
        let ho = self.out_extent(h, kh)?;
        let wo = self.out_extent(w, kw)?;
        let p = self.padding;
        let mut padded = Array4::zeros((b, cin, h + 2 * p, w + 2 * p));
        padded
            .slice_mut(ndarray::s![.., .., p..p + h, p..p + w])
            .assign(x);

        let w2 = self
            .weight
            .view()
            .into_shape_with_order((cout, cin * kh * kw))
            .expect("weight is standard layout");
        let mut out = Array4::zeros((b, cout, ho, wo));
        let mut col = Array2::zeros((cin * kh * kw, ho * wo));
        for bi in 0..b {
            self.fill_col(&padded, bi, ho, wo, &mut col);
            let mut y = w2.dot(&col);
            for (o, mut row) in y.outer_iter_mut().enumerate() {
                let bias = self.bias[o];
                row.mapv_inplace(|v| v + bias);
            }
            out.index_axis_mut(Axis(0), bi).assign(
                &y.into_shape_with_order((cout, ho, wo))
                    .expect("standard layout"),
            );
        }
        Ok((
            out,
            ConvCache {
                padded,
                out_hw: (ho, wo),
            },
        ))
    }

    /// Accumulates weight/bias gradients (callers zero them between
    /// batches) and returns the input gradient.
    pub fn backward(&mut self, cache: &ConvCache<A>, grad_out: &Array4<A>) -> Result<Array4<A>> {
        let (b, cin, hp, wp) = cache.padded.dim();
        let (cout, _, kh, kw) = self.weight.dim();
        let (ho, wo) = cache.out_hw;
        if grad_out.dim() != (b, cout, ho, wo) {
            return Err(Error::shape(format!(
                "grad shape {:?} does not match conv output {:?}",
                grad_out.dim(),
                (b, cout, ho, wo)
            )));
        }
        let p = self.padding;
        let s = self.stride;
        let w2 = self
            .weight
            .view()
            .into_shape_with_order((cout, cin * kh * kw))
            .expect("weight is standard layout");
        let mut gw = Array2::<A>::zeros((cout, cin * kh * kw));
        let mut gpad = Array4::<A>::zeros((b, cin, hp, wp));
        let mut col = Array2::zeros((cin * kh * kw, ho * wo));
        for bi in 0..b {
            let g = grad_out
                .index_axis(Axis(0), bi)
                .into_shape_with_order((cout, ho * wo))
                .expect("standard layout");
            self.fill_col(&cache.padded, bi, ho, wo, &mut col);
            gw += &g.dot(&col.t());
            for (o, grow) in g.outer_iter().enumerate() {
                let mut acc = A::zero();
                for &v in grow {
                    acc += v;
                }
                self.grad_bias[o] += acc;
            }
            let gcol = w2.t().dot(&g);
            for ci in 0..cin {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let row = (ci * kh + ky) * kw + kx;
                        for oy in 0..ho {
                            let iy = oy * s + ky;
                            for ox in 0..wo {
                                gpad[[bi, ci, iy, ox * s + kx]] += gcol[[row, oy * wo + ox]];
                            }
                        }
                    }
                }
            }
        }
        self.grad_weight += &gw
            .into_shape_with_order(self.weight.raw_dim())
            .expect("same element count");
        Ok(gpad
            .slice(ndarray::s![.., .., p..hp - p, p..wp - p])
            .to_owned())
    }

    fn fill_col(
        &self,
        padded: &Array4<A>,
        bi: usize,
        ho: usize,
        wo: usize,
        col: &mut Array2<A>,
    ) {
        let (_, cin, _, _) = padded.dim();
        let (_, _, kh, kw) = self.weight.dim();
        let s = self.stride;
        for ci in 0..cin {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (ci * kh + ky) * kw + kx;
                    for oy in 0..ho {
                        let iy = oy * s + ky;
                        for ox in 0..wo {
                            col[[row, oy * wo + ox]] = padded[[bi, ci, iy, ox * s + kx]];
                        }
                    }
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(A::zero());
        self.grad_bias.fill(A::zero());
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(Param<'_, A>)) {
        f(Param {
            name: format!("{prefix}.weight"),
            value: self.weight.view_mut().into_dyn(),
            grad: self.grad_weight.view_mut().into_dyn(),
            decay: true,
        });
        f(Param {
            name: format!("{prefix}.bias"),
            value: self.bias.view_mut().into_dyn(),
            grad: self.grad_bias.view_mut().into_dyn(),
            decay: false,
        });
    }
}
