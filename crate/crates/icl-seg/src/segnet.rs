//! Residual encoder-decoder segmentation network. The trunk φ maps
//! `[B, C, H, W]` to full-resolution features `[B, F, H, W]`; a 1x1
//! classifier maps features to per-class logits. The classifier is the
//! only part aware of how many classes exist, and it grows in place at
//! each learning step with new rows initialized from the background row.

use std::collections::BTreeMap;

use ndarray::{Array4, ArrayViewD, NdFloat};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    relu_backward, relu_forward, upsample2x, upsample2x_backward, Conv2d, ConvCache, GroupNorm,
    GroupNormCache, Param,
};

/// Architecture knobs. `widths[i]` is the channel count of encoder stage
/// `i`; each stage past the first halves the spatial resolution, and the
/// decoder mirrors the stages back up with skip connections.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub feature_dim: usize,
    pub norm_groups: usize,
    pub seed: u64,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        SegNetConfig {
            in_channels: 3,
            num_classes: 2,
            widths: vec![16, 32, 64],
            blocks_per_stage: 1,
            feature_dim: 16,
            norm_groups: 4,
            seed: 0,
        }
    }
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::invalid("in_channels must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be at least 2"));
        }
        if self.widths.is_empty() {
            return Err(Error::invalid("widths must list at least one stage"));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::invalid("blocks_per_stage must be positive"));
        }
        if self.feature_dim == 0 {
            return Err(Error::invalid("feature_dim must be positive"));
        }
        for &w in &self.widths {
            if w == 0 || w % self.norm_groups != 0 {
                return Err(Error::invalid(format!(
                    "stage width {w} must be positive and divisible by norm_groups {}",
                    self.norm_groups
                )));
            }
        }
        if self.feature_dim % self.norm_groups != 0 {
            return Err(Error::invalid(format!(
                "feature_dim {} must be divisible by norm_groups {}",
                self.feature_dim, self.norm_groups
            )));
        }
        Ok(())
    }

    /// Spatial extents must be divisible by this for the decoder to
    /// restore full resolution exactly.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.widths.len() - 1)
    }
}

/// Convolution + group norm + ReLU.
#[derive(Debug, Clone)]
struct ConvBlock<A: NdFloat> {
    conv: Conv2d<A>,
    norm: GroupNorm<A>,
}

#[derive(Debug, Clone)]
struct ConvBlockCache<A: NdFloat> {
    conv: ConvCache<A>,
    norm: GroupNormCache<A>,
    out: Array4<A>,
}

impl<A: NdFloat> ConvBlock<A> {
    fn new(
        cin: usize,
        cout: usize,
        stride: usize,
        groups: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        Ok(ConvBlock {
            conv: Conv2d::new(cin, cout, 3, stride, 1, rng),
            norm: GroupNorm::new(cout, groups)?,
        })
    }

    fn forward(&self, x: &Array4<A>) -> Result<(Array4<A>, ConvBlockCache<A>)> {
        let (y, conv) = self.conv.forward(x)?;
        let (y, norm) = self.norm.forward(&y)?;
        let out = relu_forward(&y);
        Ok((
            out.clone(),
            ConvBlockCache { conv, norm, out },
        ))
    }

    fn backward(&mut self, cache: &ConvBlockCache<A>, grad: &Array4<A>) -> Result<Array4<A>> {
        let g = relu_backward(&cache.out, grad);
        let g = self.norm.backward(&cache.norm, &g)?;
        self.conv.backward(&cache.conv, &g)
    }

    fn zero_grad(&mut self) {
        self.conv.zero_grad();
        self.norm.zero_grad();
    }

    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(Param<'_, A>)) {
        self.conv.visit_params(&format!("{prefix}.conv"), f);
        self.norm.visit_params(&format!("{prefix}.norm"), f);
    }
}

/// Two 3x3 convolutions with an identity skip: channels are preserved.
#[derive(Debug, Clone)]
struct ResBlock<A: NdFloat> {
    conv1: Conv2d<A>,
    norm1: GroupNorm<A>,
    conv2: Conv2d<A>,
    norm2: GroupNorm<A>,
}

#[derive(Debug, Clone)]
struct ResBlockCache<A: NdFloat> {
    conv1: ConvCache<A>,
    norm1: GroupNormCache<A>,
    mid: Array4<A>,
    conv2: ConvCache<A>,
    norm2: GroupNormCache<A>,
    out: Array4<A>,
}

impl<A: NdFloat> ResBlock<A> {
    fn new(channels: usize, groups: usize, rng: &mut ChaCha12Rng) -> Result<Self> {
        Ok(ResBlock {
            conv1: Conv2d::new(channels, channels, 3, 1, 1, rng),
            norm1: GroupNorm::new(channels, groups)?,
            conv2: Conv2d::new(channels, channels, 3, 1, 1, rng),
            norm2: GroupNorm::new(channels, groups)?,
        })
    }

    fn forward(&self, x: &Array4<A>) -> Result<(Array4<A>, ResBlockCache<A>)> {
        let (y, conv1) = self.conv1.forward(x)?;
        let (y, norm1) = self.norm1.forward(&y)?;
        let mid = relu_forward(&y);
        let (y, conv2) = self.conv2.forward(&mid)?;
        let (mut y, norm2) = self.norm2.forward(&y)?;
        y += x;
        let out = relu_forward(&y);
        Ok((
            out.clone(),
            ResBlockCache {
                conv1,
                norm1,
                mid,
                conv2,
                norm2,
                out,
            },
        ))
    }

    fn backward(&mut self, cache: &ResBlockCache<A>, grad: &Array4<A>) -> Result<Array4<A>> {
        let g_sum = relu_backward(&cache.out, grad);
        let g = self.norm2.backward(&cache.norm2, &g_sum)?;
        let g = self.conv2.backward(&cache.conv2, &g)?;
        let g = relu_backward(&cache.mid, &g);
        let g = self.norm1.backward(&cache.norm1, &g)?;
        let mut g = self.conv1.backward(&cache.conv1, &g)?;
        g += &g_sum;
        Ok(g)
    }

    fn zero_grad(&mut self) {
        self.conv1.zero_grad();
        self.norm1.zero_grad();
        self.conv2.zero_grad();
        self.norm2.zero_grad();
    }

    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(Param<'_, A>)) {
        self.conv1.visit_params(&format!("{prefix}.conv1"), f);
        self.norm1.visit_params(&format!("{prefix}.norm1"), f);
        self.conv2.visit_params(&format!("{prefix}.conv2"), f);
        self.norm2.visit_params(&format!("{prefix}.norm2"), f);
    }
}

/// The full network: φ (stem, encoder, decoder, head) plus the 1x1
/// classifier.
#[derive(Debug, Clone)]
pub struct SegNet<A: NdFloat = f32> {
    config: SegNetConfig,
    stem: ConvBlock<A>,
    stages: Vec<Vec<ResBlock<A>>>,
    downs: Vec<ConvBlock<A>>,
    ups: Vec<ConvBlock<A>>,
    dec_blocks: Vec<ResBlock<A>>,
    head: ConvBlock<A>,
    classifier: Conv2d<A>,
}

/// Trunk state for the backward pass, up to the feature map.
pub struct FeatureCache<A: NdFloat> {
    stem: ConvBlockCache<A>,
    stages: Vec<Vec<ResBlockCache<A>>>,
    downs: Vec<ConvBlockCache<A>>,
    ups: Vec<ConvBlockCache<A>>,
    dec_blocks: Vec<ResBlockCache<A>>,
    head: ConvBlockCache<A>,
}

/// Full forward result: features, logits, and the state to backpropagate.
pub struct Forward<A: NdFloat> {
    pub features: Array4<A>,
    pub logits: Array4<A>,
    trunk: FeatureCache<A>,
    classifier: ConvCache<A>,
}

impl<A: NdFloat> SegNet<A> {
    pub fn new(config: SegNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
        let g = config.norm_groups;
        let widths = &config.widths;
        let stem = ConvBlock::new(config.in_channels, widths[0], 1, g, &mut rng)?;
        let mut stages = Vec::new();
        for &w in widths {
            let mut blocks = Vec::new();
            for _ in 0..config.blocks_per_stage {
                blocks.push(ResBlock::new(w, g, &mut rng)?);
            }
            stages.push(blocks);
        }
        let mut downs = Vec::new();
        for i in 0..widths.len() - 1 {
            downs.push(ConvBlock::new(widths[i], widths[i + 1], 2, g, &mut rng)?);
        }
        let mut ups = Vec::new();
        let mut dec_blocks = Vec::new();
        for i in 0..widths.len() - 1 {
            ups.push(ConvBlock::new(widths[i + 1], widths[i], 1, g, &mut rng)?);
            dec_blocks.push(ResBlock::new(widths[i], g, &mut rng)?);
        }
        let head = ConvBlock::new(widths[0], config.feature_dim, 1, g, &mut rng)?;
        let classifier = Conv2d::new(config.feature_dim, config.num_classes, 1, 1, 0, &mut rng);
        Ok(SegNet {
            config,
            stem,
            stages,
            downs,
            ups,
            dec_blocks,
            head,
            classifier,
        })
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn check_input(&self, x: &Array4<A>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.config.in_channels {
            return Err(Error::shape(format!(
                "network expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let d = self.config.spatial_divisor();
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::shape(format!(
                "spatial dims {h}x{w} must be positive multiples of {d}"
            )));
        }
        Ok(())
    }

    /// φ: full-resolution feature map `[B, F, H, W]`.
    pub fn forward_features(&self, x: &Array4<A>) -> Result<(Array4<A>, FeatureCache<A>)> {
        self.check_input(x)?;
        let s = self.config.widths.len();
        let (mut e, stem) = self.stem.forward(x)?;
        let mut stage_caches = Vec::with_capacity(s);
        let mut down_caches = Vec::with_capacity(s.saturating_sub(1));
        let mut skips = Vec::with_capacity(s.saturating_sub(1));
        for (i, stage) in self.stages.iter().enumerate() {
            let mut block_caches = Vec::with_capacity(stage.len());
            for block in stage {
                let (y, c) = block.forward(&e)?;
                e = y;
                block_caches.push(c);
            }
            stage_caches.push(block_caches);
            if i < s - 1 {
                skips.push(e.clone());
                let (y, c) = self.downs[i].forward(&e)?;
                e = y;
                down_caches.push(c);
            }
        }
        let mut up_caches: Vec<Option<ConvBlockCache<A>>> = (0..s - 1).map(|_| None).collect();
        let mut dec_caches: Vec<Option<ResBlockCache<A>>> = (0..s - 1).map(|_| None).collect();
        for i in (0..s - 1).rev() {
            let u = upsample2x(&e);
            let (v, uc) = self.ups[i].forward(&u)?;
            let mut sum = v;
            sum += &skips[i];
            let (y, dc) = self.dec_blocks[i].forward(&sum)?;
            e = y;
            up_caches[i] = Some(uc);
            dec_caches[i] = Some(dc);
        }
        let (features, head) = self.head.forward(&e)?;
        Ok((
            features,
            FeatureCache {
                stem,
                stages: stage_caches,
                downs: down_caches,
                ups: up_caches.into_iter().map(|c| c.expect("filled")).collect(),
                dec_blocks: dec_caches.into_iter().map(|c| c.expect("filled")).collect(),
                head,
            },
        ))
    }

    /// Features and logits in one pass.
    pub fn forward_logits(&self, x: &Array4<A>) -> Result<Forward<A>> {
        let (features, trunk) = self.forward_features(x)?;
        let (logits, classifier) = self.classifier.forward(&features)?;
        Ok(Forward {
            features,
            logits,
            trunk,
            classifier,
        })
    }

    /// Backpropagate from logit and/or feature gradients, accumulating
    /// parameter gradients and returning the input gradient.
    pub fn backward(
        &mut self,
        fwd: &Forward<A>,
        grad_logits: Option<&Array4<A>>,
        grad_features: Option<&Array4<A>>,
    ) -> Result<Array4<A>> {
        let mut g_feat = match grad_logits {
            Some(gl) => self.classifier.backward(&fwd.classifier, gl)?,
            None => Array4::zeros(fwd.features.raw_dim()),
        };
        if let Some(gf) = grad_features {
            if gf.dim() != g_feat.dim() {
                return Err(Error::shape(format!(
                    "feature grad {:?} does not match features {:?}",
                    gf.dim(),
                    g_feat.dim()
                )));
            }
            g_feat += gf;
        }
        self.backward_trunk(&fwd.trunk, &g_feat)
    }

    /// Backward through φ only (used when no logits were produced).
    pub fn backward_trunk(
        &mut self,
        cache: &FeatureCache<A>,
        grad_features: &Array4<A>,
    ) -> Result<Array4<A>> {
        let s = self.config.widths.len();
        let mut g = self.head.backward(&cache.head, grad_features)?;
        let mut skip_grads: Vec<Option<Array4<A>>> = (0..s - 1).map(|_| None).collect();
        for i in 0..s - 1 {
            let g_sum = self.dec_blocks[i].backward(&cache.dec_blocks[i], &g)?;
            skip_grads[i] = Some(g_sum.clone());
            let g_up = self.ups[i].backward(&cache.ups[i], &g_sum)?;
            g = upsample2x_backward(&g_up);
        }
        for i in (0..s).rev() {
            if i < s - 1 {
                let g_down = self.downs[i].backward(&cache.downs[i], &g)?;
                g = g_down + skip_grads[i].take().expect("collected above");
            }
            for (block, bc) in self.stages[i].iter_mut().zip(&cache.stages[i]).rev() {
                g = block.backward(bc, &g)?;
            }
        }
        self.stem.backward(&cache.stem, &g)
    }

    /// Grow the classifier for `n_new` classes. New rows copy the
    /// background weights; the background bias and every new bias become
    /// `beta_b - ln(n_new + 1)`, which splits the old background softmax
    /// mass evenly among background and the new classes while leaving old
    /// class probabilities untouched.
    pub fn expand_classifier(&mut self, n_new: usize) -> Result<()> {
        if n_new == 0 {
            return Err(Error::invalid("expansion needs at least one new class"));
        }
        let (c, f, _, _) = self.classifier.weight.dim();
        let mut weight = Array4::zeros((c + n_new, f, 1, 1));
        weight
            .slice_mut(ndarray::s![..c, .., .., ..])
            .assign(&self.classifier.weight);
        let bg_row = self.classifier.weight.index_axis(ndarray::Axis(0), 0).to_owned();
        for k in 0..n_new {
            weight
                .index_axis_mut(ndarray::Axis(0), c + k)
                .assign(&bg_row);
        }
        let mut bias = ndarray::Array1::zeros(c + n_new);
        bias.slice_mut(ndarray::s![..c]).assign(&self.classifier.bias);
        let shifted = self.classifier.bias[0]
            - A::from((n_new + 1) as f64).expect("count fits").ln();
        bias[0] = shifted;
        for k in 0..n_new {
            bias[c + k] = shifted;
        }
        self.classifier.grad_weight = Array4::zeros(weight.raw_dim());
        self.classifier.grad_bias = ndarray::Array1::zeros(bias.raw_dim());
        self.classifier.weight = weight;
        self.classifier.bias = bias;
        self.config.num_classes = c + n_new;
        Ok(())
    }

    /// Widen the input layer; kernels for added channels copy the source
    /// channel's kernels, so zero-filled extra channels leave the
    /// pre-activations unchanged.
    pub fn expand_input_channels(&mut self, new_count: usize, source: usize) -> Result<()> {
        let (w0, cin, kh, kw) = self.stem.conv.weight.dim();
        if new_count <= cin {
            return Err(Error::invalid(format!(
                "new channel count {new_count} must exceed current {cin}"
            )));
        }
        if source >= cin {
            return Err(Error::invalid(format!(
                "source channel {source} out of range for {cin} channels"
            )));
        }
        let mut weight = Array4::zeros((w0, new_count, kh, kw));
        weight
            .slice_mut(ndarray::s![.., ..cin, .., ..])
            .assign(&self.stem.conv.weight);
        let src = self
            .stem
            .conv
            .weight
            .slice(ndarray::s![.., source, .., ..])
            .to_owned();
        for ch in cin..new_count {
            weight
                .slice_mut(ndarray::s![.., ch, .., ..])
                .assign(&src);
        }
        self.stem.conv.grad_weight = Array4::zeros(weight.raw_dim());
        self.stem.conv.weight = weight;
        self.config.in_channels = new_count;
        Ok(())
    }

    /// Deep copy for use as the frozen teacher. Gradients are cleared;
    /// normalization is per-sample, so inference behavior is identical to
    /// the source network's. The teacher never enters an optimizer or a
    /// backward pass.
    pub fn clone_frozen(&self) -> SegNet<A> {
        let mut teacher = self.clone();
        teacher.zero_grad();
        teacher
    }

    pub fn zero_grad(&mut self) {
        self.stem.zero_grad();
        for stage in &mut self.stages {
            for b in stage {
                b.zero_grad();
            }
        }
        for d in &mut self.downs {
            d.zero_grad();
        }
        for u in &mut self.ups {
            u.zero_grad();
        }
        for b in &mut self.dec_blocks {
            b.zero_grad();
        }
        self.head.zero_grad();
        self.classifier.zero_grad();
    }

    /// Visit every trainable parameter in a stable order.
    pub fn visit_params(&mut self, f: &mut dyn FnMut(Param<'_, A>)) {
        self.stem.visit_params("stem", f);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            for (j, block) in stage.iter_mut().enumerate() {
                block.visit_params(&format!("enc{i}.block{j}"), f);
            }
        }
        for (i, d) in self.downs.iter_mut().enumerate() {
            d.visit_params(&format!("down{i}"), f);
        }
        for (i, u) in self.ups.iter_mut().enumerate() {
            u.visit_params(&format!("up{i}"), f);
        }
        for (i, b) in self.dec_blocks.iter_mut().enumerate() {
            b.visit_params(&format!("dec{i}"), f);
        }
        self.head.visit_params("head", f);
        self.classifier.visit_params("classifier", f);
    }

    /// Read-only snapshot of all parameter tensors, in visit order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, A>)> {
        let mut out: Vec<(String, ArrayViewD<'_, A>)> = Vec::new();
        fn push_conv<'a, A: NdFloat>(
            out: &mut Vec<(String, ArrayViewD<'a, A>)>,
            prefix: &str,
            c: &'a Conv2d<A>,
        ) {
            out.push((format!("{prefix}.weight"), c.weight.view().into_dyn()));
            out.push((format!("{prefix}.bias"), c.bias.view().into_dyn()));
        }
        fn push_norm<'a, A: NdFloat>(
            out: &mut Vec<(String, ArrayViewD<'a, A>)>,
            prefix: &str,
            n: &'a GroupNorm<A>,
        ) {
            out.push((format!("{prefix}.gamma"), n.gamma.view().into_dyn()));
            out.push((format!("{prefix}.beta"), n.beta.view().into_dyn()));
        }
        fn push_cb<'a, A: NdFloat>(
            out: &mut Vec<(String, ArrayViewD<'a, A>)>,
            prefix: &str,
            b: &'a ConvBlock<A>,
        ) {
            push_conv(out, &format!("{prefix}.conv"), &b.conv);
            push_norm(out, &format!("{prefix}.norm"), &b.norm);
        }
        fn push_rb<'a, A: NdFloat>(
            out: &mut Vec<(String, ArrayViewD<'a, A>)>,
            prefix: &str,
            b: &'a ResBlock<A>,
        ) {
            push_conv(out, &format!("{prefix}.conv1"), &b.conv1);
            push_norm(out, &format!("{prefix}.norm1"), &b.norm1);
            push_conv(out, &format!("{prefix}.conv2"), &b.conv2);
            push_norm(out, &format!("{prefix}.norm2"), &b.norm2);
        }
        push_cb(&mut out, "stem", &self.stem);
        for (i, stage) in self.stages.iter().enumerate() {
            for (j, block) in stage.iter().enumerate() {
                push_rb(&mut out, &format!("enc{i}.block{j}"), block);
            }
        }
        for (i, d) in self.downs.iter().enumerate() {
            push_cb(&mut out, &format!("down{i}"), d);
        }
        for (i, u) in self.ups.iter().enumerate() {
            push_cb(&mut out, &format!("up{i}"), u);
        }
        for (i, b) in self.dec_blocks.iter().enumerate() {
            push_rb(&mut out, &format!("dec{i}"), b);
        }
        push_cb(&mut out, "head", &self.head);
        push_conv(&mut out, "classifier", &self.classifier);
        out
    }

    /// Load parameter values by name; every network tensor must be
    /// present with the exact shape.
    pub fn load_tensors(&mut self, source: &BTreeMap<String, ndarray::ArrayD<A>>) -> Result<()> {
        let mut missing = Vec::new();
        let mut result = Ok(());
        self.visit_params(&mut |mut p| {
            match source.get(&p.name) {
                None => missing.push(p.name.clone()),
                Some(t) => {
                    if t.shape() != p.value.shape() {
                        if result.is_ok() {
                            result = Err(Error::checkpoint(format!(
                                "tensor {} has shape {:?}, expected {:?}",
                                p.name,
                                t.shape(),
                                p.value.shape()
                            )));
                        }
                    } else {
                        p.value.assign(t);
                    }
                }
            }
        });
        result?;
        if !missing.is_empty() {
            return Err(Error::checkpoint(format!(
                "checkpoint is missing tensors: {}",
                missing.join(", ")
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{Array4, Axis};
    use rand::Rng;

    fn tiny_config() -> SegNetConfig {
        SegNetConfig {
            in_channels: 2,
            num_classes: 3,
            widths: vec![4, 8],
            blocks_per_stage: 1,
            feature_dim: 4,
            norm_groups: 2,
            seed: 7,
        }
    }

    fn random_input(rng: &mut impl Rng, dim: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_simple_fn(dim, || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn feature_map_keeps_spatial_dims() {
        let net = SegNet::<f64>::new(tiny_config()).unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(1);
        for hw in [4usize, 8, 12] {
            let x = random_input(&mut rng, (1, 2, hw, hw));
            let (f, _) = net.forward_features(&x).unwrap();
            assert_eq!(f.dim(), (1, 4, hw, hw));
            assert!(f.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let net = SegNet::<f64>::new(tiny_config()).unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(2);
        let x = random_input(&mut rng, (2, 2, 8, 8));
        let a = net.forward_logits(&x).unwrap();
        let b = net.forward_logits(&x).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.features, b.features);
    }

    #[test]
    fn logits_have_class_channels_and_softmax_sums() {
        let net = SegNet::<f64>::new(tiny_config()).unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(3);
        let x = random_input(&mut rng, (1, 2, 8, 8));
        let fwd = net.forward_logits(&x).unwrap();
        assert_eq!(fwd.logits.dim(), (1, 3, 8, 8));
        for y in 0..8 {
            for xx in 0..8 {
                let mut total = 0.0;
                let m = (0..3)
                    .map(|c| fwd.logits[[0, c, y, xx]])
                    .fold(f64::NEG_INFINITY, f64::max);
                for c in 0..3 {
                    total += (fwd.logits[[0, c, y, xx]] - m).exp();
                }
                let lse = m + total.ln();
                let sum: f64 = (0..3).map(|c| (fwd.logits[[0, c, y, xx]] - lse).exp()).sum();
                assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn classifier_on_zero_features_gives_biases() {
        let mut net = SegNet::<f64>::new(tiny_config()).unwrap();
        net.classifier.bias[1] = 0.37;
        let zero = Array4::zeros((1, 4, 4, 4));
        let (logits, _) = net.classifier.forward(&zero).unwrap();
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    assert_abs_diff_eq!(
                        logits[[0, c, y, x]],
                        net.classifier.bias[c],
                        epsilon = 1e-12
                    );
                }
            }
        }
    }

    #[test]
    fn rejects_bad_inputs_and_configs() {
        let net = SegNet::<f64>::new(tiny_config()).unwrap();
        assert!(net.forward_features(&Array4::zeros((1, 3, 8, 8))).is_err());
        assert!(net.forward_features(&Array4::zeros((1, 2, 5, 5))).is_err());
        let mut bad = tiny_config();
        bad.widths = vec![5, 8];
        assert!(SegNet::<f64>::new(bad).is_err());
        let mut bad = tiny_config();
        bad.num_classes = 1;
        assert!(SegNet::<f64>::new(bad).is_err());
    }

    fn softmax_probs(logits: &Array4<f64>, b: usize, y: usize, x: usize) -> Vec<f64> {
        let c = logits.dim().1;
        let m = (0..c)
            .map(|k| logits[[b, k, y, x]])
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = (0..c).map(|k| (logits[[b, k, y, x]] - m).exp()).collect();
        let s: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / s).collect()
    }

    #[test]
    fn expansion_splits_background_mass_uniformly() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(4);
        for n_new in [1usize, 2, 3] {
            let mut net = SegNet::<f64>::new(tiny_config()).unwrap();
            let x = random_input(&mut rng, (1, 2, 8, 8));
            let before = net.forward_logits(&x).unwrap();
            net.expand_classifier(n_new).unwrap();
            assert_eq!(net.num_classes(), 3 + n_new);
            let after = net.forward_logits(&x).unwrap();
            for y in 0..8 {
                for xx in 0..8 {
                    let p0 = softmax_probs(&before.logits, 0, y, xx);
                    let p1 = softmax_probs(&after.logits, 0, y, xx);
                    let share = p0[0] / (n_new + 1) as f64;
                    assert_abs_diff_eq!(p1[0], share, epsilon = 1e-6);
                    for k in 0..n_new {
                        assert_abs_diff_eq!(p1[3 + k], share, epsilon = 1e-6);
                    }
                    for c in 1..3 {
                        assert_abs_diff_eq!(p1[c], p0[c], epsilon = 1e-6);
                    }
                    // Conservation: background + new mass equals old background.
                    let grouped: f64 = p1[0] + (0..n_new).map(|k| p1[3 + k]).sum::<f64>();
                    assert_abs_diff_eq!(grouped, p0[0], epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn expansion_preserves_old_argmax() {
        let mut net = SegNet::<f64>::new(tiny_config()).unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
        let x = random_input(&mut rng, (1, 2, 8, 8));
        let before = net.forward_logits(&x).unwrap();
        net.expand_classifier(2).unwrap();
        let after = net.forward_logits(&x).unwrap();
        for y in 0..8 {
            for xx in 0..8 {
                let old_argmax = |l: &Array4<f64>| {
                    (1..3)
                        .max_by(|&a, &b| {
                            l[[0, a, y, xx]].partial_cmp(&l[[0, b, y, xx]]).unwrap()
                        })
                        .unwrap()
                };
                assert_eq!(old_argmax(&before.logits), old_argmax(&after.logits));
            }
        }
    }

    #[test]
    fn expansion_rejects_zero() {
        let mut net = SegNet::<f64>::new(tiny_config()).unwrap();
        assert!(net.expand_classifier(0).is_err());
    }

    #[test]
    fn input_channel_expansion_is_linear_in_new_channels() {
        let mut net = SegNet::<f64>::new(tiny_config()).unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(6);
        let x = random_input(&mut rng, (1, 2, 8, 8));
        let before = net.forward_logits(&x).unwrap();
        net.expand_input_channels(3, 0).unwrap();
        // Zero extra channel: identical outputs.
        let mut x3 = Array4::zeros((1, 3, 8, 8));
        x3.slice_mut(ndarray::s![.., ..2, .., ..]).assign(&x);
        let after = net.forward_logits(&x3).unwrap();
        for (a, b) in after.logits.iter().zip(before.logits.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-9);
        }
        // Kernel copy is bit-exact.
        let w = &net.stem.conv.weight;
        assert_eq!(
            w.slice(ndarray::s![.., 2, .., ..]),
            w.slice(ndarray::s![.., 0, .., ..])
        );
        // Extra channel = source plane: pre-activation adds the source
        // contribution once more. Verify on the stem conv alone.
        let mut x_dup = x3.clone();
        x_dup
            .slice_mut(ndarray::s![.., 2, .., ..])
            .assign(&x.index_axis(Axis(1), 0));
        let (pre_dup, _) = net.stem.conv.forward(&x_dup).unwrap();
        let (pre_plain, _) = net.stem.conv.forward(&x3).unwrap();
        // Reference: a 1-channel conv with the source kernels on the source plane.
        let mut src_only = Array4::zeros((1, 3, 8, 8));
        src_only
            .slice_mut(ndarray::s![.., 2, .., ..])
            .assign(&x.index_axis(Axis(1), 0));
        let (pre_src, _) = net.stem.conv.forward(&src_only).unwrap();
        let bias_only = {
            let (b, _) = net.stem.conv.forward(&Array4::zeros((1, 3, 8, 8))).unwrap();
            b
        };
        for (((d, p), s), b0) in pre_dup
            .iter()
            .zip(pre_plain.iter())
            .zip(pre_src.iter())
            .zip(bias_only.iter())
        {
            assert_abs_diff_eq!(*d, *p + (*s - *b0), epsilon = 1e-9);
        }
        assert!(net.expand_input_channels(3, 0).is_err());
        assert!(net.expand_input_channels(5, 9).is_err());
    }

    #[test]
    fn frozen_clone_tracks_source_then_diverges() {
        let net = SegNet::<f64>::new(tiny_config()).unwrap();
        let teacher = net.clone_frozen();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(8);
        let x = random_input(&mut rng, (1, 2, 8, 8));
        let a = net.forward_logits(&x).unwrap();
        let b = teacher.forward_logits(&x).unwrap();
        assert_eq!(a.logits, b.logits);
        // Train the student one step; the teacher must not move.
        let mut student = net;
        let fwd = student.forward_logits(&x).unwrap();
        let g = Array4::from_elem(fwd.logits.raw_dim(), 0.1);
        student.zero_grad();
        student.backward(&fwd, Some(&g), None).unwrap();
        let mut opt = crate::nn::AdamW::new(0.05, 0.0);
        opt.begin_step();
        student.visit_params(&mut |p| opt.update(p));
        let after_student = student.forward_logits(&x).unwrap();
        let after_teacher = teacher.forward_logits(&x).unwrap();
        assert_ne!(after_student.logits, a.logits);
        assert_eq!(after_teacher.logits, a.logits);
    }

    #[test]
    fn whole_network_gradients_match_finite_differences() {
        let mut net = SegNet::<f64>::new(tiny_config()).unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(9);
        let x = random_input(&mut rng, (1, 2, 4, 4));
        let fwd = net.forward_logits(&x).unwrap();
        let r_logits = random_input(&mut rng, fwd.logits.dim());
        let r_features = random_input(&mut rng, fwd.features.dim());
        net.zero_grad();
        net.backward(&fwd, Some(&r_logits), Some(&r_features)).unwrap();

        let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
        net.visit_params(&mut |p| {
            analytic.push((p.name.clone(), p.grad.iter().copied().collect()));
        });

        let objective = |net: &SegNet<f64>| {
            let fwd = net.forward_logits(&x).unwrap();
            (&fwd.logits * &r_logits).sum() + (&fwd.features * &r_features).sum()
        };
        let base = objective(&net);
        assert!(base.is_finite());
        let eps = 1e-5;
        for (name, grads) in &analytic {
            // Probe a few elements per tensor; routing errors hit all of them.
            let len = grads.len();
            let picks: Vec<usize> = [0, len / 2, len.saturating_sub(1)]
                .into_iter()
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect();
            for &idx in &picks {
                let mut plus = net.clone();
                let mut minus = net.clone();
                for (target, delta) in [(&mut plus, eps), (&mut minus, -eps)] {
                    target.visit_params(&mut |mut p| {
                        if p.name == *name {
                            let v = p.value.iter().nth(idx).copied().unwrap();
                            *p.value.iter_mut().nth(idx).unwrap() = v + delta;
                        }
                    });
                }
                let numeric = (objective(&plus) - objective(&minus)) / (2.0 * eps);
                let a = grads[idx];
                let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
                assert!(
                    rel < 1e-4,
                    "{name}[{idx}]: analytic {a} vs numeric {numeric} (rel {rel:.2e})"
                );
            }
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let mut net = SegNet::<f64>::new(tiny_config()).unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(10);
        net.zero_grad();
        // Two random batches guard against a coincidental exact zero.
        for _ in 0..2 {
            let x = random_input(&mut rng, (2, 2, 8, 8));
            let fwd = net.forward_logits(&x).unwrap();
            let gl = random_input(&mut rng, fwd.logits.dim());
            let gf = random_input(&mut rng, fwd.features.dim());
            net.backward(&fwd, Some(&gl), Some(&gf)).unwrap();
        }
        net.visit_params(&mut |p| {
            let total: f64 = p.grad.iter().map(|g| g.abs()).sum();
            assert!(total > 0.0, "parameter {} received no gradient", p.name);
        });
    }

    #[test]
    fn tensors_and_load_round_trip() {
        let mut net = SegNet::<f64>::new(tiny_config()).unwrap();
        let snapshot: BTreeMap<String, ndarray::ArrayD<f64>> = net
            .tensors()
            .into_iter()
            .map(|(n, v)| (n, v.to_owned()))
            .collect();
        let mut other = SegNet::<f64>::new(SegNetConfig {
            seed: 99,
            ..tiny_config()
        })
        .unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(11);
        let x = random_input(&mut rng, (1, 2, 8, 8));
        assert_ne!(
            other.forward_logits(&x).unwrap().logits,
            net.forward_logits(&x).unwrap().logits
        );
        other.load_tensors(&snapshot).unwrap();
        assert_eq!(
            other.forward_logits(&x).unwrap().logits,
            net.forward_logits(&x).unwrap().logits
        );
        // Shape mismatch is reported with the tensor name.
        let mut bad = snapshot.clone();
        bad.insert(
            "classifier.bias".into(),
            ndarray::ArrayD::zeros(ndarray::IxDyn(&[7])),
        );
        let err = net.load_tensors(&bad).unwrap_err().to_string();
        assert!(err.contains("classifier.bias"), "{err}");
        // Missing tensor named too.
        let mut missing = snapshot;
        missing.remove("head.conv.weight");
        let err = net.load_tensors(&missing).unwrap_err().to_string();
        assert!(err.contains("head.conv.weight"), "{err}");
    }
}
