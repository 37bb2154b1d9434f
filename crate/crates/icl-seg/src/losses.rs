//! The four training losses: background-unbiased cross-entropy,
//! background-unbiased knowledge distillation, and the two equivariance
//! regularizers that match features of a transformed input against
//! transformed features of the plain input.
//!
//! Channel convention: classifier channel 0 is the background; channels
//! for foreground classes appear in introduction order. `old_classes` and
//! teacher channels therefore always form a prefix of the student's
//! channels. Callers remap global class ids to channels before computing
//! losses.
//!
//! All log-probabilities go through log-sum-exp so extreme logits (±1e4)
//! stay finite. Functions are generic over `f32`/`f64`; gradient checks
//! and oracles run the same code in 64-bit.

use ndarray::{Array3, ArrayBase, Data, Ix2, Ix3};
use serde::{Deserialize, Serialize};

use crate::dihedral::{apply_transform, invert, TransformId};
use crate::error::{Error, Result};

pub use ndarray::NdFloat;

/// Weights of the combined loss: `ce + lambda_kd * kd + eta_inv_seg *
/// inv_seg + rho_inv_kd * inv_kd`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_kd: f64,
    pub eta_inv_seg: f64,
    pub rho_inv_kd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_kd: 1.0,
            eta_inv_seg: 0.1,
            rho_inv_kd: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_kd", self.lambda_kd),
            ("eta_inv_seg", self.eta_inv_seg),
            ("rho_inv_kd", self.rho_inv_kd),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Weights effective at a given step: the teacher terms are forced to
    /// zero at step 0 because no teacher exists yet.
    pub fn for_step(&self, step: usize) -> LossWeights {
        if step == 0 {
            LossWeights {
                lambda_kd: 0.0,
                eta_inv_seg: self.eta_inv_seg,
                rho_inv_kd: 0.0,
            }
        } else {
            *self
        }
    }
}

/// One batch's loss terms (unweighted) plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBundle {
    pub ce: f64,
    pub kd: f64,
    pub inv_seg: f64,
    pub inv_kd: f64,
    pub total: f64,
}

/// Combine loss terms per the weighted sum above. At step 0 the teacher
/// terms must not be supplied; at later steps they must be present
/// whenever their weight is positive.
pub fn total_loss(
    ce: f64,
    kd: Option<f64>,
    inv_seg: f64,
    inv_kd: Option<f64>,
    weights: &LossWeights,
    step: usize,
) -> Result<LossBundle> {
    weights.validate()?;
    if step == 0 && (kd.is_some() || inv_kd.is_some()) {
        return Err(Error::invalid(
            "teacher loss terms supplied at step 0, where no teacher exists",
        ));
    }
    let w = weights.for_step(step);
    let kd = match kd {
        Some(v) => v,
        None if w.lambda_kd == 0.0 => 0.0,
        None => return Err(Error::invalid("lambda_kd > 0 but no kd term supplied")),
    };
    let inv_kd = match inv_kd {
        Some(v) => v,
        None if w.rho_inv_kd == 0.0 => 0.0,
        None => return Err(Error::invalid("rho_inv_kd > 0 but no inv_kd term supplied")),
    };
    let total = ce + w.lambda_kd * kd + w.eta_inv_seg * inv_seg + w.rho_inv_kd * inv_kd;
    Ok(LossBundle {
        ce,
        kd,
        inv_seg,
        inv_kd,
        total,
    })
}

fn logsumexp<A: NdFloat>(vals: &[A]) -> A {
    let m = vals.iter().copied().fold(A::neg_infinity(), A::max);
    let mut s = A::zero();
    for &v in vals {
        s += (v - m).exp();
    }
    m + s.ln()
}

fn logsumexp_subset<A: NdFloat>(vals: &[A], idx: &[usize]) -> A {
    let m = idx
        .iter()
        .map(|&k| vals[k])
        .fold(A::neg_infinity(), A::max);
    let mut s = A::zero();
    for &k in idx {
        s += (vals[k] - m).exp();
    }
    m + s.ln()
}

fn check_spatial(
    what: &str,
    (h, w): (usize, usize),
    (th, tw): (usize, usize),
) -> Result<()> {
    if (h, w) != (th, tw) {
        return Err(Error::shape(format!(
            "{what}: spatial dims {h}x{w} vs {th}x{tw}"
        )));
    }
    Ok(())
}

/// Validated grouping `{background} ∪ old_classes` as channel indices.
fn background_group(channels: usize, old_classes: &[usize]) -> Result<Vec<usize>> {
    let mut group = vec![0usize];
    let mut seen = vec![false; channels];
    seen[0] = true;
    for &c in old_classes {
        if c == 0 || c >= channels {
            return Err(Error::invalid(format!(
                "old class channel {c} out of range for {channels} channels"
            )));
        }
        if seen[c] {
            return Err(Error::invalid(format!("old class channel {c} repeated")));
        }
        seen[c] = true;
        group.push(c);
    }
    Ok(group)
}

/// Cross-entropy with background re-attribution: foreground pixels get
/// standard CE, background pixels score the probability mass pooled over
/// `{background} ∪ old_classes`. With no old classes this is exactly
/// standard cross-entropy. The mean runs over non-ignored pixels.
pub fn unbiased_cross_entropy<A, S, T>(
    logits: &ArrayBase<S, Ix3>,
    target: &ArrayBase<T, Ix2>,
    old_classes: &[usize],
    ignore_index: Option<u8>,
) -> Result<A>
where
    A: NdFloat,
    S: Data<Elem = A>,
    T: Data<Elem = u8>,
{
    ce_impl(logits, target, old_classes, ignore_index, false).map(|(loss, _)| loss)
}

/// [`unbiased_cross_entropy`] plus its gradient with respect to the logits.
pub fn unbiased_cross_entropy_grad<A, S, T>(
    logits: &ArrayBase<S, Ix3>,
    target: &ArrayBase<T, Ix2>,
    old_classes: &[usize],
    ignore_index: Option<u8>,
) -> Result<(A, Array3<A>)>
where
    A: NdFloat,
    S: Data<Elem = A>,
    T: Data<Elem = u8>,
{
    ce_impl(logits, target, old_classes, ignore_index, true)
        .map(|(loss, grad)| (loss, grad.expect("grad requested")))
}

fn ce_impl<A, S, T>(
    logits: &ArrayBase<S, Ix3>,
    target: &ArrayBase<T, Ix2>,
    old_classes: &[usize],
    ignore_index: Option<u8>,
    want_grad: bool,
) -> Result<(A, Option<Array3<A>>)>
where
    A: NdFloat,
    S: Data<Elem = A>,
    T: Data<Elem = u8>,
{
    let (c, h, w) = logits.dim();
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::shape("logits must be non-empty [C, H, W]"));
    }
    check_spatial("cross-entropy target", (h, w), target.dim())?;
    let group = background_group(c, old_classes)?;

    let mut grad = want_grad.then(|| Array3::<A>::zeros((c, h, w)));
    let mut buf = vec![A::zero(); c];
    let mut loss = A::zero();
    let mut contributing = 0usize;
    for y in 0..h {
        for x in 0..w {
            let label = target[[y, x]];
            if ignore_index == Some(label) {
                continue;
            }
            if label as usize >= c {
                return Err(Error::data(format!(
                    "target value {label} at ({y}, {x}) outside {c} classifier channels"
                )));
            }
            contributing += 1;
            for (k, slot) in buf.iter_mut().enumerate() {
                *slot = logits[[k, y, x]];
            }
            let lse_all = logsumexp(&buf);
            if label == 0 {
                let lse_group = logsumexp_subset(&buf, &group);
                loss += lse_all - lse_group;
                if let Some(g) = grad.as_mut() {
                    for k in 0..c {
                        g[[k, y, x]] = (buf[k] - lse_all).exp();
                    }
                    for &k in &group {
                        g[[k, y, x]] -= (buf[k] - lse_group).exp();
                    }
                }
            } else {
                loss += lse_all - buf[label as usize];
                if let Some(g) = grad.as_mut() {
                    for k in 0..c {
                        g[[k, y, x]] = (buf[k] - lse_all).exp();
                    }
                    g[[label as usize, y, x]] -= A::one();
                }
            }
        }
    }
    if contributing == 0 {
        return Ok((A::zero(), grad));
    }
    let n = A::from(contributing).expect("pixel count fits the float type");
    if let Some(g) = grad.as_mut() {
        g.mapv_inplace(|v| v / n);
    }
    Ok((loss / n, grad))
}

/// Distillation against the previous-step model. The teacher's channels
/// are a prefix of the student's; the student's background score is the
/// softmax mass pooled over `{background} ∪ new channels` before being
/// matched against the teacher's background. Constant in the teacher:
/// gradients exist for the student logits only.
pub fn unbiased_kd<A, S, T>(
    student_logits: &ArrayBase<S, Ix3>,
    teacher_logits: &ArrayBase<T, Ix3>,
) -> Result<A>
where
    A: NdFloat,
    S: Data<Elem = A>,
    T: Data<Elem = A>,
{
    kd_impl(student_logits, teacher_logits, false).map(|(loss, _)| loss)
}

/// [`unbiased_kd`] plus its gradient with respect to the student logits.
pub fn unbiased_kd_grad<A, S, T>(
    student_logits: &ArrayBase<S, Ix3>,
    teacher_logits: &ArrayBase<T, Ix3>,
) -> Result<(A, Array3<A>)>
where
    A: NdFloat,
    S: Data<Elem = A>,
    T: Data<Elem = A>,
{
    kd_impl(student_logits, teacher_logits, true).map(|(loss, grad)| (loss, grad.expect("grad requested")))
}

fn kd_impl<A, S, T>(
    student: &ArrayBase<S, Ix3>,
    teacher: &ArrayBase<T, Ix3>,
    want_grad: bool,
) -> Result<(A, Option<Array3<A>>)>
where
    A: NdFloat,
    S: Data<Elem = A>,
    T: Data<Elem = A>,
{
    let (cs, h, w) = student.dim();
    let (ct, th, tw) = teacher.dim();
    if cs == 0 || ct == 0 || h == 0 || w == 0 {
        return Err(Error::shape("logits must be non-empty [C, H, W]"));
    }
    check_spatial("distillation", (h, w), (th, tw))?;
    if ct > cs {
        return Err(Error::shape(format!(
            "teacher has {ct} channels, student only {cs}; teacher channels must be a prefix"
        )));
    }
    // Background plus every channel the teacher has never seen.
    let group: Vec<usize> = std::iter::once(0).chain(ct..cs).collect();

    let mut grad = want_grad.then(|| Array3::<A>::zeros((cs, h, w)));
    let mut sbuf = vec![A::zero(); cs];
    let mut tbuf = vec![A::zero(); ct];
    let mut loss = A::zero();
    for y in 0..h {
        for x in 0..w {
            for (k, slot) in sbuf.iter_mut().enumerate() {
                *slot = student[[k, y, x]];
            }
            for (k, slot) in tbuf.iter_mut().enumerate() {
                *slot = teacher[[k, y, x]];
            }
            let lse_t = logsumexp(&tbuf);
            let lse_s = logsumexp(&sbuf);
            let lse_group = logsumexp_subset(&sbuf, &group);

            let q_bg = (tbuf[0] - lse_t).exp();
            loss -= q_bg * (lse_group - lse_s);
            for k in 1..ct {
                loss -= (tbuf[k] - lse_t).exp() * (sbuf[k] - lse_s);
            }

            if let Some(g) = grad.as_mut() {
                for k in 0..cs {
                    g[[k, y, x]] = (sbuf[k] - lse_s).exp();
                }
                for k in 1..ct {
                    g[[k, y, x]] -= (tbuf[k] - lse_t).exp();
                }
                for &k in &group {
                    g[[k, y, x]] -= q_bg * (sbuf[k] - lse_group).exp();
                }
            }
        }
    }
    let n = A::from(h * w).expect("pixel count fits the float type");
    if let Some(g) = grad.as_mut() {
        g.mapv_inplace(|v| v / n);
    }
    Ok((loss / n, grad))
}

fn mse_value<A, S1, S2>(
    feat_aug: &ArrayBase<S1, Ix3>,
    feat_plain: &ArrayBase<S2, Ix3>,
    t: TransformId,
) -> Result<(A, Array3<A>)>
where
    A: NdFloat,
    S1: Data<Elem = A>,
    S2: Data<Elem = A>,
{
    let transformed = apply_transform(t, feat_plain)?;
    if feat_aug.dim() != transformed.dim() {
        return Err(Error::shape(format!(
            "feature shapes {:?} vs {:?} after transform {t}",
            feat_aug.dim(),
            transformed.dim()
        )));
    }
    let mut diff = transformed;
    diff.zip_mut_with(feat_aug, |p, &a| *p = a - *p);
    let n = A::from(diff.len()).expect("element count fits the float type");
    let mut loss = A::zero();
    for &d in diff.iter() {
        loss += d * d;
    }
    Ok((loss / n, diff))
}

/// Within-student equivariance penalty: mean squared error between the
/// features of the transformed input and the transformed features of the
/// plain input. Gradients flow through both feature maps.
pub fn invariance_seg_loss<A, S1, S2>(
    feat_aug: &ArrayBase<S1, Ix3>,
    feat_plain: &ArrayBase<S2, Ix3>,
    t: TransformId,
) -> Result<A>
where
    A: NdFloat,
    S1: Data<Elem = A>,
    S2: Data<Elem = A>,
{
    mse_value(feat_aug, feat_plain, t).map(|(loss, _)| loss)
}

/// [`invariance_seg_loss`] plus gradients for both feature maps, in input
/// orientation: the plain-feature gradient is routed back through the
/// inverse transform.
pub fn invariance_seg_loss_grad<A, S1, S2>(
    feat_aug: &ArrayBase<S1, Ix3>,
    feat_plain: &ArrayBase<S2, Ix3>,
    t: TransformId,
) -> Result<(A, Array3<A>, Array3<A>)>
where
    A: NdFloat,
    S1: Data<Elem = A>,
    S2: Data<Elem = A>,
{
    let (loss, diff) = mse_value(feat_aug, feat_plain, t)?;
    let scale = A::from(2.0).expect("constant") / A::from(diff.len()).expect("element count");
    let grad_aug = diff.mapv(|d| d * scale);
    let grad_plain = apply_transform(invert(t), &grad_aug.mapv(|g| -g))?;
    Ok((loss, grad_aug, grad_plain))
}

/// Cross-model equivariance penalty: student features of the transformed
/// input vs. transformed teacher features of the plain input. The teacher
/// argument is a constant; only the student gradient exists.
pub fn invariance_kd_loss<A, S1, S2>(
    feat_aug_student: &ArrayBase<S1, Ix3>,
    feat_plain_teacher: &ArrayBase<S2, Ix3>,
    t: TransformId,
) -> Result<A>
where
    A: NdFloat,
    S1: Data<Elem = A>,
    S2: Data<Elem = A>,
{
    mse_value(feat_aug_student, feat_plain_teacher, t).map(|(loss, _)| loss)
}

/// [`invariance_kd_loss`] plus the gradient for the student features.
pub fn invariance_kd_loss_grad<A, S1, S2>(
    feat_aug_student: &ArrayBase<S1, Ix3>,
    feat_plain_teacher: &ArrayBase<S2, Ix3>,
    t: TransformId,
) -> Result<(A, Array3<A>)>
where
    A: NdFloat,
    S1: Data<Elem = A>,
    S2: Data<Elem = A>,
{
    let (loss, diff) = mse_value(feat_aug_student, feat_plain_teacher, t)?;
    let scale = A::from(2.0).expect("constant") / A::from(diff.len()).expect("element count");
    Ok((loss, diff.mapv(|d| d * scale)))
}
