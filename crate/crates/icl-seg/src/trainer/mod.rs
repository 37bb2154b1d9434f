//! Incremental training: per-step dataset assembly, paired-augmentation
//! batching, optimization, teacher management, validation, and
//! checkpointing.
//!
//! Class-channel convention: classifier channel 0 is the background and
//! foreground channels follow introduction order, so the teacher's
//! channels are always a prefix of the student's. Ground-truth masks
//! carry global class ids; [`ClassLayout`] translates them to channel
//! targets per step.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::config::ExperimentConfig;
use crate::dihedral::{apply_transform, sample_transform, TransformId, ALL_TRANSFORMS};
use crate::error::{Error, Result};
use crate::losses::{
    invariance_kd_loss_grad, invariance_seg_loss_grad, total_loss, unbiased_cross_entropy_grad,
    unbiased_kd_grad, LossWeights,
};
use crate::metrics::{argmax_classes, ConfusionMatrix, MetricsReport};
use crate::nn::AdamW;
use crate::raster::{
    partition_disjoint, remap_to_set, split_validation, LabelSpace, TaskSequence, Tile,
};
use crate::segnet::{Forward, SegNet, SegNetConfig};

/// Everything the optimization loop needs to know.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Tiles per batch; pairing yields twice as many supervised samples.
    pub batch_size: usize,
    pub base_lr: f64,
    /// Base rate for steps flagged late.
    pub late_lr: f64,
    /// Steps trained at `late_lr`; empty means the final step only.
    pub late_steps: Vec<usize>,
    pub weight_decay: f64,
    pub seed: u64,
    pub weights: LossWeights,
    /// Unbiased CE when true, standard CE otherwise.
    pub unbiased_ce: bool,
    /// Distill both pair elements instead of only the plain one.
    pub kd_on_pair: bool,
    pub transforms: Vec<TransformId>,
    pub val_fraction: f64,
    pub ignore_index: Option<u8>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 80,
            batch_size: 8,
            base_lr: 1e-3,
            late_lr: 1e-4,
            late_steps: Vec::new(),
            weight_decay: 1e-4,
            seed: 0,
            weights: LossWeights::default(),
            unbiased_ce: true,
            kd_on_pair: true,
            transforms: ALL_TRANSFORMS.to_vec(),
            val_fraction: 0.15,
            ignore_index: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be positive"));
        }
        for (name, lr) in [("base_lr", self.base_lr), ("late_lr", self.late_lr)] {
            if !lr.is_finite() || lr <= 0.0 {
                return Err(Error::invalid(format!("{name} must be positive, got {lr}")));
            }
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::invalid("weight_decay must be finite and non-negative"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 0.5) {
            return Err(Error::invalid("val_fraction must lie in (0, 0.5)"));
        }
        if self.transforms.is_empty() {
            return Err(Error::invalid("transform allow-set must not be empty"));
        }
        self.weights.validate()
    }

    /// Assemble from an experiment file plus its resolved method preset.
    pub fn from_experiment(cfg: &ExperimentConfig) -> Result<(TrainConfig, bool)> {
        cfg.validate()?;
        let spec = cfg.method_preset()?.resolve(&cfg.losses);
        let t = &cfg.train;
        Ok((
            TrainConfig {
                epochs: t.epochs,
                batch_size: t.batch_size,
                base_lr: t.base_lr,
                late_lr: t.late_lr,
                late_steps: t.late_steps.clone(),
                weight_decay: t.weight_decay,
                seed: cfg.seed,
                weights: spec.weights,
                unbiased_ce: spec.unbiased_ce,
                kd_on_pair: cfg.losses.kd_on_pair,
                transforms: cfg.transform_allow()?,
                val_fraction: t.val_fraction,
                ignore_index: cfg.data.ignore_index,
            },
            spec.offline,
        ))
    }
}

/// Classifier-channel layout at one step: global class id per channel,
/// background first, then introduction order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassLayout {
    channel_classes: Vec<u8>,
}

impl ClassLayout {
    /// Layout after completing `step` of the sequence.
    pub fn for_step(seq: &TaskSequence, step: usize) -> Result<Self> {
        let spec = seq
            .steps
            .get(step)
            .ok_or_else(|| Error::invalid(format!("step {step} not in sequence")))?;
        Ok(ClassLayout {
            channel_classes: spec.cumulative.clone(),
        })
    }

    /// Build a layout from a stored channel list (e.g. checkpoint
    /// metadata): background first, no duplicates.
    pub fn from_channels(channel_classes: Vec<u8>) -> Result<Self> {
        if channel_classes.first() != Some(&crate::raster::BACKGROUND) {
            return Err(Error::invalid("channel 0 must be the background"));
        }
        let mut seen = [false; 256];
        for &c in &channel_classes {
            if seen[c as usize] {
                return Err(Error::invalid(format!(
                    "class {c} appears twice in the channel layout"
                )));
            }
            seen[c as usize] = true;
        }
        Ok(ClassLayout { channel_classes })
    }

    pub fn channel_classes(&self) -> &[u8] {
        &self.channel_classes
    }

    pub fn num_channels(&self) -> usize {
        self.channel_classes.len()
    }

    pub fn channel_of(&self, class: u8) -> Option<usize> {
        self.channel_classes.iter().position(|&c| c == class)
    }

    /// Translate a mask of global ids into channel targets. Every value
    /// must be a known class (or the ignore index, passed through), which
    /// enforces per-batch label legality.
    pub fn to_channel_targets(
        &self,
        mask: &Array2<u8>,
        ignore_index: Option<u8>,
    ) -> Result<Array2<u8>> {
        let mut table = [u16::MAX; 256];
        for (ch, &c) in self.channel_classes.iter().enumerate() {
            table[c as usize] = ch as u16;
        }
        if let Some(ig) = ignore_index {
            if self.channel_of(ig).is_some() {
                return Err(Error::invalid(format!(
                    "ignore index {ig} collides with a class id"
                )));
            }
            table[ig as usize] = ig as u16;
        }
        let mut out = Array2::zeros(mask.raw_dim());
        for (o, &v) in out.iter_mut().zip(mask.iter()) {
            let ch = table[v as usize];
            if ch == u16::MAX {
                return Err(Error::train(format!(
                    "label {v} is not legal at this step (classes {:?})",
                    self.channel_classes
                )));
            }
            *o = ch as u8;
        }
        Ok(out)
    }
}

/// One learning step's mutable state.
pub struct StepState {
    pub step: usize,
    pub num_steps: usize,
    pub student: SegNet<f32>,
    /// Frozen copy of the previous step's student; present iff step > 0.
    pub teacher: Option<SegNet<f32>>,
    pub layout: ClassLayout,
    /// Training tiles with labels already remapped to this step's
    /// annotation (new classes only, everything else background).
    pub train_tiles: Vec<Tile>,
    pub val_tiles: Vec<Tile>,
}

impl StepState {
    fn validate(&self) -> Result<()> {
        match (&self.teacher, self.step) {
            (None, 0) => {}
            (None, _) => return Err(Error::train("teacher missing at an incremental step")),
            (Some(_), 0) => return Err(Error::train("teacher supplied at step 0")),
            (Some(t), _) => {
                if t.num_classes() >= self.student.num_classes() {
                    return Err(Error::train(format!(
                        "teacher has {} channels, student {}; expansion missing",
                        t.num_classes(),
                        self.student.num_classes()
                    )));
                }
            }
        }
        if self.student.num_classes() != self.layout.num_channels() {
            return Err(Error::train(format!(
                "student has {} channels but layout lists {}",
                self.student.num_classes(),
                self.layout.num_channels()
            )));
        }
        if self.train_tiles.is_empty() {
            return Err(Error::train("no training tiles for this step"));
        }
        Ok(())
    }
}

/// Cosine decay within a step.
pub fn lr_schedule(epoch: usize, epochs: usize, base: f64) -> f64 {
    let frac = epoch as f64 / epochs as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Base rate for a step: `late_lr` for flagged steps (default: the final
/// step only), `base_lr` otherwise.
pub fn step_base_lr(cfg: &TrainConfig, step: usize, num_steps: usize) -> f64 {
    let late = if cfg.late_steps.is_empty() {
        num_steps > 1 && step + 1 == num_steps
    } else {
        cfg.late_steps.contains(&step)
    };
    if late {
        cfg.late_lr
    } else {
        cfg.base_lr
    }
}

/// A paired batch: each tile appears as itself and under one sampled
/// transform, with labels transformed identically.
pub struct PairedBatch {
    pub plain: Array4<f32>,
    pub aug: Array4<f32>,
    pub t_ids: Vec<TransformId>,
    /// Channel targets for the plain and augmented elements.
    pub y_plain: Vec<Array2<u8>>,
    pub y_aug: Vec<Array2<u8>>,
}

impl PairedBatch {
    pub fn len(&self) -> usize {
        self.t_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_ids.is_empty()
    }

    pub fn supervised_samples(&self) -> usize {
        2 * self.len()
    }
}

/// Build a paired batch from tiles whose labels are already remapped.
pub fn build_batch<R: rand::Rng + ?Sized>(
    tiles: &[&Tile],
    rng: &mut R,
    allow: &[TransformId],
    layout: &ClassLayout,
    ignore_index: Option<u8>,
) -> Result<PairedBatch> {
    if tiles.is_empty() {
        return Err(Error::train("cannot build a batch from zero tiles"));
    }
    let (c, h, w) = tiles[0].pixels.dim();
    let b = tiles.len();
    let mut plain = Array4::zeros((b, c, h, w));
    let mut aug = Array4::zeros((b, c, h, w));
    let mut t_ids = Vec::with_capacity(b);
    let mut y_plain = Vec::with_capacity(b);
    let mut y_aug = Vec::with_capacity(b);
    for (i, tile) in tiles.iter().enumerate() {
        if tile.pixels.dim() != (c, h, w) {
            return Err(Error::shape(format!(
                "tile {} has shape {:?}, batch expects {:?}",
                tile.record.id,
                tile.pixels.dim(),
                (c, h, w)
            )));
        }
        let t = sample_transform(rng, allow)?;
        plain.index_axis_mut(Axis(0), i).assign(&tile.pixels);
        aug.index_axis_mut(Axis(0), i)
            .assign(&apply_transform(t, &tile.pixels)?);
        y_plain.push(layout.to_channel_targets(&tile.labels, ignore_index)?);
        let moved: Array2<u8> = apply_transform(t, &tile.labels)?;
        y_aug.push(layout.to_channel_targets(&moved, ignore_index)?);
        t_ids.push(t);
    }
    Ok(PairedBatch {
        plain,
        aug,
        t_ids,
        y_plain,
        y_aug,
    })
}

#[derive(Debug, Serialize)]
struct BatchLog<'a> {
    kind: &'a str,
    step: usize,
    epoch: usize,
    iteration: usize,
    lr: f64,
    ce: f64,
    kd: f64,
    inv_seg: f64,
    inv_kd: f64,
    total: f64,
}

#[derive(Debug, Serialize)]
struct ValLog<'a> {
    kind: &'a str,
    step: usize,
    epoch: usize,
    micro_f1: f64,
    mean_total: f64,
}

/// Per-step training outcome.
#[derive(Debug, Clone)]
pub struct StepSummary {
    pub step: usize,
    /// Mean total loss per epoch, in epoch order.
    pub epoch_mean_total: Vec<f64>,
    /// Validation micro-F1 per epoch.
    pub val_micro: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_micro: f64,
}

fn write_log<T: Serialize>(log: &mut Option<&mut dyn Write>, record: &T) -> Result<()> {
    if let Some(w) = log.as_mut() {
        serde_json::to_writer(&mut **w, record)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Evaluate a network over tiles whose labels hold global class ids,
/// returning a confusion matrix over the full label space.
pub fn eval_confusion(
    net: &SegNet<f32>,
    tiles: &[Tile],
    layout: &ClassLayout,
    num_label_classes: usize,
    ignore_index: Option<u8>,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::with_ignore(num_label_classes, ignore_index)?;
    for tile in tiles {
        let x = tile
            .pixels
            .view()
            .insert_axis(Axis(0))
            .to_owned();
        let fwd = net.forward_logits(&x)?;
        let pred = argmax_classes(&fwd.logits.index_axis(Axis(0), 0), layout.channel_classes())?;
        cm.accumulate(&pred, &tile.labels)?;
    }
    Ok(cm)
}

/// Gradient contributions for one forward pass of one pair element.
struct ElementGrads {
    logits: Array4<f32>,
    features: Array4<f32>,
}

/// Train one step to completion, keeping the best-validation parameters.
pub fn train_step(
    state: &mut StepState,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<StepSummary> {
    cfg.validate()?;
    state.validate()?;
    let step = state.step;
    let mut rng = substream(cfg.seed, 0x7261_696e, step as u64);
    let base = step_base_lr(cfg, step, state.num_steps);
    let mut opt: AdamW<f32> = AdamW::new(base, cfg.weight_decay);
    let w = cfg.weights.for_step(step);
    let old_channels = state.teacher.as_ref().map_or(0, |t| t.num_classes());
    // Channel indices of old foreground classes; empty disables the
    // unbiased CE grouping, which recovers standard CE at step 0. The
    // finetuning ablation keeps it empty at every step.
    let old_fg: Vec<usize> = if cfg.unbiased_ce {
        (1..old_channels).collect()
    } else {
        Vec::new()
    };

    let mut summary = StepSummary {
        step,
        epoch_mean_total: Vec::with_capacity(cfg.epochs),
        val_micro: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        best_val_micro: f64::NEG_INFINITY,
    };
    let mut best_params: Option<BTreeMap<String, ndarray::ArrayD<f32>>> = None;
    // The optimizer must visit exactly the student's parameters.
    let param_count = state.student.tensors().len();

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg.epochs, base);
        opt.lr = lr;
        let mut order: Vec<usize> = (0..state.train_tiles.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        let mut iterations = 0usize;
        for (iteration, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let tiles: Vec<&Tile> = chunk.iter().map(|&i| &state.train_tiles[i]).collect();
            let batch = build_batch(
                &tiles,
                &mut rng,
                &cfg.transforms,
                &state.layout,
                cfg.ignore_index,
            )?;
            let bundle = optimize_batch(state, cfg, &w, &old_fg, &batch, &mut opt, param_count)?;
            if !bundle.total.is_finite() {
                return Err(Error::train(format!(
                    "non-finite loss at step {step} epoch {epoch} iteration {iteration}: \
                     ce={} kd={} inv_seg={} inv_kd={}",
                    bundle.ce, bundle.kd, bundle.inv_seg, bundle.inv_kd
                )));
            }
            epoch_total += bundle.total;
            iterations += 1;
            write_log(
                &mut log,
                &BatchLog {
                    kind: "batch",
                    step,
                    epoch,
                    iteration,
                    lr,
                    ce: bundle.ce,
                    kd: bundle.kd,
                    inv_seg: bundle.inv_seg,
                    inv_kd: bundle.inv_kd,
                    total: bundle.total,
                },
            )?;
        }
        let mean_total = epoch_total / iterations.max(1) as f64;
        summary.epoch_mean_total.push(mean_total);

        let micro = if state.val_tiles.is_empty() {
            0.0
        } else {
            let cm = eval_confusion(
                &state.student,
                &state.val_tiles,
                &state.layout,
                256,
                cfg.ignore_index,
            )?;
            cm.f1_scores().micro_f1.unwrap_or(0.0)
        };
        summary.val_micro.push(micro);
        write_log(
            &mut log,
            &ValLog {
                kind: "val",
                step,
                epoch,
                micro_f1: micro,
                mean_total,
            },
        )?;
        if micro >= summary.best_val_micro {
            summary.best_val_micro = micro;
            summary.best_epoch = epoch;
            best_params = Some(
                state
                    .student
                    .tensors()
                    .into_iter()
                    .map(|(n, v)| (n, v.to_owned()))
                    .collect(),
            );
        }
    }
    if let Some(params) = best_params {
        state.student.load_tensors(&params)?;
    }
    Ok(summary)
}

/// Forward both pair elements, accumulate weighted gradients, and apply
/// one optimizer step. Returns the unweighted loss terms.
fn optimize_batch(
    state: &mut StepState,
    cfg: &TrainConfig,
    w: &LossWeights,
    old_fg: &[usize],
    batch: &PairedBatch,
    opt: &mut AdamW<f32>,
    param_count: usize,
) -> Result<crate::losses::LossBundle> {
    let b = batch.len();
    let fwd_plain = state.student.forward_logits(&batch.plain)?;
    let fwd_aug = state.student.forward_logits(&batch.aug)?;
    // The teacher only runs when some distillation term consumes it.
    let need_teacher = w.lambda_kd > 0.0 || w.rho_inv_kd > 0.0;
    let teacher_fwd: Option<(Forward<f32>, Forward<f32>)> = match &state.teacher {
        Some(t) if need_teacher => {
            Some((t.forward_logits(&batch.plain)?, t.forward_logits(&batch.aug)?))
        }
        _ => None,
    };

    let mut g_plain = ElementGrads {
        logits: Array4::zeros(fwd_plain.logits.raw_dim()),
        features: Array4::zeros(fwd_plain.features.raw_dim()),
    };
    let mut g_aug = ElementGrads {
        logits: Array4::zeros(fwd_aug.logits.raw_dim()),
        features: Array4::zeros(fwd_aug.features.raw_dim()),
    };

    let supervised = batch.supervised_samples() as f32;
    let pairs = b as f32;
    let kd_elements = if cfg.kd_on_pair { supervised } else { pairs };

    let (mut ce_sum, mut kd_sum, mut seg_sum, mut invkd_sum) = (0f64, 0f64, 0f64, 0f64);
    for i in 0..b {
        // Supervised CE on both elements.
        for (fwd, targets, grads) in [
            (&fwd_plain, &batch.y_plain, &mut g_plain),
            (&fwd_aug, &batch.y_aug, &mut g_aug),
        ] {
            let logits = fwd.logits.index_axis(Axis(0), i);
            let (ce, ce_g) = unbiased_cross_entropy_grad(
                &logits,
                &targets[i],
                old_fg,
                cfg.ignore_index,
            )?;
            ce_sum += ce as f64;
            let mut slot = grads.logits.index_axis_mut(Axis(0), i);
            slot.scaled_add(1.0 / supervised, &ce_g);
        }

        if let Some((t_plain, t_aug)) = &teacher_fwd {
            if w.lambda_kd > 0.0 {
                let mut kd_views = vec![(
                    fwd_plain.logits.index_axis(Axis(0), i),
                    t_plain.logits.index_axis(Axis(0), i),
                    &mut g_plain,
                )];
                if cfg.kd_on_pair {
                    kd_views.push((
                        fwd_aug.logits.index_axis(Axis(0), i),
                        t_aug.logits.index_axis(Axis(0), i),
                        &mut g_aug,
                    ));
                }
                for (s_logits, t_logits, grads) in kd_views {
                    let (kd, kd_g) = unbiased_kd_grad(&s_logits, &t_logits)?;
                    kd_sum += kd as f64;
                    let mut slot = grads.logits.index_axis_mut(Axis(0), i);
                    slot.scaled_add(w.lambda_kd as f32 / kd_elements, &kd_g);
                }
            }
            if w.rho_inv_kd > 0.0 {
                let (inv_kd, g) = invariance_kd_loss_grad(
                    &fwd_aug.features.index_axis(Axis(0), i),
                    &t_plain.features.index_axis(Axis(0), i),
                    batch.t_ids[i],
                )?;
                invkd_sum += inv_kd as f64;
                let mut slot = g_aug.features.index_axis_mut(Axis(0), i);
                slot.scaled_add(w.rho_inv_kd as f32 / pairs, &g);
            }
        }

        let (inv_seg, ga, gp) = invariance_seg_loss_grad(
            &fwd_aug.features.index_axis(Axis(0), i),
            &fwd_plain.features.index_axis(Axis(0), i),
            batch.t_ids[i],
        )?;
        seg_sum += inv_seg as f64;
        if w.eta_inv_seg > 0.0 {
            let scale = w.eta_inv_seg as f32 / pairs;
            g_aug
                .features
                .index_axis_mut(Axis(0), i)
                .scaled_add(scale, &ga);
            g_plain
                .features
                .index_axis_mut(Axis(0), i)
                .scaled_add(scale, &gp);
        }
    }

    let ce = ce_sum / supervised as f64;
    let inv_seg = seg_sum / pairs as f64;
    let (kd, inv_kd) = if state.step == 0 {
        (None, None)
    } else {
        (
            Some(kd_sum / kd_elements as f64),
            Some(invkd_sum / pairs as f64),
        )
    };
    let bundle = total_loss(ce, kd, inv_seg, inv_kd, &cfg.weights, state.step)?;

    state.student.zero_grad();
    state
        .student
        .backward(&fwd_plain, Some(&g_plain.logits), Some(&g_plain.features))?;
    state
        .student
        .backward(&fwd_aug, Some(&g_aug.logits), Some(&g_aug.features))?;
    opt.begin_step();
    let mut updated = 0usize;
    state.student.visit_params(&mut |p| {
        updated += 1;
        opt.update(p);
    });
    if updated != param_count {
        return Err(Error::train(format!(
            "optimizer visited {updated} tensors, student has {param_count}"
        )));
    }
    Ok(bundle)
}

fn substream(seed: u64, salt: u64, index: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(
        seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15)
            ^ index.wrapping_mul(0xbf58_476d_1ce4_e5b9),
    )
}

/// The RNG stream [`run_sequence`] partitions with at this seed, exposed
/// so dataset preparation can report the very partitioning training will
/// use.
pub fn partition_rng(seed: u64) -> ChaCha12Rng {
    substream(seed, 0x7061_7274, 0)
}

/// The dataset a sequence run consumes: training tiles (full ground
/// truth; remapping happens per step) and the held-out test tiles.
pub struct RunData<'a> {
    pub labels: &'a LabelSpace,
    pub train: &'a [Tile],
    pub test: &'a [Tile],
}

/// Result of a full sequence run.
pub struct SequenceOutcome {
    pub net: SegNet<f32>,
    /// The sequence actually trained (collapsed to one step offline).
    pub sequence: TaskSequence,
    pub reports: Vec<MetricsReport>,
    pub summaries: Vec<StepSummary>,
}

/// Run every learning step: step 0 trains from scratch; later steps
/// freeze the previous student as teacher and expand the classifier.
/// After each step the full test set is evaluated over the classes seen
/// so far (future classes count as background). With `out_dir` set,
/// checkpoints (`step{t}.ckpt`) and a JSONL loss log are written there.
pub fn run_sequence(
    data: &RunData<'_>,
    seq: &TaskSequence,
    base: &SegNetConfig,
    cfg: &TrainConfig,
    offline: bool,
    out_dir: Option<&Path>,
) -> Result<SequenceOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::train("no training tiles"));
    }
    let (channels, patch, _) = data.train[0].pixels.dim();
    let seq = if offline {
        TaskSequence::from_groups(vec![seq.class_order()], data.labels)?
    } else {
        seq.clone()
    };
    let num_steps = seq.num_steps();

    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::fs::File::create(dir.join("losses.jsonl"))?)
        }
        None => None,
    };

    let records: Vec<_> = data.train.iter().map(|t| t.record.clone()).collect();
    let mut part_rng = partition_rng(cfg.seed);
    let partitions = partition_disjoint(&records, data.labels, &mut part_rng)?;
    let by_id: BTreeMap<&str, &Tile> = data
        .train
        .iter()
        .map(|t| (t.record.id.as_str(), t))
        .collect();

    let mut student: Option<SegNet<f32>> = None;
    let mut reports = Vec::with_capacity(num_steps);
    let mut summaries = Vec::with_capacity(num_steps);

    for spec in &seq.steps {
        let t = spec.index;
        let layout = ClassLayout::for_step(&seq, t)?;
        let (net, teacher) = match student.take() {
            None => {
                let config = SegNetConfig {
                    in_channels: channels,
                    num_classes: layout.num_channels(),
                    seed: cfg.seed,
                    widths: base.widths.clone(),
                    blocks_per_stage: base.blocks_per_stage,
                    feature_dim: base.feature_dim,
                    norm_groups: base.norm_groups,
                };
                if patch % config.spatial_divisor() != 0 {
                    return Err(Error::invalid(format!(
                        "patch {patch} is not divisible by the network's factor {}",
                        config.spatial_divisor()
                    )));
                }
                (SegNet::new(config)?, None)
            }
            Some(prev) => {
                let teacher = prev.clone_frozen();
                let mut net = prev;
                net.expand_classifier(spec.new_classes.len())?;
                (net, Some(teacher))
            }
        };

        // This step's data: the partitions of its new classes.
        let step_partitions: BTreeMap<u8, Vec<_>> = partitions
            .iter()
            .filter(|(c, _)| spec.new_classes.contains(c))
            .map(|(c, v)| (*c, v.clone()))
            .collect();
        let mut split_rng = substream(cfg.seed, 0x7370_6c69, t as u64);
        let (train_parts, val_parts) =
            split_validation(&step_partitions, cfg.val_fraction, &mut split_rng);
        let collect_tiles = |parts: &BTreeMap<u8, Vec<crate::raster::TileRecord>>| -> Result<Vec<Tile>> {
            let mut tiles = Vec::new();
            for recs in parts.values() {
                for rec in recs {
                    let tile = by_id.get(rec.id.as_str()).ok_or_else(|| {
                        Error::data(format!("partitioned tile {} not in dataset", rec.id))
                    })?;
                    tiles.push(Tile {
                        record: rec.clone(),
                        pixels: tile.pixels.clone(),
                        labels: remap_to_set(&tile.labels, &spec.new_classes, cfg.ignore_index),
                    });
                }
            }
            Ok(tiles)
        };
        let train_tiles = collect_tiles(&train_parts)?;
        let val_tiles = collect_tiles(&val_parts)?;

        let mut state = StepState {
            step: t,
            num_steps,
            student: net,
            teacher,
            layout: layout.clone(),
            train_tiles,
            val_tiles,
        };
        let log_sink: Option<&mut dyn Write> = log_file.as_mut().map(|f| f as &mut dyn Write);
        let summary = train_step(&mut state, cfg, log_sink)?;
        summaries.push(summary);

        // Test-set evaluation over the classes seen so far.
        let eval_tiles: Vec<Tile> = data
            .test
            .iter()
            .map(|tile| Tile {
                record: tile.record.clone(),
                pixels: tile.pixels.clone(),
                labels: remap_to_set(&tile.labels, &spec.cumulative, cfg.ignore_index),
            })
            .collect();
        let cm = eval_confusion(
            &state.student,
            &eval_tiles,
            &layout,
            data.labels.num_classes(),
            cfg.ignore_index,
        )?;
        reports.push(MetricsReport::from_matrix(
            t,
            &cm,
            data.labels,
            layout.channel_classes(),
        )?);

        if let Some(dir) = out_dir {
            let meta = CheckpointMeta {
                config: state.student.config().clone(),
                labels: data.labels.clone(),
                channel_classes: layout.channel_classes().to_vec(),
                step: t,
            };
            save_checkpoint(&dir.join(format!("step{t}.ckpt")), &state.student, &meta)?;
        }
        student = Some(state.student);
    }

    Ok(SequenceOutcome {
        net: student.expect("sequence has at least one step"),
        sequence: seq,
        reports,
        summaries,
    })
}
