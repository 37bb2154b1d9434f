//! Experiment configuration: a TOML file with sections `data`, `model`,
//! `losses`, `train`, `sequence`, and `synth`, plus a handful of
//! top-level fields. Every field has a default, so an empty file is a
//! valid experiment; validation reports all problems in one pass.

use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dihedral::TransformId;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::raster::{SequencePlan, SynthConfig};

/// Table-row ablation presets. A preset chooses which loss terms are
/// active and which cross-entropy variant is used; the magnitudes of
/// active terms come from the `[losses]` section.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodPreset {
    /// Plain finetuning: standard CE only.
    Ft,
    /// Unbiased CE plus both invariance terms, no distillation.
    FtUnbiasedCd,
    /// Unbiased CE + unbiased KD.
    Mib,
    /// MiB plus both invariance terms.
    MibCd,
    /// MiB plus the within-student invariance term only.
    MibSegOnly,
    /// MiB plus the cross-model invariance term only.
    MibKdOnly,
    /// Single joint step over all classes.
    Offline,
}

pub const METHOD_NAMES: [&str; 7] = [
    "ft",
    "ft-unbiased-cd",
    "mib",
    "mib+cd",
    "mib+seg-only",
    "mib+kd-only",
    "offline",
];

impl MethodPreset {
    pub fn name(self) -> &'static str {
        match self {
            MethodPreset::Ft => "ft",
            MethodPreset::FtUnbiasedCd => "ft-unbiased-cd",
            MethodPreset::Mib => "mib",
            MethodPreset::MibCd => "mib+cd",
            MethodPreset::MibSegOnly => "mib+seg-only",
            MethodPreset::MibKdOnly => "mib+kd-only",
            MethodPreset::Offline => "offline",
        }
    }

    /// Resolve the preset against configured magnitudes.
    pub fn resolve(self, losses: &LossSection) -> MethodSpec {
        let (kd, seg, inv_kd, unbiased) = match self {
            MethodPreset::Ft => (false, false, false, false),
            MethodPreset::FtUnbiasedCd => (false, true, true, true),
            MethodPreset::Mib => (true, false, false, true),
            MethodPreset::MibCd => (true, true, true, true),
            MethodPreset::MibSegOnly => (true, true, false, true),
            MethodPreset::MibKdOnly => (true, false, true, true),
            MethodPreset::Offline => (false, false, false, true),
        };
        MethodSpec {
            weights: LossWeights {
                lambda_kd: if kd { losses.lambda_kd } else { 0.0 },
                eta_inv_seg: if seg { losses.eta_inv_seg } else { 0.0 },
                rho_inv_kd: if inv_kd { losses.rho_inv_kd } else { 0.0 },
            },
            unbiased_ce: unbiased,
            offline: self == MethodPreset::Offline,
        }
    }
}

impl FromStr for MethodPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ft" => Ok(MethodPreset::Ft),
            "ft-unbiased-cd" => Ok(MethodPreset::FtUnbiasedCd),
            "mib" => Ok(MethodPreset::Mib),
            "mib+cd" => Ok(MethodPreset::MibCd),
            "mib+seg-only" => Ok(MethodPreset::MibSegOnly),
            "mib+kd-only" => Ok(MethodPreset::MibKdOnly),
            "offline" => Ok(MethodPreset::Offline),
            other => Err(Error::config(format!(
                "unknown method {other:?}; expected one of {}",
                METHOD_NAMES.join(", ")
            ))),
        }
    }
}

/// A preset resolved to concrete knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSpec {
    pub weights: LossWeights,
    pub unbiased_ce: bool,
    pub offline: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset directory; overridable by the data-root environment
    /// variable and the CLI.
    pub root: Option<PathBuf>,
    /// Pixels with this ground-truth value are excluded from CE and
    /// evaluation.
    pub ignore_index: Option<u8>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            root: None,
            ignore_index: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub feature_dim: usize,
    pub norm_groups: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            widths: vec![16, 32, 64],
            blocks_per_stage: 1,
            feature_dim: 16,
            norm_groups: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    /// Distillation weight; explicit so every experiment records it.
    pub lambda_kd: f64,
    pub eta_inv_seg: f64,
    pub rho_inv_kd: f64,
    /// Apply KD to both elements of the augmentation pair.
    pub kd_on_pair: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            lambda_kd: 1.0,
            eta_inv_seg: 0.1,
            rho_inv_kd: 0.1,
            kd_on_pair: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    /// Tiles per batch; pairing doubles the supervised samples.
    pub batch_size: usize,
    pub base_lr: f64,
    /// Base rate for steps flagged late.
    pub late_lr: f64,
    /// Step indices using `late_lr`; empty means the final step only.
    pub late_steps: Vec<usize>,
    pub weight_decay: f64,
    /// Held-out fraction of each step's training tiles.
    pub val_fraction: f64,
    /// Transform allow-set by name; empty means all 8.
    pub transforms: Vec<String>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 80,
            batch_size: 8,
            base_lr: 1e-3,
            late_lr: 1e-4,
            late_steps: Vec::new(),
            weight_decay: 1e-4,
            val_fraction: 0.15,
            transforms: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceSection {
    /// Named plan ("5S", "3-2-1"), group sizes ("2-2"), or overridden by
    /// `explicit`.
    pub name: String,
    /// Explicit class-id groups; takes precedence over `name`.
    pub explicit: Option<Vec<Vec<u8>>>,
}

impl Default for SequenceSection {
    fn default() -> Self {
        SequenceSection {
            name: "2-2".to_string(),
            explicit: None,
        }
    }
}

impl SequenceSection {
    pub fn plan(&self) -> Result<SequencePlan> {
        match &self.explicit {
            Some(groups) => Ok(SequencePlan::Explicit(groups.clone())),
            None => self.name.parse(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    /// Foreground class count.
    pub num_classes: usize,
    pub num_tiles: usize,
    pub test_tiles: usize,
    pub size: usize,
    pub channels: usize,
    pub noise_sigma: f32,
    pub min_shapes: usize,
    pub max_shapes: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        let base = SynthConfig::default();
        SynthSection {
            num_classes: 4,
            num_tiles: base.num_tiles,
            test_tiles: 60,
            size: base.size,
            channels: base.channels,
            noise_sigma: base.noise_sigma,
            min_shapes: base.min_shapes,
            max_shapes: base.max_shapes,
        }
    }
}

impl SynthSection {
    pub fn to_synth_config(&self, num_tiles: usize) -> SynthConfig {
        SynthConfig {
            num_tiles,
            size: self.size,
            channels: self.channels,
            noise_sigma: self.noise_sigma,
            min_shapes: self.min_shapes,
            max_shapes: self.max_shapes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub method: String,
    /// Keep artifacts free of wall-clock values so reruns are
    /// byte-identical.
    pub deterministic: bool,
    /// Parent directory for run outputs.
    pub run_root: PathBuf,
    pub data: DataSection,
    pub model: ModelSection,
    pub losses: LossSection,
    pub train: TrainSection,
    pub sequence: SequenceSection,
    pub synth: SynthSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            method: "mib+cd".to_string(),
            deterministic: true,
            run_root: PathBuf::from("runs"),
            data: DataSection::default(),
            model: ModelSection::default(),
            losses: LossSection::default(),
            train: TrainSection::default(),
            sequence: SequenceSection::default(),
            synth: SynthSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn method_preset(&self) -> Result<MethodPreset> {
        self.method.parse()
    }

    /// Transform allow-set resolved to ids; empty config means all 8.
    pub fn transform_allow(&self) -> Result<Vec<TransformId>> {
        if self.train.transforms.is_empty() {
            return Ok(crate::dihedral::ALL_TRANSFORMS.to_vec());
        }
        self.train
            .transforms
            .iter()
            .map(|n| n.parse::<TransformId>())
            .collect()
    }

    /// Check every field, reporting all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(e) = self.method_preset() {
            problems.push(e.to_string());
        }
        if self.sequence.explicit.is_none() {
            if let Err(e) = SequencePlan::from_str(&self.sequence.name) {
                problems.push(format!("sequence.name: {e}"));
            }
        }
        let l = &self.losses;
        for (name, v) in [
            ("losses.lambda_kd", l.lambda_kd),
            ("losses.eta_inv_seg", l.eta_inv_seg),
            ("losses.rho_inv_kd", l.rho_inv_kd),
        ] {
            if !v.is_finite() || v < 0.0 {
                problems.push(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        let t = &self.train;
        if t.epochs == 0 {
            problems.push("train.epochs must be positive".to_string());
        }
        if t.batch_size == 0 {
            problems.push("train.batch_size must be positive".to_string());
        }
        for (name, v) in [("train.base_lr", t.base_lr), ("train.late_lr", t.late_lr)] {
            if !v.is_finite() || v <= 0.0 {
                problems.push(format!("{name} must be positive, got {v}"));
            }
        }
        if !t.weight_decay.is_finite() || t.weight_decay < 0.0 {
            problems.push(format!(
                "train.weight_decay must be finite and non-negative, got {}",
                t.weight_decay
            ));
        }
        if !(t.val_fraction > 0.0 && t.val_fraction < 0.5) {
            problems.push(format!(
                "train.val_fraction must lie in (0, 0.5), got {}",
                t.val_fraction
            ));
        }
        for name in &t.transforms {
            if name.parse::<TransformId>().is_err() {
                problems.push(format!("train.transforms: unknown transform {name:?}"));
            }
        }
        let m = &self.model;
        if m.widths.is_empty() {
            problems.push("model.widths must list at least one stage".to_string());
        }
        if m.blocks_per_stage == 0 {
            problems.push("model.blocks_per_stage must be positive".to_string());
        }
        if m.norm_groups == 0 {
            problems.push("model.norm_groups must be positive".to_string());
        } else {
            for &w in &m.widths {
                if w == 0 || w % m.norm_groups != 0 {
                    problems.push(format!(
                        "model.widths entry {w} must be positive and divisible by norm_groups {}",
                        m.norm_groups
                    ));
                }
            }
            if m.feature_dim == 0 || m.feature_dim % m.norm_groups != 0 {
                problems.push(format!(
                    "model.feature_dim {} must be positive and divisible by norm_groups {}",
                    m.feature_dim, m.norm_groups
                ));
            }
        }
        let s = &self.synth;
        if s.num_classes < 2 {
            problems.push("synth.num_classes must be at least 2".to_string());
        }
        if s.num_tiles == 0 || s.test_tiles == 0 {
            problems.push("synth tile counts must be positive".to_string());
        }
        if s.size < 16 {
            problems.push(format!("synth.size must be at least 16, got {}", s.size));
        }
        if s.min_shapes == 0 || s.max_shapes < s.min_shapes {
            problems.push("synth shape counts must satisfy 1 <= min <= max".to_string());
        }
        if !s.noise_sigma.is_finite() || s.noise_sigma < 0.0 {
            problems.push(format!(
                "synth.noise_sigma must be finite and non-negative, got {}",
                s.noise_sigma
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }
}
