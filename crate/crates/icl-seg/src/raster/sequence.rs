//! Task sequence construction and per-step label remapping.

use std::str::FromStr;

use ndarray::Array2;

use crate::error::{Error, Result};

use super::{LabelSpace, StepSpec, TaskSequence, BACKGROUND};

/// How a task sequence is specified.
///
/// `Named` covers the two benchmark presets over the aerial label space:
/// `"3-2-1"` groups building/tree/clutter, then impervious surfaces and low
/// vegetation, then car; `"5S"` uses the same class order one class at a
/// time with clutter left out. Any other dash-separated list of counts
/// (e.g. `"2-2"`) consumes the foreground classes in ascending id order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SequencePlan {
    Named(String),
    Sizes(Vec<usize>),
    Explicit(Vec<Vec<u8>>),
}

impl FromStr for SequencePlan {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("5s") || s == "3-2-1" {
            return Ok(SequencePlan::Named(s.to_uppercase()));
        }
        let sizes: std::result::Result<Vec<usize>, _> =
            s.split('-').map(|p| p.trim().parse::<usize>()).collect();
        match sizes {
            Ok(v) if !v.is_empty() => Ok(SequencePlan::Sizes(v)),
            _ => Err(Error::invalid(format!(
                "cannot parse sequence {s:?}: expected \"3-2-1\", \"5S\", or dash-separated sizes"
            ))),
        }
    }
}

const PRESET_321: [&[&str]; 3] = [
    &["building", "tree", "clutter"],
    &["impervious_surfaces", "low_vegetation"],
    &["car"],
];

const PRESET_5S: [&[&str]; 5] = [
    &["building"],
    &["tree"],
    &["impervious_surfaces"],
    &["low_vegetation"],
    &["car"],
];

/// Build a validated [`TaskSequence`] from a plan over a label space.
pub fn make_task_sequence(plan: &SequencePlan, labels: &LabelSpace) -> Result<TaskSequence> {
    let groups: Vec<Vec<u8>> = match plan {
        SequencePlan::Named(name) => {
            let preset: &[&[&str]] = match name.as_str() {
                "3-2-1" => &PRESET_321,
                "5S" => &PRESET_5S,
                other => return Err(Error::invalid(format!("unknown named sequence {other:?}"))),
            };
            preset
                .iter()
                .map(|step| {
                    step.iter()
                        .map(|class_name| {
                            labels.id_of(class_name).ok_or_else(|| {
                                Error::invalid(format!(
                                    "sequence {name} needs class {class_name:?}, absent from the label space"
                                ))
                            })
                        })
                        .collect::<Result<Vec<u8>>>()
                })
                .collect::<Result<Vec<_>>>()?
        }
        SequencePlan::Sizes(sizes) => {
            let foreground = labels.foreground_ids();
            let total: usize = sizes.iter().sum();
            if total != foreground.len() {
                return Err(Error::invalid(format!(
                    "sequence sizes sum to {total} but the label space has {} foreground classes",
                    foreground.len()
                )));
            }
            let mut it = foreground.into_iter();
            sizes
                .iter()
                .map(|&n| (&mut it).take(n).collect())
                .collect()
        }
        SequencePlan::Explicit(groups) => groups.clone(),
    };
    TaskSequence::from_groups(groups, labels)
}

/// Remap a mask of global class ids for one learning step: values in the
/// step's new classes are kept, everything else (old classes, future
/// classes, anything unseen) becomes background. This is what creates the
/// background shift between steps.
pub fn remap_labels(mask: &Array2<u8>, step: &StepSpec) -> Array2<u8> {
    remap_to_set(mask, &step.new_classes, None)
}

/// Keep the listed ids (plus an optional pass-through value, e.g. an
/// ignore index) and map everything else to background.
pub fn remap_to_set(mask: &Array2<u8>, keep_ids: &[u8], passthrough: Option<u8>) -> Array2<u8> {
    let mut keep = [false; 256];
    for &c in keep_ids {
        keep[c as usize] = true;
    }
    if let Some(p) = passthrough {
        keep[p as usize] = true;
    }
    mask.mapv(|v| if keep[v as usize] { v } else { BACKGROUND })
}
