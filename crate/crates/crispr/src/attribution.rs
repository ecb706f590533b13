//! Per-token neuron attribution: activation times gradient at every hook.
//!
//! An attribution entry answers "how much did this channel, at this sequence
//! position, push the teacher-forced label probability": the recorded
//! activation multiplied by the exact derivative of the label probability
//! with respect to that activation. Maps are always f64 — the downstream
//! biased-minus-golden subtraction is cancellation-prone.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::model::HookKey;
use crate::runtime::{ActivationTape, GradientMap};
use crate::tensor::Mat;

/// Which teacher-forced label the attribution was computed against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Golden,
    Biased,
}

impl fmt::Display for LabelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelKind::Golden => "golden",
            LabelKind::Biased => "biased",
        })
    }
}

/// Token-granularity attribution scores for one instance and one label.
/// One positions-by-channels matrix per hook point.
#[derive(Debug, Clone)]
pub struct TokenAttribution {
    pub instance_id: String,
    pub label_kind: LabelKind,
    maps: BTreeMap<HookKey, Mat>,
}

impl TokenAttribution {
    pub fn map(&self, key: HookKey) -> Result<&Mat> {
        self.maps.get(&key).ok_or(Error::MissingHook {
            layer_path: key.to_string(),
        })
    }

    pub fn hook_keys(&self) -> Vec<HookKey> {
        self.maps.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&HookKey, &Mat)> {
        self.maps.iter()
    }

    /// Errors unless `other` covers the same hooks with the same shapes.
    pub fn check_congruent(&self, other: &TokenAttribution) -> Result<()> {
        if self.maps.len() != other.maps.len() {
            return Err(Error::CoverageMismatch {
                layer_path: "(hook set)".to_string(),
                detail: format!("{} hooks vs {}", self.maps.len(), other.maps.len()),
            });
        }
        for (key, mine) in &self.maps {
            let theirs = other.maps.get(key).ok_or(Error::CoverageMismatch {
                layer_path: key.to_string(),
                detail: "hook missing from second operand".to_string(),
            })?;
            if mine.shape() != theirs.shape() {
                return Err(Error::ShapeIncongruent {
                    layer_path: key.to_string(),
                    detail: format!("{:?} vs {:?}", mine.shape(), theirs.shape()),
                });
            }
        }
        Ok(())
    }

    pub(crate) fn from_maps(
        instance_id: String,
        label_kind: LabelKind,
        maps: BTreeMap<HookKey, Mat>,
    ) -> Self {
        TokenAttribution {
            instance_id,
            label_kind,
            maps,
        }
    }
}

/// Elementwise activation x gradient over every hook point of a tape.
pub fn neuron_attribution(
    tape: &ActivationTape,
    grads: &GradientMap,
    instance_id: &str,
    label_kind: LabelKind,
) -> Result<TokenAttribution> {
    let mut maps = BTreeMap::new();
    for key in tape.hook_keys() {
        let act = tape.activation(key)?;
        let grad = grads.gradient(key)?;
        if act.shape() != grad.shape() {
            return Err(Error::ShapeIncongruent {
                layer_path: key.to_string(),
                detail: format!(
                    "activation {:?} vs gradient {:?}",
                    act.shape(),
                    grad.shape()
                ),
            });
        }
        let mut out = Mat::zeros(act.rows, act.cols);
        for (o, (a, g)) in out.data.iter_mut().zip(act.data.iter().zip(&grad.data)) {
            *o = a * g;
        }
        if !out.is_finite() {
            return Err(Error::NonFinite {
                name: key.to_string(),
            });
        }
        maps.insert(key, out);
    }
    Ok(TokenAttribution::from_maps(
        instance_id.to_string(),
        label_kind,
        maps,
    ))
}

/// Entrywise max(score, 0); label kind and instance are preserved.
pub fn clamp_nonnegative(attr: &TokenAttribution) -> TokenAttribution {
    let maps = attr
        .maps
        .iter()
        .map(|(&key, m)| {
            let mut c = m.clone();
            for v in &mut c.data {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            (key, c)
        })
        .collect();
    TokenAttribution::from_maps(attr.instance_id.clone(), attr.label_kind, maps)
}

// ── debug dump ────────────────────────────────────────────────────────────

/// Writes the attribution maps in the checkpoint container format, one
/// tensor per hook, with the instance id and label kind in the metadata.
pub fn save_attribution(attr: &TokenAttribution, path: &Path) -> Result<()> {
    let tensors: BTreeMap<String, Mat> = attr
        .maps
        .iter()
        .map(|(key, m)| (key.to_string(), m.clone()))
        .collect();
    let mut extra = BTreeMap::new();
    extra.insert(
        "instance_id".to_string(),
        serde_json::Value::String(attr.instance_id.clone()),
    );
    extra.insert(
        "label_kind".to_string(),
        serde_json::Value::String(attr.label_kind.to_string()),
    );
    checkpoint::save_tensors(path, extra, &tensors)
}

/// Reads a dump written by [`save_attribution`].
pub fn load_attribution(path: &Path) -> Result<TokenAttribution> {
    let container = checkpoint::load_tensors(path)?;
    let get = |field: &str| -> Result<String> {
        container
            .extra
            .get(field)
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or_else(|| Error::Metadata(format!("attribution dump missing {field}")))
    };
    let instance_id = get("instance_id")?;
    let label_kind = match get("label_kind")?.as_str() {
        "golden" => LabelKind::Golden,
        "biased" => LabelKind::Biased,
        other => {
            return Err(Error::Metadata(format!(
                "unknown label kind {other:?} in attribution dump"
            )))
        }
    };
    let mut maps = BTreeMap::new();
    for (name, mat) in container.tensors {
        let key: HookKey = name
            .parse()
            .map_err(|_| Error::Metadata(format!("tensor name {name:?} is not a hook path")))?;
        maps.insert(key, mat);
    }
    Ok(TokenAttribution::from_maps(instance_id, label_kind, maps))
}
