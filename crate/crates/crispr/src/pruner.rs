//! Structured pruning: persisted masks, zero-masking, and FFN compaction.
//!
//! A mask names channels by their hook address and is tied to the target
//! checkpoint by content fingerprint. Applying a mask zeroes each channel's
//! producing weight column and bias entry, so the channel's activation is
//! identically zero while every tensor keeps its shape — masks can be
//! swapped in and out of the same checkpoint. Compaction physically removes
//! FFN inner channels instead, shrinking the layer; compacted models get a
//! fresh fingerprint because the original channel numbering no longer
//! applies.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HookKey, Model, NeuronId, Sublayer};
use crate::tensor::Mat;

pub const MASK_VERSION: u32 = 1;

/// Default mask size: a few dozen channels out of the whole model.
pub const DEFAULT_TOP_N: usize = 50;

/// Detection configuration a mask was produced under.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskProvenance {
    pub dataset: String,
    pub instruction_ids: Vec<usize>,
    pub sample_ids: Vec<String>,
    pub seed: u64,
    pub trials: usize,
}

/// One masked channel with the bias score that ranked it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskEntry {
    #[serde(flatten)]
    pub neuron: NeuronId,
    pub score: f64,
}

/// An ordered set of channels to prune, tied to one checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneMask {
    pub version: u32,
    pub model_fingerprint: String,
    pub n: usize,
    pub provenance: MaskProvenance,
    pub neurons: Vec<MaskEntry>,
}

impl PruneMask {
    /// Explicit empty mask: applying it is the identity.
    pub fn empty(model_fingerprint: impl Into<String>, provenance: MaskProvenance) -> PruneMask {
        PruneMask {
            version: MASK_VERSION,
            model_fingerprint: model_fingerprint.into(),
            n: 0,
            provenance,
            neurons: Vec::new(),
        }
    }

    pub fn neuron_ids(&self) -> Vec<NeuronId> {
        self.neurons.iter().map(|e| e.neuron).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.version != MASK_VERSION {
            return Err(Error::BadMask(format!(
                "unsupported mask version {} (supported: {MASK_VERSION})",
                self.version
            )));
        }
        if self.model_fingerprint.is_empty() {
            return Err(Error::BadMask("empty model fingerprint".to_string()));
        }
        if self.neurons.len() != self.n {
            return Err(Error::BadMask(format!(
                "n = {} but {} neuron entries",
                self.n,
                self.neurons.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for e in &self.neurons {
            if !e.score.is_finite() {
                return Err(Error::BadMask(format!("non-finite score for {}", e.neuron)));
            }
            if !seen.insert(e.neuron) {
                return Err(Error::BadMask(format!("duplicate neuron {}", e.neuron)));
            }
        }
        for pair in self.neurons.windows(2) {
            if pair[1].score > pair[0].score {
                return Err(Error::BadMask(format!(
                    "scores not descending at {} ({} after {})",
                    pair[1].neuron, pair[1].score, pair[0].score
                )));
            }
        }
        Ok(())
    }
}

/// First `n` entries of a descending ranking, as a mask for the model whose
/// fingerprint is given.
pub fn select_top_n(
    ranking: &[(NeuronId, f64)],
    n: usize,
    model_fingerprint: &str,
    provenance: MaskProvenance,
) -> Result<PruneMask> {
    if n == 0 {
        return Err(Error::ZeroMaskSize);
    }
    if n > ranking.len() {
        return Err(Error::NotEnoughNeurons {
            n,
            available: ranking.len(),
        });
    }
    let mask = PruneMask {
        version: MASK_VERSION,
        model_fingerprint: model_fingerprint.to_string(),
        n,
        provenance,
        neurons: ranking[..n]
            .iter()
            .map(|&(neuron, score)| MaskEntry { neuron, score })
            .collect(),
    };
    mask.validate()?;
    Ok(mask)
}

pub fn save_mask(mask: &PruneMask, path: &Path) -> Result<()> {
    mask.validate()?;
    let text =
        serde_json::to_string_pretty(mask).map_err(|e| Error::json("serializing mask", e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_mask(path: &Path) -> Result<PruneMask> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mask: PruneMask =
        serde_json::from_str(&text).map_err(|e| Error::json(format!("parsing {}", path.display()), e))?;
    mask.validate()?;
    Ok(mask)
}

fn check_mask_addresses(model: &Model, mask: &PruneMask) -> Result<()> {
    if mask.model_fingerprint != model.base_fingerprint() {
        return Err(Error::StaleMask {
            mask: mask.model_fingerprint.clone(),
            model: model.base_fingerprint().to_string(),
        });
    }
    let widths: BTreeMap<HookKey, usize> = model.hook_widths().into_iter().collect();
    for e in &mask.neurons {
        let key = HookKey {
            stack: e.neuron.stack,
            layer: e.neuron.layer,
            sublayer: e.neuron.sublayer,
        };
        match widths.get(&key) {
            None => {
                return Err(Error::UnknownNeuron {
                    neuron: e.neuron.to_string(),
                    detail: format!("model has no hook {key}"),
                })
            }
            Some(&w) if e.neuron.channel >= w => {
                return Err(Error::UnknownNeuron {
                    neuron: e.neuron.to_string(),
                    detail: format!("hook {key} has {w} channels"),
                })
            }
            Some(_) => {}
        }
    }
    Ok(())
}

/// Zeroes each masked channel's producing weight column and bias entry. The
/// result keeps the source fingerprint: masks addressed to the original
/// checkpoint stay applicable, so masking composes.
pub fn apply_mask(model: &Model, mask: &PruneMask) -> Result<Model> {
    check_mask_addresses(model, mask)?;
    let mut tensors = model.tensors().clone();
    for e in &mask.neurons {
        let key = HookKey {
            stack: e.neuron.stack,
            layer: e.neuron.layer,
            sublayer: e.neuron.sublayer,
        };
        let w = tensors
            .get_mut(&format!("{key}.weight"))
            .expect("address checked");
        for r in 0..w.rows {
            w.set(r, e.neuron.channel, 0.0);
        }
        let b = tensors
            .get_mut(&format!("{key}.bias"))
            .expect("address checked");
        b.set(0, e.neuron.channel, 0.0);
    }
    Model::from_parts_with_fingerprint(
        model.config().clone(),
        tensors,
        model.base_fingerprint().to_string(),
    )
}

/// Physically removes masked FFN inner channels: drops the column from the
/// first linear map (weight and bias) and the matching row from the second.
/// Only `ffn.in` channels are compactable; the result is re-fingerprinted
/// because channel numbering shifts.
pub fn compact(model: &Model, mask: &PruneMask) -> Result<Model> {
    check_mask_addresses(model, mask)?;
    let offenders: Vec<String> = mask
        .neurons
        .iter()
        .filter(|e| e.neuron.sublayer != Sublayer::FfnIn)
        .map(|e| e.neuron.to_string())
        .collect();
    if !offenders.is_empty() {
        return Err(Error::CompactUnsupported {
            offenders: offenders.join(", "),
        });
    }

    // Channel sets per FFN, in canonical order.
    let mut removals: BTreeMap<HookKey, BTreeSet<usize>> = BTreeMap::new();
    for e in &mask.neurons {
        removals
            .entry(HookKey {
                stack: e.neuron.stack,
                layer: e.neuron.layer,
                sublayer: Sublayer::FfnIn,
            })
            .or_default()
            .insert(e.neuron.channel);
    }

    let mut tensors = model.tensors().clone();
    for (key, channels) in removals {
        let out_key = HookKey {
            sublayer: Sublayer::FfnOut,
            ..key
        };
        let w_in = &tensors[&format!("{key}.weight")];
        let b_in = &tensors[&format!("{key}.bias")];
        let w_out = &tensors[&format!("{out_key}.weight")];
        let kept: Vec<usize> = (0..w_in.cols).filter(|c| !channels.contains(c)).collect();

        let mut new_w_in = Mat::zeros(w_in.rows, kept.len());
        for r in 0..w_in.rows {
            for (nc, &c) in kept.iter().enumerate() {
                new_w_in.set(r, nc, w_in.get(r, c));
            }
        }
        let mut new_b_in = Mat::zeros(1, kept.len());
        for (nc, &c) in kept.iter().enumerate() {
            new_b_in.set(0, nc, b_in.get(0, c));
        }
        let mut new_w_out = Mat::zeros(kept.len(), w_out.cols);
        for (nr, &r) in kept.iter().enumerate() {
            for c in 0..w_out.cols {
                new_w_out.set(nr, c, w_out.get(r, c));
            }
        }
        tensors.insert(format!("{key}.weight"), new_w_in);
        tensors.insert(format!("{key}.bias"), new_b_in);
        tensors.insert(format!("{out_key}.weight"), new_w_out);
    }
    Model::from_parts(model.config().clone(), tensors)
}
