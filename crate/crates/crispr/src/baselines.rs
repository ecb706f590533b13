//! Contextual calibration baselines.
//!
//! Both baselines estimate the model's class prior from content-free inputs
//! and divide it out of each instance's class distribution. The contextual
//! variant substitutes the literal "N/A" for the instance content; the
//! domain-context variant averages over bags of random tokens drawn from the
//! dataset's own texts, so the prior is estimated in-domain.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{render_prompt_parts, Dataset};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::runtime::score_labels;
use crate::tokenizer;

/// Probability floor applied before renormalizing a prior, so later division
/// by the prior is always defined.
pub const CALIBRATION_FLOOR: f64 = 1e-6;

/// Number of random-token bags the domain-context prior averages over.
pub const DC_DEFAULT_BAGS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationMode {
    Cc,
    Dc,
}

/// What the prior was estimated from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationProvenance {
    /// Rendered content-free texts substituted for (context, question).
    pub content_free_inputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Per-class prior probability estimated from content-free inputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationVector {
    pub mode: CalibrationMode,
    pub p_cf: Vec<f64>,
    pub provenance: CalibrationProvenance,
}

impl CalibrationVector {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::json("serializing calibration vector", e))?;
        std::fs::write(path, text + "\n")
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// Numerically safe softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn floor_and_normalize(mut p: Vec<f64>) -> Vec<f64> {
    for v in &mut p {
        if *v < CALIBRATION_FLOOR {
            *v = CALIBRATION_FLOOR;
        }
    }
    let sum: f64 = p.iter().sum();
    for v in &mut p {
        *v /= sum;
    }
    p
}

/// Class distribution for one content-free (context, question) pair.
fn class_distribution(
    model: &Model,
    template: &str,
    context: &str,
    question: &str,
    classes: &[String],
) -> Result<Vec<f64>> {
    let prompt = render_prompt_parts(template, context, question, classes);
    let scores = score_labels(model, &prompt, "", classes)?;
    Ok(softmax(&scores))
}

/// Token count of a text under the shared tokenizer; empty text counts 0.
fn token_count(text: &str) -> Result<usize> {
    if text.is_empty() {
        return Ok(0);
    }
    Ok(tokenizer::tokenize(text)?.len())
}

/// Mean token length (rounded, at least 1 when the pool is non-empty).
fn mean_len(total: usize, count: usize) -> usize {
    if count == 0 {
        return 0;
    }
    let mean = (total as f64 / count as f64).round() as usize;
    mean.max(1)
}

fn sample_bag(pool: &[u32], len: usize, rng: &mut ChaCha8Rng) -> String {
    if pool.is_empty() || len == 0 {
        return String::new();
    }
    let ids: Vec<u32> = (0..len).map(|_| pool[rng.gen_range(0..pool.len())]).collect();
    tokenizer::detokenize(&ids)
}

/// Estimates the per-class prior for one instruction template and one choice
/// list. `dataset` supplies the in-domain token statistics and is required
/// for the domain-context mode.
pub fn content_free_distribution(
    model: &Model,
    template: &str,
    classes: &[String],
    mode: CalibrationMode,
    dataset: Option<&Dataset>,
    seed: u64,
) -> Result<CalibrationVector> {
    if classes.len() < 2 {
        return Err(Error::TooFewClasses {
            got: classes.len(),
        });
    }
    match mode {
        CalibrationMode::Cc => {
            let p = class_distribution(model, template, "N/A", "N/A", classes)?;
            Ok(CalibrationVector {
                mode,
                p_cf: floor_and_normalize(p),
                provenance: CalibrationProvenance {
                    content_free_inputs: vec!["N/A".to_string()],
                    seed: None,
                },
            })
        }
        CalibrationMode::Dc => {
            let dataset = dataset.ok_or(Error::DcNeedsDataset)?;

            // In-domain token pools, frequency-weighted by construction.
            let mut context_pool = Vec::new();
            let mut question_pool = Vec::new();
            let (mut ctx_total, mut q_total) = (0usize, 0usize);
            for inst in &dataset.instances {
                ctx_total += token_count(&inst.context)?;
                q_total += token_count(&inst.question)?;
                if !inst.context.is_empty() {
                    context_pool.extend(tokenizer::tokenize(&inst.context)?);
                }
                if !inst.question.is_empty() {
                    question_pool.extend(tokenizer::tokenize(&inst.question)?);
                }
            }
            let n = dataset.instances.len();
            let ctx_len = mean_len(ctx_total, n);
            let q_len = mean_len(q_total, n);

            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut mean = vec![0.0; classes.len()];
            let mut inputs = Vec::with_capacity(DC_DEFAULT_BAGS);
            for _ in 0..DC_DEFAULT_BAGS {
                let ctx = sample_bag(&context_pool, ctx_len, &mut rng);
                let q = sample_bag(&question_pool, q_len, &mut rng);
                let p = class_distribution(model, template, &ctx, &q, classes)?;
                for (m, v) in mean.iter_mut().zip(&p) {
                    *m += v;
                }
                inputs.push(format!("{ctx}\u{1f}{q}"));
            }
            for m in &mut mean {
                *m /= DC_DEFAULT_BAGS as f64;
            }
            Ok(CalibrationVector {
                mode,
                p_cf: floor_and_normalize(mean),
                provenance: CalibrationProvenance {
                    content_free_inputs: inputs,
                    seed: Some(seed),
                },
            })
        }
    }
}

/// Divides the prior out of a probability vector and renormalizes.
pub fn calibrate_probabilities(q: &[f64], cal: &CalibrationVector) -> Result<Vec<f64>> {
    if q.len() != cal.p_cf.len() {
        return Err(Error::CalibrationLengthMismatch {
            cal: cal.p_cf.len(),
            scores: q.len(),
        });
    }
    let mut out: Vec<f64> = q.iter().zip(&cal.p_cf).map(|(&v, &p)| v / p).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// Softmaxes raw class scores, then divides the prior out. The argmax of the
/// result is the calibrated prediction.
pub fn calibrate(scores: &[f64], cal: &CalibrationVector) -> Result<Vec<f64>> {
    if scores.len() != cal.p_cf.len() {
        return Err(Error::CalibrationLengthMismatch {
            cal: cal.p_cf.len(),
            scores: scores.len(),
        });
    }
    calibrate_probabilities(&softmax(scores), cal)
}
