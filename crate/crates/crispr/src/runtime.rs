//! Teacher-forced scoring and the recording forward/backward passes.
//!
//! The encoder consumes the rendered prompt; the decoder is teacher-forced on
//! a class label (no generation anywhere). A forward pass records the
//! activation at every hook point — the output of each linear sublayer after
//! its bias — and the backward pass returns the exact derivative of the
//! teacher-forced target probability with respect to each recorded activation,
//! treating that activation as an independent input of the downstream
//! computation. `ActivationTape::replay_with_override` re-runs just the
//! downstream computation with one activation entry perturbed, which is the
//! finite-difference counterpart of the same contract.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Op, MASK_NEG};
use crate::model::{HookKey, Model, Stack, Sublayer};
use crate::tensor::Mat;
use crate::tokenizer;

/// Decoder start token; also pads decoder positions past the target length.
pub const DECODER_START: u32 = tokenizer::START_ID;

// ── tape and gradients ────────────────────────────────────────────────────

/// Recorded forward pass: every hook-point activation plus enough structure to
/// re-run the computation downstream of any recorded entry.
pub struct ActivationTape {
    graph: Graph,
    hooks: BTreeMap<HookKey, NodeId>,
    expected_hooks: Vec<HookKey>,
    logits_node: NodeId,
    prob_node: NodeId,
    /// Product of teacher-forced target-token probabilities, exp(sum log p).
    pub target_prob: f64,
    /// log p(token_t | prefix) for each target token.
    pub token_log_probs: Vec<f64>,
    pub encoder_len: usize,
    /// Decoder positions actually materialized (>= target_len when padded).
    pub decoder_positions: usize,
    pub target_len: usize,
}

impl ActivationTape {
    /// Recorded activation at a hook point: positions x channels.
    pub fn activation(&self, key: HookKey) -> Result<&Mat> {
        self.hooks
            .get(&key)
            .map(|&id| self.graph.value(id))
            .ok_or(Error::MissingHook {
                layer_path: key.to_string(),
            })
    }

    pub fn hook_keys(&self) -> Vec<HookKey> {
        self.hooks.keys().copied().collect()
    }

    /// Teacher-forced output logits, decoder positions x vocab.
    pub fn logits(&self) -> &Mat {
        self.graph.value(self.logits_node)
    }

    /// Overrides one recorded activation entry and recomputes only the
    /// downstream computation, returning the perturbed target probability.
    pub fn replay_with_override(
        &self,
        key: HookKey,
        position: usize,
        channel: usize,
        value: f64,
    ) -> Result<f64> {
        let &node = self.hooks.get(&key).ok_or(Error::MissingHook {
            layer_path: key.to_string(),
        })?;
        let act = self.graph.value(node);
        if position >= act.rows {
            return Err(Error::PositionOutOfRange {
                position,
                rows: act.rows,
                layer_path: key.to_string(),
            });
        }
        if channel >= act.cols {
            return Err(Error::UnknownNeuron {
                neuron: format!("{key}.{channel}"),
                detail: format!("hook has {} channels", act.cols),
            });
        }
        Ok(self
            .graph
            .replay_scalar(node, position, channel, value, self.prob_node))
    }
}

/// d(target_prob)/d(activation) for every hook point of a tape.
pub struct GradientMap {
    grads: BTreeMap<HookKey, Mat>,
}

impl GradientMap {
    pub fn gradient(&self, key: HookKey) -> Result<&Mat> {
        self.grads.get(&key).ok_or(Error::MissingHook {
            layer_path: key.to_string(),
        })
    }

    pub fn hook_keys(&self) -> Vec<HookKey> {
        self.grads.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&HookKey, &Mat)> {
        self.grads.iter()
    }
}

// ── text encoding ─────────────────────────────────────────────────────────

fn check_token_seq(model: &Model, ids: &[u32], context: &str) -> Result<()> {
    let vocab = model.config().vocab_size;
    for &id in ids {
        if id as usize >= vocab {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: vocab,
            });
        }
    }
    if ids.len() > model.config().max_seq_len {
        return Err(Error::SequenceTooLong {
            len: ids.len(),
            max: model.config().max_seq_len,
            context: context.to_string(),
        });
    }
    Ok(())
}

/// Encoder text is the instruction joined with the input by a newline; either
/// part may be empty as long as the whole is not.
pub fn encode_prompt(model: &Model, instruction: &str, input: &str) -> Result<Vec<u32>> {
    let text = match (instruction.is_empty(), input.is_empty()) {
        (false, false) => format!("{instruction}\n{input}"),
        (false, true) => instruction.to_string(),
        (true, false) => input.to_string(),
        (true, true) => return Err(Error::EmptyText),
    };
    let ids = tokenizer::tokenize(&text)?;
    check_token_seq(model, &ids, "encoder input")?;
    Ok(ids)
}

// ── forward pass ──────────────────────────────────────────────────────────

struct TapeBuilder<'m> {
    model: &'m Model,
    graph: Graph,
    hooks: BTreeMap<HookKey, NodeId>,
}

impl<'m> TapeBuilder<'m> {
    fn new(model: &'m Model) -> Self {
        TapeBuilder {
            model,
            graph: Graph::new(),
            hooks: BTreeMap::new(),
        }
    }

    fn embed(&mut self, ids: &[u32]) -> NodeId {
        let emb = self.model.embedding();
        let mut x = Mat::zeros(ids.len(), emb.cols);
        for (r, &id) in ids.iter().enumerate() {
            x.row_mut(r).copy_from_slice(emb.row(id as usize));
        }
        self.graph.constant(x)
    }

    /// Linear sublayer with bias; records the hook and checks finiteness.
    fn linear(&mut self, input: NodeId, key: HookKey) -> Result<NodeId> {
        let (w, b) = self.model.linear(key);
        let wn = self.graph.constant(w.clone());
        let bn = self.graph.constant(b.clone());
        let mm = self.graph.push(Op::MatMul(input, wn));
        let out = self.graph.push(Op::AddRow(mm, bn));
        if !self.graph.value(out).is_finite() {
            return Err(Error::NonFiniteActivation {
                layer_path: key.to_string(),
            });
        }
        self.hooks.insert(key, out);
        Ok(out)
    }

    /// Multi-head attention. `queries` and `keys_values` are already
    /// normalized inputs; for self-attention they are the same node.
    fn attention(
        &mut self,
        queries: NodeId,
        keys_values: NodeId,
        stack: Stack,
        layer: usize,
        cross: bool,
        causal: bool,
    ) -> Result<NodeId> {
        let (q_key, k_key, v_key, o_key) = if cross {
            (
                Sublayer::CrossAttnQ,
                Sublayer::CrossAttnK,
                Sublayer::CrossAttnV,
                Sublayer::CrossAttnO,
            )
        } else {
            (
                Sublayer::SelfAttnQ,
                Sublayer::SelfAttnK,
                Sublayer::SelfAttnV,
                Sublayer::SelfAttnO,
            )
        };
        let hook = |sublayer| HookKey {
            stack,
            layer,
            sublayer,
        };
        let q = self.linear(queries, hook(q_key))?;
        let k = self.linear(keys_values, hook(k_key))?;
        let v = self.linear(keys_values, hook(v_key))?;

        let config = self.model.config();
        let d_head = config.d_head();
        let scale = 1.0 / (d_head as f64).sqrt();
        let mask = if causal {
            let p = self.graph.value(q).rows;
            let mut m = Mat::zeros(p, p);
            for r in 0..p {
                for c in r + 1..p {
                    m.set(r, c, MASK_NEG);
                }
            }
            Some(self.graph.constant(m))
        } else {
            None
        };

        let mut parts = Vec::with_capacity(config.n_heads);
        for h in 0..config.n_heads {
            let start = h * d_head;
            let qh = self.graph.push(Op::SliceCols(q, start, d_head));
            let kh = self.graph.push(Op::SliceCols(k, start, d_head));
            let vh = self.graph.push(Op::SliceCols(v, start, d_head));
            let mut scores = self.graph.push(Op::MatMulTransB(qh, kh));
            scores = self.graph.push(Op::Scale(scores, scale));
            if let Some(mask) = mask {
                scores = self.graph.push(Op::Add(scores, mask));
            }
            let probs = self.graph.push(Op::SoftmaxRows(scores));
            parts.push(self.graph.push(Op::MatMul(probs, vh)));
        }
        let cat = self.graph.push(Op::ConcatCols(parts));
        self.linear(cat, hook(o_key))
    }

    fn ffn(&mut self, input: NodeId, stack: Stack, layer: usize) -> Result<NodeId> {
        let u = self.linear(
            input,
            HookKey {
                stack,
                layer,
                sublayer: Sublayer::FfnIn,
            },
        )?;
        let g = self.graph.push(Op::Gelu(u));
        self.linear(
            g,
            HookKey {
                stack,
                layer,
                sublayer: Sublayer::FfnOut,
            },
        )
    }

    /// Encoder stack over the prompt tokens; returns the normalized output.
    fn build_encoder(&mut self, enc_ids: &[u32]) -> Result<NodeId> {
        let config = self.model.config();
        let mut x = self.embed(enc_ids);
        for layer in 0..config.n_encoder_layers {
            let a = self.graph.push(Op::RmsNorm(x));
            let attn = self.attention(a, a, Stack::Encoder, layer, false, false)?;
            x = self.graph.push(Op::Add(x, attn));
            let a2 = self.graph.push(Op::RmsNorm(x));
            let f = self.ffn(a2, Stack::Encoder, layer)?;
            x = self.graph.push(Op::Add(x, f));
        }
        Ok(self.graph.push(Op::RmsNorm(x)))
    }

    /// Decoder stack, output projection, and teacher-forced log-probability
    /// selection. Returns (logits, target probability, selected log-probs).
    fn build_decoder(
        &mut self,
        enc_out: NodeId,
        dec_ids: &[u32],
        target_ids: &[u32],
    ) -> Result<(NodeId, NodeId, NodeId)> {
        let config = self.model.config();
        let mut y = self.embed(dec_ids);
        for layer in 0..config.n_decoder_layers {
            let a = self.graph.push(Op::RmsNorm(y));
            let sa = self.attention(a, a, Stack::Decoder, layer, false, true)?;
            y = self.graph.push(Op::Add(y, sa));
            let a2 = self.graph.push(Op::RmsNorm(y));
            let ca = self.attention(a2, enc_out, Stack::Decoder, layer, true, false)?;
            y = self.graph.push(Op::Add(y, ca));
            let a3 = self.graph.push(Op::RmsNorm(y));
            let f = self.ffn(a3, Stack::Decoder, layer)?;
            y = self.graph.push(Op::Add(y, f));
        }
        let dec_out = self.graph.push(Op::RmsNorm(y));

        let (wp, bp) = self.model.output_proj();
        let wp_node = self.graph.constant(wp.clone());
        let bp_node = self.graph.constant(bp.clone());
        let mm = self.graph.push(Op::MatMul(dec_out, wp_node));
        let logits = self.graph.push(Op::AddRow(mm, bp_node));
        if !self.graph.value(logits).is_finite() {
            return Err(Error::NonFiniteActivation {
                layer_path: "output_proj".to_string(),
            });
        }

        let lsm = self.graph.push(Op::LogSoftmaxRows(logits));
        let picks: Vec<(usize, usize)> = target_ids
            .iter()
            .enumerate()
            .map(|(p, &id)| (p, id as usize))
            .collect();
        let sel = self.graph.push(Op::SelectEntries(lsm, picks));
        let total = self.graph.push(Op::SumAll(sel));
        let prob = self.graph.push(Op::Exp(total));
        Ok((logits, prob, sel))
    }
}

/// Teacher-forced decoder input: position 0 consumes the start token and
/// predicts target[0]; position p consumes target[p-1]. Positions past the
/// target are padded with the start token and predict nothing.
fn decoder_input(target_ids: &[u32], positions: usize) -> Vec<u32> {
    let mut dec_ids = Vec::with_capacity(positions);
    dec_ids.push(DECODER_START);
    for p in 1..positions {
        dec_ids.push(if p - 1 < target_ids.len().saturating_sub(1) {
            target_ids[p - 1]
        } else {
            DECODER_START
        });
    }
    dec_ids
}

fn build_tape(
    model: &Model,
    enc_ids: &[u32],
    target_ids: &[u32],
    min_positions: usize,
) -> Result<ActivationTape> {
    let config = model.config();
    let target_len = target_ids.len();
    let positions = target_len.max(min_positions).max(1);
    check_token_seq(model, target_ids, "decoder target")?;
    if positions > config.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: positions,
            max: config.max_seq_len,
            context: "decoder input".to_string(),
        });
    }

    let dec_ids = decoder_input(target_ids, positions);

    let mut b = TapeBuilder::new(model);
    let enc_out = b.build_encoder(enc_ids)?;
    let (logits_node, prob_node, sel) = b.build_decoder(enc_out, &dec_ids, target_ids)?;

    let token_log_probs = b.graph.value(sel).data.clone();
    let target_prob = b.graph.value(prob_node).get(0, 0);

    Ok(ActivationTape {
        graph: b.graph,
        hooks: b.hooks,
        expected_hooks: config.hook_keys(),
        logits_node,
        prob_node,
        target_prob,
        token_log_probs,
        encoder_len: enc_ids.len(),
        decoder_positions: positions,
        target_len,
    })
}

// ── public ops ────────────────────────────────────────────────────────────

/// A prompt run through the encoder once, reusable across the label scorings
/// of one instance. Decoder-only passes seeded with this value are bitwise
/// identical to full passes: the encoder arithmetic is the same either way.
pub struct EncodedPrompt {
    enc_out: Mat,
    pub encoder_len: usize,
}

/// Runs just the encoder on a prompt.
pub fn encode_once(model: &Model, instruction: &str, input: &str) -> Result<EncodedPrompt> {
    let enc_ids = encode_prompt(model, instruction, input)?;
    let mut b = TapeBuilder::new(model);
    let enc_out = b.build_encoder(&enc_ids)?;
    Ok(EncodedPrompt {
        enc_out: b.graph.value(enc_out).clone(),
        encoder_len: enc_ids.len(),
    })
}

/// Length-normalized log-likelihood of one class label over a pre-encoded
/// prompt: (1/T) * sum_t log p(token_t | prefix).
fn score_label_cached(model: &Model, enc: &EncodedPrompt, class: &str) -> Result<f64> {
    let target = tokenizer::tokenize(class)?;
    check_token_seq(model, &target, "decoder target")?;
    let mut b = TapeBuilder::new(model);
    let enc_out = b.graph.constant(enc.enc_out.clone());
    let dec_ids = decoder_input(&target, target.len());
    let (_, _, sel) = b.build_decoder(enc_out, &dec_ids, &target)?;
    Ok(b.graph.value(sel).data.iter().sum::<f64>() / target.len() as f64)
}

/// Length-normalized log-likelihood of each class label under teacher
/// forcing, sharing one encoder pass across the classes.
pub fn score_labels_cached(
    model: &Model,
    enc: &EncodedPrompt,
    classes: &[String],
) -> Result<Vec<f64>> {
    classes
        .iter()
        .map(|class| score_label_cached(model, enc, class))
        .collect()
}

/// [`score_labels_cached`] including the encoder pass.
pub fn score_labels(
    model: &Model,
    instruction: &str,
    input: &str,
    classes: &[String],
) -> Result<Vec<f64>> {
    let enc = encode_once(model, instruction, input)?;
    score_labels_cached(model, &enc, classes)
}

/// Recording forward pass for one (prompt, target) pair.
pub fn forward_with_activations(
    model: &Model,
    instruction: &str,
    input: &str,
    target: &str,
) -> Result<ActivationTape> {
    forward_with_min_positions(model, instruction, input, target, 0)
}

/// Like [`forward_with_activations`] but materializes at least
/// `min_positions` decoder positions so tapes for different targets of the
/// same instance are shape-congruent. Padded positions have no path to the
/// target probability and therefore zero gradient.
pub fn forward_with_min_positions(
    model: &Model,
    instruction: &str,
    input: &str,
    target: &str,
    min_positions: usize,
) -> Result<ActivationTape> {
    let enc_ids = encode_prompt(model, instruction, input)?;
    let target_ids = tokenizer::tokenize(target)?;
    build_tape(model, &enc_ids, &target_ids, min_positions)
}

/// Exact reverse-mode gradient of the tape's target probability with respect
/// to every recorded hook-point activation.
pub fn backward_to_activations(tape: &ActivationTape) -> Result<GradientMap> {
    for key in &tape.expected_hooks {
        if !tape.hooks.contains_key(key) {
            return Err(Error::MissingHook {
                layer_path: key.to_string(),
            });
        }
    }
    let adjoints = tape.graph.backward(tape.prob_node);
    let mut grads = BTreeMap::new();
    for (&key, &node) in &tape.hooks {
        let value = tape.graph.value(node);
        let grad = adjoints[node]
            .clone()
            .unwrap_or_else(|| Mat::zeros(value.rows, value.cols));
        grads.insert(key, grad);
    }
    Ok(GradientMap { grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::zero_model;

    #[test]
    fn uniform_model_scores_are_log_inverse_vocab() {
        let model = zero_model();
        let classes = vec!["korv".to_string(), "zelt".to_string()];
        let scores = score_labels(&model, "answer the question", "", &classes).unwrap();
        let expected = -(model.config().vocab_size as f64).ln();
        for s in scores {
            assert!((s - expected).abs() < 1e-12, "{s} vs {expected}");
        }
    }

    #[test]
    fn uniform_model_two_token_target_prob_is_inverse_vocab_squared() {
        let model = zero_model();
        // "korv zelt" tokenizes as ["korv", " zelt"]: two tokens.
        let tape = forward_with_activations(&model, "answer", "", "korv zelt").unwrap();
        assert_eq!(tape.target_len, 2);
        let v = model.config().vocab_size as f64;
        let expected = 1.0 / (v * v);
        assert!(
            ((tape.target_prob - expected) / expected).abs() < 1e-12,
            "{} vs {expected}",
            tape.target_prob
        );
    }

    #[test]
    fn cached_encoder_scoring_matches_full_tapes_bitwise() {
        use crate::testutil::{config8, zero_tensors};
        // Non-trivial weights so the encoder actually shapes the scores.
        let config = config8(tokenizer::vocab_size());
        let mut tensors = zero_tensors(&config);
        for (name, t) in tensors.iter_mut() {
            let mut state = 0x9e3779b9u64;
            for (i, v) in t.data.iter_mut().enumerate() {
                state = state
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(name.len() as u64 + i as u64);
                *v = ((state >> 33) as f64 / (1u64 << 31) as f64 - 1.0) * 0.2;
            }
        }
        let model = crate::model::Model::from_parts(config, tensors).unwrap();

        let classes = vec!["korv".to_string(), "zelt marn".to_string()];
        let cached = score_labels(&model, "answer the question", "", &classes).unwrap();
        for (class, cached_score) in classes.iter().zip(&cached) {
            let tape = forward_with_activations(&model, "answer the question", "", class).unwrap();
            let full = tape.token_log_probs.iter().sum::<f64>() / tape.target_len as f64;
            assert_eq!(full.to_bits(), cached_score.to_bits(), "{class}");
        }
    }

    #[test]
    fn tape_covers_exactly_the_hook_enumeration() {
        let model = zero_model();
        let tape = forward_with_activations(&model, "answer", "", "korv").unwrap();
        assert_eq!(tape.hook_keys(), model.config().hook_keys());
    }

    #[test]
    fn cross_attention_kv_hooks_have_encoder_positions() {
        let model = zero_model();
        let tape = forward_with_activations(&model, "a longer prompt here", "", "korv").unwrap();
        let k = tape
            .activation(HookKey {
                stack: Stack::Decoder,
                layer: 0,
                sublayer: Sublayer::CrossAttnK,
            })
            .unwrap();
        assert_eq!(k.rows, tape.encoder_len);
        let q = tape
            .activation(HookKey {
                stack: Stack::Decoder,
                layer: 0,
                sublayer: Sublayer::CrossAttnQ,
            })
            .unwrap();
        assert_eq!(q.rows, tape.decoder_positions);
    }

    #[test]
    fn forward_and_backward_are_bit_deterministic() {
        let model = zero_model();
        let t1 = forward_with_activations(&model, "answer the question", "", "korv zelt").unwrap();
        let t2 = forward_with_activations(&model, "answer the question", "", "korv zelt").unwrap();
        assert_eq!(t1.target_prob.to_bits(), t2.target_prob.to_bits());
        let g1 = backward_to_activations(&t1).unwrap();
        let g2 = backward_to_activations(&t2).unwrap();
        for (key, grad) in g1.iter() {
            let other = g2.gradient(*key).unwrap();
            for (a, b) in grad.data.iter().zip(&other.data) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn padded_positions_have_zero_gradient() {
        let model = zero_model();
        // One-token target padded to four decoder positions.
        let tape = forward_with_min_positions(&model, "answer", "", "korv", 4).unwrap();
        assert_eq!(tape.decoder_positions, 4);
        let grads = backward_to_activations(&tape).unwrap();
        for key in tape.hook_keys() {
            if key.stack != Stack::Decoder {
                continue;
            }
            if matches!(key.sublayer, Sublayer::CrossAttnK | Sublayer::CrossAttnV) {
                continue; // encoder positions, not padded
            }
            let g = grads.gradient(key).unwrap();
            for p in tape.target_len..tape.decoder_positions {
                for c in 0..g.cols {
                    assert_eq!(
                        g.get(p, c),
                        0.0,
                        "expected zero gradient at {key} position {p}"
                    );
                }
            }
        }
    }

    #[test]
    fn overflowing_prompt_is_rejected() {
        let model = zero_model();
        let long = "word ".repeat(200);
        let err = score_labels(&model, &long, "", &["korv".to_string()]).unwrap_err();
        assert!(matches!(err, Error::SequenceTooLong { .. }));
    }

    #[test]
    fn saturated_weights_trigger_nonfinite_activation_error() {
        use crate::testutil::{config8, zero_tensors};
        let config = config8(tokenizer::vocab_size());
        let mut tensors = zero_tensors(&config);
        // Norms rescale the input to unit rms, so the overflow has to come
        // from the weights themselves: 8 inputs of ~1.0 times 1e308 is inf.
        for v in &mut tensors.get_mut("embedding.weight").unwrap().data {
            *v = 1.0;
        }
        for v in &mut tensors
            .get_mut("encoder.0.ffn.in.weight")
            .unwrap()
            .data
        {
            *v = 1e308;
        }
        let model = crate::model::Model::from_parts(config, tensors).unwrap();
        let err = match forward_with_activations(&model, "answer", "", "korv") {
            Ok(_) => panic!("expected a non-finite activation error"),
            Err(e) => e,
        };
        match err {
            Error::NonFiniteActivation { layer_path } => {
                assert!(layer_path.contains("encoder.0"), "path was {layer_path}");
            }
            other => panic!("expected NonFiniteActivation, got {other}"),
        }
    }

    #[test]
    fn replay_with_override_roundtrips_base_value() {
        let model = zero_model();
        let tape = forward_with_activations(&model, "answer", "", "korv").unwrap();
        let key = HookKey {
            stack: Stack::Decoder,
            layer: 0,
            sublayer: Sublayer::FfnIn,
        };
        let base = tape.activation(key).unwrap().get(0, 3);
        let p = tape.replay_with_override(key, 0, 3, base).unwrap();
        assert_eq!(p.to_bits(), tape.target_prob.to_bits());
    }
}
