//! Independent verification oracles: finite-difference gradient checking, an
//! exhaustive prune search, and an analytically constructed fixture with a
//! known planted bias neuron.
//!
//! Everything in this module recomputes results by means the main pipeline
//! does not use (numeric differentiation, brute force, closed-form wiring),
//! so agreement is evidence rather than tautology. [`run_oracle_suite`]
//! bundles the checks into a machine-readable pass/fail summary.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{calibrate, softmax, CalibrationMode, CalibrationProvenance, CalibrationVector};
use crate::detector::{
    detect_averaged, rank_neurons, render_prompt, ContextType, Dataset, Instance, InstructionSet,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, sample_detection_set, Method};
use crate::graph::{gelu, RMS_EPS};
use crate::model::{Dtype, HookKey, Model, ModelConfig, NeuronId, Stack, Sublayer};
use crate::pruner::{apply_mask, select_top_n, MaskEntry, MaskProvenance, PruneMask, MASK_VERSION};
use crate::runtime::{
    backward_to_activations, encode_once, forward_with_activations, score_labels_cached,
    ActivationTape, DECODER_START,
};
use crate::tensor::Mat;
use crate::tokenizer;

// ── gradient oracle ───────────────────────────────────────────────────────

/// Step size for central differences.
pub const FD_EPSILON: f64 = 1e-6;
/// Relative tolerance for analytic-vs-numeric agreement.
pub const FD_REL_TOL: f64 = 1e-5;
/// Absolute floor below which entries count as agreeing regardless of ratio.
pub const FD_ABS_FLOOR: f64 = 1e-9;

fn require_f64(model: &Model, op: &str) -> Result<()> {
    if model.config().dtype != Dtype::F64 {
        return Err(Error::PrecisionUnsupported { op: op.to_string() });
    }
    Ok(())
}

fn central_difference(
    tape: &ActivationTape,
    key: HookKey,
    position: usize,
    channel: usize,
    epsilon: f64,
) -> Result<f64> {
    let act = tape.activation(key)?;
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
            detail: format!("hook {key} has {} channels", act.cols),
        });
    }
    let base = act.get(position, channel);
    let plus = tape.replay_with_override(key, position, channel, base + epsilon)?;
    let minus = tape.replay_with_override(key, position, channel, base - epsilon)?;
    Ok((plus - minus) / (2.0 * epsilon))
}

/// Numeric gradient of the target probability with respect to one hook-point
/// activation entry, obtained by re-running the network on perturbed values.
/// Only meaningful for f64 models; f32 would drown the signal in rounding.
pub fn finite_difference_gradient(
    model: &Model,
    instruction: &str,
    input: &str,
    target: &str,
    neuron: NeuronId,
    position: usize,
    epsilon: f64,
) -> Result<f64> {
    require_f64(model, "finite-difference gradient oracle")?;
    let tape = forward_with_activations(model, instruction, input, target)?;
    central_difference(&tape, neuron.hook(), position, neuron.channel, epsilon)
}

/// Outcome of sweeping central differences over every hook-point entry of one
/// recorded forward pass.
#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    /// Hook entries compared.
    pub entries: usize,
    /// Entries whose disagreement exceeded the tolerance.
    pub failures: usize,
    /// Max over entries of |fd - analytic| / tolerance; <= 1 means all pass.
    pub worst_ratio: f64,
    /// Largest absolute disagreement seen.
    pub max_abs_err: f64,
    /// Human-readable description of the worst entry.
    pub worst_entry: String,
    /// Distinct sublayer kinds covered by the sweep.
    pub sublayer_kinds: usize,
    pub elapsed_secs: f64,
}

/// Compares the reverse-mode gradient against central differences at every
/// entry of every hook point for one (prompt, target) pair.
pub fn fd_sweep(
    model: &Model,
    instruction: &str,
    input: &str,
    target: &str,
    epsilon: f64,
) -> Result<SweepReport> {
    require_f64(model, "finite-difference gradient sweep")?;
    let start = Instant::now();
    let tape = forward_with_activations(model, instruction, input, target)?;
    let grads = backward_to_activations(&tape)?;

    let mut kinds = BTreeSet::new();
    let mut entries = 0usize;
    let mut failures = 0usize;
    let mut worst_ratio = 0.0f64;
    let mut max_abs_err = 0.0f64;
    let mut worst_entry = String::new();
    for key in tape.hook_keys() {
        kinds.insert(key.sublayer);
        let rows = tape.activation(key)?.rows;
        let cols = tape.activation(key)?.cols;
        for position in 0..rows {
            for channel in 0..cols {
                let fd = central_difference(&tape, key, position, channel, epsilon)?;
                let analytic = grads.gradient(key)?.get(position, channel);
                let diff = (fd - analytic).abs();
                let tol = (FD_REL_TOL * fd.abs().max(analytic.abs())).max(FD_ABS_FLOOR);
                entries += 1;
                if diff > tol {
                    failures += 1;
                }
                if diff > max_abs_err {
                    max_abs_err = diff;
                }
                let ratio = diff / tol;
                if ratio > worst_ratio {
                    worst_ratio = ratio;
                    worst_entry = format!(
                        "{key} position {position} channel {channel}: \
                         analytic {analytic:.6e} vs numeric {fd:.6e}"
                    );
                }
            }
        }
    }
    Ok(SweepReport {
        entries,
        failures,
        worst_ratio,
        max_abs_err,
        worst_entry,
        sublayer_kinds: kinds.len(),
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

// ── random model for gradient checking ────────────────────────────────────

fn tensor_shape(config: &ModelConfig, name: &str) -> (usize, usize) {
    let d = config.d_model;
    match name {
        "embedding.weight" => (config.vocab_size, d),
        "output_proj.weight" => (d, config.vocab_size),
        "output_proj.bias" => (1, config.vocab_size),
        _ => {
            let (prefix, kind) = name.rsplit_once('.').expect("tensor name has a suffix");
            let key: HookKey = prefix.parse().expect("hook tensor names parse");
            let cols = if key.sublayer == Sublayer::FfnIn {
                config.d_ff
            } else {
                d
            };
            if kind == "bias" {
                (1, cols)
            } else if key.sublayer == Sublayer::FfnOut {
                (config.d_ff, d)
            } else {
                (d, cols)
            }
        }
    }
}

fn zero_tensors(config: &ModelConfig) -> BTreeMap<String, Mat> {
    config
        .tensor_names()
        .into_iter()
        .map(|name| {
            let (rows, cols) = tensor_shape(config, &name);
            (name, Mat::zeros(rows, cols))
        })
        .collect()
}

/// Small dense f64 model with seeded random weights, sized so a full
/// finite-difference sweep stays cheap while every sublayer kind carries
/// signal. Weight scales are kept moderate so no softmax saturates and the
/// target probability stays well inside (0, 1).
pub fn build_gradcheck_model(seed: u64) -> Model {
    let config = ModelConfig {
        d_model: 16,
        n_heads: 2,
        d_ff: 24,
        n_encoder_layers: 2,
        n_decoder_layers: 2,
        vocab_size: tokenizer::vocab_size(),
        max_seq_len: 64,
        dtype: Dtype::F64,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for name in config.tensor_names() {
        let (rows, cols) = tensor_shape(&config, &name);
        let scale = if name == "embedding.weight" {
            0.8
        } else if name.ends_with(".bias") {
            0.05
        } else {
            0.25
        };
        let mut m = Mat::zeros(rows, cols);
        for v in &mut m.data {
            *v = rng.gen_range(-scale..scale);
        }
        tensors.insert(name, m);
    }
    Model::from_parts(config, tensors).expect("gradcheck tensors match their config")
}

// ── exhaustive prune search ───────────────────────────────────────────────

/// Cap on the candidate pool for brute-force search.
pub const SEARCH_MAX_CANDIDATES: usize = 256;
/// Cap on the mask size for brute-force search.
pub const SEARCH_MAX_MASK_SIZE: usize = 2;

/// One evaluated candidate mask.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchResult {
    pub neurons: Vec<NeuronId>,
    /// Accuracy in percent on the ambiguous subset under the one instruction.
    pub ambig_accuracy: f64,
}

/// Brute-force reference for detection: evaluates every size-`n` combination
/// of `candidates` by actually pruning it and scoring the ambiguous subset
/// under a single instruction template. Results come back sorted by accuracy
/// (descending), ties broken by lexicographic neuron order, so the output is
/// independent of candidate order.
pub fn exhaustive_prune_search(
    model: &Model,
    dataset: &Dataset,
    template: &str,
    candidates: &[NeuronId],
    n: usize,
) -> Result<Vec<SearchResult>> {
    let mut pool: Vec<NeuronId> = candidates.to_vec();
    pool.sort();
    pool.dedup();
    if pool.len() > SEARCH_MAX_CANDIDATES {
        return Err(Error::BudgetExceeded {
            detail: format!(
                "{} candidate neurons exceed the exhaustive-search cap of {SEARCH_MAX_CANDIDATES}",
                pool.len()
            ),
        });
    }
    if n == 0 {
        return Err(Error::ZeroMaskSize);
    }
    if n > SEARCH_MAX_MASK_SIZE {
        return Err(Error::BudgetExceeded {
            detail: format!(
                "mask size {n} exceeds the exhaustive-search cap of {SEARCH_MAX_MASK_SIZE}"
            ),
        });
    }
    if n > pool.len() {
        return Err(Error::NotEnoughNeurons {
            n,
            available: pool.len(),
        });
    }

    let ambig = dataset.filter_context(ContextType::Ambig)?;
    let instructions = InstructionSet::new(vec![template.to_string()])?;

    let mut combos: Vec<Vec<NeuronId>> = Vec::new();
    match n {
        1 => combos.extend(pool.iter().map(|&id| vec![id])),
        _ => {
            for i in 0..pool.len() {
                for j in i + 1..pool.len() {
                    combos.push(vec![pool[i], pool[j]]);
                }
            }
        }
    }

    let mut results = Vec::with_capacity(combos.len());
    for neurons in combos {
        let mask = PruneMask {
            version: MASK_VERSION,
            model_fingerprint: model.base_fingerprint().to_string(),
            n,
            provenance: MaskProvenance::default(),
            // Synthetic descending scores: search masks are combinations, not
            // rankings, but the mask container requires ordered scores.
            neurons: neurons
                .iter()
                .enumerate()
                .map(|(i, &neuron)| MaskEntry {
                    neuron,
                    score: -(i as f64),
                })
                .collect(),
        };
        let pruned = apply_mask(model, &mask)?;
        let report = evaluate(&pruned, &ambig, &instructions, Method::Original, 0)?;
        results.push(SearchResult {
            neurons,
            ambig_accuracy: report.mean_accuracy,
        });
    }
    results.sort_by(|a, b| {
        b.ambig_accuracy
            .partial_cmp(&a.ambig_accuracy)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.neurons.cmp(&b.neurons))
    });
    Ok(results)
}

// ── planted fixture ───────────────────────────────────────────────────────

/// Group nouns of the synthetic world; `korv` is the group the planted neuron
/// is biased toward.
pub const PLANTED_GROUPS: [&str; 6] = ["korv", "zelt", "marn", "plim", "drax", "fenn"];
/// Abstention answers; the gold label for every ambiguous instance.
pub const ABSTAIN_CHOICES: [&str; 4] = ["unknown", "cantsay", "nodata", "unclear"];
/// FFN channel carrying the planted bias in decoder layer 1.
pub const PLANTED_CHANNEL: usize = 7;

// Embedding coordinate layout. Tokens carry at most two unit coordinates, so
// a normalized feature row has value sqrt(d_model / 2) at each set coordinate.
const C_QUERY: usize = 0; // 1.0 on the decoder start token
const C_GROUP0: usize = 1; // 1..=6: group-noun identity
const C_IS_GROUP: usize = 7; // 1.0 on every group noun
const C_AGENT0: usize = 8; // 8..=13: confessing-agent identity
const C_IS_AGENT: usize = 14; // 1.0 on every agent word
const C_MARK: usize = 15; // runtime korv-presence mark (zero in embeddings)
const C_ANS0: usize = 16; // 16..=21: per-group answer slots
const C_ANS_ABSTAIN: usize = 22; // abstention answer slot

// Answer-slot margins, in residual units before the final norm.
const EVIDENCE_BOOST: f64 = 10.0;
const BIAS_BOOST: f64 = 6.0;
const ABSTAIN_PRIOR: f64 = 4.0;
const MARK_VALUE: f64 = 1.2;
const LOGIT_SCALE: f64 = 2.0;

/// A model with a single hand-wired bias neuron, plus the dataset that
/// exposes it.
pub struct PlantedFixture {
    pub model: Model,
    pub dataset: Dataset,
    /// The neuron the detector is supposed to find.
    pub planted: NeuronId,
    /// Construction notes: routing, margins, and why pruning is surgical.
    pub notes: String,
}

fn single_token_id(text: &str) -> Result<usize> {
    let ids = tokenizer::tokenize(text)?;
    if ids.len() != 1 {
        return Err(Error::Config(format!(
            "fixture word {text:?} must be a single token, got {}",
            ids.len()
        )));
    }
    Ok(ids[0] as usize)
}

fn fill_embedding(emb: &mut Mat) -> Result<()> {
    emb.set(DECODER_START as usize, C_QUERY, 1.0);
    for (g, word) in PLANTED_GROUPS.iter().enumerate() {
        for form in [word.to_string(), format!(" {word}")] {
            let row = single_token_id(&form)?;
            emb.set(row, C_GROUP0 + g, 1.0);
            emb.set(row, C_IS_GROUP, 1.0);
        }
        for form in [format!("{word}an"), format!(" {word}an")] {
            let row = single_token_id(&form)?;
            emb.set(row, C_AGENT0 + g, 1.0);
            emb.set(row, C_IS_AGENT, 1.0);
        }
    }
    Ok(())
}

/// Ten instruction templates over the synthetic vocabulary.
pub fn planted_instruction_set() -> InstructionSet {
    let templates = vec![
        "context: {context}\nquestion: {question}\noptions: {choices}\nanswer:",
        "read the context: {context}\nquestion: {question}\nchoose from the options: {choices}\nanswer:",
        "given the context: {context}\ndecide the answer to the question: {question}\noptions: {choices}",
        "using the context: {context}\npick one of the options: {choices}\nquestion: {question}\nanswer:",
        "consider the context: {context}\nthen answer the question: {question}\nuse the options: {choices}",
        "{context}\nquestion: {question}\noptions: {choices}\nanswer:",
        "question: {question}\ncontext: {context}\noptions: {choices}\nanswer:",
        "options: {choices}\ncontext: {context}\nquestion: {question}\nanswer:",
        "answer the question from the context\ncontext: {context}\nquestion: {question}\noptions: {choices}",
        "the context is: {context}\nthe question is: {question}\nthe options are: {choices}\nanswer:",
    ];
    InstructionSet::new(templates.into_iter().map(String::from).collect())
        .expect("fixture templates carry each placeholder exactly once")
}

fn planted_dataset(seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut instances = Vec::with_capacity(40);
    for i in 0..20usize {
        let other = PLANTED_GROUPS[1 + i % 5];
        let abstain = ABSTAIN_CHOICES[i % 4];
        let mut choices: Vec<String> =
            vec!["korv".into(), other.to_string(), abstain.to_string()];
        choices.shuffle(&mut rng);
        let gold_index = choices.iter().position(|c| c == abstain).expect("present");
        instances.push(Instance {
            id: format!("ambig-{i:02}"),
            context: format!("the korv worker and the {other} worker stood near the depot"),
            question: "who took the tools".into(),
            choices,
            gold_index,
            context_type: ContextType::Ambig,
        });
    }
    for i in 0..20usize {
        let other = PLANTED_GROUPS[1 + i % 5];
        let abstain = ABSTAIN_CHOICES[(i + 2) % 4];
        let culprit = if i % 2 == 0 { "korv" } else { other };
        let mut choices: Vec<String> =
            vec!["korv".into(), other.to_string(), abstain.to_string()];
        choices.shuffle(&mut rng);
        let gold_index = choices.iter().position(|c| c == culprit).expect("present");
        instances.push(Instance {
            id: format!("disambig-{i:02}"),
            context: format!(
                "the korv worker and the {other} worker stood near the depot \
                 later the {culprit}an admitted it"
            ),
            question: "who took the tools".into(),
            choices,
            gold_index,
            context_type: ContextType::Disambig,
        });
    }
    Dataset::new("planted", instances)
}

/// Builds the planted-bias model and dataset. The model weights are fully
/// determined by the closed-form construction; `seed` only drives the
/// dataset's choice-order shuffling, so the same seed reproduces the fixture
/// byte for byte.
pub fn build_planted_fixture(seed: u64) -> Result<PlantedFixture> {
    let config = ModelConfig {
        d_model: 32,
        n_heads: 2,
        d_ff: 64,
        n_encoder_layers: 2,
        n_decoder_layers: 2,
        vocab_size: tokenizer::vocab_size(),
        max_seq_len: 128,
        dtype: Dtype::F64,
    };
    let mut tensors = zero_tensors(&config);
    fill_embedding(tensors.get_mut("embedding.weight").expect("embedding"))?;

    // Two-coordinate feature rows normalize to this value per coordinate.
    let feat = (config.d_model as f64 / 2.0).sqrt();

    // Decoder layer 0 cross-attention: the evidence route. The start token's
    // query picks out confessing-agent words; their group identity lands in
    // that group's answer slot with a boost that dominates everything else.
    {
        let gq = 1.6;
        let gk = 1.6;
        let gv = 1.75;
        let go = EVIDENCE_BOOST / (feat * gv);
        tensors
            .get_mut("decoder.0.cross_attn.q.weight")
            .expect("tensor")
            .set(C_QUERY, 0, gq);
        tensors
            .get_mut("decoder.0.cross_attn.k.weight")
            .expect("tensor")
            .set(C_IS_AGENT, 0, gk);
        for g in 0..PLANTED_GROUPS.len() {
            tensors
                .get_mut("decoder.0.cross_attn.v.weight")
                .expect("tensor")
                .set(C_AGENT0 + g, 1 + g, gv);
            tensors
                .get_mut("decoder.0.cross_attn.o.weight")
                .expect("tensor")
                .set(1 + g, C_ANS0 + g, go);
        }
    }

    // Decoder layer 0 FFN channel 3: a constant abstention prior fed by the
    // bias term alone, so "don't know" wins whenever no other slot is pushed.
    {
        let b = 1.5;
        tensors
            .get_mut("decoder.0.ffn.in.bias")
            .expect("tensor")
            .set(0, 3, b);
        tensors
            .get_mut("decoder.0.ffn.out.weight")
            .expect("tensor")
            .set(3, C_ANS_ABSTAIN, ABSTAIN_PRIOR / gelu(b));
    }

    // Decoder layer 1 cross-attention: writes a mark whenever the word korv
    // appears anywhere in the prompt. Queries are deliberately strong so the
    // score saturates for both ambiguous and evidence-laden prompts.
    {
        let hq = 5.5;
        let hk = 5.5;
        let hv = 0.6;
        let ho = MARK_VALUE / (feat * hv);
        tensors
            .get_mut("decoder.1.cross_attn.q.weight")
            .expect("tensor")
            .set(C_QUERY, 0, hq);
        tensors
            .get_mut("decoder.1.cross_attn.k.weight")
            .expect("tensor")
            .set(C_GROUP0, 0, hk);
        tensors
            .get_mut("decoder.1.cross_attn.v.weight")
            .expect("tensor")
            .set(C_GROUP0, 1, hv);
        tensors
            .get_mut("decoder.1.cross_attn.o.weight")
            .expect("tensor")
            .set(1, C_MARK, ho);
    }

    // Decoder layer 1 FFN channel 7: the planted neuron. It converts the
    // korv-presence mark into a boost for the korv answer slot. The output
    // weight is calibrated against the pre-FFN residual of an ambiguous
    // prompt (query flag, abstention prior, mark) so the boost lands exactly
    // on BIAS_BOOST there.
    {
        let w_in = 0.55;
        let mean_sq = (1.0 + ABSTAIN_PRIOR * ABSTAIN_PRIOR + MARK_VALUE * MARK_VALUE)
            / config.d_model as f64;
        let u = w_in * MARK_VALUE / (mean_sq + RMS_EPS).sqrt();
        tensors
            .get_mut("decoder.1.ffn.in.weight")
            .expect("tensor")
            .set(C_MARK, PLANTED_CHANNEL, w_in);
        tensors
            .get_mut("decoder.1.ffn.out.weight")
            .expect("tensor")
            .set(PLANTED_CHANNEL, C_ANS0, BIAS_BOOST / gelu(u));
    }

    // Output projection: each answer slot feeds the single-token form of its
    // answer word. All four abstention words share one slot.
    {
        let proj = tensors.get_mut("output_proj.weight").expect("tensor");
        for (g, word) in PLANTED_GROUPS.iter().enumerate() {
            proj.set(C_ANS0 + g, single_token_id(word)?, LOGIT_SCALE);
        }
        for word in ABSTAIN_CHOICES {
            proj.set(C_ANS_ABSTAIN, single_token_id(word)?, LOGIT_SCALE);
        }
    }

    let model = Model::from_parts(config, tensors)?;
    let dataset = planted_dataset(seed)?;
    let planted = NeuronId {
        stack: Stack::Decoder,
        layer: 1,
        sublayer: Sublayer::FfnIn,
        channel: PLANTED_CHANNEL,
    };
    let notes = format!(
        "Hand-wired 2+2-layer fixture. Encoder weights are zero, so the encoder emits normalized \
         token embeddings. Decoder layer 0 cross-attention copies a confessing agent's group \
         identity into that group's answer slot (+{EVIDENCE_BOOST} residual units); decoder \
         layer 0 FFN channel 3 adds a constant abstention prior (+{ABSTAIN_PRIOR}); decoder \
         layer 1 cross-attention writes a korv-presence mark ({MARK_VALUE}) whenever korv is \
         mentioned; and the planted neuron {planted} turns that mark into a +{BIAS_BOOST} boost \
         for the korv answer. On ambiguous prompts the korv boost beats the abstention prior by \
         {margin} residual units, so the intact model picks korv; zeroing the planted channel \
         flips every ambiguous instance to its abstention gold answer, while disambiguated \
         instances keep an evidence margin of {evidence_margin} units over the boost and never \
         change.",
        margin = BIAS_BOOST - ABSTAIN_PRIOR,
        evidence_margin = EVIDENCE_BOOST - BIAS_BOOST,
    );
    Ok(PlantedFixture {
        model,
        dataset,
        planted,
        notes,
    })
}

// ── oracle suite ──────────────────────────────────────────────────────────

/// One named verification with its outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleCheck {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Machine-readable result of the full oracle suite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleSummary {
    pub all_pass: bool,
    pub checks: Vec<OracleCheck>,
}

struct PredictionRow {
    context_type: ContextType,
    gold: usize,
    predicted: usize,
}

fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn prediction_rows(
    model: &Model,
    dataset: &Dataset,
    instructions: &InstructionSet,
) -> Result<Vec<PredictionRow>> {
    let mut rows = Vec::with_capacity(instructions.len() * dataset.instances.len());
    for template in &instructions.templates {
        for instance in &dataset.instances {
            let prompt = render_prompt(template, instance);
            let enc = encode_once(model, &prompt, "")?;
            let scores = score_labels_cached(model, &enc, &instance.choices)?;
            rows.push(PredictionRow {
                context_type: instance.context_type,
                gold: instance.gold_index,
                predicted: argmax_first(&scores),
            });
        }
    }
    Ok(rows)
}

fn single_neuron_mask(model: &Model, neuron: NeuronId) -> PruneMask {
    PruneMask {
        version: MASK_VERSION,
        model_fingerprint: model.base_fingerprint().to_string(),
        n: 1,
        provenance: MaskProvenance::default(),
        neurons: vec![MaskEntry { neuron, score: 0.0 }],
    }
}

fn check_gradients() -> Result<OracleCheck> {
    let model = build_gradcheck_model(7);
    let sweep = fd_sweep(
        &model,
        "answer the question",
        "the korv worker stood near the depot",
        "korv zelt",
        FD_EPSILON,
    )?;
    Ok(OracleCheck {
        name: "gradient-matches-finite-differences".into(),
        pass: sweep.failures == 0 && sweep.sublayer_kinds == 10 && sweep.elapsed_secs < 60.0,
        detail: format!(
            "{} entries over {} sublayer kinds, worst error ratio {:.3e}, {:.1}s",
            sweep.entries, sweep.sublayer_kinds, sweep.worst_ratio, sweep.elapsed_secs
        ),
    })
}

fn check_fixture_determinism(fixture: &PlantedFixture) -> Result<OracleCheck> {
    let again = build_planted_fixture(11)?;
    let model_same = fixture.model.base_fingerprint() == again.model.base_fingerprint();
    let data_same = serde_json::to_string(&fixture.dataset.instances)
        .map_err(|e| Error::json("serializing fixture instances", e))?
        == serde_json::to_string(&again.dataset.instances)
            .map_err(|e| Error::json("serializing fixture instances", e))?;
    Ok(OracleCheck {
        name: "planted-fixture-is-deterministic".into(),
        pass: model_same && data_same,
        detail: format!(
            "model fingerprints match: {model_same}; datasets match: {data_same}; \
             fingerprint {}",
            fixture.model.base_fingerprint()
        ),
    })
}

fn check_planted_causality(
    fixture: &PlantedFixture,
    instructions: &InstructionSet,
) -> Result<OracleCheck> {
    let mask = single_neuron_mask(&fixture.model, fixture.planted);
    let pruned = apply_mask(&fixture.model, &mask)?;
    let before = prediction_rows(&fixture.model, &fixture.dataset, instructions)?;
    let after = prediction_rows(&pruned, &fixture.dataset, instructions)?;

    let mut ambig_total = 0usize;
    let mut ambig_flipped_to_gold = 0usize;
    let mut disambig_total = 0usize;
    let mut disambig_changed = 0usize;
    for (b, a) in before.iter().zip(&after) {
        match b.context_type {
            ContextType::Ambig => {
                ambig_total += 1;
                if b.predicted != b.gold && a.predicted == a.gold {
                    ambig_flipped_to_gold += 1;
                }
            }
            ContextType::Disambig => {
                disambig_total += 1;
                if a.predicted != b.predicted {
                    disambig_changed += 1;
                }
            }
        }
    }
    let flip_rate = 100.0 * ambig_flipped_to_gold as f64 / ambig_total as f64;
    let change_rate = 100.0 * disambig_changed as f64 / disambig_total as f64;
    Ok(OracleCheck {
        name: "planted-neuron-causes-the-bias".into(),
        pass: flip_rate >= 90.0 && change_rate <= 5.0,
        detail: format!(
            "zeroing {} flips {ambig_flipped_to_gold}/{ambig_total} ambiguous predictions to \
             gold ({flip_rate:.1}%) and changes {disambig_changed}/{disambig_total} \
             disambiguated predictions ({change_rate:.1}%)",
            fixture.planted
        ),
    })
}

fn check_calibration_identities() -> Result<OracleCheck> {
    // Worked example: probabilities (0.4, 0.3, 0.3) against a content-free
    // prior (0.8, 0.1, 0.1) must calibrate to (1/13, 6/13, 6/13).
    let scores = vec![0.4f64.ln(), 0.3f64.ln(), 0.3f64.ln()];
    let cal = CalibrationVector {
        mode: CalibrationMode::Cc,
        p_cf: vec![0.8, 0.1, 0.1],
        provenance: CalibrationProvenance {
            content_free_inputs: vec!["N/A".into()],
            seed: None,
        },
    };
    let got = calibrate(&scores, &cal)?;
    let expected = [1.0 / 13.0, 6.0 / 13.0, 6.0 / 13.0];
    let worked_err = got
        .iter()
        .zip(expected)
        .map(|(g, e)| (g - e).abs())
        .fold(0.0f64, f64::max);

    // Identity: a uniform prior must leave the distribution unchanged.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut identity_err = 0.0f64;
    let mut argmax_stable = true;
    for _ in 0..5 {
        let scores: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let uniform = CalibrationVector {
            mode: CalibrationMode::Dc,
            p_cf: vec![0.25; 4],
            provenance: CalibrationProvenance {
                content_free_inputs: Vec::new(),
                seed: Some(3),
            },
        };
        let calibrated = calibrate(&scores, &uniform)?;
        let plain = softmax(&scores);
        for (c, p) in calibrated.iter().zip(&plain) {
            identity_err = identity_err.max((c - p).abs());
        }
        argmax_stable &= argmax_first(&calibrated) == argmax_first(&plain);
    }
    Ok(OracleCheck {
        name: "calibration-identities-hold".into(),
        pass: worked_err <= 1e-4 && identity_err <= 1e-12 && argmax_stable,
        detail: format!(
            "worked example max error {worked_err:.2e}, uniform-prior identity max error \
             {identity_err:.2e}, argmax stable: {argmax_stable}"
        ),
    })
}

/// Runs every oracle end to end with fixed seeds. All checks are
/// deterministic; a failing check means the pipeline and the oracles
/// disagree, not that the dice came up wrong.
pub fn run_oracle_suite() -> Result<OracleSummary> {
    let mut checks = Vec::new();
    checks.push(check_gradients()?);

    let fixture = build_planted_fixture(11)?;
    let instructions = planted_instruction_set();
    checks.push(check_fixture_determinism(&fixture)?);
    checks.push(check_planted_causality(&fixture, &instructions)?);

    // Detection, pruning, and search agreement over three sampled trials.
    let original = evaluate(
        &fixture.model,
        &fixture.dataset,
        &instructions,
        Method::Original,
        0,
    )?;
    let mut rank_details = Vec::new();
    let mut top1_hits = 0usize;
    let mut all_top5 = true;
    let mut gain_details = Vec::new();
    let mut gains_ok = true;
    let mut gold_shift_ok = true;
    let mut gold_details = Vec::new();
    let mut search_ok = true;
    let mut search_details = Vec::new();
    for trial in 0..3u64 {
        let sample = sample_detection_set(&fixture.dataset, 10, trial)?;
        let map = detect_averaged(&fixture.model, &sample, &instructions)?;
        let ranking = rank_neurons(&map)?;
        let rank = ranking
            .iter()
            .position(|(id, _)| *id == fixture.planted)
            .map(|p| p + 1)
            .unwrap_or(usize::MAX);
        if ranking[0].0 == fixture.planted {
            top1_hits += 1;
        }
        all_top5 &= rank <= 5;
        rank_details.push(format!("trial {trial}: rank {rank}"));

        let mask = select_top_n(
            &ranking,
            1,
            fixture.model.base_fingerprint(),
            MaskProvenance::default(),
        )?;
        let pruned = apply_mask(&fixture.model, &mask)?;
        let report = evaluate(&pruned, &fixture.dataset, &instructions, Method::Original, 0)?;
        let ambig_gain = report.accuracy_ambig.unwrap_or(f64::NAN)
            - original.accuracy_ambig.unwrap_or(f64::NAN);
        let disambig_drop = original.accuracy_disambig.unwrap_or(f64::NAN)
            - report.accuracy_disambig.unwrap_or(f64::NAN);
        gains_ok &= ambig_gain >= 40.0 && disambig_drop <= 5.0;
        gain_details.push(format!(
            "trial {trial}: ambig {:+.1} points, disambig {:+.1} points",
            ambig_gain, -disambig_drop
        ));
        let gold_before = original.gold_score_ambig.unwrap_or(f64::NAN);
        let gold_after = report.gold_score_ambig.unwrap_or(f64::NAN);
        gold_shift_ok &= gold_after > gold_before;
        gold_details.push(format!("trial {trial}: {gold_before:.2} -> {gold_after:.2}"));

        let candidates: Vec<NeuronId> = ranking.iter().take(16).map(|&(id, _)| id).collect();
        let results = exhaustive_prune_search(
            &fixture.model,
            &fixture.dataset,
            &instructions.templates[0],
            &candidates,
            1,
        )?;
        let top1 = ranking[0].0;
        let position = results
            .iter()
            .position(|r| r.neurons == vec![top1])
            .map(|p| p + 1)
            .unwrap_or(usize::MAX);
        search_ok &= position <= 5;
        search_details.push(format!(
            "trial {trial}: detected top-1 {top1} is search rank {position} of {}",
            results.len()
        ));
    }
    checks.push(OracleCheck {
        name: "detection-recovers-planted-neuron".into(),
        pass: top1_hits >= 2 && all_top5,
        detail: format!(
            "{} ({top1_hits}/3 trials rank it first)",
            rank_details.join("; ")
        ),
    });
    checks.push(OracleCheck {
        name: "pruning-detected-neuron-repairs-ambiguous-accuracy".into(),
        pass: gains_ok,
        detail: gain_details.join("; "),
    });
    checks.push(OracleCheck {
        name: "ambiguous-gold-score-rises-after-pruning".into(),
        pass: gold_shift_ok,
        detail: gold_details.join("; "),
    });
    checks.push(OracleCheck {
        name: "detection-agrees-with-exhaustive-search".into(),
        pass: search_ok,
        detail: search_details.join("; "),
    });
    checks.push(check_calibration_identities()?);

    let all_pass = checks.iter().all(|c| c.pass);
    Ok(OracleSummary { all_pass, checks })
}
