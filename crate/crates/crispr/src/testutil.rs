//! Test-only builders shared across module tests.

use std::collections::BTreeMap;

use crate::detector::{ContextType, Instance};
use crate::model::{Dtype, Model, ModelConfig, Sublayer};
use crate::tensor::Mat;
use crate::tokenizer;

/// Small 1+1-layer config; vocab defaults to the tokenizer's so real text can
/// be scored.
pub fn config8(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        n_encoder_layers: 1,
        n_decoder_layers: 1,
        vocab_size,
        max_seq_len: 64,
        dtype: Dtype::F64,
    }
}

pub fn zero_tensors(config: &ModelConfig) -> BTreeMap<String, Mat> {
    let d = config.d_model;
    let mut t = BTreeMap::new();
    t.insert("embedding.weight".into(), Mat::zeros(config.vocab_size, d));
    t.insert("output_proj.weight".into(), Mat::zeros(d, config.vocab_size));
    t.insert("output_proj.bias".into(), Mat::zeros(1, config.vocab_size));
    for key in config.hook_keys() {
        let (rows, cols) = match key.sublayer {
            Sublayer::FfnIn => (d, config.d_ff),
            Sublayer::FfnOut => (config.d_ff, d),
            _ => (d, d),
        };
        t.insert(format!("{key}.weight"), Mat::zeros(rows, cols));
        t.insert(format!("{key}.bias"), Mat::zeros(1, cols));
    }
    t
}

/// All-zero model over the tokenizer vocabulary: every logit is 0, so label
/// probabilities are uniform 1/vocab_size.
pub fn zero_model() -> Model {
    let config = config8(tokenizer::vocab_size());
    let tensors = zero_tensors(&config);
    Model::from_parts(config, tensors).unwrap()
}

/// Ambiguous-context instance with a fixed short context and question.
pub fn instance(id: &str, choices: &[&str], gold: usize) -> Instance {
    Instance {
        id: id.to_string(),
        context: "the korv worker was seen".to_string(),
        question: "who was seen".to_string(),
        choices: choices.iter().map(|s| s.to_string()).collect(),
        gold_index: gold,
        context_type: ContextType::Ambig,
    }
}

/// One well-formed instruction template.
pub fn template() -> String {
    "context: {context}\nquestion: {question}\noptions: {choices}\nanswer:".to_string()
}
