//! Model configuration, neuron addressing, and the immutable in-memory model.
//!
//! The model is a pre-norm encoder-decoder transformer with GeLU FFNs and
//! parameterless RMSNorm. No position encodings are used: at this scale the
//! tasks are token-driven, decoder causality still orders generation, and the
//! checkpoint tensor set stays exactly the linear sublayers plus embedding and
//! output projection.
//!
//! Every linear sublayer output (after adding its bias, before any
//! nonlinearity) is a hook point; a neuron is one channel of one hook point,
//! addressed by [`NeuronId`].

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

// ── dtype / config ────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl Dtype {
    pub fn byte_len(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Design width of the FFN hidden layer. Compacted layers may be narrower.
    pub d_ff: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dtype: Dtype,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.to_string()))
            }
        };
        check(self.d_model >= 1, "d_model must be >= 1")?;
        check(self.n_heads >= 1, "n_heads must be >= 1")?;
        check(
            self.d_model % self.n_heads == 0,
            "d_model must be divisible by n_heads",
        )?;
        check(self.d_ff >= 1, "d_ff must be >= 1")?;
        check(self.n_encoder_layers >= 1, "n_encoder_layers must be >= 1")?;
        check(self.n_decoder_layers >= 1, "n_decoder_layers must be >= 1")?;
        check(self.vocab_size >= 2, "vocab_size must be >= 2")?;
        check(self.max_seq_len >= 1, "max_seq_len must be >= 1")?;
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Every hook-point prefix implied by this config, in canonical order.
    pub fn hook_keys(&self) -> Vec<HookKey> {
        let mut keys = Vec::new();
        for layer in 0..self.n_encoder_layers {
            for sublayer in Sublayer::encoder_set() {
                keys.push(HookKey {
                    stack: Stack::Encoder,
                    layer,
                    sublayer,
                });
            }
        }
        for layer in 0..self.n_decoder_layers {
            for sublayer in Sublayer::decoder_set() {
                keys.push(HookKey {
                    stack: Stack::Decoder,
                    layer,
                    sublayer,
                });
            }
        }
        keys
    }

    /// Full tensor-name enumeration for this config (sorted).
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = vec![
            "embedding.weight".to_string(),
            "output_proj.weight".to_string(),
            "output_proj.bias".to_string(),
        ];
        for key in self.hook_keys() {
            names.push(format!("{key}.weight"));
            names.push(format!("{key}.bias"));
        }
        names.sort();
        names
    }
}

// ── neuron addressing ─────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stack {
    #[serde(rename = "encoder")]
    Encoder,
    #[serde(rename = "decoder")]
    Decoder,
}

impl fmt::Display for Stack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stack::Encoder => "encoder",
            Stack::Decoder => "decoder",
        })
    }
}

impl std::str::FromStr for Stack {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "encoder" => Ok(Stack::Encoder),
            "decoder" => Ok(Stack::Decoder),
            _ => Err(()),
        }
    }
}

/// Declaration order is the canonical tie-break order for rankings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sublayer {
    #[serde(rename = "self_attn.q")]
    SelfAttnQ,
    #[serde(rename = "self_attn.k")]
    SelfAttnK,
    #[serde(rename = "self_attn.v")]
    SelfAttnV,
    #[serde(rename = "self_attn.o")]
    SelfAttnO,
    #[serde(rename = "cross_attn.q")]
    CrossAttnQ,
    #[serde(rename = "cross_attn.k")]
    CrossAttnK,
    #[serde(rename = "cross_attn.v")]
    CrossAttnV,
    #[serde(rename = "cross_attn.o")]
    CrossAttnO,
    #[serde(rename = "ffn.in")]
    FfnIn,
    #[serde(rename = "ffn.out")]
    FfnOut,
}

impl Sublayer {
    pub fn as_str(self) -> &'static str {
        match self {
            Sublayer::SelfAttnQ => "self_attn.q",
            Sublayer::SelfAttnK => "self_attn.k",
            Sublayer::SelfAttnV => "self_attn.v",
            Sublayer::SelfAttnO => "self_attn.o",
            Sublayer::CrossAttnQ => "cross_attn.q",
            Sublayer::CrossAttnK => "cross_attn.k",
            Sublayer::CrossAttnV => "cross_attn.v",
            Sublayer::CrossAttnO => "cross_attn.o",
            Sublayer::FfnIn => "ffn.in",
            Sublayer::FfnOut => "ffn.out",
        }
    }

    fn parse(s: &str) -> Option<Sublayer> {
        Sublayer::all().into_iter().find(|k| k.as_str() == s)
    }

    pub fn encoder_set() -> [Sublayer; 6] {
        [
            Sublayer::SelfAttnQ,
            Sublayer::SelfAttnK,
            Sublayer::SelfAttnV,
            Sublayer::SelfAttnO,
            Sublayer::FfnIn,
            Sublayer::FfnOut,
        ]
    }

    pub fn decoder_set() -> [Sublayer; 10] {
        [
            Sublayer::SelfAttnQ,
            Sublayer::SelfAttnK,
            Sublayer::SelfAttnV,
            Sublayer::SelfAttnO,
            Sublayer::CrossAttnQ,
            Sublayer::CrossAttnK,
            Sublayer::CrossAttnV,
            Sublayer::CrossAttnO,
            Sublayer::FfnIn,
            Sublayer::FfnOut,
        ]
    }

    pub fn all() -> [Sublayer; 10] {
        Self::decoder_set()
    }
}

impl fmt::Display for Sublayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A hook point: one linear sublayer of one layer of one stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HookKey {
    pub stack: Stack,
    pub layer: usize,
    pub sublayer: Sublayer,
}

impl fmt::Display for HookKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.stack, self.layer, self.sublayer)
    }
}

impl std::str::FromStr for HookKey {
    type Err = ();

    /// Parses the `Display` form, e.g. `decoder.1.ffn.in`.
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        let (stack_str, rest) = s.split_once('.').ok_or(())?;
        let (layer_str, sublayer_str) = rest.split_once('.').ok_or(())?;
        Ok(HookKey {
            stack: stack_str.parse()?,
            layer: layer_str.parse().map_err(|_| ())?,
            sublayer: Sublayer::parse(sublayer_str).ok_or(())?,
        })
    }
}

/// One output channel of one hook point. Derived `Ord` gives the canonical
/// (stack, layer, sublayer, channel) lexicographic tie-break order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NeuronId {
    pub stack: Stack,
    #[serde(rename = "layer_index")]
    pub layer: usize,
    pub sublayer: Sublayer,
    pub channel: usize,
}

impl NeuronId {
    pub fn hook(&self) -> HookKey {
        HookKey {
            stack: self.stack,
            layer: self.layer,
            sublayer: self.sublayer,
        }
    }
}

impl fmt::Display for NeuronId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.hook(), self.channel)
    }
}

// ── model ─────────────────────────────────────────────────────────────────

/// Immutable weights + config. Mutation happens only by constructing a new
/// model (mask application, compaction).
///
/// `base_fingerprint` identifies the checkpoint lineage: it is the sha256 of
/// the canonical serialization at load/build time and is preserved by mask
/// application (masks address the base checkpoint), while compaction renumbers
/// channels and therefore re-fingerprints.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    tensors: BTreeMap<String, Mat>,
    base_fingerprint: String,
}

impl Model {
    /// Validates shapes/finiteness against the config and fingerprints the
    /// canonical serialization.
    pub fn from_parts(config: ModelConfig, tensors: BTreeMap<String, Mat>) -> Result<Model> {
        config.validate()?;
        validate_tensors(&config, &tensors)?;
        let fingerprint = crate::checkpoint::fingerprint_parts(&config, &tensors);
        Ok(Model {
            config,
            tensors,
            base_fingerprint: fingerprint,
        })
    }

    /// Same validation but with an externally supplied lineage fingerprint
    /// (used by mask application to keep the base identity).
    pub(crate) fn from_parts_with_fingerprint(
        config: ModelConfig,
        tensors: BTreeMap<String, Mat>,
        base_fingerprint: String,
    ) -> Result<Model> {
        config.validate()?;
        validate_tensors(&config, &tensors)?;
        Ok(Model {
            config,
            tensors,
            base_fingerprint,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &BTreeMap<String, Mat> {
        &self.tensors
    }

    pub fn base_fingerprint(&self) -> &str {
        &self.base_fingerprint
    }

    pub fn tensor(&self, name: &str) -> &Mat {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("validated model missing tensor {name}"))
    }

    /// (weight, bias) of a linear sublayer.
    pub fn linear(&self, key: HookKey) -> (&Mat, &Mat) {
        (
            self.tensor(&format!("{key}.weight")),
            self.tensor(&format!("{key}.bias")),
        )
    }

    pub fn embedding(&self) -> &Mat {
        self.tensor("embedding.weight")
    }

    pub fn output_proj(&self) -> (&Mat, &Mat) {
        (
            self.tensor("output_proj.weight"),
            self.tensor("output_proj.bias"),
        )
    }

    /// Number of output channels of a hook point in *this* model (compacted
    /// FFN layers may be narrower than `config.d_ff`).
    pub fn hook_width(&self, key: HookKey) -> usize {
        self.linear(key).1.cols
    }

    /// All hook keys with their channel widths.
    pub fn hook_widths(&self) -> Vec<(HookKey, usize)> {
        self.config
            .hook_keys()
            .into_iter()
            .map(|k| (k, self.hook_width(k)))
            .collect()
    }

    /// Every neuron in the model, in canonical order.
    pub fn all_neurons(&self) -> Vec<NeuronId> {
        let mut out = Vec::new();
        for (key, width) in self.hook_widths() {
            for channel in 0..width {
                out.push(NeuronId {
                    stack: key.stack,
                    layer: key.layer,
                    sublayer: key.sublayer,
                    channel,
                });
            }
        }
        out
    }
}

fn validate_tensors(config: &ModelConfig, tensors: &BTreeMap<String, Mat>) -> Result<()> {
    let expected = config.tensor_names();
    for name in &expected {
        if !tensors.contains_key(name) {
            return Err(Error::MissingTensor { name: name.clone() });
        }
    }
    for name in tensors.keys() {
        if expected.binary_search(name).is_err() {
            return Err(Error::UnexpectedTensor { name: name.clone() });
        }
    }

    let d = config.d_model;
    let shape_err = |name: &str, detail: String| Error::ShapeMismatch {
        name: name.to_string(),
        detail,
    };
    let expect = |name: &str, mat: &Mat, rows: usize, cols: usize| -> Result<()> {
        if mat.shape() != (rows, cols) {
            return Err(shape_err(
                name,
                format!("expected {rows}x{cols}, found {}x{}", mat.rows, mat.cols),
            ));
        }
        Ok(())
    };

    expect(
        "embedding.weight",
        &tensors["embedding.weight"],
        config.vocab_size,
        d,
    )?;
    expect(
        "output_proj.weight",
        &tensors["output_proj.weight"],
        d,
        config.vocab_size,
    )?;
    expect(
        "output_proj.bias",
        &tensors["output_proj.bias"],
        1,
        config.vocab_size,
    )?;

    for key in config.hook_keys() {
        let w_name = format!("{key}.weight");
        let b_name = format!("{key}.bias");
        let w = &tensors[&w_name];
        let b = &tensors[&b_name];
        match key.sublayer {
            Sublayer::FfnIn => {
                let width = w.cols;
                if w.rows != d || width < 1 || width > config.d_ff {
                    return Err(shape_err(
                        &w_name,
                        format!(
                            "expected {d}x(1..={}), found {}x{}",
                            config.d_ff, w.rows, w.cols
                        ),
                    ));
                }
                expect(&b_name, b, 1, width)?;
                // ffn.out must be congruent with this layer's actual width.
                let out_name = format!(
                    "{}.{}.{}.weight",
                    key.stack,
                    key.layer,
                    Sublayer::FfnOut
                );
                let w_out = &tensors[&out_name];
                if w_out.rows != width {
                    return Err(shape_err(
                        &out_name,
                        format!(
                            "ffn.out input width {} does not match ffn.in width {width}",
                            w_out.rows
                        ),
                    ));
                }
            }
            Sublayer::FfnOut => {
                if w.cols != d {
                    return Err(shape_err(
                        &w_name,
                        format!("expected ?x{d}, found {}x{}", w.rows, w.cols),
                    ));
                }
                expect(&b_name, b, 1, d)?;
            }
            _ => {
                expect(&w_name, w, d, d)?;
                expect(&b_name, b, 1, d)?;
            }
        }
    }

    for (name, mat) in tensors {
        if !mat.is_finite() {
            return Err(Error::NonFinite { name: name.clone() });
        }
    }
    Ok(())
}
