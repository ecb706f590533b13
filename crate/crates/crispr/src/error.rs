//! Crate-wide error type.
//!
//! Every failure mode callers are expected to match on gets its own variant;
//! free-form context goes in the variant fields, not in stringly-typed wrappers.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    // ── checkpoint / container ────────────────────────────────────────────
    #[error("bad magic: expected \"CRSP\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("checkpoint truncated: {context}")]
    Truncated { context: String },
    #[error("invalid checkpoint metadata: {0}")]
    Metadata(String),
    #[error("tensor {name}: shape mismatch ({detail})")]
    ShapeMismatch { name: String, detail: String },
    #[error("tensor {name} contains non-finite values")]
    NonFinite { name: String },
    #[error("checkpoint is missing tensor {name}")]
    MissingTensor { name: String },
    #[error("checkpoint contains unexpected tensor {name}")]
    UnexpectedTensor { name: String },
    #[error("checkpoint has no model config in its metadata")]
    MissingConfig,
    #[error("invalid model config: {0}")]
    Config(String),

    // ── tokenizer / runtime ───────────────────────────────────────────────
    #[error("cannot tokenize empty text")]
    EmptyText,
    #[error("token id {id} out of range for vocab size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("sequence of {len} tokens exceeds max_seq_len {max} ({context})")]
    SequenceTooLong { len: usize, max: usize, context: String },
    #[error("non-finite activation at {layer_path}")]
    NonFiniteActivation { layer_path: String },
    #[error("tape is missing hook {layer_path}")]
    MissingHook { layer_path: String },
    #[error("{op} requires an f64 model (model dtype is f32)")]
    PrecisionUnsupported { op: String },

    // ── dataset / instructions ────────────────────────────────────────────
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("duplicate instance id {id}")]
    DuplicateInstanceId { id: String },
    #[error("instance {id}: {problem}")]
    BadInstance { id: String, problem: String },
    #[error("instruction template {index}: placeholder {placeholder} must appear exactly once (found {count})")]
    BadTemplate { index: usize, placeholder: String, count: usize },
    #[error("instruction set is empty")]
    EmptyInstructionSet,

    // ── attribution / detection ───────────────────────────────────────────
    #[error("need at least 2 class scores, got {got}")]
    TooFewClasses { got: usize },
    #[error("gold index {gold} out of range for {len} classes")]
    GoldOutOfRange { gold: usize, len: usize },
    #[error("non-finite class score at index {index}")]
    NonFiniteScore { index: usize },
    #[error("attribution label kind mismatch: expected {expected}, got {got}")]
    LabelKindMismatch { expected: String, got: String },
    #[error("attributions are not shape-congruent at {layer_path}: {detail}")]
    ShapeIncongruent { layer_path: String, detail: String },
    #[error("attributions belong to different instances ({a} vs {b})")]
    InstanceMismatch { a: String, b: String },
    #[error("expected a {expected}-granularity score map, got {got}")]
    GranularityMismatch { expected: String, got: String },
    #[error("cannot aggregate zero score maps")]
    EmptyAggregation,
    #[error("score maps disagree on neuron coverage at {layer_path}: {detail}")]
    CoverageMismatch { layer_path: String, detail: String },
    #[error("instance {id} cannot be scored: {source}")]
    UnscorableInstance {
        id: String,
        #[source]
        source: Box<Error>,
    },

    // ── pruning ───────────────────────────────────────────────────────────
    #[error("mask fingerprint {mask} does not match model fingerprint {model} (stale mask)")]
    StaleMask { mask: String, model: String },
    #[error("neuron {neuron} does not exist in this model ({detail})")]
    UnknownNeuron { neuron: String, detail: String },
    #[error("compaction only supports ffn.in channels; unsupported neurons: {offenders}")]
    CompactUnsupported { offenders: String },
    #[error("cannot select top {n} neurons from a ranking of {available}")]
    NotEnoughNeurons { n: usize, available: usize },
    #[error("select_top_n requires n >= 1 (use PruneMask::empty for an explicit empty mask)")]
    ZeroMaskSize,
    #[error("mask file invalid: {0}")]
    BadMask(String),

    // ── calibration ───────────────────────────────────────────────────────
    #[error("calibration vector has {cal} entries but {scores} scores were given")]
    CalibrationLengthMismatch { cal: usize, scores: usize },
    #[error("dc calibration requires a dataset for token statistics")]
    DcNeedsDataset,

    // ── eval / oracle ─────────────────────────────────────────────────────
    #[error("sample size {k} exceeds dataset size {len}")]
    SampleTooLarge { k: usize, len: usize },
    #[error("dataset has no {context_type} instances")]
    NoInstancesOfType { context_type: String },
    #[error("exhaustive search budget exceeded: {detail}")]
    BudgetExceeded { detail: String },
    #[error("neuron position {position} out of range ({rows} positions at {layer_path})")]
    PositionOutOfRange {
        position: usize,
        rows: usize,
        layer_path: String,
    },

    // ── io / formats ──────────────────────────────────────────────────────
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
