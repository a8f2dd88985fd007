use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("unknown op kind `{0}`")]
    UnknownOp(String),

    #[error("loss must be scalar, got shape {0:?}")]
    NonScalarLoss(alloc::vec::Vec<usize>),

    #[error("index {index} out of range for {what} of size {len}")]
    OutOfRange { what: &'static str, index: usize, len: usize },

    #[error("invalid head weights: {0}")]
    HeadWeights(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("invalid LoRA rank {rank} for layer `{layer}` ({inp} -> {out})")]
    LoraRank { layer: String, rank: usize, inp: usize, out: usize },

    #[error("parameter stores differ: {0}")]
    StoreMismatch(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("non-finite loss {value} at step {step}")]
    NonFiniteLoss { step: usize, value: f64 },

    #[error("run `{regime}` seed {seed} failed: {source}")]
    Run {
        regime: String,
        seed: u64,
        #[source]
        source: alloc::boxed::Box<Error>,
    },
}
