use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("utterance pair {id}: reference is empty")]
    EmptyReference { id: String },

    #[error("WER undefined: reference length is zero")]
    UndefinedWer,

    #[error("invalid edit script: {0}")]
    InvalidScript(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(
        "task {task}: cannot fill splits {requested:?} (train/valid/test); achievable balanced sizes are {achievable:?}"
    )]
    InsufficientInstances {
        task: String,
        requested: [usize; 3],
        achievable: [usize; 3],
    },

    #[error("task {task}: turn {turn} has no {field} annotation")]
    MissingAnnotation {
        task: String,
        turn: String,
        field: &'static str,
    },

    #[error("label {label:?} of instance {instance} is not in the label set")]
    UnknownLabel { label: String, instance: String },

    #[error("no feature record for {0}")]
    MissingFeature(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("duplicate tensor key {0}")]
    DuplicateKey(String),

    #[error(
        "training diverged at epoch {epoch} (non-finite loss); try a learning rate below {learning_rate}"
    )]
    Divergence { epoch: usize, learning_rate: f64 },

    #[error("split {0} is empty")]
    EmptySplit(&'static str),

    #[error("inconsistent layers: {0}")]
    InconsistentLayers(String),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("span out of range: {0}")]
    SpanOutOfRange(String),

    #[error("invalid segmentation for {id}: {reason}")]
    Segmentation { id: String, reason: String },

    #[error("attention {id} layer {layer} head {head} row {row} sums to {sum}, not 1")]
    NotRowStochastic {
        id: String,
        layer: u32,
        head: u32,
        row: usize,
        sum: f64,
    },

    #[error("no compatible head: {0}")]
    IncompatibleHead(String),
}
