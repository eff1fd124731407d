//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: String, msg: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: String },

    #[error("backward: output must be scalar, got shape {shape:?}")]
    NonScalarBackward { shape: Vec<usize> },

    #[error("graph: unknown node id {0}")]
    UnknownNode(usize),

    #[error("optimizer: missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("optimizer: non-finite update for parameter `{0}`")]
    NonFiniteUpdate(String),

    #[error("{stage}: loss became non-finite")]
    NonFiniteLoss { stage: String },

    #[error("classify: zero-norm {what}")]
    ZeroNorm { what: String },

    #[error("discriminate: auxiliary head is not enabled on this model")]
    AuxHeadAbsent,

    #[error("recordings shorter than chunk_frames_min ({min}): {offenders:?}")]
    RecordingTooShort { min: usize, offenders: Vec<String> },

    #[error("adversarial training requires a non-empty target corpus")]
    EmptyTargetCorpus,

    #[error("trials reference unknown recording ids: {0:?}")]
    MissingIds(Vec<String>),

    #[error("trial list contains duplicate pair ({enroll}, {test})")]
    DuplicateTrial { enroll: String, test: String },

    #[error("EER needs at least one target and one nontarget trial")]
    SingleClassTrials,

    #[error("score sets are not aligned to the same trial list (first mismatch at index {0})")]
    MisalignedScores(usize),

    #[error("domain probe: {0}")]
    ProbeData(String),

    #[error("{file}: malformed at byte {offset}: {msg}")]
    MalformedFile {
        file: String,
        offset: u64,
        msg: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(op: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op: op.into(),
            msg: msg.into(),
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 for data/validation problems,
    /// 3 for numerical failures (usage errors are handled by the parser).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. }
            | Error::NonFiniteUpdate(_)
            | Error::NonFiniteLoss { .. } => 3,
            _ => 2,
        }
    }
}
