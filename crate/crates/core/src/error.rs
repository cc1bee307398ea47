use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("no binding for placeholder `{0}`")]
    MissingBinding(String),
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("invalid template `{name}`: {reason}")]
    InvalidTemplate { name: String, reason: String },
    #[error("invalid chat request: {0}")]
    InvalidRequest(String),

    #[error("transport error: {0}")]
    Transport(String),
    #[error("authentication rejected (HTTP {status})")]
    Auth { status: u16 },
    #[error("backend returned an empty completion")]
    BackendRefusal,
    #[error("no mock rule matches the prompt")]
    NoMockRule,

    #[error("no JSON object in model reply")]
    ParseFailure,
    #[error("question agent reply could not be parsed: {0}")]
    NormalizationParse(String),
    #[error("no fenced code block in model reply")]
    NoCodeBlock,

    #[error("embedding backend error: {0}")]
    EmbeddingBackend(String),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("index built by provider `{index}` queried with `{query}`")]
    ProviderMismatch { index: String, query: String },
    #[error("cannot embed empty text")]
    EmptyText,

    #[error("schema error at record {index}: {message}")]
    Schema { index: usize, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("executor failure: {0}")]
    Execution(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the surrounding infrastructure (network, credentials)
    /// rather than of the model's content.
    pub fn is_infrastructure(&self) -> bool {
        matches!(
            self,
            Error::Transport(_)
                | Error::Auth { .. }
                | Error::EmbeddingBackend(_)
                | Error::Execution(_)
                | Error::Io(_)
                | Error::File { .. }
        )
    }
}
