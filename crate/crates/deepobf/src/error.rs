use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced while reading or writing model files. The categories are
/// deliberately distinct so callers can tell a stale format from a damaged
/// file.
#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("bad magic: expected \"DOBF\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },
    #[error("truncated file: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed {section}: {msg}")]
    Malformed { section: &'static str, msg: String },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("graph error: {0}")]
    Graph(String),

    /// Interface mismatches during surgery or evaluation (wrong channel
    /// counts, class counts, downsampling factors). Exit code 3.
    #[error("interface mismatch in {context}: expected {expected}, actual {actual}")]
    Interface {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("config error{}: {msg}", .line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Config { line: Option<usize>, msg: String },

    #[error("model file error: {0}")]
    ModelFile(#[from] ModelFileError),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Non-finite loss during training. Exit code 4.
    #[error("training diverged in {stage} (epoch {epoch}, batch {batch}): loss not finite")]
    Divergence {
        stage: String,
        epoch: usize,
        batch: usize,
    },

    #[error("analyzer error: {0}")]
    Analyzer(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid argument: {0}")]
    InvalidArg(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config {
            line: None,
            msg: msg.into(),
        }
    }

    pub fn config_at(line: usize, msg: impl Into<String>) -> Self {
        Error::Config {
            line: Some(line),
            msg: msg.into(),
        }
    }

    /// Process exit code for the CLI: 2 usage/config, 3 semantic mismatch,
    /// 4 runtime divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Io(_) | Error::ModelFile(_) | Error::InvalidArg(_) => 2,
            Error::Interface { .. } | Error::Data(_) => 3,
            Error::Divergence { .. } => 4,
            Error::Shape(_) | Error::Graph(_) | Error::Analyzer(_) => 3,
        }
    }
}
