use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("ingestion failed for {frame}: {reason}")]
    Ingest { frame: String, reason: String },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("value out of range: {0}")]
    Range(String),

    #[error("degenerate statistics: {0}")]
    Degenerate(String),

    #[error("fingerprint mismatch: expected {expected}, found {found}")]
    Fingerprint { expected: String, found: String },

    #[error("training diverged at step {step} ({component}): loss = {loss}")]
    Diverged {
        step: usize,
        component: String,
        loss: f64,
    },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("unsupported format: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tiff(#[from] tiff::TiffError),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(vec![msg.into()])
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(expected: impl std::fmt::Display, got: impl std::fmt::Display) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Collects validation failures so callers can report every violation at once.
#[derive(Debug, Default)]
pub struct Violations(Vec<String>);

impl Violations {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn check(&mut self, ok: bool, msg: impl FnOnce() -> String) {
        if !ok {
            self.0.push(msg());
        }
    }

    pub fn push(&mut self, msg: impl Into<String>) {
        self.0.push(msg.into());
    }

    /// Absorbs the violations of a nested validation, tagged with `section`.
    pub fn extend_from(&mut self, result: Result<()>, section: &str) {
        match result {
            Ok(()) => {}
            Err(Error::Config(msgs)) => {
                self.0.extend(msgs.into_iter().map(|m| format!("{section}: {m}")))
            }
            Err(e) => self.0.push(format!("{section}: {e}")),
        }
    }

    pub fn into_result(self) -> Result<()> {
        if self.0.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(self.0))
        }
    }
}
