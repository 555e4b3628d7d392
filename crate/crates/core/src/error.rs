use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid skeleton: {0}")]
    Skeleton(String),

    #[error("malformed URDF: {0}")]
    Urdf(String),

    #[error("unsupported joint type `{kind}` on joint `{joint}`")]
    UnsupportedJoint { joint: String, kind: String },

    #[error("kinematic structure is not a tree: {0}")]
    KinematicLoop(String),

    #[error("link `{0}` does not exist in the kinematic tree")]
    MissingLink(String),

    #[error("invalid hand config: {0}")]
    HandConfig(String),

    #[error("no mount joint declared in the hand config")]
    MountNotDeclared,

    #[error("finger tag mismatch: {0}")]
    TagMismatch(String),

    #[error("duplicate finger tag `{0}`")]
    DuplicateTag(String),

    #[error("unknown {kind} `{name}` (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("success tracker already finished the episode")]
    TrackerDone,

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("bad file format: expected magic bytes {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("format error: {0}")]
    Format(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by malformed or inconsistent input files.
    pub fn is_input_format(&self) -> bool {
        matches!(
            self,
            Error::Dimension { .. }
                | Error::Skeleton(_)
                | Error::Urdf(_)
                | Error::UnsupportedJoint { .. }
                | Error::KinematicLoop(_)
                | Error::MissingLink(_)
                | Error::HandConfig(_)
                | Error::TagMismatch(_)
                | Error::DuplicateTag(_)
                | Error::Empty(_)
                | Error::BadMagic { .. }
                | Error::Format(_)
                | Error::Parse { .. }
                | Error::Io(_)
                | Error::Json(_)
        )
    }

    /// True for failures of the numerical machinery itself.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::Diverged { .. })
    }
}

pub(crate) fn ensure_finite(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}
