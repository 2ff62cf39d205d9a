use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("basis is singular or ill-conditioned (condition number {condition:e})")]
    SingularBasis { condition: f64 },
    #[error("index {index} out of range (valid: 0..{len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("block {block} is rank deficient")]
    RankDeficientBlock { block: usize },
    #[error("bad correlation spec: {0}")]
    BadCorrelationSpec(String),
    #[error("bad schema: {0}")]
    BadSchema(String),
    #[error("training diverged at epoch {epoch}: total loss is not finite")]
    DivergedTraining { epoch: usize },
    #[error("attribute {attribute}: labels contain a single class")]
    DegenerateLabels { attribute: usize },
    #[error("direction vector is zero")]
    ZeroVector,
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("bad config field `{field}`: {reason}")]
    BadConfig { field: String, reason: String },
    #[error("malformed {kind} file: {reason}")]
    Format { kind: &'static str, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            found,
        })
    }
}
