use thiserror::Error;

/// Errors surfaced by layers, optimizers and training code.
///
/// Shape mismatches inside the low-level graph ops are programmer errors and
/// panic via `assert!`; the layer-level API validates its contracts and
/// returns `Config`, while non-finite values detected during forward/backward
/// passes or optimizer steps come back as `Numeric` with enough context to
/// name the offending layer or parameter.
#[derive(Debug, Error)]
pub enum GradError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("usage error: {0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, GradError>;
