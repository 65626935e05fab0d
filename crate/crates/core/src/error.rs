use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite logits")]
    NonFiniteLogits,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("mask too long: k = {k} exceeds {max}")]
    MaskTooLong { k: usize, max: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("pretrain underfit: held-out accuracy {accuracy:.4} below gate {gate}")]
    PretrainUnderfit { accuracy: f64, gate: f64 },

    #[error("bank incomplete: no mixture for class {class}")]
    BankIncomplete { class: u32 },

    #[error("class budget exceeded: schedule needs {needed} classes, corpus has {available}")]
    ClassBudget { needed: usize, available: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("class {class}: {source}")]
    Class {
        class: u32,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Process exit code used by the CLI front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::ClassBudget { .. } => 2,
            Error::PretrainUnderfit { .. } => 3,
            Error::Io(_) | Error::Format(_) => 4,
            Error::Class { source, .. } => source.exit_code(),
            _ => 1,
        }
    }

    pub(crate) fn shape(context: &'static str, expected: usize, found: usize) -> Self {
        Error::ShapeMismatch {
            context,
            expected,
            found,
        }
    }
}
