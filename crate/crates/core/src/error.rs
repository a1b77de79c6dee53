//! Error type shared across the engine.

use alloc::string::String;
use core::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = core::result::Result<T, Error>;

/// Errors emitted by tensor ops, model construction, and the deposit pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// An operator received inputs whose shapes do not compose.
    ShapeMismatch { op: &'static str, detail: String },
    /// `backward` was called on a non-scalar value.
    NonScalarLoss { elements: usize },
    /// An optimizer step found a trainable parameter without a gradient.
    MissingGradient { index: usize },
    /// A model or dataset specification failed validation.
    InvalidSpec(String),
    /// A class partition failed validation (empty side, overlap, out of range).
    InvalidPartition(String),
    /// Prune rate outside `[0, 1)`.
    InvalidPruneRate { rate: f64 },
    /// A prune plan is inconsistent with the module it is applied to.
    InconsistentPlan(String),
    /// A dataset label falls outside `[0, num_classes)`.
    LabelOutOfRange { label: usize, num_classes: usize },
    /// The deposit set contained a sample labeled with a preservation class.
    DepositLabelViolation { label: usize },
    /// A vault cannot be composed with the given target network.
    IncompatibleVault(String),
    /// A scenario asked to withdraw a class group that was never deposited.
    UnknownGroup(String),
    /// A training step produced a non-finite loss.
    NonFiniteLoss { value: f64, context: &'static str },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, detail } => {
                write!(f, "shape mismatch in `{op}`: {detail}")
            }
            Error::NonScalarLoss { elements } => {
                write!(f, "backward requires a scalar loss, got {elements} elements")
            }
            Error::MissingGradient { index } => {
                write!(f, "parameter {index} has no gradient; run backward first")
            }
            Error::InvalidSpec(msg) => write!(f, "invalid spec: {msg}"),
            Error::InvalidPartition(msg) => write!(f, "invalid class partition: {msg}"),
            Error::InvalidPruneRate { rate } => {
                write!(f, "prune rate must lie in [0, 1), got {rate}")
            }
            Error::InconsistentPlan(msg) => write!(f, "inconsistent prune plan: {msg}"),
            Error::LabelOutOfRange { label, num_classes } => {
                write!(f, "label {label} out of range for {num_classes} classes")
            }
            Error::DepositLabelViolation { label } => {
                write!(
                    f,
                    "deposit set contains preservation-class label {label}; refusing to train"
                )
            }
            Error::IncompatibleVault(msg) => write!(f, "incompatible vault: {msg}"),
            Error::UnknownGroup(msg) => write!(f, "unknown class group: {msg}"),
            Error::NonFiniteLoss { value, context } => {
                write!(f, "non-finite loss {value} during {context}")
            }
        }
    }
}

impl core::error::Error for Error {}
