use alloc::string::String;

use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("loss must be a scalar, got {numel} elements")]
    NotScalar { numel: usize },
    #[error("empty input to {0}")]
    Empty(&'static str),
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },
    #[error("prompt box matches no node (best IoU {best_iou:.3})")]
    PromptUnmatched { best_iou: f64 },
    #[error("node {0} not found in graph")]
    UnknownNode(u32),
    #[error("invalid scene graph: {0}")]
    InvalidGraph(String),
    #[error("capacity exceeded in {op}: {needed} > {capacity}")]
    Capacity {
        op: &'static str,
        needed: usize,
        capacity: usize,
    },
    #[error("caption tags unbalanced: {0}")]
    UnbalancedTags(String),
    #[error("caption tags nested: {0}")]
    NestedTags(String),
    #[error("caption must have exactly one central span, found {0}")]
    CentralSpanCount(usize),
    #[error("empty tagged span at token {0}")]
    EmptySpan(usize),
    #[error("unknown entity id {0}")]
    UnknownEntity(usize),
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    /// True for failures caused by numerics (NaN/Inf) rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }
}
