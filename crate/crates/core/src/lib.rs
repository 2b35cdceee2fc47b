//! Arithmetic on low-rank adapter checkpoints.
//!
//! The centrepiece is extraction-before-subtraction ([`extsub`]): instead of
//! subtracting an anti-expert adapter wholesale, each row of its delta is
//! split into a component shared with the expert and a residual deficiency,
//! and only the deficiency is subtracted. Direct subtraction, compositional
//! pipelines, truncated-SVD re-factorization ([`lowrank`]) and the rep-n
//! degeneration metric ([`textmetrics`]) sit alongside it.
//!
//! ```
//! use extsub::extsub::{ext_sub_row, extract_row};
//!
//! let row = extract_row(&[1.0f64, 0.0], &[0.0, 1.0], 1e-12);
//! assert!((row.deficiency[0] + 0.5).abs() < 1e-12);
//! let updated = ext_sub_row(&[1.0f64, 0.0], &[0.0, 1.0], 1.0, 1e-12);
//! assert!((updated[0] - 1.5).abs() < 1e-12 && (updated[1] + 0.5).abs() < 1e-12);
//! ```

pub mod adapter;
pub mod checkpoint;
pub mod cli;
pub mod extsub;
pub mod lowrank;
pub mod matrix;
pub mod pipeline;
pub mod store;
pub mod textmetrics;

pub use adapter::{assemble, check_compatible, compose_delta, AdapterModel, DeltaModel, SuffixConvention};
pub use extsub::{direct_subtract, ext_sub, extract, GeometryReport, Mode, UnlearnConfig};
pub use matrix::{Matrix, Real};
pub use store::{DType, TensorEntry, TensorStore};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Store(#[from] store::StoreError),
    #[error(transparent)]
    Adapter(#[from] adapter::AdapterError),
    #[error(transparent)]
    Unlearn(#[from] extsub::UnlearnError),
    #[error(transparent)]
    LowRank(#[from] lowrank::LowRankError),
    #[error(transparent)]
    Text(#[from] textmetrics::TextError),
    #[error("{0}")]
    Pipeline(String),
}

impl Error {
    /// Stable machine-readable error code.
    pub fn code(&self) -> &'static str {
        use adapter::AdapterError as A;
        use store::StoreError as S;

        fn store_code(e: &S) -> &'static str {
            match e {
                S::MalformedHeader(_) => "MalformedHeader",
                S::OffsetOverlap { .. } => "OffsetOverlap",
                S::UnknownDtype { .. } => "UnknownDtype",
                S::ShapeUnsupported { .. } => "ShapeUnsupported",
                S::InvalidEntry { .. } => "InvalidEntry",
                S::Io { .. } => "IoFailure",
            }
        }
        fn adapter_code(e: &A) -> &'static str {
            match e {
                A::UnpairedFactor { .. } => "UnpairedFactor",
                A::RankMismatch { .. } => "RankMismatch",
                A::AmbiguousOrientation { .. } => "AmbiguousOrientation",
                A::KeySetMismatch { .. } => "KeySetMismatch",
                A::ShapeMismatch { .. } => "ShapeMismatch",
                A::Store(s) => store_code(s),
            }
        }

        match self {
            Error::Store(e) => store_code(e),
            Error::Adapter(e) => adapter_code(e),
            Error::Unlearn(extsub::UnlearnError::Adapter(e)) => adapter_code(e),
            Error::Unlearn(extsub::UnlearnError::InvalidConfig(_)) => "InvalidConfig",
            Error::LowRank(lowrank::LowRankError::RankTooLarge { .. }) => "RankTooLarge",
            Error::LowRank(lowrank::LowRankError::ZeroRank) => "ZeroRank",
            Error::Text(textmetrics::TextError::Io { .. }) => "IoFailure",
            Error::Text(textmetrics::TextError::MalformedLine { .. }) => "MalformedLine",
            Error::Text(textmetrics::TextError::ZeroN) => "InvalidConfig",
            Error::Pipeline(_) => "InvalidPipeline",
        }
    }
}
