//! Confidence estimation workbench for machine translation.
//!
//! The crate covers the whole pipeline at desk scale:
//!
//! * [`datakit`] generates the synthetic parallel task and reads/writes datasets.
//! * [`glassbox`] trains a small LSTM encoder-decoder and source-side language
//!   models with full access to their internals.
//! * [`annotation`] computes SACC, Krippendorff's alpha, labeling entropy,
//!   bootstrap intervals and the Bernoulli annotation-error model.
//! * [`features`] turns glass-box traces into per-token feature bundles.
//! * [`cemodel`] trains the binary confidence classifier and the naive baseline.
//! * [`eval`] computes PR curves and Recall at a fixed Precision.
//! * [`pipeline`] wires everything into one seeded end-to-end run.

pub mod annotation;
pub mod cemodel;
pub mod checkpoint;
pub mod datakit;
pub mod error;
pub mod eval;
pub mod features;
pub mod glassbox;
pub mod nn;
pub mod pipeline;

pub use error::{Error, Result};

/// Binary translation-quality label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Good,
    NeedsWork,
}

impl Label {
    pub fn is_good(self) -> bool {
        self == Label::Good
    }

    /// Class index used by the two-way softmax predictors: good = 0.
    pub fn index(self) -> usize {
        match self {
            Label::Good => 0,
            Label::NeedsWork => 1,
        }
    }

    pub fn flip(self) -> Label {
        match self {
            Label::Good => Label::NeedsWork,
            Label::NeedsWork => Label::Good,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Good => "good",
            Label::NeedsWork => "needs_work",
        }
    }
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "good" => Ok(Label::Good),
            "needs_work" => Ok(Label::NeedsWork),
            other => Err(Error::invalid(format!("unknown label {other:?}"))),
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}
