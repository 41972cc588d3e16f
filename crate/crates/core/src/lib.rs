//! Single-lead ECG aging analysis.
//!
//! The crate covers the whole pipeline from raw waveforms to explanations:
//!
//! * [`signal_io`] reads WFDB format-16 and CSV records, resamples and imputes.
//! * [`synthgen`] builds synthetic records and cohorts with exact ground truth.
//! * [`beatdetect`] finds R-peaks, delineates fiducial points and cuts beats.
//! * [`features`] computes per-beat short-range and per-record HRV features.
//! * [`gbdt`] trains a multi-class gradient-boosted tree classifier.
//! * [`treeshap`] explains that classifier with exact path-dependent TreeSHAP.
//! * [`refnet`] is a small 1-D CNN with focal/CE training and saliency maps.
//! * [`attrib`] aligns attribution maps on beats and aggregates them per group.
//! * [`eval`] handles splits, macro-AUC, bootstrap intervals and group merging.
//!
//! The guide in `book/` walks through each stage; its code listings are
//! compiled and run as doctests of this crate.

pub mod attrib;
pub mod beatdetect;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod features;
pub mod gbdt;
pub mod refnet;
pub mod signal_io;
pub mod synthgen;
pub mod treeshap;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/signals.md")]
    struct Signals;
    #[doc = include_str!("../../../book/src/synthetic.md")]
    struct Synthetic;
    #[doc = include_str!("../../../book/src/beats.md")]
    struct Beats;
    #[doc = include_str!("../../../book/src/hrv.md")]
    struct Hrv;
    #[doc = include_str!("../../../book/src/boosting.md")]
    struct Boosting;
    #[doc = include_str!("../../../book/src/treeshap.md")]
    struct TreeShap;
    #[doc = include_str!("../../../book/src/saliency.md")]
    struct Saliency;
    #[doc = include_str!("../../../book/src/aggregation.md")]
    struct Aggregation;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    struct Evaluation;
}
