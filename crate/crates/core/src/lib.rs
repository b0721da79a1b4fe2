//! Mining and replaying performance-improving commits from C++ projects.

pub mod backend;
pub mod classifier;
pub mod cli;
pub mod ctest;
pub mod deptable;
pub mod discovery;
pub mod eval;
pub mod fsutil;
pub mod git;
pub mod harvest;
pub mod hosting;
pub mod orchestrator;
pub mod pipeline;
pub mod runtime;
pub mod stats;
pub mod store;

/// Tag prefix for snapshot images produced by the pipeline.
pub const IMAGE_PREFIX: &str = "perfmine/";

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/harvesting.md")]
    mod harvesting {}
    #[doc = include_str!("../../../book/src/classification.md")]
    mod classification {}
    #[doc = include_str!("../../../book/src/builds.md")]
    mod builds {}
    #[doc = include_str!("../../../book/src/statistics.md")]
    mod statistics {}
    #[doc = include_str!("../../../book/src/store.md")]
    mod store {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/quickstart.md")]
    mod quickstart {}
}
