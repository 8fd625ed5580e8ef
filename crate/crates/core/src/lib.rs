//! Faithful data-to-text generation on a synthetic corpus: a small
//! transformer, supervised and preference training, noisy negative sampling,
//! decoding baselines, exact fact-checking metrics and an end-to-end harness.

pub mod corpus;
pub mod decoding;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod training;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/corpus.md")]
    mod corpus {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/decoding.md")]
    mod decoding {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
