// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod fade;
pub mod metrics;
pub mod pseudolabel;
pub mod raster;
pub mod selftrain;
pub mod synth;

pub use pseudolabel::BinaryMask;

// The guide's snippets run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/pseudolabels.md")]
    mod pseudolabels {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/selftrain.md")]
    mod selftrain {}
    #[doc = include_str!("../../../book/src/fade.md")]
    mod fade {}
    #[doc = include_str!("../../../book/src/corpus.md")]
    mod corpus {}
    #[doc = include_str!("../../../book/src/review.md")]
    mod review {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
