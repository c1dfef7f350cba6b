pub mod embedstore;
pub mod error;
pub mod featenc;
pub mod interphead;
pub mod mlpcls;
pub mod optim;
pub mod patterns;
pub mod store;
pub mod synthgen;
pub mod tensorfile;
pub mod transcoder;
pub mod util;

pub use error::{Error, Result};

// The guide's code blocks run as doctests.
#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/features.md")]
    mod features {}
    #[doc = include_str!("../../../book/src/heads.md")]
    mod heads {}
    #[doc = include_str!("../../../book/src/curation.md")]
    mod curation {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
