// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod array;
pub mod audit;
pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod conditioner;
pub mod config;
pub mod data;
pub mod error;
pub mod layers;
pub mod linalg;
pub mod matexp;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod train;

pub use array::DenseArray;
pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/matrix-exponential.md")]
    mod matrix_exponential {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/layers.md")]
    mod layers {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
