//! Meta-learned cognitive diagnosis: a knowledge-base network shared across
//! related assessment units, adapted per unit, protected against forgetting
//! with a parameter-protection penalty, and decoded by per-class heads.

pub mod autodiff;
pub mod data;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod knowledge_base;
pub mod meta;
pub mod optim;
pub mod params;
pub mod perclass;
pub mod ppm;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/meta.md")]
    mod meta {}
    #[doc = include_str!("../../../book/src/ppm.md")]
    mod ppm {}
    #[doc = include_str!("../../../book/src/perclass.md")]
    mod perclass {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
