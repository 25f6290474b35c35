pub mod circuit;
pub mod errmodel;
pub mod error;
pub mod memsim;
pub mod power;
pub mod timing;
pub mod voltron;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/circuit.md")]
    mod circuit {}
    #[doc = include_str!("../../../book/src/timing.md")]
    mod timing {}
    #[doc = include_str!("../../../book/src/memsim.md")]
    mod memsim {}
    #[doc = include_str!("../../../book/src/power.md")]
    mod power {}
    #[doc = include_str!("../../../book/src/voltron.md")]
    mod voltron {}
    #[doc = include_str!("../../../book/src/errmodel.md")]
    mod errmodel {}
}
