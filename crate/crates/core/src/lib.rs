pub mod calib;
pub mod codec;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod synth;
pub mod probe;
pub mod viz;
pub mod world;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/synthetic-world.md")]
    mod synthetic_world {}
    #[doc = include_str!("../../../book/src/codec.md")]
    mod codec {}
    #[doc = include_str!("../../../book/src/diffusion.md")]
    mod diffusion {}
    #[doc = include_str!("../../../book/src/thresholds.md")]
    mod thresholds {}
    #[doc = include_str!("../../../book/src/probe.md")]
    mod probe {}
    #[doc = include_str!("../../../book/src/calibration.md")]
    mod calibration {}
    #[doc = include_str!("../../../book/src/visualization.md")]
    mod visualization {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
