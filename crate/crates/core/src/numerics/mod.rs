//! Dense arrays, reverse-mode gradients, seeded randomness and the small set
//! of neural layers the rest of the crate is built from.

pub mod blob;
pub mod checkpoint;
pub mod layers;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
mod tensor;

pub use optim::{clip_global_norm, sgd_step, Adam, CosineSchedule, Sgd};
pub use params::{Bound, ParamId, ParamStore};
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
