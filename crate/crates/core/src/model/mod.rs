//! Conditional multi-scale denoiser, differentiation engine, losses and
//! training.

pub mod checkpoint;
pub mod denoiser;
pub mod generate;
pub mod losses;
pub mod optim;
pub mod params;
pub mod tape;
pub mod train;

pub use checkpoint::Checkpoint;
pub use denoiser::{attention, from_rows, to_rows, Condition, Denoiser, DenoiserConfig, Stage, StageRule};
pub use params::{ParamEntry, ParamStore};
pub use tape::{Grads, Tape, Var};
