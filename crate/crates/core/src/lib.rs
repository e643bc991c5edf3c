//! Piano music modeling with four coupled Transformer-XL stream networks
//! over tempo-free note tuples `⟨on2on, on2off, pitch, velocity⟩`.
//!
//! Pipeline: [`midi`] parses Standard MIDI Files into timed notes, [`codec`]
//! turns them into four token streams, [`model`] holds the coupled networks
//! built on the small autodiff engine in [`tensor`], [`train`] fits them,
//! [`sampler`] generates arbitrarily long music with bounded memory, and
//! [`eval`] computes note-density and pitch-distribution metrics. [`cli`]
//! backs the `mtxl` binary.

pub mod cli;
pub mod codec;
pub mod config;
pub mod eval;
pub mod fsutil;
pub mod midi;
pub mod model;
pub mod sampler;
pub mod tensor;
pub mod train;
