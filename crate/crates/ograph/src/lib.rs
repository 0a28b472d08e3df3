//! Scene graph engine: file formats, remote model clients, synthetic scenes
//! and the command-line front end, on top of `ograph-core`.

pub mod bundle;
pub mod cli;
pub mod codec;
pub mod http;
pub mod metrics;
pub mod settings;
pub mod synth;

pub use ograph_core as core;
