pub mod alignment;
pub mod dataset;
pub mod decoder;
pub mod dsp;
pub mod eval;
pub mod parallel;
pub mod pipeline;
pub mod reconstruct;
pub mod signal_io;
pub mod synth;
