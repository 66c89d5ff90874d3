pub mod dsp;
pub mod numerics;
pub mod recurrent;
pub mod model;
pub mod training;
pub mod streaming;
pub mod evaluation;
pub mod synth;
pub mod diagnostics;
