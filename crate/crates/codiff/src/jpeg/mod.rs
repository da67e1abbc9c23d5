//! Bit-faithful JPEG degradation simulation and training-pair synthesis.

pub mod codec;
pub mod jfif;
pub mod synth;
pub mod tables;

pub use codec::{jpeg_round_trip, ChromaSampling};
pub use synth::{sample_rng, synthesize_pair_at_qf, synthesize_training_pair, DegradedPair};
pub use tables::{quant_table_for_qf, QualityFactor, QuantizationTable};
