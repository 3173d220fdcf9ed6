//! Conditional masked language model: encoder with a length classifier and
//! a fully visible decoder over partially masked targets.

mod config;
mod params;
mod transformer;

pub use config::ModelConfig;
pub use params::{parameter_shapes, xavier_bound, ParameterSet};
pub use transformer::{length_candidates, DecoderOutput, EncoderOutput, Mode, NatModel};
