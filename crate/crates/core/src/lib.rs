pub mod adversary;
pub mod audio;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod features;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod psycho;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Real;

/// Concrete single- and double-precision instantiations.
pub type Waveform32 = audio::Waveform<f32>;
pub type Waveform64 = audio::Waveform<f64>;
pub type Song32 = audio::Song<f32>;
pub type Song64 = audio::Song<f64>;
pub type EncoderHandle32 = encoders::EncoderHandle<f32>;
pub type EncoderHandle64 = encoders::EncoderHandle<f64>;
pub type EncoderSet32 = encoders::EncoderSet<f32>;
pub type EncoderSet64 = encoders::EncoderSet<f64>;
pub type FeatureSequence32 = features::FeatureSequence<f32>;
pub type FeatureSequence64 = features::FeatureSequence<f64>;
pub type MaskingThreshold32 = psycho::MaskingThreshold<f32>;
pub type MaskingThreshold64 = psycho::MaskingThreshold<f64>;
