//! Spiking neural vocoder: mel-spectrogram to waveform with a spiking
//! ConvNeXt backbone, knowledge distillation from a continuous teacher and
//! synaptic-operation energy accounting.

pub mod autograd;
pub mod block;
pub mod distill;
pub mod dsp;
pub mod energy;
pub mod error;
pub mod io;
pub mod model;
pub mod neuron;
pub mod params;
pub mod real;
pub mod train;

pub use error::{Error, Result};
pub use real::{Precision, Real};
