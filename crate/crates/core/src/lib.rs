//! Transformer text-to-speech with fine-grained style control.
//!
//! A reference utterance is encoded into a time sequence of local style
//! tokens plus a global speaker embedding. Cross-attention blocks fuse that
//! sequence into the phoneme stream before an autoregressive spectrogram
//! decoder. Everything runs on the small reverse-mode engine in
//! [`autodiff`], generic over the [`Scalar`] type: `f32` for training,
//! `f64` for finite-difference checks.

pub mod autodiff;
pub mod batch;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod diagnostics;
pub mod error;
pub mod extended;
pub mod gradsuite;
pub mod infer;
pub mod io;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod style;
pub mod tensor;
pub mod train;

pub use autodiff::{grad_check, grad_check_extended, grad_check_params, Objective, GradCheckReport, Gradients, Graph, Var};
pub use config::ModelConfig;
pub use error::{Error, Result};
pub use model::{LstTts, MelSpectrogram, PhonemeSequence};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::{ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = LstTts<f32>;
pub type Model64 = LstTts<f64>;
