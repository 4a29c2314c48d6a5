//! Dual-branch latent diffusion editing at desk scale.
//!
//! The crate implements a deterministic DDIM scheduler, a trainable toy
//! denoiser with hookable self-attention sites, pivotal inversion with
//! source-feature caching, adaptive Q/KV attention sharing between the
//! source and editing branches, and an embedder-guided optimization loop
//! that restricts backpropagation through the sampling chain to a small set
//! of gateway steps.
//!
//! All numeric kernels are generic over the scalar type ([`Scalar`]); `f32`
//! is the shipping default ([`Real`]) and `f64` is used where tests need
//! tight tolerances.

pub mod embedder;
pub mod error;
pub mod gateway;
pub mod scalar;
pub mod archive;
pub mod image;
pub mod metrics;
pub mod denoiser;
pub mod inversion;
pub mod optim;
pub mod pipeline;
pub mod schedule;
pub mod share;
pub mod tape;
pub mod toydata;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default scalar type used by the CLI pipeline.
pub type Real = f32;

/// Tensor over the default pipeline scalar.
pub type RealTensor = tape::Tensor<Real>;

/// Convenience aliases for the two supported scalar widths.
pub type Tensor32 = tape::Tensor<f32>;
pub type Tensor64 = tape::Tensor<f64>;
