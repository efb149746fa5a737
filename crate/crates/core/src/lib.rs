//! A desk-scale laboratory for panoramic (equirectangular) video diffusion.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`], [`ops`], [`graph`], [`param`], [`optim`], [`gradcheck`]: a
//!   small deterministic reverse-mode tensor engine (per-frame and temporal
//!   convolutions, channel normalization, pixel unshuffle, Adam).
//! * [`geom`]: ERP pixel/direction mapping, gnomonic views, column rotation,
//!   analytic rotation flow.
//! * [`diffusion`]: linear beta schedule, forward noising, DDIM sampling and
//!   the cosine-of-latitude weighted loss.
//! * [`adapter`]: the motion adapter producing four multi-scale features.
//! * [`unet`], [`train`]: the toy pseudo-3D denoiser and its two-phase
//!   training loop.
//! * [`enhance`]: latent rotation, late-half circular padding, seam metrics.
//! * [`synth`], [`io`]: procedural panoramic scenes with exact flow, the
//!   `P360` tensor container, PPM frames and scene spec files.

pub mod adapter;
pub mod diffusion;
pub mod enhance;
pub mod error;
pub mod geom;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod ops;
pub mod optim;
pub mod parallel;
pub mod param;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod unet;

pub use error::{Error, Result};
pub use ops::PadMode;
pub use tensor::{Shape, Tensor};
