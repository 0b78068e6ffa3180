//! Volumetric MRI defacing toolkit: a self-contained 3D U-Net mask-prediction
//! pipeline with training, inference, NIfTI-1 I/O, evaluation metrics, a
//! synthetic phantom corpus with a geometric ground-truth oracle, and a speed
//! benchmark harness. CPU only, deterministic per seed.

pub mod bench;
pub mod deface;
pub mod error;
pub mod io;
pub mod metrics;
pub mod optim;
pub mod phantom;
pub mod pipeline;
pub mod reference;
pub mod tensor;
pub mod unet;

pub use error::{Error, Result};
