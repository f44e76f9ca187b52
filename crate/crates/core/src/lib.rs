//! Joint image-report representation learning with global and local
//! contrastive alignment, a sentence prototype bank, and cross-modality
//! conditional reconstruction, at desk scale on a synthetic corpus.

pub mod align;
pub mod ccr;
pub mod checkpoint;
pub mod config;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod matching;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod spb;
pub mod synth;
pub mod train;

pub use autodiff;
pub use error::{Error, Result};
