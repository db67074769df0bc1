//! Conditional-GAN segmentation of dental bitewing radiographs.
//!
//! A skip-connected U-Net generator maps a grayscale radiograph to a
//! color-coded class map and is trained against a discriminator that scores
//! (radiograph, class map) pairs, with an additional L1 reconstruction term.

pub mod codec;
pub mod config;
pub mod infer;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod parallel;
pub mod phantom;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod train;

pub use codec::{default_palette, ClassPalette, IndexMask};
pub use phantom::{PhantomSpec, SamplePair};
pub use tensor::Tensor;
