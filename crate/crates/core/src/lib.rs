//! Set-conditioned unpaired image-to-image translation.
//!
//! The crate trains a pair of coupled generators that translate an image
//! together with a *set* of per-instance segmentation masks between two
//! domains. Generators are permutation-equivariant and discriminators
//! permutation-invariant over the mask set; a context-preserving loss pins
//! the background, and a sequential mini-batch scheme translates instance
//! subsets one after another with gradient detachment between steps so
//! memory stays flat in the instance count.
//!
//! Module map:
//! - [`graph`]: reverse-mode autodiff tape over `ndarray` tensors.
//! - [`kernels`]: raw conv / im2col / normalization kernels.
//! - [`data`]: manifests, preprocessing, mask ordering/partitioning and the
//!   synthetic two-domain shape dataset.
//! - [`coco`]: COCO instance-annotation ingestion (polygon + RLE).
//! - [`networks`]: set-conditioned generator and discriminator.
//! - [`losses`]: LSGAN, cycle, identity and context-preserving losses.
//! - [`sequential`]: sequential mini-batch inference and the detached
//!   training step.
//! - [`trainer`]: optimization loop, replay pool, checkpoints.
//! - [`eval`]: domain classifier, classification scores, mask diagnostics.
//! - [`config`]: run configuration and the desk/paper profiles.

pub mod coco;
pub mod config;
pub mod data;
pub mod elem;
pub mod error;
pub mod eval;
pub mod graph;
pub mod imageio;
pub mod kernels;
pub mod losses;
pub mod networks;
pub mod sequential;
pub mod trainer;

pub use elem::Elem;
pub use error::{Error, Result};
