//! Desk-scale laboratory for training classifiers with layer-wise
//! adversarial noise injected during the backward-forward pass, and for
//! measuring the adversarial, corruption and structural robustness of the
//! resulting models.
//!
//! Modules:
//! - [`tensor`]: dense f64 arrays, norms, and the nn kernels.
//! - [`nn`]: layered networks, explicit forward/backward, noise registers.
//! - [`train`]: the noise-propagation training loop, masks, baselines.
//! - [`attacks`]: white-box crafting (FGSM/BIM/PGD/Step-LL/MI-FGSM/CW-l2)
//!   and black-box worst-case accounting.
//! - [`corruption`]: deterministic corruption generators and frame sequences.
//! - [`metrics`]: corruption error, flip rates, boundary distance,
//!   noise insensitivity, and the layer-wise deviation bound audit.
//! - [`data`]: IDX datasets, synthetic generators, checkpoints, manifests.

pub mod error;
pub mod tensor;
pub mod nn;
pub mod train;
pub mod attacks;
pub mod corruption;
pub mod metrics;
pub mod data;

pub use error::{AnpError, Result};
