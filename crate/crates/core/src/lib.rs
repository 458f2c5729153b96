//! Factorized diffusion policy.
//!
//! Several small diffusion denoisers are composed into one policy: an
//! observation-conditioned router assigns each denoiser a weight on the
//! simplex, and sampling runs the DDPM reverse process on the weighted sum of
//! their noise predictions. That sum is the score of the weighted product of
//! the component distributions, so the policy samples from
//! `p(a | o) ∝ Π p_i(a | o)^{w_i}`.

pub mod adaptation;
pub mod analysis;
pub mod bench;
pub mod composition;
pub mod diffusion;
pub mod error;
pub mod numerics;
pub mod policy;

pub use error::{Error, Result};
