//! Residual diffusion policy for two simulated robot hands playing piano.
//!
//! MIDI songs become per-frame key targets ([`midi`]). A kinematic
//! environment ([`env`], [`kinematics`]) scores key presses. A FiLM-conditioned
//! 1-D U-Net ([`denoiser`]) on a small reverse-mode autodiff engine
//! ([`autodiff`]) is trained by behavior cloning ([`trainer`]) to predict joint
//! residuals on top of inverse kinematics, sampled with DDIM ([`diffusion`]).
//! Episodes are scored by composite rewards ([`reward`]) and a per-hand
//! oracle ([`oracle`]).

pub mod autodiff;
pub mod denoiser;
pub mod diffusion;
pub mod env;
pub mod keys;
pub mod kinematics;
pub mod metrics;
pub mod midi;
pub mod oracle;
pub mod reward;
pub mod rng;
pub mod trainer;
