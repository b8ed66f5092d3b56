//! Latent force model covariances built from random Fourier response features.
//!
//! Each output of a latent force model is a linear ODE driven by Gaussian-process forces. Instead
//! of closed-form kernels, the covariance is approximated by inner products of sampled response
//! features `v_d(t, lambda)`, which makes the Gram matrix low rank and the marginal likelihood
//! linear in the number of observations.
//!
//! Modules, bottom up:
//! - [`model`]: specs, datasets and hyperparameter packing
//! - [`features`]: frequency draws, ODE roots, partial-fraction residues and response features
//! - [`quadrature`] and [`kernels`]: feature matrices, approximate and exact covariances
//! - [`mogp`]: features for convolved multi-output GPs with Gaussian smoothing kernels
//! - [`likelihood`]: full and low-rank log marginals, gradients and the optimiser
//! - [`predict`]: posteriors over outputs and latent forces, NMSE and NLPD

// `!(x > 0.0)` is used deliberately so NaN fails the check
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod features;
pub mod io;

pub mod kernels;
pub mod likelihood;

pub mod model;
pub mod mogp;
pub mod predict;


pub mod quadrature;

pub use error::{LfmError, Result};
