//! Bearing fault diagnosis from 1-D vibration signals.
//!
//! The pipeline has three stages:
//!
//! 1. [`gafenc`] encodes fixed-length signal windows into Gramian angular
//!    difference field (GADF) images: min-max rescaling to `[-1, 1]`,
//!    piecewise-aggregate downsampling, polar-angle transform, and the
//!    pairwise angular-difference field `sin(phi_i - phi_j)`.
//! 2. [`augment`] trains one WGAN-GP per fault class on the encoded images
//!    and generates synthetic images that expand a small training set.
//! 3. [`macnn`] classifies images with a multi-scale attention CNN: a wide
//!    first convolution block with instance normalization, three parallel
//!    kernel-scale branches with squeeze-and-excitation attention, ECA-weighted
//!    fusion, global average pooling, and a softmax head.
//!
//! [`dataio`] ingests XJTU-SY-format CSV records and generates synthetic
//! bearing signals whose characteristic fault frequencies follow from the
//! bearing geometry, [`evalviz`] computes metrics / t-SNE projections and
//! renders report plots, and [`pipeline`] drives everything from a single
//! TOML config file (also exposed through the `faultgram` binary).
//!
//! All numerics run in `f64` on a small reverse-mode autodiff engine
//! ([`autodiff`]) that supports differentiating through gradients, which the
//! WGAN-GP gradient penalty needs.

pub mod autodiff;
pub mod container;
pub mod augment;
pub mod dataio;
pub mod evalviz;
pub mod gafenc;
pub mod macnn;
pub mod pipeline;
