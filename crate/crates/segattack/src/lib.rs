//! Desk-scale toolkit for studying FGSM attacks on segmentation models:
//! train small U-Net / U-Net++ networks on synthetic phantom scans, attack
//! them with the Fast Gradient Sign Method under interchangeable losses,
//! and quantify the damage as a relative DSC drop.
//!
//! Everything runs on CPU in 64-bit floats over a from-scratch
//! reverse-mode autodiff tape, so gradients (including the input gradient
//! FGSM needs) are exact and checkable against finite differences. All
//! randomness flows from explicit seeds; identical configs produce
//! byte-identical artifacts.
//!
//! The `examples/` directory demonstrates each capability end to end; the
//! `segattack` binary wires them into a config-driven pipeline
//! (generate, train, attack, report, check).

// Negated comparisons like `!(x > 0.0)` are used deliberately so NaN
// fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod autodiff;
pub mod data;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod tensor;
pub mod training;
