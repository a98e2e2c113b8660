//! Hierarchical knowledge distillation for two-stage pedestrian detectors.
//!
//! A small FPN detector (the student) learns from a larger one (the teacher)
//! through three feature-matching losses: on the whole feature pyramid, on
//! RoI-cropped region features and on the penultimate FC activation of the
//! second-stage head. The crate carries its own reverse-mode autodiff tape,
//! the detector networks, Pyramid RoIAlign, the training driver and a
//! miss-rate/FPPI evaluator.

pub mod autodiff;
pub mod boxes;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod nets;
pub mod params;
pub mod roi;
pub mod tensor;
pub mod training;

pub use autodiff::{Graph, Var};
pub use boxes::{BBox, Detection, RoI, ScoredBox};
pub use error::{Error, Result};
pub use params::ParamStore;
pub use tensor::Tensor;
