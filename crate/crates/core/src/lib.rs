//! Kinetic modelling of dynamic FDG PET with anatomically weighted input functions.
//!
//! The tissue response follows the irreversible two-compartment model,
//! driven by an input function mixed from up to four image-derived input
//! functions (aorta, portal vein, pulmonary artery, ureter). The crate
//! covers the forward model, input-function extraction and mixing, a
//! bound-constrained least-squares solver, organ- and voxel-level fitting,
//! mask post-processing, cohort statistics, and volume/curve I/O.
//!
//! Time is carried in seconds everywhere; rate constants are in 1/min and
//! are converted once inside the model evaluation.

pub mod error;
pub mod fitting;
pub mod input;
pub mod io;
pub mod model;
pub mod morphology;
pub mod optimizer;
pub mod stats;
pub mod synth;
pub mod volume;

pub use error::{Error, Result};
pub use fitting::{FitConfig, FitMode, Organ, OrganPreset, TacFit, WarmStartFits, WeightScaling};
pub use input::{InputFunctionSet, MixWeights};
pub use model::{ConvolutionRule, FineGrid, Frame, FrameGrid, KineticParams, Tac};
pub use optimizer::{FitResult, ParamBounds, SolverOptions, Termination};
pub use volume::{LabelVolume, ScalarVolume};
