//! Dense label propagation through video: warp-inpaint and warp-refine
//! chains, a cycle-consistency-trained refiner, synthetic sequences with
//! controllable motion and semantic noise, and mIoU-vs-horizon evaluation.

pub mod cli;
pub mod error;
pub mod eval;
pub mod flowio;
pub mod grid;
pub mod oracles;
pub mod propagation;
pub mod refine;
pub mod synth;

pub use error::{Error, Result};
pub use eval::{emit_report, horizon_curve, tau_sweep, ConfusionMatrix, EvalJob, HorizonConfig, HorizonReport, IgnorePolicy};
pub use grid::{argmax_decode, onehot_encode, FlowField, GateMask, Image, LabelMap, SoftLabelMap};
pub use oracles::{Direction, MotionNoiseConfig, Oracles, SemanticNoiseConfig};
pub use propagation::{cycle_propagate, propagate, warp_inpaint_step, GateConfig, Method, PropagateConfig};
pub use refine::{train, RefinerParams, TrainConfig};
pub use synth::{generate, standard_benchmark, SceneConfig, Sequence};
