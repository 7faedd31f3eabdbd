//! Deterministic toy denoiser with planted subjects, and the two-pass run.

pub mod config;
pub mod model;
pub mod run;
pub mod scene;

pub use config::{RunConfig, Toggles};
pub use model::ToyDenoiser;
pub use run::{
    run, run_with, Engine, HookResult, LayerCorrespondence, Mode, NoopObserver, Observer, PassOutput, RunOptions,
    RunResult, StepContext, StepOutput,
};
pub use scene::{Rect, Scene};
