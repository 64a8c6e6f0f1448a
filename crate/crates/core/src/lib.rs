//! Data-driven feedback stabilization of control-affine systems through a
//! bilinear Koopman eigenfunction model and a quadratic control Lyapunov
//! function.

pub mod analysis;
pub mod clf;
pub mod config;
pub mod control;
pub mod dictionary;
pub mod error;
pub mod io;
pub mod koopman;
pub mod linalg;
pub mod pipeline;
pub mod systems;

pub use analysis::{model_error, sample_complexity_sweep, ErrorCurve, SweepSpec};
pub use clf::{check_stabilizability, clf_terms, solve_clf, ClfOptions, QuadraticClf, StabilizabilityReport};
pub use config::PipelineConfig;
pub use control::{
    feedback, simulate_closed_loop, simulate_open_loop, ControllerKind, ControllerSpec, SimSettings, SimulationResult,
};
pub use dictionary::Dictionary;
pub use error::{Error, Result};
pub use koopman::{edmd_fit, identify, BMethod, BilinearModel, IdentifyOptions, KoopmanApprox, Spectrum};
pub use pipeline::{run_pipeline, PipelineReport, PipelineStatus};
pub use systems::{generate_dataset, ControlAffineSystem, DatasetSpec, Trajectory, TrajectoryDataset};
