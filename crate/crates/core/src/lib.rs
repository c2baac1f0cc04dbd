//! Discrete-element simulation of granular media built from rigid clumps of
//! overlapping spheres, each sphere carrying its own material.
//!
//! The crate is organised around a small number of layers:
//!
//! * [`model`] — materials, clump templates (mass and inertia of a sphere
//!   union), per-element dynamic state, pairwise contact coefficients.
//! * [`contact`] — narrow-phase kinematics and the Hertz–Mindlin force model
//!   with tangential history, behind a pluggable [`contact::ForceModel`].
//! * [`broadphase`] — margin-enlarged uniform-grid candidate generation that
//!   lets the contact set be rebuilt every `cd_every` steps instead of every
//!   step.
//! * [`boundary`] — analytic planes and kinematic triangle meshes with
//!   prescribed motion and aggregated wrench readback.
//! * [`integrate`] — semi-implicit Euler stepping of clump states.
//! * [`pipeline`] — the lockstep and two-thread producer/consumer drivers;
//!   pinned cadence makes the threaded mode bitwise equal to lockstep.
//! * [`scenekit`] — scene preparation (lattice sampling, settling, patch
//!   replication, compression) and the measured quantities (bulk density,
//!   repose angle, slip ratio).

pub mod boundary;
pub mod broadphase;
pub mod contact;
pub mod integrate;
pub mod meshgen;
pub mod model;
pub mod pipeline;
pub mod scene;
pub mod scenekit;

mod engine;

pub use engine::StepOutcome;
pub use nalgebra;

pub use boundary::{load_mesh, MotionSegment, MotionSpec, PlaneBoundary, TriMeshBody};
pub use broadphase::ContactSet;
pub use contact::{ForceModel, HertzMindlin};
pub use integrate::StepConfig;
pub use meshgen::{
    cone_mesh, funnel_mesh, wheel_mesh, write_obj, ConeSpec, FunnelSpec, WheelSpec,
};
pub use model::{
    build_clump_template, load_template_file, ClumpState, ClumpTemplate, Material,
    SphereComponent,
};
pub use pipeline::{run, HookFlow, NoHook, PipelineConfig, PipelineMode, RunStats, StepHook};
pub use scene::{GridConfig, Scene};
pub use scenekit::{
    build_scene, compress, fix_below, generate_ds_templates, load_patch, max_penetration,
    measure_bulk_density, measure_repose_angle, measure_slip, replicate_patch, sample_hcp,
    save_patch, settle, spawn_batch, type_sequence, CompressParams, CompressReport,
    CompressTarget, Hooks, MeshWrenchLog, Patch, PatchMeta, SettleParams, SettleReport,
    SimulantSpec, SimulantType, SlipMeasure, WheelRig, WheelRigParams, WheelSample,
    WrenchSample,
};

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors shared by every layer of the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-supplied value violates a documented precondition.
    #[error("parameter error: {0}")]
    Param(String),

    /// A clump template's sphere union is not a single connected solid.
    #[error("component {component} is disconnected from the rest of the sphere union")]
    Disconnected { component: usize },

    /// Contact geometry with no defined normal direction.
    #[error("degenerate contact normal: {0}")]
    DegenerateNormal(String),

    /// A sphere left the broad-phase domain.
    #[error("clump {clump} is outside the broad-phase domain")]
    OutOfDomain { clump: usize },

    /// A wrench or state stopped being finite.
    #[error("non-finite state on clump {clump} at step {step}")]
    NonFinite { clump: usize, step: u64 },

    /// The speed bound was violated twice inside one contact-detection window.
    #[error("speed bound exceeded repeatedly near step {step} (max speed {speed} m/s)")]
    SpeedAbort { step: u64, speed: f64 },

    /// A prescribed boundary motion was queried outside its defined range.
    #[error("boundary {body} has no prescribed motion at t = {t} s")]
    MotionUndefined { body: usize, t: f64 },

    /// Mesh or file content the loader deliberately does not accept.
    #[error("unsupported geometry: {0}")]
    UnsupportedGeometry(String),

    /// A structured file failed to parse.
    #[error("format error: {0}")]
    Format(String),

    /// Scenario-level failure with context.
    #[error("scenario error: {0}")]
    Scenario(String),

    /// Compression could not reach the requested target.
    #[error("compression target unreachable; achieved bulk density {achieved} kg/m³")]
    TargetUnreachable { achieved: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
