//! Multiscale bond-based peridynamic fracture analysis for particle
//! reinforced composites.
//!
//! The crate covers the full chain from random microstructure to macroscale
//! crack growth:
//!
//! - [`microstructure`] — random particle-reinforced cells (RVEs) and phase
//!   queries.
//! - [`grid`] — uniform nodal grids, horizon-limited bond sets, the
//!   exponential micromodulus and its energy calibration.
//! - [`ccm`] — small-strain finite element solves on voxel meshes: stretch
//!   load cases, cell problems and the homogenized stiffness tensor.
//! - [`correction`] — energy-based micromodulus correction so the discrete
//!   bond energy matches the continuum energy, including near interfaces
//!   and free surfaces.
//! - [`solver`] — quasi-static bond-based peridynamics with irreversible
//!   bond failure (sequentially linear analysis).
//! - [`multiscale`] — per-sample critical stretch extraction, statistical
//!   aggregation, and the equivalent micromodulus fit.
//! - [`pipeline`] — end-to-end orchestration with on-disk artifacts, driven
//!   by the `periscale` command line tool.
//!
//! The accompanying guide under `book/` walks through the concepts chapter
//! by chapter; its code listings are compiled and run as doc-tests.
//!
//! Units are not enforced; the shipped configurations use mm for lengths
//! and GPa for moduli.

// index-based loops mirror the math throughout the numeric kernels
#![allow(clippy::needless_range_loop)]

pub mod ccm;
pub mod config;
pub mod correction;
pub mod grid;
pub mod microstructure;
pub mod multiscale;
pub mod output;
pub mod pipeline;
pub mod solver;
pub mod sparse;

pub mod guide;

pub use ccm::ElasticTensor;
pub use config::PipelineConfig;
pub use grid::{Bond, BondSet, HorizonSpec, MicromodulusCoeffs, NodeSet};
pub use microstructure::{DistributionSpec, ParticleGeometry, Phase, RveSample};
pub use multiscale::{EffectiveProperties, SampleResult};
pub use pipeline::{cmd_pipeline, RunManifest};
pub use solver::{LoadProgram, SimState};

/// Errors shared across the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("particle placement failed after {attempts} attempts (achieved vf {achieved_vf:.4}, target {target_vf:.4})")]
    PlacementFailure {
        attempts: usize,
        achieved_vf: f64,
        target_vf: f64,
    },
    #[error("no nodes remain in the discretized domain")]
    EmptyDomain,
    #[error("grid spacing {dx} does not divide domain extent {extent}")]
    GridMismatch { dx: f64, extent: f64 },
    #[error("Poisson ratio {given} incompatible with bond-based model (expected {expected})")]
    PoissonMismatch { given: f64, expected: f64 },
    #[error("linear system is singular or constraints leave rigid modes: {0}")]
    SingularSystem(String),
    #[error("degenerate bond energy at node {node} (W_pd = {w_pd:.3e}, floor = {floor:.3e})")]
    DegenerateEnergy { node: usize, w_pd: f64, floor: f64 },
    #[error("quasi-static inner loop exceeded {max_sweeps} sweeps at step {step}")]
    NonConvergence { step: usize, max_sweeps: usize },
    #[error("reaction never dropped below {threshold:.3}x peak within {steps} steps (axis {axis})")]
    NoFailure {
        axis: usize,
        steps: usize,
        threshold: f64,
    },
    #[error("effective tensor is not representable by a bond-based micromodulus (relative residual {residual:.3e})")]
    Representability { residual: f64 },
    #[error("mesh does not resolve the particles: {0}")]
    MeshResolution(String),
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("missing upstream artifact: {0}")]
    MissingArtifact(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Error {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
