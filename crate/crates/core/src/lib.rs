//! Simulation and analysis of a two-species exclusion process with
//! collisions under hyperbolic scaling: the lattice dynamics, its block
//! averages, a finite-volume reference for the Leroux system, the entropy
//! production decomposition, compensated-compactness diagnostics and the
//! spectral estimates on blocks.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod block;
pub mod compactness;
pub mod dynamics;
pub mod equilibrium;
pub mod error;
pub mod harness;
pub mod lattice;
pub mod pde;
pub mod production;
pub mod spectral;

pub use block::{BlockChoice, CosineKernel, SpaceTimeField, WeightKernel};
pub use compactness::{CompactnessReport, EmpiricalYoungMeasure};
pub use dynamics::{DynamicsParams, InitialProfile, TrajectoryRecord};
pub use equilibrium::{GibbsParams, LocalObservable};
pub use error::{Error, Result};
pub use harness::{ExperimentConfig, Mode, RunManifest};
pub use lattice::{Configuration, ConservedPair, Spin};
pub use pde::{EntropyPair, MacroState, PdeField, TestFunction};
pub use production::{DecompositionReport, ReplicaTerms};
pub use spectral::HyperplaneModel;
