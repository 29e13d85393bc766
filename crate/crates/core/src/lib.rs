//! Hybrid adaptive modelling of two coupled Duffing oscillators.
//!
//! Frequency responses come from the multiple-scales slow flow traced by
//! pseudo-arclength continuation. Jump points of those responses form a
//! twenty-entry feature vector, features are ranked by mutual information,
//! and a one-hidden-layer network maps the selected features to the coupling
//! or damping coefficient. Direct time integration of the full equations
//! provides cross-checks, swept test data, and a gray-box baseline.

pub mod ann;
pub mod continuation;
pub mod error;
pub mod features;
pub mod mi;
pub mod model;
pub mod pipeline;
pub mod simulation;

pub use error::{Error, Result};
pub use model::{ModalFrequencies, ModulationState, PhysicalResponse, SystemParams};
