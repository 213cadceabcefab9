//! Active-inference state estimation and control for a simulated planar arm.
//!
//! The agent keeps a belief over its joint state in generalized coordinates
//! and updates both the belief and its motor command by descending the
//! Laplace-approximated variational free energy. Sensory mappings are either
//! analytic forward kinematics or a Gaussian-process model learned from
//! samples; goals enter as attractor dynamics on the belief.

pub mod agent;
pub mod error;
pub mod experiments;
pub mod free_energy;
pub mod genmodel;
pub mod selfhood;
pub mod simulator;
pub mod types;

pub use agent::{sensory_action_jacobian, Agent, AgentState, SensoryActionJacobian};
pub use error::{AifError, Result};
pub use free_energy::{evaluate, grad_vfe_latent, grad_vfe_obs, vfe, ChannelVectors, FreeEnergyReport};
pub use genmodel::{
    AnalyticFk, AttractorDynamics, DynamicsModel, GenerativeModel, GprModel, GprParams,
    LinearDynamics, SensoryModel,
};
pub use selfhood::{classify_self, evidence_update, EvidenceWindow, SelfVerdict};
pub use simulator::{ArmWorld, NoiseSpec, PerturbationSpec, WorldConfig};
pub use types::{
    shift_orders, ActionMode, AgentConfig, Channel, CovarianceBlock, GeneralizedLatent, Goal,
    Observation, PrecisionSet,
};
