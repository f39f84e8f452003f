//! Online parcel assignment laboratory.
//!
//! Parcels arrive one at a time and must each be routed to one of their
//! candidate routes, minimizing total cost under hub capacity and provider
//! proportion constraints. This crate provides the constraint-tracking MDP
//! environment, the PPO-OPA learner with its attention reward network,
//! baseline policies, an offline oracle and the experiment protocol.

pub mod baselines;
pub mod datagen;
pub mod env;
pub mod experiment;
pub mod model;
pub mod neural;
pub mod nets;
pub mod oracle;
pub mod ppo;
pub mod recount;
