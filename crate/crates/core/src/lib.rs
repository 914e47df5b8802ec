//! Reserve allocation for distributed energy resources on unbalanced radial
//! feeders.
//!
//! The crate bundles a feeder description format with a built-in modified
//! IEEE 34-node fixture ([`feeder`]), a forward-backward sweep power flow
//! ([`powerflow`]), the reserve-allocation environment ([`environment`]),
//! small dense networks with Adam ([`neural`]), a DDPG agent ([`ddpg`]) and
//! baseline allocators plus metric evaluation ([`allocator`]).
//!
//! Numeric code is generic over [`Real`]; the aliases below fix it to `f64`.

pub mod allocator;
pub mod ddpg;
pub mod environment;
pub mod feeder;
pub mod neural;
pub mod powerflow;
pub mod scalar;

pub use scalar::Real;

pub type Mlp64 = neural::Mlp<f64>;
pub type Mlp32 = neural::Mlp<f32>;
pub type Adam64 = neural::AdamState<f64>;
pub type Agent64 = ddpg::Agent<f64>;
pub type Network64 = powerflow::Network<f64>;
pub type Solution64 = powerflow::PowerFlowSolution<f64>;
