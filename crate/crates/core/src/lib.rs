//! Closed-loop co-simulation of a two-area transmission grid with virtual
//! power plants: DC network algebra, frequency dynamics, AGC, packetized
//! device fleets, aggregators and receding-horizon dispatch.

pub mod agc;
pub mod config;
pub mod dynamics;
pub mod grid;
pub mod mpc;
pub mod pem;
pub mod plot;
pub mod scenario;
pub mod sim;
pub mod trace;
pub mod vpp;

pub use config::ConfigError;
