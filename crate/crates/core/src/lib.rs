//! Desk-scale vision-aided biped locomotion training: terrain-curriculum
//! simulation with ray-cast depth sensing, a mixture-of-experts teacher
//! trained with PPO, and a depth-driven student distilled with Barlow Twins
//! feature alignment.

pub mod depthcam;
pub mod distill;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod policy;
pub mod ppo;
pub mod rewards;
pub mod sim;
pub mod tensor;
pub mod terrain;

pub use error::{Error, Result};
pub use tensor::Tensor;
