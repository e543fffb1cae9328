//! Simulation, skill space, networks and learner for skill-based evaluative
//! feedback training.

pub mod agent;
pub mod checkpoint;
pub mod feedback;
pub mod gradcheck;
pub mod net;
pub mod render;
pub mod replay;
pub mod script;
pub mod sim;
pub mod skills;
pub mod train;
