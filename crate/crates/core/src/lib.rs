//! Discrete approximations and optimality conditions for controlled sweeping
//! processes over prox-regular sets, with a crowd-motion corridor model.

pub mod approximation;
pub mod controls;
pub mod crowd;
pub mod dynamics;
pub mod geometry;
pub mod linalg;
pub mod ocp;
pub mod optimality;
pub mod shooting;
pub mod variational;
