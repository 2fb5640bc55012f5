//! Shared-control workbench: diffusion orientation policy, point-cloud
//! perception, a kinematic manipulation simulator and the control loop.
pub mod config;
pub mod control;
pub mod demo;
pub mod diffusion;
pub mod geometry;
pub mod nn;
pub mod pointcloud;
pub mod policy;
pub mod sim;
pub mod study;
