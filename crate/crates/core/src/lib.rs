//! Koopman-lifted distributionally robust tube MPC.

pub mod controller;
pub mod dro;
pub mod geometry;
pub mod harness;
pub mod io;
pub mod koopman;
pub mod plant;
pub mod tubes;
pub mod solvers;
pub mod uncertainty;
