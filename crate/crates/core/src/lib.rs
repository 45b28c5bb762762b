pub mod allocators;
pub mod capacity;
pub mod cli;
pub mod dynamics;
pub mod error;
pub mod fluid;
pub mod format;
pub mod lattice;
pub mod linalg;
pub mod lyapunov;
pub mod pf_solver;
pub mod scenario;
pub mod stationary;
pub mod traffic;
pub mod verify;
