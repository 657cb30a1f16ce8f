pub mod ansatz;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod error;
pub mod exact;
pub mod hamiltonian;
pub mod lattice;
pub mod sampler;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
