pub mod banded;
pub mod block;
pub mod dense;
pub mod error;
pub mod mesh;
pub mod scalar;
pub mod sparse;
pub mod krylov;
pub mod helmholtz;
pub mod multigrid;
pub mod eikonal;
pub mod inversion;
pub mod models;
pub mod formats;
pub mod cli;
