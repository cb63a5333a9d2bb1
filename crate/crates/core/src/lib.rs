//! Quasi-periodic solutions of a Hamiltonian lattice model of the cubic
//! Schrodinger equation on the circle: reducibility, Nash-Moser continuation
//! and a Monte Carlo survey of the admissible frequency set.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod config;
pub mod error;
pub mod geometry;
pub mod hamiltonian;
pub mod kam;
pub mod lattice;
pub mod linearization;
pub mod measure;
pub mod nash_moser;
pub mod right_inverse;
pub mod linalg;
pub mod tolerances;

pub use error::{KamError, Result};
pub use num_complex::Complex64 as C64;
