//! Single-excitation dynamics of one-dimensional V-type atomic arrays.
//!
//! Each atom carries two Zeeman-split excited states `|+>` and `|->` coupled to
//! every other atom through the free-space dyadic Green's function. A magnetic
//! field with a linear profile tilts the two arms in opposite directions, which
//! produces two-band Bloch oscillations. The crate builds the effective
//! non-Hermitian Hamiltonian, its infinite-array band structure, evolves
//! Gaussian wavepackets, and extracts the observables used to characterise
//! subradiant and superradiant behaviour.
//!
//! Units throughout: `hbar = gamma0 = 1`, time in `1/gamma0`, energies in
//! `gamma0`, momenta in `k0 = 2 pi / lambda`, distances in `lambda` (or in
//! lattice sites where noted). All dynamics is in the frame rotating at the
//! atomic transition frequency.

pub mod analysis;
pub mod bands;
pub mod error;
pub mod lattice;
pub mod propagation;
pub mod scenario;

pub use error::{Error, Result};
pub use num_complex::Complex64;
