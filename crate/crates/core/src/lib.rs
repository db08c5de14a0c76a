//! Penalty functionals and doubling-of-variables checks for path-dependent
//! Hamilton-Jacobi equations with coinvariant derivatives, on finite
//! discretizations of the space of continuous paths.
//!
//! Modules, bottom up:
//! - [`path_space`]: grids, paths, stopping, extensions, path families
//! - [`ci_calculus`]: functionals, finite-difference ci-derivatives, `L_{phi,D}`
//! - [`penalty`]: `V_1`, `V_2`, `V_3` and the smooth penalty `V^L`
//! - [`control`]: Bellman Hamiltonians, assumption checks, history-tree DP
//! - [`doubling`]: the doubled-variable maximization and its estimate ledger
//! - [`cli`]: configuration, suites and report files behind the `cihj` binary

pub mod ci_calculus;
pub mod error;
pub mod par;
pub mod path_space;
pub mod penalty;
pub mod control;
pub mod doubling;
pub mod cli;

pub use error::{Error, Result};
