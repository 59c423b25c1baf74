//! Characteristic fans, shock tracking and generalized densities for
//! first-order Hamilton-Jacobi flows, with independent solvers to check them.

// `!(a > b)` is used on purpose so that NaN falls into the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod expr;
pub mod numerics;
pub mod symbol;
pub mod characteristics;
pub mod manifold;
pub mod density;
pub mod regularize;
pub mod verify;
pub mod oracle;
pub mod cli;
