//! Online active ℓp regression for p ∈ [1, 2].
//!
//! Rows of a regression instance (A, b) arrive one at a time. Each row's
//! label can be queried at a cost, and the decision to query is irrevocable.
//! This crate maintains small rescaled row samples keyed to online Lewis
//! weights so that the final solve is a (1+ε)-approximation of the full
//! regression while only a polylogarithmic number of labels is ever fetched.
//!
//! Module map:
//! - [`linalg`]: dense kernels (Gram, pseudo-inverse, least squares,
//!   Sherman–Morrison updates)
//! - [`lewis`]: ℓp Lewis weights, leverage scores and exact online weights
//! - [`sketch`]: rescaled sampling, sketch accumulation and the query ledger
//! - [`compress`]: the block compression tree for approximate online weights
//! - [`solver`]: ℓp regression solvers (direct least squares and IRLS)
//! - [`jl`]: sparse Johnson–Lindenstrauss transform with appendable columns
//! - [`pipeline`]: the end-to-end online algorithms and budgeted baselines
//! - [`io`]: stream formats, the label oracle and synthetic data generation

pub mod compress;
pub mod io;
pub mod jl;
pub mod lewis;
pub mod linalg;
pub mod pipeline;
pub mod sketch;
pub mod solver;

pub use linalg::{DenseMatrix, DenseVector, SymmetricInverse};
