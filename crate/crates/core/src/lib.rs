//! PIDE solver built on Lévy-type forward-backward stochastic processes and
//! temporal-difference training of a two-output residual network.
//!
//! The crate is organized around six pieces:
//!
//! - [`stochastic`]: compound-Poisson jump simulation, Brownian increments,
//!   and the discretized forward state process with analytic compensators.
//! - [`autodiff`]: a dense-tensor reverse-mode differentiation tape. Backward
//!   passes emit ordinary tape operations, so expressions built from input
//!   gradients (the `Z` term of the losses) remain differentiable with
//!   respect to the network parameters.
//! - [`network`]: the two-output residual network approximating the solution
//!   `u(t,x)` and the non-local jump term.
//! - [`problems`]: the benchmark PIDE instances with exact solutions.
//! - [`trainer`]: per-time-step loss assembly, the previous-terminal-state
//!   buffer, Adam with the step-decay schedule, and k-step TD.
//! - [`cli`]: the experiment runner behind the `levytd` binary.

pub mod autodiff;
pub mod cli;
pub mod network;
pub mod problems;
pub mod stochastic;
pub mod trainer;
