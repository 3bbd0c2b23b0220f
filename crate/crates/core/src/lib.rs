//! Physics-informed neural networks for the conformable time-fractional
//! diffusion equation `T^α u = λ u_xx`.

pub mod conformable;
pub mod diffgraph;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod sampling;
