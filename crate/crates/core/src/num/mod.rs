//! Shared numerical building blocks: standard-normal functions, fixed-order
//! Gauss-Legendre quadrature and a BFGS maximizer with analytic gradients.

pub mod normal;
pub mod optim;
pub mod quad;
