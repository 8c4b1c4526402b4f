//! Compound-Poisson approximation of ODEs, SDEs, McKean-Vlasov systems and
//! the 2D Navier-Stokes equation.

pub mod mckean;
pub mod nse2d;
pub mod randomness;
pub mod reference;
pub mod scenarios;
pub mod scheme;
pub mod stats;
