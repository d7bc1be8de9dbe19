//! Langevin Monte Carlo least-squares value iteration and friends.

pub mod baselines;
pub mod env;
pub mod harness;
pub mod lmc;
pub mod neural;
pub mod numerics;
pub mod par;
pub mod posterior;
pub mod rng;
pub mod sgld;
