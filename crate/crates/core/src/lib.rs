pub mod autodiff;
pub mod config;
pub mod dataio;
pub mod eval;
pub mod inference;
pub mod model;
pub mod objective;
pub mod par;
pub mod rng;
pub mod synthgen;
pub mod trainer;
