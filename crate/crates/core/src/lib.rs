pub mod numerics;
pub mod frames;
pub mod masking;
pub mod rng;
pub mod sampling;
pub mod corruption;
pub mod model;
pub mod par;
pub mod data;
pub mod objective;
pub mod eval;
pub mod config;
pub mod pipeline;
