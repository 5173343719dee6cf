pub mod cli;
pub mod data;
pub mod losses;
pub mod metrics;
pub mod ndgrad;
pub mod rng;
pub mod train;
pub mod vitmae;
