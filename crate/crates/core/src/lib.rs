pub mod diffnum;
pub mod experiments;
pub mod flow;
pub mod metrics;
pub mod preference;
pub mod rum;
pub mod targets;
pub mod train;
