pub mod association;
pub mod cli;
pub mod geometry;
pub mod graph;
pub mod gtn;
pub mod jsonl;
pub mod metrics;
pub mod motion_baseline;
pub mod numeric;
pub mod pipeline;
pub mod simulator;
pub mod training;
