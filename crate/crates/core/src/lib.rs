pub mod bridge;
pub mod config;
pub mod engine;
pub mod experiment;
pub mod grid;
pub mod model;
pub mod oracle;
pub mod sched;
pub mod simnet;
pub mod tensor;
