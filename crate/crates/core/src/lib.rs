pub mod autograd;
pub mod cli;
pub mod audio;
pub mod codebook;
pub mod container;
pub mod corpus;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod querier;
pub mod report;
pub mod tensor;
pub mod trainer;
