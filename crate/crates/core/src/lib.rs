pub mod tensor;
pub mod ehr;
pub mod kg;
pub mod optim;
pub mod encoders;
pub mod fusion;
pub mod model;
pub mod metrics;
pub mod checkpoint;
pub mod training;
pub mod interpret;
pub mod cli;
