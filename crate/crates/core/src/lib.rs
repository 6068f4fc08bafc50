pub mod classifier;
pub mod corpus;
pub mod encoder;
pub mod evaluation;
pub mod synthetic;
pub mod transfer;
