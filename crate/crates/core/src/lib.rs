pub mod autodiff;
pub mod awd_lstm;
pub mod classifier;
pub mod cli;
pub mod corpus;
pub mod metrics;
pub mod persistence;
pub mod tokenizer;
pub mod training;
