pub mod costmodel;
pub mod evaluator;
pub mod graphir;
pub mod metrics;
pub mod netstring;
pub mod search;
pub mod searchspace;
