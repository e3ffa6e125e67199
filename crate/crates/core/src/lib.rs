pub mod tensor;
pub mod geometry;
pub mod matching;
pub mod model;
pub mod data;
pub mod eval;
pub mod config;
pub mod train;
