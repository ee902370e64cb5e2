pub mod cli;
pub mod ctc;
pub mod data;
pub mod eval;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod train;
