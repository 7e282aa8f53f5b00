pub mod autodiff;
pub mod model;
pub mod diversity;
pub mod data;
pub mod eval;
pub mod train;
pub mod cli;
