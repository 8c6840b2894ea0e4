pub mod geometry;
pub mod neural;
pub mod simworld;
pub mod trajectory;
pub mod policies;
pub mod inference;
pub mod training;
pub mod config;
pub mod eval;
pub mod cli;
