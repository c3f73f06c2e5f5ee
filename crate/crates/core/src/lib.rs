pub mod geometry;
pub mod sampling;
pub mod costmodel;
pub mod problems;
pub mod optimizer;
pub mod harness;
pub mod verify;
