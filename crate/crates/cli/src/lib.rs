//! Training, evaluation, fusion and accounting tools around `lkdn-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod eval;
pub mod image_io;
pub mod train;
