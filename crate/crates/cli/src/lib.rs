//! Command-line pipeline and HTTP probe service.

pub mod app;
pub mod config;
pub mod pipeline;
pub mod serve;
