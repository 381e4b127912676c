//! Camera ingestion, notification, door control and the HTTP API built on
//! `doorwatch-core`.

pub mod api;
pub mod app;
pub mod cli;
pub mod clock;
pub mod config;
pub mod detect;
pub mod door_actor;
pub mod fixtures;
pub mod notify;
pub mod pipeline;
pub mod relay;
