//! Command line and local session service for the outview scene
//! synthesizer.

pub mod commands;
pub mod server;
pub mod service;
