pub mod lang;
pub mod catalog;
pub mod synth;
pub mod gateway;
pub mod consistency;
pub mod cascade;
pub mod prompt;
pub mod metrics;
pub mod config;
pub mod pipeline;
pub mod fixture;
