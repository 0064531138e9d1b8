//! Experiment harness: dataset container and synthesizer, configuration
//! files, and the end-to-end pipeline / sweep / baseline drivers shared by
//! the command-line tool and the integration tests.

pub mod config;
pub mod dataset;
pub mod pipeline;
