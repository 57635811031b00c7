//! Batch toolkit for finding the first erroneous step in stepwise math solutions.
//!
//! The pipeline ingests corpora of incorrect student solutions, asks a chat
//! model to locate the first wrong step under several prompt settings
//! (optionally guided by a gold or model-corrected reference solution),
//! and then scores, profiles, and statistically analyzes the predictions.

pub mod analysis;
pub mod corpus;
pub mod correction;
pub mod features;
pub mod gateway;
pub mod metrics;
pub mod pipeline;
pub mod prompting;
pub mod report;
