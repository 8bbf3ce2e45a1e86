//! Reversal-curse experiments on synthetic facts: corpus generation, training
//! objectives, a small transformer trained from scratch, evaluation of
//! reversal accuracy, and representation analyses.

pub mod analysis;
pub mod corpus;
pub mod model;
pub mod objectives;
pub mod reporting;
pub mod training;
