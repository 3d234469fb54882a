//! Graph-based detection of unusual sensitive actions in support-tool logs.
//!
//! The pipeline parses action records into a bipartite action/entity store
//! ([`corpus`]), samples a neighborhood around every sensitive action
//! ([`sampler`]), embeds each neighborhood on the unit sphere ([`features`]
//! or the learned [`gnn`]), ranks them for review ([`ranking`]) and scores
//! the review outcome ([`stats`]). [`simgen`] produces labeled synthetic
//! corpora to run it against.

pub mod corpus;
pub mod features;
pub mod gnn;
pub mod neuralnet;
pub mod ranking;
pub mod sampler;
pub mod simgen;
pub mod stats;

#[cfg(any(test, feature = "testkit"))]
pub mod testkit;
