//! Explainable conversational recommendation.
//!
//! The pipeline links entity mentions in a dialog against a fused knowledge
//! graph, encodes the graph with a relational GCN (optionally enriched with
//! pooled review embeddings), encodes the dialog history, scores and ranks
//! items, extracts a reasoning path for the chosen item and turns all of it
//! into an explanation.

pub mod conversation;
pub mod encoder;
pub mod engine;
pub mod eval;
pub mod explainer;
pub mod kg;
pub mod recommender;
pub mod reviews;
pub mod synthetic;
