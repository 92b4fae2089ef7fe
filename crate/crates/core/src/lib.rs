//! Distantly supervised relation extraction over sentence bags.
//!
//! The pipeline couples each sentence with a templated natural-language
//! query, encodes it with a piecewise CNN, lets the sentences of a bag
//! exchange information over a fully connected similarity graph, and
//! aggregates the bag with relation-conditioned selective attention before
//! a softmax classifier.
//!
//! ```text
//! tokens ─ embed ─┬─ query-sentence attention ─ + position features ─ PCNN ─┐
//! query  ─ embed ─┘                                                         │
//!                     bag self-attention ─ selective attention ─ softmax ◄──┘
//! ```

pub mod aggregation;
pub mod bag_graph;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod pcnn;
pub mod qs_attention;
pub mod synth;
pub mod trainer;

pub use config::{Aggregation, Preset, TrainConfig};
pub use error::{GbreError, Result};
pub use model::ModelParams;
