//! Contrastive pretraining of graph encoders on device-level circuits.
//!
//! The pipeline runs netlist text through [`netlist`] and [`graph`] into
//! typed graphs, expands them with functionality-preserving and
//! functionality-perturbing edits in [`augment`], and trains the encoders in
//! [`encoders`] under the objectives in [`contrastive`]. Pretrained encoders
//! are reused by the downstream models in [`downstream`].

pub mod augment;
pub mod autodiff;
pub mod contrastive;
pub mod corpus;
pub mod downstream;
pub mod encoders;
pub mod graph;
pub mod netlist;
