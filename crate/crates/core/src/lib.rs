//! Two-level graph networks for frame-wise human-object interaction
//! labelling: a keypoint graph over skeleton joints and box corners, an
//! attention graph over entities, and a bidirectional GRU per entity.
//!
//! [`commands`] holds the end-to-end entry points used by the CLI.

pub mod backbone;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data_io;
pub mod error;
pub mod experiment;
pub mod fusion_graph;
pub mod geo_graph;
pub mod geometry;
pub mod model;
pub mod numerics;
pub mod segeval;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    pub struct Overview;
    #[doc = include_str!("../../../book/src/geometry.md")]
    pub struct Geometry;
    #[doc = include_str!("../../../book/src/geo_graph.md")]
    pub struct GeoGraph;
    #[doc = include_str!("../../../book/src/fusion.md")]
    pub struct Fusion;
    #[doc = include_str!("../../../book/src/training.md")]
    pub struct Training;
    #[doc = include_str!("../../../book/src/segeval.md")]
    pub struct Segeval;
    #[doc = include_str!("../../../book/src/data.md")]
    pub struct Data;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}
