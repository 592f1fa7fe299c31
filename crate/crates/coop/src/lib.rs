//! Cooperative BEV object detection with query-level communication.
//!
//! The pipeline: each agent pillarizes its point cloud into a BEV feature
//! pyramid, decodes a fixed set of object queries with deformable attention,
//! and broadcasts those queries. The receiving agent matches queries across
//! agents by similarity, aggregates matched groups with masked attention,
//! and decodes fused boxes. Communication cost is counted byte-exactly.

pub mod comms;
pub mod config;
pub mod eval;
pub mod fusion;
pub mod head;
pub mod model;
pub mod pillars;
pub mod querygen;
pub mod runner;
pub mod scene;
