//! Context data management over semantic P2P overlays.
//!
//! Physical-space gateways (PSGs) register their local schemas with a
//! server, which folds them into per-domain global schemas and places each
//! gateway into one semantic cluster per attribute. Clusters of a domain
//! hang off a ring whose entry point is the domain's context space gateway
//! (CSG). Queries written against the global schemas are flooded with a TTL
//! through the first cluster on the ring that serves a projected attribute.

pub mod cql;
pub mod engine;
pub mod matcher;
pub mod model;
pub mod overlay;
pub mod simnet;
