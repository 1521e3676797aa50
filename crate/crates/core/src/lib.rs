//! Next-POI recommendation with semantic POI identifiers, a small
//! decoder-only language model, preference alignment and fast serving.

pub mod catalog;
pub mod geo;
pub mod sid;
pub mod profile;
pub mod cognition;
pub mod corpus;
pub mod model;
pub mod serve;
pub mod bench;
pub mod align;
pub mod config;
pub mod pipeline;
