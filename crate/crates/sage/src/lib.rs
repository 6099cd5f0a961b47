//! Dynamic expert routing in a miniature hybrid encoder-decoder
//! segmentation model: hierarchical shared/fine-grained gating, semantic
//! affinity routing with learned noise, top-K sparse expert execution,
//! cross-architecture shape adaptation, a full training loop, and routing
//! telemetry. Everything runs on a small hand-rolled f64 autodiff tape.

pub mod block;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experts;
pub mod gradcheck;
pub mod hub;
pub mod model;
pub mod par;
pub mod params;
pub mod rng;
pub mod routing;
pub mod telemetry;
pub mod tensor;
pub mod train;
