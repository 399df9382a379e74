//! Consistency evaluation: warping, masked RMSE, feature distance and the
//! short/long-range pair protocol.

pub mod consistency;
pub mod flow;

pub use consistency::{consistency_rmse, feature_distance, masked_rmse, warp, MetricsError};
pub use flow::FlowField;
