//! Dynamic Gaussian splatting with embedded features and a linear,
//! view- and time-consistent style transform.

pub mod io;
pub mod metrics;
pub mod model;
pub mod nets;
pub mod numdiff;
pub mod params;
pub mod pipeline;
pub mod render;
pub mod scene;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vec3;
pub mod wct;
