//! Neural components: layers, the reversible image network, extractors,
//! the frozen loss encoder and the spatial propagation network.

pub mod cspn;
pub mod encoder;
pub mod extractors;
pub mod layers;
pub mod revnet;
pub mod whiten;
