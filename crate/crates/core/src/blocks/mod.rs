//! Network configuration, layer inventory, weights and forward pass.

mod config;
pub mod io;
mod layers;
mod model;
mod store;

pub use config::{
    ablation, ArbPaths, BnActivation, Connections, ModelConfig, DEFAULT_N_ARB, DEFAULT_N_RCB, DEFAULT_WIDTH,
};
pub use layers::{
    calibrate, count_macs, count_params, layer_specs, pos_geometry, Candidate, ComplexityReport, LayerRow, LayerSpec,
    PosGeometry, Resolution, MACS_BAND, MAC_OUTPUT, PARAMS_BAND, REFERENCE_MACS, REFERENCE_PARAMS,
};
pub use model::{local_receptive_reach, mprnet_forward, pos_unit_reach, ForwardTrace, Net, MIN_INPUT};
pub use store::{build_model, layer_rng, ParamSet, WeightStore};
