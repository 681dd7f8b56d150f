//! The hierarchical attention network: beat, rhythm and channel levels.

mod config;
mod net;

pub use config::{BlockSpec, ModelConfig};
pub use net::{
    AttentionParams, BatchNormParams, BatchVars, BeatBlockParams, ChannelBlockParams, ConvParams, ForwardCtx, ImleNet,
    LstmParams, Mode, ModelOutput, ResidualBlockParams, RhythmBlockParams,
};
