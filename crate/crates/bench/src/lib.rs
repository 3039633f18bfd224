//! Fixtures shared by the benchmarks.

use std::sync::Arc;

use mixttt_core::data::synthetic_splits;
use mixttt_core::{
    build_network, Activation, Dataset, LayerSpec, NetworkSpec, SplitNetworkState, SynthSpec,
};

/// Desk-scale network (8/16/32 conv blocks on 3×8×8 inputs) at initialization.
pub fn desk_network(seed: u64) -> SplitNetworkState {
    let spec = NetworkSpec {
        input_shape: (3, 8, 8),
        encoder_layers: vec![
            LayerSpec::conv_block(8, 1),
            LayerSpec::conv_block(16, 2),
            LayerSpec::conv_block(32, 2),
            LayerSpec::GlobalAvgPool,
        ],
        main_classes: 10,
        aux_classes: 4,
        activation: Activation::Smooth,
    };
    build_network(&spec, seed).expect("valid spec")
}

pub fn desk_data(seed: u64) -> (Arc<Dataset>, Dataset) {
    let (train, test) =
        synthetic_splits(&SynthSpec::desk_default(8), 512, 64, seed).expect("valid synth spec");
    (Arc::new(train), test)
}
