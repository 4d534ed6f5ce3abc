#![allow(dead_code)]

use stp_cli::config::TrainConfig;
use stp_core::network::Variant;

/// A model and data small enough to train in milliseconds.
pub fn tiny(variant: Variant) -> TrainConfig {
    TrainConfig {
        variant,
        layers: 2,
        channels: 4,
        kernel: 3,
        patch: 4,
        t_in: 3,
        k_out: 2,
        batch: 2,
        iters: 6,
        height: 16,
        width: 16,
        sprite_size: 5,
        speed_min: 1.0,
        speed_max: 2.0,
        eval_interval: 0,
        eval_size: 4,
        action_scale: if variant == Variant::StLstmAction { 0.5 } else { 0.0 },
        ..TrainConfig::default()
    }
}
