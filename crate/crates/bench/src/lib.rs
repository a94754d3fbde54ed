//! Fixtures shared by the benchmarks.

use las_core::attention::{AttentionKind, Smoothing};
use las_core::data::Utterance;
use las_core::harness::{toy_model_config, ToySpec};
use las_core::model::Model;
use las_core::{rng, Direction};

/// Toy-sized model with the given listener direction and attention.
pub fn toy_model(direction: Direction, kind: AttentionKind, smoothing: Smoothing) -> Model {
    let mut cfg = toy_model_config();
    for l in &mut cfg.encoder.layers {
        l.direction = direction;
    }
    cfg.attention.kind = kind;
    cfg.attention.smoothing = smoothing;
    Model::new(cfg, &mut rng::stream(1, rng::streams::INIT)).expect("toy config is valid")
}

/// The longest of the first `n` default toy utterances.
pub fn long_utterance(n: usize) -> Utterance {
    let spec = ToySpec {
        n_utts: n,
        ..ToySpec::default()
    };
    las_core::harness::gen_toy_dataset(&spec)
        .into_iter()
        .max_by_key(|u| u.num_frames())
        .expect("n > 0")
}
