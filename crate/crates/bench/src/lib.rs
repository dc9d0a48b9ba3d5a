//! Inputs shared by the benchmarks in `benches/`.

use trajcons_core::arrays::{CandidateArray, TrackArray};
use trajcons_core::data::{synth_dataset, SceneWindow, SynthKind};
use trajcons_core::kinematics::Vec2;
use trajcons_core::model::ModelConfig;

/// A small model that still has every block of the default one.
pub fn bench_model_config() -> ModelConfig {
    ModelConfig {
        d_model: 32,
        ff_width: 128,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

pub fn windows(count: usize, agents: usize, cfg: &ModelConfig) -> Vec<SceneWindow> {
    synth_dataset(&SynthKind::ALL, count, agents, 0.01, 7, cfg.t_obs, cfg.t_pred).expect("valid synthetic settings")
}

/// Deterministic pseudo-random values in [-1, 1).
pub fn values(n: usize, seed: u64) -> Vec<f64> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 52) as f64 - 1.0
        })
        .collect()
}

pub fn candidates(agents: usize, k: usize, steps: usize, seed: u64) -> CandidateArray {
    CandidateArray::from_data(agents, k, steps, values(agents * k * steps * 2, seed)).expect("sized to fit")
}

pub fn track(agents: usize, steps: usize, seed: u64) -> TrackArray {
    TrackArray::from_data(agents, steps, values(agents * steps * 2, seed)).expect("sized to fit")
}

pub fn points(n: usize, seed: u64) -> Vec<Vec2> {
    values(n * 2, seed).chunks(2).map(|c| Vec2::new(c[0], c[1])).collect()
}
