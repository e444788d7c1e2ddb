//! Shared fixtures for the benchmarks: the desk-scale bandit model (the
//! configuration the reproduction recipes train) and synthetic inputs at the
//! same shapes, so measured times translate directly into run budgets.

use dpt_core::model::ModelInputSequence;
use dpt_core::{ModelConfig, ModelState, Rng, State, StateEncoding, Transition};

/// The architecture the bandit recipes use: embed 32, 4 layers, 4 heads,
/// room for 200 in-context rows.
pub fn desk_config() -> ModelConfig {
    ModelConfig {
        state_dim: 1,
        action_dim: 5,
        embed_dim: 32,
        n_layers: 4,
        n_heads: 4,
        max_context: 200,
        include_prefix_zero: true,
        state_encoding: StateEncoding::Unit,
        with_history: false,
    }
}

pub fn desk_model(seed: u64) -> ModelState {
    ModelState::new(desk_config(), &Rng::new(seed)).expect("desk config is valid")
}

/// A synthetic bandit in-context dataset of `rows` transitions.
pub fn bandit_dataset(rows: usize, seed: u64) -> Vec<Transition> {
    let mut rng = Rng::new(seed);
    (0..rows)
        .map(|_| Transition {
            state: State::Unit,
            action: rng.below(5),
            next_state: State::Unit,
            reward: rng.uniform() + 0.3 * rng.normal(),
        })
        .collect()
}

pub fn desk_sequence(model: &ModelState, rows: usize, seed: u64) -> ModelInputSequence {
    model
        .config()
        .build_sequence(&State::Unit, &bandit_dataset(rows, seed), None)
        .expect("sequence fits the context window")
}
