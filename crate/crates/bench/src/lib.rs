//! Fixtures shared by the benchmarks.

use diam::inference::{initial_state, ClassifierState};
use diam::taskgen::{gen_task, SyntheticConfig, SyntheticEpisode};

/// Default-shaped synthetic task at a reduced feature dimension.
pub fn episode(d: usize, seed: u64) -> SyntheticEpisode {
    gen_task(&SyntheticConfig {
        d,
        seed,
        ..SyntheticConfig::default()
    })
    .expect("valid synthetic config")
}

pub fn start(ep: &SyntheticEpisode) -> ClassifierState {
    initial_state(&ep.task, &ep.base_classifier).expect("consistent episode")
}
