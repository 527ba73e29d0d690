//! Shared fixtures for the criterion benchmarks in `benches/`.

use multiattn::dataset::synth::SyntheticWorld;
use multiattn::{Profile, Sample, SynthParams};

/// Deterministic synthetic samples of the given profile, built in memory.
pub fn samples(profile: Profile, n: usize) -> Vec<Sample> {
    let params = SynthParams::new(7, n, profile);
    let world = SyntheticWorld::new(&params).expect("valid synthetic parameters");
    (0..n).map(|i| world.sample(params.seed, i)).collect()
}
