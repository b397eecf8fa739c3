//! Shared fixtures for the benchmarks.

use evolab::{preset, CoefficientModel, InitSpec, MeasureConfig, ParticleEnsemble, SeedLineage};

pub fn model(name: &str) -> CoefficientModel {
    preset(name).expect("known preset").model
}

pub fn cloud(dim: usize, n: usize) -> ParticleEnsemble {
    ParticleEnsemble::sample(&InitSpec::Normal { variance: 1.0 }, n, dim, 0.0, SeedLineage::new(1)).expect("valid init")
}

/// A measure estimate for the density benchmarks.
pub fn measure(name: &str, n: usize) -> evolab::MeasureEstimate {
    evolab::measure::estimate_measure(&model(name), 0.0, &MeasureConfig::new(2.0, n), SeedLineage::new(2)).expect("measure")
}
