//! Synthetic fixtures shared by the benchmarks.

use mortvi::model::{
    simulate, ConstrainedDynamics, EmissionParams, LatentDynamicsParams, ModelParams, ModelSpec, SimulationStart,
};
use mortvi::MortalityPanel;

/// Gompertz-like affine model with one declining factor per dimension.
pub fn affine_truth(latent_dim: usize, n_ages: usize) -> ModelParams {
    let d = latent_dim;
    let intercept = (0..n_ages).map(|a| -9.0 + 6.0 * a as f64 / n_ages as f64).collect();
    let loadings = (0..n_ages)
        .flat_map(|a| (0..d).map(move |i| (0.5 + a as f64 / n_ages as f64) / (i + 1) as f64))
        .collect();
    let dynamics = LatentDynamicsParams::from_constrained(&ConstrainedDynamics {
        drift: vec![-0.02; d],
        persistence: vec![0.9; d],
        level_sd: vec![0.01; d],
        trend_sd: vec![0.005; d],
    });
    ModelParams { spec: ModelSpec::affine(d, n_ages), dynamics, emission: EmissionParams::Affine { loadings, intercept } }
}

pub fn synthetic_panel(latent_dim: usize, n_ages: usize, n_years: usize, exposure: f64, seed: u64) -> MortalityPanel {
    let truth = affine_truth(latent_dim, n_ages);
    let cells = n_ages * n_years;
    let exposures = MortalityPanel::new(1950, n_ages, n_years, vec![0.0; cells], vec![exposure; cells])
        .expect("valid exposures");
    let start = SimulationStart::Fixed { level: vec![0.0; latent_dim], trend: vec![-0.02; latent_dim] };
    simulate(&truth, &exposures, &start, seed).expect("simulation").1
}
