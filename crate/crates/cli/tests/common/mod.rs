#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mortvi::model::{
    simulate, ConstrainedDynamics, EmissionParams, LatentDynamicsParams, ModelParams, ModelSpec, SimulationStart,
};
use mortvi::MortalityPanel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn affine_truth(n_ages: usize) -> ModelParams {
    let intercept = (0..n_ages).map(|a| -8.0 + 5.0 * a as f64 / n_ages as f64).collect();
    let loadings = (0..n_ages).map(|a| 0.5 + a as f64 / n_ages as f64).collect();
    let dynamics = LatentDynamicsParams::from_constrained(&ConstrainedDynamics {
        drift: vec![-0.03],
        persistence: vec![0.8],
        level_sd: vec![0.02],
        trend_sd: vec![0.01],
    });
    ModelParams { spec: ModelSpec::affine(1, n_ages), dynamics, emission: EmissionParams::Affine { loadings, intercept } }
}

pub fn exposures(first_year: i32, n_ages: usize, n_years: usize, e: f64) -> MortalityPanel {
    let cells = n_ages * n_years;
    MortalityPanel::new(first_year, n_ages, n_years, vec![0.0; cells], vec![e; cells]).unwrap()
}

/// Deaths simulated from a one-factor affine model.
pub fn affine_panel(first_year: i32, n_ages: usize, n_years: usize, seed: u64) -> MortalityPanel {
    let start = SimulationStart::Fixed { level: vec![0.0], trend: vec![-0.03] };
    simulate(&affine_truth(n_ages), &exposures(first_year, n_ages, n_years, 1e4), &start, seed).unwrap().1
}

/// Deaths from `log μ = α + β κ_t` with `κ` a random walk with drift.
pub fn lee_carter_panel(first_year: i32, n_ages: usize, n_years: usize, seed: u64) -> MortalityPanel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kappa = Vec::with_capacity(n_years);
    let mut k = 0.0;
    for _ in 0..n_years {
        kappa.push(k);
        let z: f64 = rng.sample(StandardNormal);
        k += -0.3 + 0.1 * z;
    }
    let mut deaths = Vec::with_capacity(n_ages * n_years);
    for a in 0..n_ages {
        let alpha = -7.0 + 4.0 * a as f64 / n_ages as f64;
        let beta = 0.05 + 0.1 * (1.0 - a as f64 / n_ages as f64);
        for &k in &kappa {
            let lambda = 1e4 * (alpha + beta * k).exp();
            let draw: f64 = rand_distr::Distribution::sample(&rand_distr::Poisson::new(lambda).unwrap(), &mut rng);
            deaths.push(draw);
        }
    }
    MortalityPanel::new(first_year, n_ages, n_years, deaths, vec![1e4; n_ages * n_years]).unwrap()
}

pub fn write_panel(panel: &MortalityPanel, path: &Path) {
    let mut buf = Vec::new();
    panel.write_csv(&mut buf).unwrap();
    std::fs::write(path, buf).unwrap();
}

pub fn mortvi(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mortvi"))
        .args(args)
        .current_dir(cwd)
        .env_remove("MORTVI_DATA_DIR")
        .env_remove("RUST_LOG")
        .output()
        .expect("spawn mortvi")
}

pub fn ok(args: &[&str], cwd: &Path) {
    let out = mortvi(args, cwd);
    assert!(
        out.status.success(),
        "mortvi {args:?} failed with {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

pub fn read(path: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

pub fn dir(root: &Path, name: &str) -> PathBuf {
    let d = root.join(name);
    std::fs::create_dir_all(&d).unwrap();
    d
}
