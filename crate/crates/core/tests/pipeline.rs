use mortvi::baselines::{fit_lee_carter, forecast_lee_carter};
use mortvi::checkpoint::{Checkpoint, Fitted};
use mortvi::forecast::{carry_forward_exposures, forecast_deaths, forecast_latent, forecast_rates};
use mortvi::inference::fit;
use mortvi::model::{
    simulate, ConstrainedDynamics, EmissionParams, LatentDynamicsParams, ModelParams, ModelSpec, SimulationStart,
};
use mortvi::panel::cut_window;
use mortvi::scoring::{log_scores, rolling_evaluate, saturated_scores, EvaluationOptions, VariationalForecaster};
use mortvi::{MortalityPanel, TrainConfig, WindowSpec};

fn synthetic(n_ages: usize, n_years: usize, seed: u64) -> MortalityPanel {
    let truth = ModelParams {
        spec: ModelSpec::affine(1, n_ages),
        dynamics: LatentDynamicsParams::from_constrained(&ConstrainedDynamics {
            drift: vec![-0.02],
            persistence: vec![0.9],
            level_sd: vec![0.01],
            trend_sd: vec![0.005],
        }),
        emission: EmissionParams::Affine {
            loadings: (0..n_ages).map(|a| 0.5 + a as f64 / n_ages as f64).collect(),
            intercept: (0..n_ages).map(|a| -7.0 + 4.0 * a as f64 / n_ages as f64).collect(),
        },
    };
    let cells = n_ages * n_years;
    let exposures = MortalityPanel::new(1960, n_ages, n_years, vec![0.0; cells], vec![2e4; cells]).unwrap();
    let start = SimulationStart::Fixed { level: vec![0.0], trend: vec![-0.02] };
    simulate(&truth, &exposures, &start, seed).unwrap().1
}

#[test]
fn fit_forecast_score_round_trip() {
    let panel = synthetic(12, 30, 1);
    let window = WindowSpec::new(1960, 25, 5).unwrap();
    let (train, eval) = cut_window(&panel, &window).unwrap();
    let config = TrainConfig { steps: 1500, ..TrainConfig::with_steps(1500) };
    let fitted = fit(&train, &ModelSpec::affine(1, 12), &config).unwrap();
    assert!(fitted.elbo_trace.iter().all(|v| v.is_finite()));
    let (early, late) = fitted.quartile_means().unwrap();
    assert!(late > early, "ELBO should improve: {early} -> {late}");

    let checkpoint = Checkpoint::new(
        train.first_year(),
        train.n_ages(),
        train.n_years(),
        Some(window),
        Fitted::Latent {
            model: fitted.model.clone(),
            guide: fitted.guide.clone(),
            train: config.clone(),
            final_elbo: fitted.smoothed_elbo(),
        },
    );
    let back = Checkpoint::from_json(&checkpoint.to_json().unwrap()).unwrap();
    assert_eq!(back, checkpoint);

    let state = fitted.guide.final_state_distribution().unwrap();
    let latent = forecast_latent(&state, &fitted.model.dynamics, 5).unwrap();
    let pred = forecast_deaths(&latent, &fitted.model.emission, &eval, 500, 3).unwrap();
    let scores = log_scores(&pred, &eval).unwrap();
    let ceiling = saturated_scores(&eval);
    for (s, c) in scores.iter().zip(&ceiling) {
        assert!(s.is_finite() && s <= c);
    }

    // Mean forecast deaths stay on the scale of the last observed year.
    let rates = forecast_rates(&pred, &[0.05, 0.95], 4).unwrap();
    for r in rates.iter().filter(|r| r.horizon == 1) {
        let last = train.deaths(r.age, train.n_years() - 1) + 1.0;
        let ratio = r.mean_deaths / last;
        assert!(ratio > 0.5 && ratio < 2.0, "age {} ratio {ratio}", r.age);
        assert!(r.quantiles[0] <= r.quantiles[1]);
    }
}

#[test]
fn lee_carter_forecast_follows_the_drift() {
    let panel = synthetic(10, 30, 2);
    let params = fit_lee_carter(&panel, 1000, 1e-8).unwrap();
    assert!(params.drift < 0.0);
    let exposures = carry_forward_exposures(&panel, 10).unwrap();
    let pred = forecast_lee_carter(&params, 10, 2000, 5, &exposures).unwrap();
    let mean_log = |a: usize, h: usize| pred.log_rates(a, h).iter().sum::<f64>() / 2000.0;
    for a in 0..10 {
        let step = (mean_log(a, 10) - mean_log(a, 1)) / 9.0;
        let expected = params.beta[a] * params.drift;
        assert!((step - expected).abs() < 5.0 * params.beta[a].abs() * params.rw_sd / 2000f64.sqrt() + 1e-12);
    }
}

#[test]
fn rolling_evaluation_is_reproducible() {
    let panel = synthetic(6, 20, 3);
    let windows = WindowSpec::sweep(1960..=1963, 12, 3).unwrap();
    let forecaster = VariationalForecaster::new(ModelSpec::affine(1, 6), TrainConfig::with_steps(100));
    let a = rolling_evaluate(&panel, &forecaster, &windows, EvaluationOptions { jobs: Some(1), ..Default::default() })
        .unwrap();
    let b = rolling_evaluate(&panel, &forecaster, &windows, EvaluationOptions { jobs: Some(3), ..Default::default() })
        .unwrap();
    assert_eq!(a, b);
    assert_eq!(a.windows.len(), 4);
    let agg = a.aggregate();
    assert!(agg.r_squared.unwrap() <= 1.0);
}
