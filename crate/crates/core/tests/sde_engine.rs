use std::sync::Arc;

use singular_bsde::noise::{aggregate_increments, brownian_increments, CounterNoise};
use singular_bsde::paths::TimeGrid;
use singular_bsde::sde::{
    brownian_sup_square_reference, estimate_sup_moment, euler_simulate, euler_simulate_from_increments, SdeModel,
};

fn grid(horizon: f64, n: usize) -> Arc<TimeGrid<f64>> {
    Arc::new(TimeGrid::uniform(horizon, n).unwrap())
}

#[test]
#[allow(clippy::needless_range_loop)]
fn increments_have_clt_mean_and_covariance() {
    let (n_paths, steps, d) = (20_000, 8, 2);
    let g = grid(0.5, steps);
    let ens = euler_simulate(&SdeModel::brownian(d), g.clone(), n_paths, 11).unwrap();
    let n = n_paths as f64;
    for j in 0..steps {
        let dt = g.dt(j);
        let mut sum = [0.0; 2];
        let mut cov = [[0.0; 2]; 2];
        for p in 0..n_paths {
            let w = ens.dw_at(p, j);
            for a in 0..d {
                sum[a] += w[a];
                for b in 0..d {
                    cov[a][b] += w[a] * w[b];
                }
            }
        }
        for a in 0..d {
            assert!((sum[a] / n).abs() < 3.0 * (dt / n).sqrt(), "mean step {j} coord {a}");
            for b in 0..d {
                let target = if a == b { dt } else { 0.0 };
                let sd = if a == b { (2.0 / n).sqrt() * dt } else { dt / n.sqrt() };
                assert!((cov[a][b] / n - target).abs() < 3.0 * sd, "cov step {j} ({a},{b})");
            }
        }
    }
}

#[test]
fn brownian_terminal_variance_is_horizon() {
    let (n_paths, horizon) = (20_000, 2.0);
    let ens = euler_simulate(&SdeModel::brownian(3), grid(horizon, 16), n_paths, 5).unwrap();
    let n = n_paths as f64;
    for i in 0..3 {
        let var = (0..n_paths).map(|p| ens.x_at(p, 16)[i].powi(2)).sum::<f64>() / n;
        assert!((var - horizon).abs() < 3.0 * horizon * (2.0 / n).sqrt(), "coord {i}: {var}");
    }
}

/// Continuous monitoring correction: the running maximum of a Brownian path
/// sampled at spacing `dt` falls short of the continuous one by about
/// `beta sqrt(dt)`, with `beta = -zeta(1/2)/sqrt(2 pi)`.
const MONITORING_SHIFT: f64 = 0.582_597_157_939_010_7;

#[test]
fn brownian_sup_square_matches_continuous_reference() {
    let (n_paths, steps) = (20_000, 1024);
    let ens = euler_simulate(&SdeModel::brownian(1), grid(1.0, steps), n_paths, 3).unwrap();
    let shift = MONITORING_SHIFT * (1.0 / steps as f64).sqrt();
    let corrected: Vec<f64> = (0..n_paths)
        .map(|p| {
            let sup = ens.x(p).iter().fold(0.0_f64, |m, x| m.max(x.abs()));
            (sup + shift).powi(2)
        })
        .collect();
    let est = singular_bsde::sde::mean_and_stderr(&corrected);
    let reference: f64 = brownian_sup_square_reference();
    assert!((est.mean - reference).abs() < 2.0 * est.stderr, "{} vs {reference} (se {})", est.mean, est.stderr);
    let raw = estimate_sup_moment(&ens, 2.0).unwrap();
    assert!(raw.mean < est.mean);
}

#[test]
fn running_max_moment_is_stable_under_refinement() {
    let (n_paths, fine_n, coarse_n) = (2000, 1 << 14, 1 << 8);
    let model = SdeModel::running_max_reverting(vec![1.0], 1.0, 0.1);
    let fine_grid = grid(1.0, fine_n);
    let noise = CounterNoise::new(21);
    let dts = vec![fine_grid.dt(0); fine_n];
    let fine_dw: Vec<f64> = (0..n_paths).flat_map(|p| brownian_increments(&noise, &dts, p, 1)).collect();
    let coarse_dw = aggregate_increments(&fine_dw, 1, fine_n / coarse_n);
    let fine = euler_simulate_from_increments(&model, fine_grid, &fine_dw, 21).unwrap();
    let coarse = euler_simulate_from_increments(&model, grid(1.0, coarse_n), &coarse_dw, 21).unwrap();
    let ef = estimate_sup_moment(&fine, 2.0).unwrap().mean;
    let ec = estimate_sup_moment(&coarse, 2.0).unwrap().mean;
    assert!(ef.is_finite() && ec.is_finite());
    assert!(((ec - ef) / ef).abs() < 0.02, "coarse {ec} fine {ef}");
}

#[test]
fn euler_has_strong_order_one_half() {
    let n_paths = 2000;
    let model = SdeModel::geometric(vec![1.0], 0.05, 0.4);
    let noise = CounterNoise::new(8);
    let levels = [16usize, 32, 64, 128];
    let mut logs = Vec::new();
    for &n in &levels {
        let fine_n = 4 * n;
        let dts = vec![1.0 / fine_n as f64; fine_n];
        let fine_dw: Vec<f64> = (0..n_paths).flat_map(|p| brownian_increments(&noise, &dts, p, 1)).collect();
        let coarse_dw = aggregate_increments(&fine_dw, 1, 4);
        let fine = euler_simulate_from_increments(&model, grid(1.0, fine_n), &fine_dw, 8).unwrap();
        let coarse = euler_simulate_from_increments(&model, grid(1.0, n), &coarse_dw, 8).unwrap();
        let err = (0..n_paths)
            .map(|p| (0..=n).map(|j| (coarse.x_at(p, j)[0] - fine.x_at(p, 4 * j)[0]).abs()).fold(0.0, f64::max))
            .sum::<f64>()
            / n_paths as f64;
        logs.push(((1.0 / n as f64).ln(), err.ln()));
    }
    let k = logs.len() as f64;
    let (mx, my) = (logs.iter().map(|l| l.0).sum::<f64>() / k, logs.iter().map(|l| l.1).sum::<f64>() / k);
    let slope = logs.iter().map(|l| (l.0 - mx) * (l.1 - my)).sum::<f64>()
        / logs.iter().map(|l| (l.0 - mx).powi(2)).sum::<f64>();
    assert!(slope >= 0.45, "empirical strong order {slope}");
}

#[test]
fn later_randomness_does_not_change_the_past() {
    let (n_paths, steps, cut) = (50, 64, 23);
    let g = grid(1.0, steps);
    let model = SdeModel::running_max_reverting(vec![0.5], 2.0, 0.3);
    let a = euler_simulate(&model, g.clone(), n_paths, 1).unwrap();
    let b = euler_simulate(&model, g.clone(), n_paths, 2).unwrap();
    let mut mixed = a.all_dw().to_vec();
    for p in 0..n_paths {
        for j in cut..steps {
            mixed[p * steps + j] = b.dw_at(p, j)[0];
        }
    }
    let m = euler_simulate_from_increments(&model, g, &mixed, 1).unwrap();
    for p in 0..n_paths {
        assert_eq!(m.x(p)[..=cut], a.x(p)[..=cut]);
        assert_ne!(m.x_at(p, steps), a.x_at(p, steps));
    }
}

#[test]
fn same_seed_gives_identical_ensembles() {
    let model = SdeModel::ornstein_uhlenbeck(vec![0.1, 0.2], 1.0, 0.0, 0.5);
    let a = euler_simulate(&model, grid(1.0, 32), 100, 99).unwrap();
    let b = euler_simulate(&model, grid(1.0, 32), 100, 99).unwrap();
    assert_eq!(a.all_x(), b.all_x());
    assert_eq!(a.all_dw(), b.all_dw());
    let c = euler_simulate(&model, grid(1.0, 32), 100, 100).unwrap();
    assert_ne!(a.all_x(), c.all_x());
}
