use std::time::Instant;

use disagg_core::fields::{make_grf_stack, make_population};
use disagg_core::geometry::make_partition;
use disagg_core::model::{fit_map, FitOptions, PriorSpec};
use disagg_core::raster::GridSpec;
use disagg_core::simulate::{aggregate_cases, ScenarioSpec, simulate_surface};

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
        sab += (x - ma) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

#[test]
#[ignore]
fn probe_fit_quality_vs_iterations() {
    let grid = GridSpec::new(64, 64);
    let real = make_grf_stack(grid, 12, (8.0, 32.0), 4, 1, "real").unwrap();
    let mock = make_grf_stack(grid, 12, (2.0, 32.0), 4, 2, "mock").unwrap();
    let pop = make_population(grid, 409_600.0, 1.0, 16.0, 4, 3).unwrap();
    let part = make_partition(grid, 64, 0.4, 4).unwrap();
    for scenario in [1u8, 3u8] {
        let surf = simulate_surface(ScenarioSpec::new(scenario).unwrap(), &real, &mock, &pop, 0.05*409_600.0, 20, 5).unwrap();
        let ids: Vec<u32> = (0..64).collect();
        let agg = aggregate_cases(&surf.cases, &pop, &part, &ids).unwrap();
        let prior = PriorSpec::default();
        for max_iter in [50usize, 100, 150, 250, 500] {
            let t = Instant::now();
            let opts = FitOptions { max_iter, ..Default::default() };
            let fit = fit_map(&agg, &surf.observed_stack, &pop, &prior, &opts).unwrap();
            let r = pearson(fit.lambda_pred.data(), surf.lambda_true.data());
            println!(
                "scenario {scenario} iter {max_iter:3}: {:6.2} s, corr {:.4}, |g| {:.2e}, rho {:.2}, sigma {:.3e}, jit obj {:.2}",
                t.elapsed().as_secs_f64(), r, fit.grad_norm, fit.params.rho(), fit.params.sigma(), fit.neg_log_posterior
            );
        }
    }
}
