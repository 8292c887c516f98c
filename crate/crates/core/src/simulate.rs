//! Ground-truth simulation: log-linear risk surfaces over covariates,
//! per-pixel Poisson case counts, threshold resampling, and aggregation
//! of pixel cases to polygon counts.
//!
//! Three misspecification scenarios control the covariate split: the
//! model always observes 6 of the 12 real layers; scenario 2 hides the
//! remaining 6, and scenario 3 additionally hides 3 of the 12 mock
//! layers.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::error::{Error, Result};
use crate::fields::CovariateStack;
use crate::geometry::PolygonPartition;
use crate::raster::Raster;
use crate::seed::{derive_seed, rng_from, stage};

pub const N_REAL_COVARIATES: usize = 12;
pub const N_MOCK_COVARIATES: usize = 12;

/// Covariate split for one misspecification scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScenarioSpec {
    pub id: u8,
    pub n_observed: usize,
    pub n_unobserved_real: usize,
    pub n_unobserved_mock: usize,
}

impl ScenarioSpec {
    pub fn new(id: u8) -> Result<Self> {
        let (n_observed, n_unobserved_real, n_unobserved_mock) = match id {
            1 => (6, 0, 0),
            2 => (6, 6, 0),
            3 => (6, 6, 3),
            other => {
                return Err(Error::Argument(format!(
                    "scenario must be 1, 2 or 3, got {other}"
                )))
            }
        };
        Ok(ScenarioSpec {
            id,
            n_observed,
            n_unobserved_real,
            n_unobserved_mock,
        })
    }
}

/// Ground-truth bundle for one simulated risk surface.
#[derive(Debug, Clone)]
pub struct SimulatedSurface {
    pub scenario: ScenarioSpec,
    pub beta0: f64,
    pub beta_obs: Vec<f64>,
    pub beta_unobs: Vec<f64>,
    /// Incidence rate per person, per pixel.
    pub lambda_true: Raster,
    /// Integer-valued case counts per pixel.
    pub cases: Raster,
    pub observed_stack: CovariateStack,
    pub unobserved_stack: CovariateStack,
    pub population: Raster,
    pub observed_indices: Vec<usize>,
    pub unobserved_real_indices: Vec<usize>,
    pub unobserved_mock_indices: Vec<usize>,
    pub seed: u64,
    pub attempts: u32,
    pub total_cases: u64,
}

impl SimulatedSurface {
    /// Persist lambda, cases, population, coefficients, and the scenario
    /// manifest under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        use crate::kv::{join_comma, KvFile};
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.lambda_true.write_text(dir.join("lambda_true.asc"))?;
        self.cases.write_text(dir.join("cases.asc"))?;
        self.population.write_text(dir.join("population.asc"))?;

        let mut coeffs = KvFile::new();
        coeffs.set_float("beta0", self.beta0);
        for (i, b) in self.beta_obs.iter().enumerate() {
            coeffs.set_float(&format!("beta_obs.{i}"), *b);
        }
        for (i, b) in self.beta_unobs.iter().enumerate() {
            coeffs.set_float(&format!("beta_unobs.{i}"), *b);
        }
        coeffs.write(dir.join("coeffs.txt"))?;

        let mut manifest = KvFile::new();
        manifest.set("scenario", self.scenario.id);
        manifest.set("seed", self.seed);
        manifest.set("attempts", self.attempts);
        manifest.set("total_cases", self.total_cases);
        manifest.set("observed_indices", join_comma(self.observed_indices.iter()));
        manifest.set(
            "unobserved_real_indices",
            join_comma(self.unobserved_real_indices.iter()),
        );
        manifest.set(
            "unobserved_mock_indices",
            join_comma(self.unobserved_mock_indices.iter()),
        );
        manifest.write(dir.join("manifest.txt"))
    }
}

/// Polygon-level case counts, populations, and rates, with the observed
/// subset marked.
#[derive(Debug, Clone)]
pub struct AggregatedData {
    pub partition: PolygonPartition,
    observed_ids: Vec<u32>,
    counts: Vec<u64>,
    populations: Vec<f64>,
    rates: Vec<f64>,
}

impl AggregatedData {
    pub fn observed_ids(&self) -> &[u32] {
        &self.observed_ids
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn populations(&self) -> &[f64] {
        &self.populations
    }

    /// Per-polygon incidence rates (count / population); NaN for
    /// unobserved polygons with zero population.
    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn is_observed(&self, id: u32) -> bool {
        self.observed_ids.binary_search(&id).is_ok()
    }

    /// Same counts restricted to a different observed subset (used by
    /// polygon-level cross validation).
    pub fn with_observed(&self, observed_ids: &[u32]) -> Result<AggregatedData> {
        let mut data = self.clone();
        data.observed_ids = normalize_ids(observed_ids, self.partition.n_polygons())?;
        for &id in &data.observed_ids {
            if data.populations[id as usize] <= 0.0 {
                return Err(Error::DegeneratePolygon { polygon: id });
            }
        }
        Ok(data)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("polygon_id,count,population,rate,observed\n");
        for id in 0..self.partition.n_polygons() {
            let _ = writeln!(
                out,
                "{id},{},{},{},{}",
                self.counts[id],
                self.populations[id],
                self.rates[id],
                self.is_observed(id as u32)
            );
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn normalize_ids(ids: &[u32], n_polygons: usize) -> Result<Vec<u32>> {
    let mut sorted: Vec<u32> = ids.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if let Some(&bad) = sorted.iter().find(|&&id| id as usize >= n_polygons) {
        return Err(Error::Argument(format!(
            "unknown polygon id {bad} (partition has {n_polygons} polygons)"
        )));
    }
    Ok(sorted)
}

/// `k` iid draws from N(0, 0.5^2).
pub fn draw_coefficients(k: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_from(seed);
    let normal = Normal::new(0.0, 0.5).expect("valid normal");
    (0..k).map(|_| normal.sample(&mut rng)).collect()
}

/// Intercept drawn uniformly from [-8, -5].
pub fn draw_intercept(seed: u64) -> f64 {
    let mut rng = rng_from(seed);
    rng.random_range(-8.0..-5.0)
}

/// Pixel-wise risk surface: `lambda = exp(beta0 + B_obs' X_obs + B_unobs' X_unobs)`.
pub fn build_risk_surface(
    observed: &CovariateStack,
    unobserved: &CovariateStack,
    beta0: f64,
    beta_obs: &[f64],
    beta_unobs: &[f64],
) -> Result<Raster> {
    if beta_obs.len() != observed.len() || beta_unobs.len() != unobserved.len() {
        return Err(Error::Argument(format!(
            "coefficient lengths ({}, {}) do not match stack sizes ({}, {})",
            beta_obs.len(),
            beta_unobs.len(),
            observed.len(),
            unobserved.len()
        )));
    }
    let grid = observed
        .grid()
        .or_else(|| unobserved.grid())
        .ok_or_else(|| Error::Argument("risk surface needs at least a grid".into()))?;
    if let (Some(a), Some(b)) = (observed.grid(), unobserved.grid()) {
        if a != b {
            return Err(Error::Argument(
                "observed and unobserved stacks use different grids".into(),
            ));
        }
    }
    let n = grid.n_pixels();
    let mut linpred = vec![beta0; n];
    for (b, layer) in beta_obs.iter().zip(observed.layers()) {
        for (acc, &x) in linpred.iter_mut().zip(layer.data()) {
            *acc += b * x;
        }
    }
    for (b, layer) in beta_unobs.iter().zip(unobserved.layers()) {
        for (acc, &x) in linpred.iter_mut().zip(layer.data()) {
            *acc += b * x;
        }
    }
    Raster::from_vec(grid, linpred.into_iter().map(f64::exp).collect())
}

/// Independent Poisson(`lambda * population`) draws per pixel, each from
/// its own counter-derived stream so results do not depend on iteration
/// order.
pub fn sample_cases(lambda: &Raster, population: &Raster, seed: u64) -> Result<Raster> {
    if lambda.grid != population.grid {
        return Err(Error::Argument(
            "lambda and population grids do not match".into(),
        ));
    }
    let mut out = Vec::with_capacity(lambda.data().len());
    for (px, (&l, &p)) in lambda.data().iter().zip(population.data()).enumerate() {
        let mu = l * p;
        if !mu.is_finite() || mu < 0.0 {
            return Err(Error::Simulation(format!(
                "pixel {px} has invalid Poisson mean {mu}"
            )));
        }
        if mu == 0.0 {
            out.push(0.0);
            continue;
        }
        let mut rng = rng_from(derive_seed(seed, &[px as u64]));
        let draw: f64 = Poisson::new(mu)
            .map_err(|e| Error::Simulation(format!("pixel {px}: {e}")))?
            .sample(&mut rng);
        out.push(draw.round());
    }
    Raster::from_vec(lambda.grid, out)
}

/// Sum of an integer-valued case raster.
pub fn total_cases(cases: &Raster) -> u64 {
    cases.data().iter().map(|&v| v as u64).sum()
}

/// Simulate one ground-truth surface under `scenario`.
///
/// Draws the covariate split once, then repeats (intercept, coefficients,
/// case noise) with fresh sub-seeds until the total case count falls at or
/// below `max_total_cases`, up to `max_attempts`.
pub fn simulate_surface(
    scenario: ScenarioSpec,
    real_stack: &CovariateStack,
    mock_stack: &CovariateStack,
    population: &Raster,
    max_total_cases: f64,
    max_attempts: u32,
    seed: u64,
) -> Result<SimulatedSurface> {
    if real_stack.len() != N_REAL_COVARIATES {
        return Err(Error::Argument(format!(
            "expected {N_REAL_COVARIATES} real covariate layers, got {}",
            real_stack.len()
        )));
    }
    if scenario.n_unobserved_mock > 0 && mock_stack.len() != N_MOCK_COVARIATES {
        return Err(Error::Argument(format!(
            "expected {N_MOCK_COVARIATES} mock covariate layers, got {}",
            mock_stack.len()
        )));
    }
    if !real_stack.is_standardized()
        || (scenario.n_unobserved_mock > 0 && !mock_stack.is_standardized())
    {
        return Err(Error::Argument(
            "covariate stacks must be standardized before simulation".into(),
        ));
    }
    if max_attempts < 1 {
        return Err(Error::Argument("max_attempts must be at least 1".into()));
    }

    // covariate split: fixed across threshold retries
    let mut split_rng = rng_from(derive_seed(seed, &[stage::COVARIATE_SPLIT]));
    let mut observed_indices: Vec<usize> =
        rand::seq::index::sample(&mut split_rng, N_REAL_COVARIATES, scenario.n_observed).into_vec();
    observed_indices.sort_unstable();
    let mut unobserved_real_indices: Vec<usize> = (0..N_REAL_COVARIATES)
        .filter(|i| !observed_indices.contains(i))
        .collect();
    unobserved_real_indices.truncate(scenario.n_unobserved_real);
    let mut unobserved_mock_indices: Vec<usize> = if scenario.n_unobserved_mock > 0 {
        rand::seq::index::sample(&mut split_rng, N_MOCK_COVARIATES, scenario.n_unobserved_mock)
            .into_vec()
    } else {
        Vec::new()
    };
    unobserved_mock_indices.sort_unstable();

    let observed_stack = real_stack.select(&observed_indices)?;
    let unobserved_stack = real_stack
        .select(&unobserved_real_indices)?
        .concat(&mock_stack.select(&unobserved_mock_indices)?)?;

    let mut attempt_totals = Vec::new();
    for attempt in 0..max_attempts {
        let a = attempt as u64;
        let beta0 = draw_intercept(derive_seed(seed, &[stage::INTERCEPT, a]));
        let beta_obs = draw_coefficients(
            scenario.n_observed,
            derive_seed(seed, &[stage::COEFFICIENTS, a, 0]),
        );
        let beta_unobs = draw_coefficients(
            scenario.n_unobserved_real + scenario.n_unobserved_mock,
            derive_seed(seed, &[stage::COEFFICIENTS, a, 1]),
        );
        let lambda_true =
            build_risk_surface(&observed_stack, &unobserved_stack, beta0, &beta_obs, &beta_unobs)?;
        let cases = sample_cases(&lambda_true, population, derive_seed(seed, &[stage::CASES, a]))?;
        let total = total_cases(&cases);
        if total as f64 <= max_total_cases {
            return Ok(SimulatedSurface {
                scenario,
                beta0,
                beta_obs,
                beta_unobs,
                lambda_true,
                cases,
                observed_stack,
                unobserved_stack,
                population: population.clone(),
                observed_indices,
                unobserved_real_indices,
                unobserved_mock_indices,
                seed,
                attempts: attempt + 1,
                total_cases: total,
            });
        }
        attempt_totals.push(total);
    }
    Err(Error::ThresholdExhausted {
        attempts: max_attempts,
        max_total_cases,
        totals: attempt_totals,
    })
}

/// Aggregate pixel cases and populations to polygon totals.
pub fn aggregate_cases(
    cases: &Raster,
    population: &Raster,
    partition: &PolygonPartition,
    observed_ids: &[u32],
) -> Result<AggregatedData> {
    if cases.grid != partition.grid || population.grid != partition.grid {
        return Err(Error::Argument(
            "case/population rasters do not match the partition grid".into(),
        ));
    }
    let observed_ids = normalize_ids(observed_ids, partition.n_polygons())?;
    let n = partition.n_polygons();
    let mut counts = vec![0u64; n];
    let mut populations = vec![0.0; n];
    for (px, &label) in partition.labels().iter().enumerate() {
        let c = cases.data()[px];
        if !c.is_finite() || c < 0.0 || c.fract() != 0.0 {
            return Err(Error::Data(format!(
                "case raster holds non-count value {c} at pixel {px}"
            )));
        }
        counts[label as usize] += c as u64;
        populations[label as usize] += population.data()[px];
    }
    for &id in &observed_ids {
        if populations[id as usize] <= 0.0 {
            return Err(Error::DegeneratePolygon { polygon: id });
        }
    }
    let rates = counts
        .iter()
        .zip(&populations)
        .map(|(&c, &p)| if p > 0.0 { c as f64 / p } else { f64::NAN })
        .collect();
    Ok(AggregatedData {
        partition: partition.clone(),
        observed_ids,
        counts,
        populations,
        rates,
    })
}
