//! The disaggregation regression model: parameters, priors, the aggregate
//! Poisson negative log posterior with analytic gradient, MAP fitting,
//! and fine-scale prediction.

mod lbfgs;
mod posterior;

use std::path::Path;

use crate::error::{Error, Result};
use crate::fields::{CovariateStack, NodeLattice};
use crate::kv::KvFile;
use crate::raster::{GridSpec, Raster};
use crate::simulate::AggregatedData;

pub use lbfgs::{LbfgsOptions, OptOutcome, StopReason, TraceRow};
pub use posterior::{PosteriorParts, PosteriorProblem};

/// Full parameter vector: intercept, coefficients, log-transformed Matern
/// hyperparameters, and latent node values.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub beta0: f64,
    pub beta: Vec<f64>,
    pub log_rho: f64,
    pub log_sigma: f64,
    pub u: Vec<f64>,
}

impl ModelParams {
    pub fn rho(&self) -> f64 {
        self.log_rho.exp()
    }

    pub fn sigma(&self) -> f64 {
        self.log_sigma.exp()
    }

    /// Flatten as `[beta0, beta.., log_rho, log_sigma, u..]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(3 + self.beta.len() + self.u.len());
        out.push(self.beta0);
        out.extend_from_slice(&self.beta);
        out.push(self.log_rho);
        out.push(self.log_sigma);
        out.extend_from_slice(&self.u);
        out
    }

    pub fn from_flat(k: usize, m: usize, x: &[f64]) -> Self {
        debug_assert_eq!(x.len(), 3 + k + m);
        ModelParams {
            beta0: x[0],
            beta: x[1..1 + k].to_vec(),
            log_rho: x[1 + k],
            log_sigma: x[2 + k],
            u: x[3 + k..].to_vec(),
        }
    }

    /// Write as full-precision `name = value` lines.
    pub fn save(&self, path: impl AsRef<Path>, node_spacing: usize) -> Result<()> {
        let mut kv = KvFile::new();
        kv.set("k", self.beta.len());
        kv.set("m", self.u.len());
        kv.set("node_spacing", node_spacing);
        kv.set_float("beta0", self.beta0);
        for (i, b) in self.beta.iter().enumerate() {
            kv.set_float(&format!("beta.{i}"), *b);
        }
        kv.set_float("log_rho", self.log_rho);
        kv.set_float("log_sigma", self.log_sigma);
        for (i, v) in self.u.iter().enumerate() {
            kv.set_float(&format!("u.{i}"), *v);
        }
        kv.write(path)
    }

    /// Read back a params file; returns the params and the node spacing
    /// they were fitted with.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, usize)> {
        let kv = KvFile::read(path)?;
        let k: usize = kv.parse_value("k")?;
        let m: usize = kv.parse_value("m")?;
        let node_spacing: usize = kv.parse_value("node_spacing")?;
        let mut beta = Vec::with_capacity(k);
        for i in 0..k {
            beta.push(kv.parse_value(&format!("beta.{i}"))?);
        }
        let mut u = Vec::with_capacity(m);
        for i in 0..m {
            u.push(kv.parse_value(&format!("u.{i}"))?);
        }
        Ok((
            ModelParams {
                beta0: kv.parse_value("beta0")?,
                beta,
                log_rho: kv.parse_value("log_rho")?,
                log_sigma: kv.parse_value("log_sigma")?,
                u,
            },
            node_spacing,
        ))
    }
}

/// Prior specification: Gaussian on the intercept and coefficients,
/// penalised-complexity tails on the Matern hyperparameters.
///
/// The tail statements are `P(rho > rho0) = rho_tail_prob` and
/// `P(sigma < sigma0) = sigma_tail_prob`, taken literally.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorSpec {
    pub beta0_mean: f64,
    pub beta0_sd: f64,
    pub beta_mean: f64,
    pub beta_sd: f64,
    pub rho0: f64,
    pub rho_tail_prob: f64,
    pub sigma0: f64,
    pub sigma_tail_prob: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            beta0_mean: -4.0,
            beta0_sd: 2.0,
            beta_mean: 0.0,
            beta_sd: 1.0,
            rho0: 1.0,
            rho_tail_prob: 0.01,
            sigma0: 0.5,
            sigma_tail_prob: 0.01,
        }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta0_sd > 0.0) || !(self.beta_sd > 0.0) {
            return Err(Error::Config("prior standard deviations must be positive".into()));
        }
        if !(self.rho0 > 0.0) || !(self.sigma0 > 0.0) {
            return Err(Error::Config("prior tail locations must be positive".into()));
        }
        if !(0.0 < self.rho_tail_prob && self.rho_tail_prob < 1.0)
            || !(0.0 < self.sigma_tail_prob && self.sigma_tail_prob < 1.0)
        {
            return Err(Error::Config("prior tail probabilities must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Calibrated from `P(rho < rho0) = e^{-lambda_rho / rho0}`.
    pub fn lambda_rho(&self) -> f64 {
        -(1.0 - self.rho_tail_prob).ln() * self.rho0
    }

    /// Calibrated from `P(sigma > sigma0) = e^{-lambda_sigma sigma0}`.
    pub fn lambda_sigma(&self) -> f64 {
        -(1.0 - self.sigma_tail_prob).ln() / self.sigma0
    }
}

/// Joint PC-prior log density (d = 2 form):
/// `pi(rho) = lambda_rho rho^{-2} e^{-lambda_rho / rho}`,
/// `pi(sigma) = lambda_sigma e^{-lambda_sigma sigma}`.
pub fn pc_prior_logdensity(rho: f64, sigma: f64, prior: &PriorSpec) -> Result<f64> {
    if !(rho > 0.0) || !(sigma > 0.0) {
        return Err(Error::Argument(format!(
            "PC prior domain is rho > 0, sigma > 0; got rho={rho}, sigma={sigma}"
        )));
    }
    let lr = prior.lambda_rho();
    let ls = prior.lambda_sigma();
    Ok(lr.ln() - 2.0 * rho.ln() - lr / rho + ls.ln() - ls * sigma)
}

/// Bilinear interpolation of latent node values to pixel centers.
pub fn latent_field_at_pixels(u: &[f64], grid: GridSpec, node_spacing: usize) -> Result<Raster> {
    NodeLattice::new(grid, node_spacing)?.interpolate(u)
}

/// MAP fitting options.
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub node_spacing: usize,
    pub lbfgs_memory: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iter: 500,
            grad_tol: 1e-6,
            node_spacing: 4,
            lbfgs_memory: 10,
        }
    }
}

/// Predicted pixel surfaces.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub lambda: Raster,
    pub expected_cases: Raster,
}

/// MAP fit output: parameters, diagnostics, and the predicted rate surface.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    pub neg_log_posterior: f64,
    pub n_iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
    pub lambda_pred: Raster,
    pub trace: Vec<TraceRow>,
    pub node_spacing: usize,
    /// (mean, sd) of each covariate layer at fit time; prediction must
    /// use identically standardized covariates.
    pub covariate_transforms: Vec<(f64, f64)>,
}

impl FitResult {
    /// Predict with a transform check: the stack must carry exactly the
    /// standardization recorded at fit time.
    pub fn predict(&self, covs: &CovariateStack, population: &Raster) -> Result<Prediction> {
        if covs.transforms() != self.covariate_transforms.as_slice() {
            return Err(Error::Config(
                "covariate standardization differs between fit and prediction".into(),
            ));
        }
        predict_pixels(&self.params, covs, population, self.node_spacing)
    }

    /// Persist params, predicted rate raster, diagnostics CSV, and a
    /// small metadata file under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        use std::fmt::Write as _;
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.params.save(dir.join("params.txt"), self.node_spacing)?;
        self.lambda_pred.write_text(dir.join("lambda_pred.asc"))?;
        let mut csv = String::from("iteration,objective,grad_norm,step_size\n");
        for row in &self.trace {
            let _ = writeln!(
                csv,
                "{},{},{},{}",
                row.iteration, row.objective, row.grad_norm, row.step_size
            );
        }
        std::fs::write(dir.join("diagnostics.csv"), csv)
            .map_err(|e| Error::io(dir.join("diagnostics.csv"), e))?;
        let mut meta = KvFile::new();
        meta.set("converged", self.converged);
        meta.set("n_iterations", self.n_iterations);
        meta.set_float("neg_log_posterior", self.neg_log_posterior);
        meta.set_float("grad_norm", self.grad_norm);
        meta.write(dir.join("fit.meta"))
    }
}

/// Fine-scale prediction: `lambda = exp(beta0 + beta' X + A u)` and
/// `expected_cases = lambda * population`.
pub fn predict_pixels(
    params: &ModelParams,
    covs: &CovariateStack,
    population: &Raster,
    node_spacing: usize,
) -> Result<Prediction> {
    if covs.len() != params.beta.len() {
        return Err(Error::Argument(format!(
            "params carry {} coefficients, stack has {} layers",
            params.beta.len(),
            covs.len()
        )));
    }
    if !covs.is_empty() && !covs.is_standardized() {
        return Err(Error::Config(
            "covariates must be standardized with the transforms recorded at fit time".into(),
        ));
    }
    let grid = population.grid;
    if let Some(g) = covs.grid() {
        if g != grid {
            return Err(Error::Argument(
                "covariate stack grid does not match the population grid".into(),
            ));
        }
    }
    let field = latent_field_at_pixels(&params.u, grid, node_spacing)?;
    let n = grid.n_pixels();
    let mut lambda = Vec::with_capacity(n);
    for px in 0..n {
        // same accumulation order as the objective's eta computation
        let mut z = params.beta0;
        for (b, layer) in params.beta.iter().zip(covs.layers()) {
            z += b * layer.data()[px];
        }
        z += field.data()[px];
        lambda.push(z.exp());
    }
    let lambda = Raster::from_vec(grid, lambda)?;
    let expected = Raster::from_vec(
        grid,
        lambda
            .data()
            .iter()
            .zip(population.data())
            .map(|(&l, &p)| l * p)
            .collect(),
    )?;
    Ok(Prediction {
        lambda,
        expected_cases: expected,
    })
}

/// Fit the model by joint MAP over (beta0, beta, log rho, log sigma, u)
/// with L-BFGS and backtracking line search.
///
/// Starts from the constant-rate model: `beta0 = log(sum y / sum p)` over
/// the observed polygons (with the count total floored at 1/2 so an
/// all-zero response still yields a finite start), `beta = 0`, `u = 0`,
/// `rho` a quarter of the grid diagonal, `sigma = 0.5`.
///
/// Non-convergence is reported through `converged = false`, not an error.
pub fn fit_map(
    data: &AggregatedData,
    covs: &CovariateStack,
    population: &Raster,
    prior: &PriorSpec,
    opts: &FitOptions,
) -> Result<FitResult> {
    let problem = PosteriorProblem::new(data, covs, population, *prior, opts.node_spacing)?;
    let k = problem.k();
    let m = problem.n_nodes();

    let mut y_total = 0.0;
    let mut p_total = 0.0;
    for &id in data.observed_ids() {
        y_total += data.counts()[id as usize] as f64;
        p_total += data.populations()[id as usize];
    }
    let init = ModelParams {
        beta0: (y_total.max(0.5) / p_total).ln(),
        beta: vec![0.0; k],
        log_rho: (0.25 * data.partition.grid.diagonal()).ln(),
        log_sigma: 0.5f64.ln(),
        u: vec![0.0; m],
    };

    let lbfgs_opts = LbfgsOptions {
        memory: opts.lbfgs_memory,
        max_iter: opts.max_iter,
        grad_tol: opts.grad_tol,
        ..Default::default()
    };
    let outcome = lbfgs::minimize(&lbfgs_opts, &init.to_flat(), |x, need_grad| {
        let p = ModelParams::from_flat(k, m, x);
        if need_grad {
            problem.value_and_grad(&p).map(|(f, g)| (f, Some(g)))
        } else {
            problem.value(&p).map(|f| (f, None))
        }
    })?;

    let params = ModelParams::from_flat(k, m, &outcome.x);
    let prediction = predict_pixels(&params, covs, population, opts.node_spacing)?;
    Ok(FitResult {
        params,
        neg_log_posterior: outcome.objective,
        n_iterations: outcome.iterations,
        converged: outcome.converged,
        grad_norm: outcome.grad_inf_norm,
        lambda_pred: prediction.lambda,
        trace: outcome.trace,
        node_spacing: opts.node_spacing,
        covariate_transforms: covs.transforms().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{make_grf_stack, matern_cov, MaternParams};
    use crate::geometry::make_partition;
    use crate::simulate::{aggregate_cases, sample_cases};
    use nalgebra::DMatrix;
    use rand::Rng;

    // ---- independent oracles -----------------------------------------

    /// Simpson's rule.
    fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let n = n + n % 2;
        let h = (b - a) / n as f64;
        let mut acc = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(a + i as f64 * h);
        }
        acc * h / 3.0
    }

    /// Dense interpolation matrix assembled from the tent-product formula,
    /// independent of `pixel_weights`.
    fn dense_interp_matrix(lattice: &NodeLattice) -> DMatrix<f64> {
        let grid = lattice.grid;
        let step = lattice.spacing as f64 * grid.pixel_size;
        let tri = |t: f64| (1.0 - t.abs()).max(0.0);
        DMatrix::from_fn(grid.n_pixels(), lattice.n_nodes(), |px, node| {
            let (nx, ny) = lattice.node_position(node);
            let (cx, cy) = grid.center(px % grid.nx, px / grid.nx);
            tri((cx - nx) / step) * tri((cy - ny) / step)
        })
    }

    /// Straight-line reimplementation of the objective: dense A, explicit
    /// inverse and determinant, per-polygon pixel loops.
    fn naive_value(
        data: &AggregatedData,
        covs: &CovariateStack,
        population: &Raster,
        prior: &PriorSpec,
        node_spacing: usize,
        p: &ModelParams,
    ) -> f64 {
        let grid = data.partition.grid;
        let lattice = NodeLattice::new(grid, node_spacing).unwrap();
        let a = dense_interp_matrix(&lattice);
        let u = nalgebra::DVector::from_column_slice(&p.u);
        let field = &a * &u;

        let mut poisson = 0.0;
        for &id in data.observed_ids() {
            let mut eta = 0.0;
            for (px, &l) in data.partition.labels().iter().enumerate() {
                if l != id {
                    continue;
                }
                let mut z = p.beta0 + field[px];
                for (b, layer) in p.beta.iter().zip(covs.layers()) {
                    z += b * layer.data()[px];
                }
                eta += population.data()[px] * z.exp();
            }
            let y = data.counts()[id as usize] as f64;
            poisson += if y > 0.0 { eta - y * eta.ln() } else { eta };
        }

        let m = lattice.n_nodes();
        let sigma = DMatrix::from_fn(m, m, |i, j| {
            let (xi, yi) = lattice.node_position(i);
            let (xj, yj) = lattice.node_position(j);
            let d = ((xi - xj).powi(2) + (yi - yj).powi(2)).sqrt();
            matern_cov(
                d,
                &MaternParams {
                    rho: p.rho(),
                    sigma: p.sigma(),
                },
            )
        });
        let inv = sigma.clone().try_inverse().unwrap();
        let quad = 0.5 * (u.transpose() * &inv * &u)[(0, 0)];
        let half_logdet = 0.5 * sigma.determinant().ln();

        let b0 = (p.beta0 - prior.beta0_mean) / prior.beta0_sd;
        let mut prior_nll = 0.5 * b0 * b0;
        for &b in &p.beta {
            let z = (b - prior.beta_mean) / prior.beta_sd;
            prior_nll += 0.5 * z * z;
        }
        prior_nll -= pc_prior_logdensity(p.rho(), p.sigma(), prior).unwrap();

        poisson + quad + half_logdet + prior_nll
    }

    /// Random tiny instance on a 3x3 grid (16-node lattice).
    fn tiny_instance(
        seed: u64,
        k: usize,
        n_polys: usize,
    ) -> (AggregatedData, CovariateStack, Raster) {
        let grid = GridSpec::new(3, 3);
        let part = make_partition(grid, n_polys, 0.7, seed).unwrap();
        let covs = if k > 0 {
            make_grf_stack(grid, k, (1.5, 4.0), 4, seed ^ 0xc0ffee, "x").unwrap()
        } else {
            CovariateStack::empty()
        };
        let mut rng = crate::seed::rng_from(seed ^ 0xbeef);
        let population = Raster::from_vec(
            grid,
            (0..9).map(|_| rng.random_range(0.5..3.0)).collect(),
        )
        .unwrap();
        let cases = Raster::from_vec(
            grid,
            (0..9).map(|_| rng.random_range(0..5) as f64).collect(),
        )
        .unwrap();
        let ids: Vec<u32> = (0..n_polys as u32).collect();
        let agg = aggregate_cases(&cases, &population, &part, &ids).unwrap();
        (agg, covs, population)
    }

    fn random_params(seed: u64, k: usize, m: usize) -> ModelParams {
        let mut rng = crate::seed::rng_from(seed);
        ModelParams {
            beta0: rng.random_range(-1.0..1.0),
            beta: (0..k).map(|_| rng.random_range(-0.8..0.8)).collect(),
            log_rho: rng.random_range(2.0f64..6.0).ln(),
            log_sigma: rng.random_range(0.4f64..1.5).ln(),
            u: (0..m).map(|_| rng.random_range(-0.7..0.7)).collect(),
        }
    }

    // ---- PC prior -----------------------------------------------------

    #[test]
    fn pc_prior_lambda_calibration() {
        let prior = PriorSpec::default();
        assert!((prior.lambda_rho() - 0.010050).abs() < 1e-6);
        assert!((prior.lambda_rho() + 0.99f64.ln()).abs() < 1e-12);
        assert!((prior.lambda_sigma() - 0.0201007).abs() < 1e-6);
    }

    #[test]
    fn pc_prior_tail_masses_by_quadrature() {
        let prior = PriorSpec::default();
        // marginal densities recovered from the joint log density so the
        // quadrature exercises the implemented form, not a re-derivation
        let ls = prior.lambda_sigma();
        let lr = prior.lambda_rho();
        let sigma_marginal_log = |s: f64| ls.ln() - ls * s;
        let rho_pdf = |r: f64| {
            (pc_prior_logdensity(r, 1.0, &prior).unwrap() - sigma_marginal_log(1.0)).exp()
        };
        let sigma_pdf = |s: f64| {
            (pc_prior_logdensity(1.0, s, &prior).unwrap()
                - (lr.ln() - 2.0 * 1.0f64.ln() - lr / 1.0))
                .exp()
        };
        let p_rho_below = integrate(rho_pdf, 1e-9, prior.rho0, 200_000);
        assert!((p_rho_below - 0.99).abs() < 1e-4, "P(rho<1) = {p_rho_below}");
        let p_sigma_above = integrate(sigma_pdf, prior.sigma0, 2_000.0, 400_000);
        assert!(
            (p_sigma_above - 0.99).abs() < 1e-4,
            "P(sigma>0.5) = {p_sigma_above}"
        );
    }

    #[test]
    fn pc_prior_domain() {
        let prior = PriorSpec::default();
        assert!(pc_prior_logdensity(0.0, 1.0, &prior).is_err());
        assert!(pc_prior_logdensity(1.0, -0.5, &prior).is_err());
        // log density matches the marginal forms
        let lr = prior.lambda_rho();
        let ls = prior.lambda_sigma();
        let v = pc_prior_logdensity(2.0, 0.7, &prior).unwrap();
        let expect = (lr / 4.0 * (-lr / 2.0).exp()).ln() + (ls * (-ls * 0.7).exp()).ln();
        assert!((v - expect).abs() < 1e-12);
    }

    // ---- latent field -------------------------------------------------

    #[test]
    fn latent_field_reproduces_constants() {
        let grid = GridSpec::new(7, 5);
        let lattice = NodeLattice::new(grid, 4).unwrap();
        let u = vec![3.25; lattice.n_nodes()];
        let r = latent_field_at_pixels(&u, grid, 4).unwrap();
        assert!(r.data().iter().all(|&v| (v - 3.25).abs() < 1e-12));
    }

    #[test]
    fn latent_field_single_node_bump_is_local() {
        let grid = GridSpec::new(12, 12);
        let spacing = 4;
        let lattice = NodeLattice::new(grid, spacing).unwrap();
        let (nxn, _) = lattice.shape();
        let node = 2 * nxn + 2; // node at map coords (4, 4)
        let mut u = vec![0.0; lattice.n_nodes()];
        u[node] = 1.0;
        let r = latent_field_at_pixels(&u, grid, spacing).unwrap();
        let (nx_pos, ny_pos) = lattice.node_position(node);
        let mut peak = (0.0, 0usize, 0usize);
        for iy in 0..12 {
            for ix in 0..12 {
                let v = r.get(ix, iy);
                let (cx, cy) = grid.center(ix, iy);
                let d = (cx - nx_pos).abs().max((cy - ny_pos).abs());
                if d >= spacing as f64 {
                    assert_eq!(v, 0.0, "support limited to one lattice cell around the node");
                }
                if v > peak.0 {
                    peak = (v, ix, iy);
                }
            }
        }
        // peak sits at one of the pixels nearest the node
        let (cx, cy) = grid.center(peak.1, peak.2);
        assert!((cx - nx_pos).abs() <= grid.pixel_size && (cy - ny_pos).abs() <= grid.pixel_size);
    }

    #[test]
    fn latent_field_matches_dense_matrix_oracle() {
        let grid = GridSpec::new(6, 4);
        let lattice = NodeLattice::new(grid, 3).unwrap();
        let a = dense_interp_matrix(&lattice);
        let mut rng = crate::seed::rng_from(17);
        let u: Vec<f64> = (0..lattice.n_nodes())
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        let fast = latent_field_at_pixels(&u, grid, 3).unwrap();
        let dense = &a * nalgebra::DVector::from_column_slice(&u);
        for px in 0..grid.n_pixels() {
            assert!((fast.data()[px] - dense[px]).abs() < 1e-12);
        }
    }

    // ---- objective ----------------------------------------------------

    #[test]
    fn hand_computed_single_pixel_value() {
        // one polygon, one pixel, p = 1, y = 1, beta0 = 0, K = 0, u = 0:
        // Poisson part is 1 - 1*log(1) = 1
        let grid = GridSpec::new(1, 1);
        let part = make_partition(grid, 1, 0.0, 0).unwrap();
        let pop = Raster::filled(grid, 1.0);
        let cases = Raster::filled(grid, 1.0);
        let agg = aggregate_cases(&cases, &pop, &part, &[0]).unwrap();
        let prior = PriorSpec::default();
        let problem = PosteriorProblem::new(&agg, &CovariateStack::empty(), &pop, prior, 1).unwrap();
        let params = ModelParams {
            beta0: 0.0,
            beta: vec![],
            log_rho: (2.0f64).ln(),
            log_sigma: (0.8f64).ln(),
            u: vec![0.0; problem.n_nodes()],
        };
        let parts = problem.parts(&params).unwrap();
        assert!((parts.poisson - 1.0).abs() < 1e-12);
        assert_eq!(parts.gp_quad, 0.0);
        // prior terms recomputed by hand
        let expect_prior = 0.5 * (4.0f64 / 2.0).powi(2)
            - pc_prior_logdensity(2.0, 0.8, &prior).unwrap();
        assert!((parts.prior_nll - expect_prior).abs() < 1e-12);
        assert!(
            (parts.total() - (1.0 + parts.gp_half_logdet + expect_prior)).abs() < 1e-12
        );
    }

    #[test]
    fn value_matches_naive_reimplementation() {
        for seed in 0..6u64 {
            let (agg, covs, pop) = tiny_instance(seed, 1, 2);
            let prior = PriorSpec::default();
            let problem = PosteriorProblem::new(&agg, &covs, &pop, prior, 4).unwrap();
            let params = random_params(seed ^ 0xa5, problem.k(), problem.n_nodes());
            let parts = problem.parts(&params).unwrap();
            assert_eq!(parts.jitter, 0.0, "tiny instances factor cleanly");
            let naive = naive_value(&agg, &covs, &pop, &prior, 4, &params);
            assert!(
                (parts.total() - naive).abs() < 1e-10 * naive.abs().max(1.0),
                "seed {seed}: {} vs {naive}",
                parts.total()
            );
        }
    }

    #[test]
    fn poisson_part_invariant_under_population_scaling() {
        let grid = GridSpec::new(3, 3);
        let part = make_partition(grid, 3, 0.7, 3).unwrap();
        let covs = make_grf_stack(grid, 2, (1.5, 4.0), 4, 99, "x").unwrap();
        let mut rng = crate::seed::rng_from(44);
        let pop = Raster::from_vec(grid, (0..9).map(|_| rng.random_range(0.5..3.0)).collect())
            .unwrap();
        let cases =
            Raster::from_vec(grid, (0..9).map(|_| rng.random_range(0..5) as f64).collect())
                .unwrap();
        let ids: Vec<u32> = vec![0, 1, 2];
        let prior = PriorSpec::default();

        let agg = aggregate_cases(&cases, &pop, &part, &ids).unwrap();
        let problem = PosteriorProblem::new(&agg, &covs, &pop, prior, 4).unwrap();
        let params = random_params(11, problem.k(), problem.n_nodes());

        // p -> c p with beta0 -> beta0 - ln c leaves every eta unchanged
        let c = 7.3;
        let scaled_pop = pop.map(|v| c * v);
        let scaled_agg = aggregate_cases(&cases, &scaled_pop, &part, &ids).unwrap();
        let scaled_problem =
            PosteriorProblem::new(&scaled_agg, &covs, &scaled_pop, prior, 4).unwrap();
        let mut shifted = params.clone();
        shifted.beta0 -= c.ln();

        let a = problem.parts(&params).unwrap();
        let b = scaled_problem.parts(&shifted).unwrap();
        assert!(
            (a.poisson - b.poisson).abs() < 1e-10 * a.poisson.abs().max(1.0),
            "{} vs {}",
            a.poisson,
            b.poisson
        );
    }

    // ---- gradient -----------------------------------------------------

    #[test]
    fn gradient_matches_central_finite_differences() {
        let mut checked = 0usize;
        for seed in 0..20u64 {
            let k = (seed % 3) as usize;
            let n_polys = 2 + (seed % 2) as usize;
            let (agg, covs, pop) = tiny_instance(seed, k, n_polys);
            let prior = PriorSpec::default();
            let problem = PosteriorProblem::new(&agg, &covs, &pop, prior, 4).unwrap();
            let params = random_params(seed ^ 0x51ce, problem.k(), problem.n_nodes());
            let x = params.to_flat();
            let (_, grad) = problem.value_and_grad(&params).unwrap();
            for i in 0..x.len() {
                let h = 1e-5 * x[i].abs().max(1.0);
                let mut xp = x.clone();
                xp[i] += h;
                let mut xm = x.clone();
                xm[i] -= h;
                let fp = problem
                    .value(&ModelParams::from_flat(problem.k(), problem.n_nodes(), &xp))
                    .unwrap();
                let fm = problem
                    .value(&ModelParams::from_flat(problem.k(), problem.n_nodes(), &xm))
                    .unwrap();
                let fd = (fp - fm) / (2.0 * h);
                let tol = 1e-5 * grad[i].abs().max(fd.abs()).max(1.0);
                assert!(
                    (grad[i] - fd).abs() <= tol,
                    "seed {seed} coord {i}: analytic {} vs fd {fd}",
                    grad[i]
                );
                checked += 1;
            }
        }
        assert!(checked > 500);
    }

    #[test]
    fn beta0_gradient_is_prior_only_when_eta_equals_y() {
        let grid = GridSpec::new(2, 2);
        let part = make_partition(grid, 1, 0.0, 0).unwrap();
        let pop = Raster::filled(grid, 2.0);
        let cases = Raster::filled(grid, 3.0); // y = 12, sum p = 8
        let agg = aggregate_cases(&cases, &pop, &part, &[0]).unwrap();
        let prior = PriorSpec::default();
        let problem = PosteriorProblem::new(&agg, &CovariateStack::empty(), &pop, prior, 2).unwrap();
        let beta0 = (12.0f64 / 8.0).ln();
        let params = ModelParams {
            beta0,
            beta: vec![],
            log_rho: (3.0f64).ln(),
            log_sigma: (0.6f64).ln(),
            u: vec![0.0; problem.n_nodes()],
        };
        let (_, grad) = problem.value_and_grad(&params).unwrap();
        let prior_term = (beta0 - prior.beta0_mean) / (prior.beta0_sd * prior.beta0_sd);
        assert!((grad[0] - prior_term).abs() < 1e-10);
    }

    #[test]
    fn u_gradient_at_zero_field_is_adjoint_of_residual_weights() {
        let (agg, covs, pop) = tiny_instance(5, 1, 2);
        let prior = PriorSpec::default();
        let problem = PosteriorProblem::new(&agg, &covs, &pop, prior, 4).unwrap();
        let mut params = random_params(9, problem.k(), problem.n_nodes());
        params.u = vec![0.0; problem.n_nodes()];

        let (_, grad) = problem.value_and_grad(&params).unwrap();

        // oracle: w_j = (1 - y/eta) p_j exp(z_j) pushed through dense A'
        let lattice = NodeLattice::new(pop.grid, 4).unwrap();
        let a = dense_interp_matrix(&lattice);
        let eta = problem.eta(&params).unwrap();
        let mut w_pixels = vec![0.0; pop.grid.n_pixels()];
        for (slot, &id) in agg.observed_ids().iter().enumerate() {
            let y = agg.counts()[id as usize] as f64;
            let resid = if y > 0.0 { 1.0 - y / eta[slot] } else { 1.0 };
            for (px, &l) in agg.partition.labels().iter().enumerate() {
                if l != id {
                    continue;
                }
                let mut z = params.beta0;
                for (b, layer) in params.beta.iter().zip(covs.layers()) {
                    z += b * layer.data()[px];
                }
                w_pixels[px] = resid * pop.data()[px] * z.exp();
            }
        }
        let expected = a.transpose() * nalgebra::DVector::from_column_slice(&w_pixels);
        // at u = 0 the GP contribution Sigma^{-1} u vanishes
        let offset = 3 + problem.k();
        for i in 0..problem.n_nodes() {
            assert!(
                (grad[offset + i] - expected[i]).abs() < 1e-8,
                "node {i}: {} vs {}",
                grad[offset + i],
                expected[i]
            );
        }
    }

    // ---- fitting ------------------------------------------------------

    #[test]
    fn fit_recovers_coefficient_without_latent_field() {
        let grid = GridSpec::new(32, 32);
        let part = make_partition(grid, 100, 0.5, 1).unwrap();
        let pop = Raster::filled(grid, 200.0);
        let prior = PriorSpec::default();
        let mut errors = Vec::new();
        for seed in 0..10u64 {
            let covs = make_grf_stack(grid, 1, (6.0, 20.0), 4, seed * 31 + 7, "x").unwrap();
            let beta_true = crate::simulate::draw_coefficients(1, seed * 17 + 3)[0];
            let lambda = crate::simulate::build_risk_surface(
                &covs,
                &CovariateStack::empty(),
                -6.0,
                &[beta_true],
                &[],
            )
            .unwrap();
            let cases = sample_cases(&lambda, &pop, seed * 13 + 1).unwrap();
            let ids: Vec<u32> = (0..100).collect();
            let agg = aggregate_cases(&cases, &pop, &part, &ids).unwrap();
            let opts = FitOptions {
                max_iter: 150,
                ..Default::default()
            };
            let fit = fit_map(&agg, &covs, &pop, &prior, &opts).unwrap();
            errors.push((fit.params.beta[0] - beta_true).abs());
        }
        errors.sort_by(f64::total_cmp);
        let median = errors[errors.len() / 2];
        assert!(median < 0.1, "median |beta_hat - beta| = {median}");
    }

    #[test]
    fn fit_with_zero_cases_pulls_rates_down() {
        let grid = GridSpec::new(16, 16);
        let part = make_partition(grid, 16, 0.0, 0).unwrap();
        let pop = Raster::filled(grid, 100.0);
        let cases = Raster::filled(grid, 0.0);
        let ids: Vec<u32> = (0..16).collect();
        let agg = aggregate_cases(&cases, &pop, &part, &ids).unwrap();
        let fit = fit_map(
            &agg,
            &CovariateStack::empty(),
            &pop,
            &PriorSpec::default(),
            &FitOptions {
                max_iter: 200,
                ..Default::default()
            },
        )
        .unwrap();
        let total_pop = pop.sum();
        let pred = predict_pixels(&fit.params, &CovariateStack::empty(), &pop, 4).unwrap();
        let fitted_total = pred.expected_cases.sum();
        assert!(
            fitted_total < total_pop * (-5.0f64).exp(),
            "fitted totals {fitted_total}"
        );
    }

    #[test]
    fn fit_is_deterministic() {
        let (agg, covs, pop) = tiny_instance(7, 1, 3);
        let prior = PriorSpec::default();
        let opts = FitOptions {
            max_iter: 60,
            ..Default::default()
        };
        let a = fit_map(&agg, &covs, &pop, &prior, &opts).unwrap();
        let b = fit_map(&agg, &covs, &pop, &prior, &opts).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.neg_log_posterior, b.neg_log_posterior);
        assert_eq!(a.lambda_pred, b.lambda_pred);
        assert_eq!(a.n_iterations, b.n_iterations);
    }

    #[test]
    fn fit_returns_immediately_when_tolerance_is_loose() {
        let (agg, covs, pop) = tiny_instance(2, 1, 2);
        let fit = fit_map(
            &agg,
            &covs,
            &pop,
            &PriorSpec::default(),
            &FitOptions {
                grad_tol: 1e9,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(fit.converged);
        assert_eq!(fit.n_iterations, 0);
    }

    #[test]
    fn objective_decreases_along_fit_trace() {
        let (agg, covs, pop) = tiny_instance(4, 2, 3);
        let fit = fit_map(
            &agg,
            &covs,
            &pop,
            &PriorSpec::default(),
            &FitOptions {
                max_iter: 40,
                ..Default::default()
            },
        )
        .unwrap();
        for pair in fit.trace.windows(2) {
            assert!(pair[1].objective < pair[0].objective);
        }
    }

    // ---- prediction ---------------------------------------------------

    #[test]
    fn prediction_with_zero_effects_is_flat() {
        let grid = GridSpec::new(8, 8);
        let pop = Raster::filled(grid, 3.0);
        let lattice = NodeLattice::new(grid, 4).unwrap();
        let params = ModelParams {
            beta0: -5.5,
            beta: vec![],
            log_rho: 0.0,
            log_sigma: 0.0,
            u: vec![0.0; lattice.n_nodes()],
        };
        let pred = predict_pixels(&params, &CovariateStack::empty(), &pop, 4).unwrap();
        let expect = (-5.5f64).exp();
        assert!(pred.lambda.data().iter().all(|&v| (v - expect).abs() < 1e-15));
        assert!(pred
            .expected_cases
            .data()
            .iter()
            .all(|&v| (v - 3.0 * expect).abs() < 1e-14));
    }

    #[test]
    fn predicted_cases_aggregate_to_objective_eta_exactly() {
        let (agg, covs, pop) = tiny_instance(8, 2, 3);
        let prior = PriorSpec::default();
        let problem = PosteriorProblem::new(&agg, &covs, &pop, prior, 4).unwrap();
        let params = random_params(21, problem.k(), problem.n_nodes());
        let eta = problem.eta(&params).unwrap();
        let pred = predict_pixels(&params, &covs, &pop, 4).unwrap();
        for (slot, &id) in agg.observed_ids().iter().enumerate() {
            let mut total = 0.0;
            for (px, &l) in agg.partition.labels().iter().enumerate() {
                if l == id {
                    total += pred.expected_cases.data()[px];
                }
            }
            assert_eq!(total, eta[slot], "shared code path identity");
        }
    }

    #[test]
    fn standardized_slope_preserves_log_range() {
        let grid = GridSpec::new(16, 16);
        let covs = make_grf_stack(grid, 1, (4.0, 8.0), 4, 5, "x").unwrap();
        let pop = Raster::filled(grid, 1.0);
        let lattice = NodeLattice::new(grid, 4).unwrap();
        let params = ModelParams {
            beta0: -6.0,
            beta: vec![1.0],
            log_rho: 0.0,
            log_sigma: 0.0,
            u: vec![0.0; lattice.n_nodes()],
        };
        let pred = predict_pixels(&params, &covs, &pop, 4).unwrap();
        let (xlo, xhi) = covs.layer(0).finite_range().unwrap();
        let logs = pred.lambda.map(|v| v.ln());
        let (llo, lhi) = logs.finite_range().unwrap();
        assert!(((lhi - llo) - (xhi - xlo)).abs() < 1e-10);
    }

    #[test]
    fn transform_mismatch_is_a_config_error() {
        let (agg, covs, pop) = tiny_instance(12, 1, 2);
        let fit = fit_map(
            &agg,
            &covs,
            &pop,
            &PriorSpec::default(),
            &FitOptions {
                max_iter: 10,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(fit.predict(&covs, &pop).is_ok());
        // restandardizing a shifted copy records different transforms
        let shifted = CovariateStack::new(
            vec!["x00".into()],
            vec![covs.layer(0).map(|v| 2.0 * v + 1.0)],
        )
        .unwrap()
        .standardize()
        .unwrap();
        assert!(matches!(
            fit.predict(&shifted, &pop),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn params_file_round_trip() {
        let params = ModelParams {
            beta0: -6.123456789012345,
            beta: vec![0.1, -0.9876543210987654],
            log_rho: 2.5,
            log_sigma: -0.7,
            u: vec![0.25, -0.5, 1e-17, 3.0],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.txt");
        params.save(&path, 4).unwrap();
        let (back, spacing) = ModelParams::load(&path).unwrap();
        assert_eq!(back, params);
        assert_eq!(spacing, 4);
    }
}
