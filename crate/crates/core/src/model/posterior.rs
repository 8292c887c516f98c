//! Negative log posterior of the disaggregation model and its analytic
//! gradient.
//!
//! For observed polygons i with counts y_i, the Poisson part is
//! `sum_i eta_i - y_i log eta_i` with
//! `eta_i = sum_{j in i} p_j exp(beta0 + beta' X_j + (A u)_j)`,
//! where A is the fixed bilinear node-to-pixel map. The latent field
//! contributes `u' Sigma(rho, sigma)^{-1} u / 2 + log det Sigma / 2`;
//! Gaussian priors on beta0 and beta and PC priors on (rho, sigma)
//! complete the objective. Additive constants that do not depend on the
//! parameters (log y_i! and the 2 pi factor of the Gaussian process
//! normalizer) are dropped consistently from both value and gradient.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fields::{cholesky_with_jitter, CovariateStack, NodeLattice};
use crate::raster::Raster;
use crate::simulate::AggregatedData;

use super::{pc_prior_logdensity, ModelParams, PriorSpec};

/// Objective value split into its terms, plus the polygon means.
#[derive(Debug, Clone)]
pub struct PosteriorParts {
    pub poisson: f64,
    pub gp_quad: f64,
    pub gp_half_logdet: f64,
    pub prior_nll: f64,
    pub eta: Vec<f64>,
    pub jitter: f64,
}

impl PosteriorParts {
    pub fn total(&self) -> f64 {
        self.poisson + self.gp_quad + self.gp_half_logdet + self.prior_nll
    }
}

/// Fixed data for one fit: observed pixels flattened for tight loops,
/// node lattice, and node distances.
pub struct PosteriorProblem {
    lattice: NodeLattice,
    node_dist: DMatrix<f64>,
    prior: PriorSpec,
    k: usize,
    /// Per observed pixel: population, polygon slot, interpolation support.
    obs_pop: Vec<f64>,
    obs_slot: Vec<u32>,
    obs_nodes: Vec<[u32; 4]>,
    obs_weights: Vec<[f64; 4]>,
    /// Covariate values, one vector per layer, aligned with observed pixels.
    obs_cov: Vec<Vec<f64>>,
    /// Observed polygon counts by slot.
    y: Vec<f64>,
    /// Slot -> polygon id, for error reporting.
    slot_polygon: Vec<u32>,
}

impl PosteriorProblem {
    pub fn new(
        data: &AggregatedData,
        covs: &CovariateStack,
        population: &Raster,
        prior: PriorSpec,
        node_spacing: usize,
    ) -> Result<Self> {
        prior.validate()?;
        let grid = data.partition.grid;
        if population.grid != grid {
            return Err(Error::Argument(
                "population raster does not match the partition grid".into(),
            ));
        }
        if let Some(cov_grid) = covs.grid() {
            if cov_grid != grid {
                return Err(Error::Argument(
                    "covariate stack does not match the partition grid".into(),
                ));
            }
        }
        if !covs.is_empty() && !covs.is_standardized() {
            return Err(Error::Config(
                "covariates must be standardized (with recorded transforms) before fitting".into(),
            ));
        }
        if data.observed_ids().is_empty() {
            return Err(Error::Argument("no observed polygons to fit".into()));
        }

        let lattice = NodeLattice::new(grid, node_spacing)?;
        let n_polygons = data.partition.n_polygons();
        let mut slot_of = vec![u32::MAX; n_polygons];
        let mut y = Vec::with_capacity(data.observed_ids().len());
        let mut slot_polygon = Vec::with_capacity(data.observed_ids().len());
        for (slot, &id) in data.observed_ids().iter().enumerate() {
            slot_of[id as usize] = slot as u32;
            y.push(data.counts()[id as usize] as f64);
            slot_polygon.push(id);
        }

        let k = covs.len();
        let mut obs_pop = Vec::new();
        let mut obs_slot = Vec::new();
        let mut obs_nodes = Vec::new();
        let mut obs_weights = Vec::new();
        let mut obs_cov = vec![Vec::new(); k];
        for iy in 0..grid.ny {
            for ix in 0..grid.nx {
                let px = grid.index(ix, iy);
                let slot = slot_of[data.partition.labels()[px] as usize];
                if slot == u32::MAX {
                    continue;
                }
                obs_pop.push(population.data()[px]);
                obs_slot.push(slot);
                let w = lattice.pixel_weights(ix, iy);
                obs_nodes.push([w[0].0 as u32, w[1].0 as u32, w[2].0 as u32, w[3].0 as u32]);
                obs_weights.push([w[0].1, w[1].1, w[2].1, w[3].1]);
                for (c, layer) in obs_cov.iter_mut().zip(covs.layers()) {
                    c.push(layer.data()[px]);
                }
            }
        }

        let node_dist = lattice.distance_matrix();
        Ok(PosteriorProblem {
            lattice,
            node_dist,
            prior,
            k,
            obs_pop,
            obs_slot,
            obs_nodes,
            obs_weights,
            obs_cov,
            y,
            slot_polygon,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_nodes(&self) -> usize {
        self.lattice.n_nodes()
    }

    pub fn lattice(&self) -> &NodeLattice {
        &self.lattice
    }

    pub fn n_observed_polygons(&self) -> usize {
        self.y.len()
    }

    /// Total parameter dimension: beta0, beta, log rho, log sigma, u.
    pub fn dim(&self) -> usize {
        1 + self.k + 2 + self.n_nodes()
    }

    fn check_params(&self, p: &ModelParams) -> Result<()> {
        if p.beta.len() != self.k {
            return Err(Error::Argument(format!(
                "params carry {} coefficients, model has {} covariates",
                p.beta.len(),
                self.k
            )));
        }
        if p.u.len() != self.n_nodes() {
            return Err(Error::Argument(format!(
                "params carry {} node values, lattice has {}",
                p.u.len(),
                self.n_nodes()
            )));
        }
        Ok(())
    }

    /// Polygon means and per-pixel Poisson means for the current params.
    fn eta_and_means(&self, p: &ModelParams) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut eta = vec![0.0; self.y.len()];
        let mut means = Vec::with_capacity(self.obs_pop.len());
        for j in 0..self.obs_pop.len() {
            let mut z = p.beta0;
            for (b, c) in p.beta.iter().zip(&self.obs_cov) {
                z += b * c[j];
            }
            let nodes = &self.obs_nodes[j];
            let w = &self.obs_weights[j];
            // accumulate the field term separately, in the same order as
            // NodeLattice::interpolate, so prediction reproduces eta exactly
            let mut fld = 0.0;
            for q in 0..4 {
                fld += w[q] * p.u[nodes[q] as usize];
            }
            z += fld;
            let m = self.obs_pop[j] * z.exp();
            eta[self.obs_slot[j] as usize] += m;
            means.push(m);
        }
        for (slot, &e) in eta.iter().enumerate() {
            if !e.is_finite() {
                return Err(Error::Evaluation {
                    polygon: self.slot_polygon[slot],
                    detail: format!("polygon mean overflowed ({e})"),
                });
            }
            if e <= 0.0 && self.y[slot] > 0.0 {
                return Err(Error::Evaluation {
                    polygon: self.slot_polygon[slot],
                    detail: "polygon mean underflowed to zero with positive count".into(),
                });
            }
        }
        Ok((eta, means))
    }

    /// Objective value split by term; shares every code path with the
    /// gradient evaluation.
    pub fn parts(&self, p: &ModelParams) -> Result<PosteriorParts> {
        self.check_params(p)?;
        let (rho, sigma) = (p.rho(), p.sigma());
        if !rho.is_finite() || !sigma.is_finite() || sigma == 0.0 {
            return Err(Error::Numerical(format!(
                "hyperparameters out of range: rho={rho}, sigma={sigma}"
            )));
        }

        let (eta, _) = self.eta_and_means(p)?;
        let poisson = self.poisson_nll(&eta);

        let cov = crate::fields::covariance_from_distances(
            &self.node_dist,
            &crate::fields::MaternParams { rho, sigma },
        );
        let (chol, jitter) = cholesky_with_jitter(&cov, sigma * sigma)?;
        let u = DVector::from_column_slice(&p.u);
        let alpha = chol.solve(&u);
        let gp_quad = 0.5 * u.dot(&alpha);
        let l = chol.l_dirty();
        let gp_half_logdet = (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>();

        let prior_nll = self.prior_nll(p, rho, sigma)?;

        Ok(PosteriorParts {
            poisson,
            gp_quad,
            gp_half_logdet,
            prior_nll,
            eta,
            jitter,
        })
    }

    fn poisson_nll(&self, eta: &[f64]) -> f64 {
        eta.iter()
            .zip(&self.y)
            .map(|(&e, &y)| if y > 0.0 { e - y * e.ln() } else { e })
            .sum()
    }

    fn prior_nll(&self, p: &ModelParams, rho: f64, sigma: f64) -> Result<f64> {
        let pr = &self.prior;
        let b0 = (p.beta0 - pr.beta0_mean) / pr.beta0_sd;
        let mut nll = 0.5 * b0 * b0;
        for &b in &p.beta {
            let z = (b - pr.beta_mean) / pr.beta_sd;
            nll += 0.5 * z * z;
        }
        nll -= pc_prior_logdensity(rho, sigma, pr)?;
        Ok(nll)
    }

    pub fn value(&self, p: &ModelParams) -> Result<f64> {
        Ok(self.parts(p)?.total())
    }

    /// Polygon means under `p`, ordered by observed polygon id.
    pub fn eta(&self, p: &ModelParams) -> Result<Vec<f64>> {
        self.check_params(p)?;
        Ok(self.eta_and_means(p)?.0)
    }

    /// Objective and gradient over (beta0, beta, log rho, log sigma, u).
    pub fn value_and_grad(&self, p: &ModelParams) -> Result<(f64, Vec<f64>)> {
        self.check_params(p)?;
        let (rho, sigma) = (p.rho(), p.sigma());
        if !rho.is_finite() || !sigma.is_finite() || sigma == 0.0 {
            return Err(Error::Numerical(format!(
                "hyperparameters out of range: rho={rho}, sigma={sigma}"
            )));
        }
        let m = self.n_nodes();
        let pr = &self.prior;

        let (eta, means) = self.eta_and_means(p)?;
        let poisson = self.poisson_nll(&eta);

        // Matern covariance and exp(-kappa d), kept for the kernel
        // derivative in log rho
        let kappa = crate::fields::MaternParams { rho, sigma }.kappa();
        let s2 = sigma * sigma;
        let mut cov = DMatrix::zeros(m, m);
        let mut edk = DMatrix::zeros(m, m);
        for b in 0..m {
            for a in 0..m {
                let kd = kappa * self.node_dist[(a, b)];
                let e = (-kd).exp();
                edk[(a, b)] = e;
                cov[(a, b)] = s2 * (1.0 + kd) * e;
            }
        }
        let (chol, _jitter) = cholesky_with_jitter(&cov, s2)?;
        let u = DVector::from_column_slice(&p.u);
        let alpha = chol.solve(&u); // Sigma^{-1} u
        let quad = u.dot(&alpha); // u' Sigma^{-1} u
        let l = chol.l_dirty();
        let gp_half_logdet = (0..m).map(|i| l[(i, i)].ln()).sum::<f64>();
        let inv = chol.inverse();

        let value = poisson + 0.5 * quad + gp_half_logdet + self.prior_nll(p, rho, sigma)?;

        // ---- gradient -------------------------------------------------
        let mut grad = vec![0.0; self.dim()];
        let (g_beta0, g_beta, g_logrho, g_logsigma) = (0, 1, 1 + self.k, 2 + self.k);
        let g_u = 3 + self.k;

        // Poisson part: per-pixel weights w_j = (1 - y/eta) * m_j
        let mut resid = vec![0.0; eta.len()];
        for (slot, (&e, &yv)) in eta.iter().zip(&self.y).enumerate() {
            resid[slot] = if yv > 0.0 { 1.0 - yv / e } else { 1.0 };
        }
        for j in 0..means.len() {
            let w = resid[self.obs_slot[j] as usize] * means[j];
            grad[g_beta0] += w;
            for (kk, c) in self.obs_cov.iter().enumerate() {
                grad[g_beta + kk] += w * c[j];
            }
            let nodes = &self.obs_nodes[j];
            let ws = &self.obs_weights[j];
            for q in 0..4 {
                grad[g_u + nodes[q] as usize] += w * ws[q];
            }
        }

        // Gaussian priors on beta0 and beta
        grad[g_beta0] += (p.beta0 - pr.beta0_mean) / (pr.beta0_sd * pr.beta0_sd);
        for (kk, &b) in p.beta.iter().enumerate() {
            grad[g_beta + kk] += (b - pr.beta_mean) / (pr.beta_sd * pr.beta_sd);
        }

        // GP part in u: Sigma^{-1} u
        for i in 0..m {
            grad[g_u + i] += alpha[i];
        }

        // log rho: dSigma/dlogrho = s2 * (kappa d)^2 exp(-kappa d);
        // 0.5 [ tr(Sigma^{-1} D) - alpha' D alpha ]
        let mut tr_term = 0.0;
        let mut quad_term = 0.0;
        for b in 0..m {
            for a in 0..m {
                let kd = kappa * self.node_dist[(a, b)];
                let dab = s2 * kd * kd * edk[(a, b)];
                tr_term += inv[(a, b)] * dab;
                quad_term += alpha[a] * dab * alpha[b];
            }
        }
        grad[g_logrho] = 0.5 * (tr_term - quad_term) + (2.0 - pr.lambda_rho() / rho);

        // log sigma: dSigma/dlogsigma = 2 Sigma, so the GP part collapses
        // to M - u' Sigma^{-1} u; the PC prior adds lambda_sigma * sigma
        grad[g_logsigma] = m as f64 - quad + pr.lambda_sigma() * sigma;

        Ok((value, grad))
    }
}
