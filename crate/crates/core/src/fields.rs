//! Matérn covariance kernel, Gaussian random-field simulation, covariate
//! stacks, and synthetic population surfaces.
//!
//! Fields are represented on a coarse node lattice (default spacing: 4
//! pixels) and bilinearly interpolated to pixel centers. The same lattice
//! carries the latent field during model fitting, keeping simulation and
//! inference in one basis.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, Dyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::raster::{GridSpec, Raster};
use crate::seed::{derive_seed, rng_from};

/// Matérn smoothness is fixed at 3/2 for a Bessel-free closed form.
pub const MATERN_NU: f64 = 1.5;

/// Matérn kernel parameters: spatial range and marginal standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaternParams {
    pub rho: f64,
    pub sigma: f64,
}

impl MaternParams {
    pub fn new(rho: f64, sigma: f64) -> Result<Self> {
        if !(rho > 0.0) || !rho.is_finite() {
            return Err(Error::Argument(format!("range must be positive, got {rho}")));
        }
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::Argument(format!(
                "scale must be non-negative, got {sigma}"
            )));
        }
        Ok(MaternParams { rho, sigma })
    }

    /// Decay rate under the kappa = sqrt(8 nu) / rho range convention, so
    /// correlation at distance rho is about 0.14.
    pub fn kappa(&self) -> f64 {
        (8.0 * MATERN_NU).sqrt() / self.rho
    }
}

/// Matérn 3/2 covariance: sigma^2 (1 + kappa d) exp(-kappa d).
pub fn matern_cov(d: f64, p: &MaternParams) -> f64 {
    debug_assert!(d >= 0.0);
    let kd = p.kappa() * d;
    p.sigma * p.sigma * (1.0 + kd) * (-kd).exp()
}

/// d C / d log(rho) in closed form: sigma^2 kappa^2 d^2 exp(-kappa d).
pub fn matern_cov_dlogrho(d: f64, p: &MaternParams) -> f64 {
    let kd = p.kappa() * d;
    p.sigma * p.sigma * kd * kd * (-kd).exp()
}

/// Coarse node lattice covering a pixel grid.
///
/// Nodes sit at `origin + k * spacing * pixel_size` for `k = -1 ..= K+1`
/// on each axis, where `K = ceil(n / spacing)`; the one-node pad keeps
/// every pixel center strictly inside the lattice hull.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeLattice {
    pub grid: GridSpec,
    pub spacing: usize,
    nx_nodes: usize,
    ny_nodes: usize,
}

impl NodeLattice {
    pub fn new(grid: GridSpec, spacing: usize) -> Result<Self> {
        grid.validate()?;
        if spacing < 1 {
            return Err(Error::Config(format!(
                "node spacing must be at least 1 pixel, got {spacing}"
            )));
        }
        let count = |n: usize| n.div_ceil(spacing) + 3; // k in -1 ..= ceil(n/s)+1
        Ok(NodeLattice {
            grid,
            spacing,
            nx_nodes: count(grid.nx),
            ny_nodes: count(grid.ny),
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.nx_nodes * self.ny_nodes
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nx_nodes, self.ny_nodes)
    }

    /// Map coordinates of node `idx` (row-major over the node grid).
    pub fn node_position(&self, idx: usize) -> (f64, f64) {
        let i = idx % self.nx_nodes;
        let j = idx / self.nx_nodes;
        let step = self.spacing as f64 * self.grid.pixel_size;
        (
            self.grid.origin_x + (i as f64 - 1.0) * step,
            self.grid.origin_y + (j as f64 - 1.0) * step,
        )
    }

    /// Pairwise node distances in map units.
    pub fn distance_matrix(&self) -> DMatrix<f64> {
        let m = self.n_nodes();
        let pos: Vec<(f64, f64)> = (0..m).map(|i| self.node_position(i)).collect();
        DMatrix::from_fn(m, m, |a, b| {
            let dx = pos[a].0 - pos[b].0;
            let dy = pos[a].1 - pos[b].1;
            (dx * dx + dy * dy).sqrt()
        })
    }

    /// Dense node covariance under `p`.
    pub fn covariance(&self, p: &MaternParams) -> DMatrix<f64> {
        covariance_from_distances(&self.distance_matrix(), p)
    }

    /// The four node indices and bilinear weights supporting pixel (ix, iy).
    pub fn pixel_weights(&self, ix: usize, iy: usize) -> [(usize, f64); 4] {
        let s = self.spacing as f64;
        let tx = (ix as f64 + 0.5) / s;
        let ty = (iy as f64 + 0.5) / s;
        let cx = tx.floor();
        let cy = ty.floor();
        let fx = tx - cx;
        let fy = ty - cy;
        let i = cx as usize + 1; // node array index of the cell's low-x node
        let j = cy as usize + 1;
        debug_assert!(i + 1 < self.nx_nodes && j + 1 < self.ny_nodes);
        let base = j * self.nx_nodes + i;
        [
            (base, (1.0 - fx) * (1.0 - fy)),
            (base + 1, fx * (1.0 - fy)),
            (base + self.nx_nodes, (1.0 - fx) * fy),
            (base + self.nx_nodes + 1, fx * fy),
        ]
    }

    /// Bilinear interpolation of node values to pixel centers; linear in
    /// `u`, so it exposes the fixed sparse map A used by gradients.
    pub fn interpolate(&self, u: &[f64]) -> Result<Raster> {
        if u.len() != self.n_nodes() {
            return Err(Error::Config(format!(
                "lattice has {} nodes but field vector has {} entries",
                self.n_nodes(),
                u.len()
            )));
        }
        let mut out = Raster::filled(self.grid, 0.0);
        let data = out.data_mut();
        for iy in 0..self.grid.ny {
            for ix in 0..self.grid.nx {
                let mut v = 0.0;
                for (node, w) in self.pixel_weights(ix, iy) {
                    v += w * u[node];
                }
                data[self.grid.index(ix, iy)] = v;
            }
        }
        Ok(out)
    }

    /// Accumulate `A^T w` into `out` given per-pixel weights `w` aligned
    /// with raster order (the adjoint of [`Self::interpolate`]).
    pub fn accumulate_adjoint(&self, pixel_values: &[f64], out: &mut [f64]) {
        debug_assert_eq!(pixel_values.len(), self.grid.n_pixels());
        debug_assert_eq!(out.len(), self.n_nodes());
        for iy in 0..self.grid.ny {
            for ix in 0..self.grid.nx {
                let v = pixel_values[self.grid.index(ix, iy)];
                if v == 0.0 {
                    continue;
                }
                for (node, w) in self.pixel_weights(ix, iy) {
                    out[node] += w * v;
                }
            }
        }
    }
}

pub fn covariance_from_distances(dist: &DMatrix<f64>, p: &MaternParams) -> DMatrix<f64> {
    let kappa = p.kappa();
    let s2 = p.sigma * p.sigma;
    dist.map(|d| {
        let kd = kappa * d;
        s2 * (1.0 + kd) * (-kd).exp()
    })
}

/// Cholesky with escalating diagonal jitter: try clean, then
/// `1e-10 * scale` growing tenfold up to `1e-4 * scale`, then fail.
/// Returns the factorization and the jitter that was applied.
pub fn cholesky_with_jitter(
    cov: &DMatrix<f64>,
    scale: f64,
) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(chol) = Cholesky::new(cov.clone()) {
        return Ok((chol, 0.0));
    }
    let mut jitter = 1e-10 * scale;
    let max_jitter = 1e-4 * scale;
    while jitter <= max_jitter * (1.0 + 1e-12) {
        let mut jittered = cov.clone();
        for i in 0..cov.nrows() {
            jittered[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(jittered) {
            return Ok((chol, jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::Numerical(format!(
        "covariance not positive definite after jitter up to {max_jitter:e}"
    )))
}

/// Draw zero-mean Matérn node values: `u = L z` with `L L^T` the node
/// covariance and `z` standard normal. Deterministic given `seed`.
pub fn simulate_grf_nodes(lattice: &NodeLattice, p: &MaternParams, seed: u64) -> Result<Vec<f64>> {
    let m = lattice.n_nodes();
    if p.sigma == 0.0 {
        return Ok(vec![0.0; m]);
    }
    let cov = lattice.covariance(p);
    let (chol, _) = cholesky_with_jitter(&cov, p.sigma * p.sigma)?;
    let mut rng = rng_from(seed);
    let z: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut rng)).collect();
    let l = chol.l_dirty();
    let mut u = vec![0.0; m];
    for i in 0..m {
        let mut acc = 0.0;
        for j in 0..=i {
            acc += l[(i, j)] * z[j];
        }
        u[i] = acc;
    }
    Ok(u)
}

/// Simulate a Gaussian random field on the pixel grid by drawing node
/// values and interpolating to pixel centers.
pub fn simulate_grf(grid: GridSpec, p: &MaternParams, node_spacing: usize, seed: u64) -> Result<Raster> {
    let lattice = NodeLattice::new(grid, node_spacing)?;
    let u = simulate_grf_nodes(&lattice, p, seed)?;
    lattice.interpolate(&u)
}

/// Named covariate layers sharing one grid, with the affine transform
/// recorded per layer when standardized.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateStack {
    names: Vec<String>,
    rasters: Vec<Raster>,
    standardized: bool,
    /// Per-layer (mean, sd) removed by standardization.
    transforms: Vec<(f64, f64)>,
}

impl CovariateStack {
    pub fn new(names: Vec<String>, rasters: Vec<Raster>) -> Result<Self> {
        if names.len() != rasters.len() {
            return Err(Error::Argument(format!(
                "{} names for {} layers",
                names.len(),
                rasters.len()
            )));
        }
        if let Some(first) = rasters.first() {
            if let Some(bad) = rasters.iter().find(|r| r.grid != first.grid) {
                return Err(Error::Argument(format!(
                    "covariate layers must share one grid ({:?} vs {:?})",
                    bad.grid, first.grid
                )));
            }
        }
        Ok(CovariateStack {
            names,
            rasters,
            standardized: false,
            transforms: Vec::new(),
        })
    }

    /// Stack with no layers; counts as standardized.
    pub fn empty() -> Self {
        CovariateStack {
            names: Vec::new(),
            rasters: Vec::new(),
            standardized: true,
            transforms: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rasters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rasters.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn layer(&self, i: usize) -> &Raster {
        &self.rasters[i]
    }

    pub fn layers(&self) -> &[Raster] {
        &self.rasters
    }

    pub fn is_standardized(&self) -> bool {
        self.standardized
    }

    pub fn transforms(&self) -> &[(f64, f64)] {
        &self.transforms
    }

    pub fn grid(&self) -> Option<GridSpec> {
        self.rasters.first().map(|r| r.grid)
    }

    /// Affine-transform each layer to mean 0, sd 1 (denominator N), and
    /// record the transform for reuse at prediction time.
    pub fn standardize(&self) -> Result<CovariateStack> {
        let mut rasters = Vec::with_capacity(self.len());
        let mut transforms = Vec::with_capacity(self.len());
        for (name, layer) in self.names.iter().zip(&self.rasters) {
            let mean = layer.mean();
            let sd = layer.std_pop();
            if sd == 0.0 || !sd.is_finite() {
                return Err(Error::DegenerateCovariate {
                    layer: name.clone(),
                });
            }
            rasters.push(layer.map(|v| (v - mean) / sd));
            transforms.push((mean, sd));
        }
        Ok(CovariateStack {
            names: self.names.clone(),
            rasters,
            standardized: true,
            transforms,
        })
    }

    /// Subset of layers by index, preserving standardization provenance.
    pub fn select(&self, indices: &[usize]) -> Result<CovariateStack> {
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Argument(format!(
                    "layer index {i} out of range ({} layers)",
                    self.len()
                )));
            }
        }
        if indices.is_empty() {
            return Ok(CovariateStack::empty());
        }
        Ok(CovariateStack {
            names: indices.iter().map(|&i| self.names[i].clone()).collect(),
            rasters: indices.iter().map(|&i| self.rasters[i].clone()).collect(),
            standardized: self.standardized,
            transforms: if self.transforms.is_empty() {
                Vec::new()
            } else {
                indices.iter().map(|&i| self.transforms[i]).collect()
            },
        })
    }

    /// Concatenate two stacks; the result is standardized only if both
    /// sides are (an empty stack is).
    pub fn concat(&self, other: &CovariateStack) -> Result<CovariateStack> {
        if let (Some(a), Some(b)) = (self.grid(), other.grid()) {
            if a != b {
                return Err(Error::Argument(
                    "cannot concatenate stacks on different grids".into(),
                ));
            }
        }
        let mut names = self.names.clone();
        names.extend(other.names.iter().cloned());
        let mut rasters = self.rasters.clone();
        rasters.extend(other.rasters.iter().cloned());
        let standardized = self.standardized && other.standardized;
        let mut transforms = Vec::new();
        if standardized {
            transforms.extend(self.transforms.iter().copied());
            transforms.extend(other.transforms.iter().copied());
        }
        Ok(CovariateStack {
            names,
            rasters,
            standardized,
            transforms,
        })
    }

    /// Write one raster file per layer plus `stack.meta`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut meta = KvFile::new();
        meta.set("count", self.len());
        meta.set("standardized", self.standardized);
        for (i, name) in self.names.iter().enumerate() {
            meta.set(&format!("layer.{i}"), name);
            if self.standardized {
                meta.set_float(&format!("mean.{i}"), self.transforms[i].0);
                meta.set_float(&format!("sd.{i}"), self.transforms[i].1);
            }
        }
        meta.write(dir.join("stack.meta"))?;
        for (name, raster) in self.names.iter().zip(&self.rasters) {
            raster.write_text(dir.join(format!("{name}.asc")))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<CovariateStack> {
        let dir = dir.as_ref();
        let meta = KvFile::read(dir.join("stack.meta"))?;
        let count: usize = meta.parse_value("count")?;
        let standardized: bool = meta.parse_value("standardized")?;
        let mut names = Vec::with_capacity(count);
        let mut rasters = Vec::with_capacity(count);
        let mut transforms = Vec::new();
        for i in 0..count {
            let name = meta.require(&format!("layer.{i}"))?.to_string();
            rasters.push(Raster::read(dir.join(format!("{name}.asc")))?);
            if standardized {
                transforms.push((
                    meta.parse_value(&format!("mean.{i}"))?,
                    meta.parse_value(&format!("sd.{i}"))?,
                ));
            }
            names.push(name);
        }
        let mut stack = CovariateStack::new(names, rasters)?;
        stack.standardized = standardized;
        stack.transforms = transforms;
        Ok(stack)
    }
}

/// Stack of independent standardized GRF layers with ranges drawn
/// log-uniformly from `rho_range`.
pub fn make_grf_stack(
    grid: GridSpec,
    count: usize,
    rho_range: (f64, f64),
    node_spacing: usize,
    seed: u64,
    prefix: &str,
) -> Result<CovariateStack> {
    let (lo, hi) = rho_range;
    if !(lo > 0.0 && hi >= lo) {
        return Err(Error::Argument(format!(
            "rho range must be a positive interval, got [{lo}, {hi}]"
        )));
    }
    if count == 0 {
        return Ok(CovariateStack::empty());
    }
    let lattice = NodeLattice::new(grid, node_spacing)?;
    let mut names = Vec::with_capacity(count);
    let mut rasters = Vec::with_capacity(count);
    for i in 0..count {
        let layer_seed = derive_seed(seed, &[i as u64]);
        let mut rng = rng_from(derive_seed(layer_seed, &[0]));
        let rho = (rng.random::<f64>() * (hi.ln() - lo.ln()) + lo.ln()).exp();
        let p = MaternParams::new(rho, 1.0)?;
        let u = simulate_grf_nodes(&lattice, &p, derive_seed(layer_seed, &[1]))?;
        rasters.push(lattice.interpolate(&u)?);
        names.push(format!("{prefix}{i:02}"));
    }
    CovariateStack::new(names, rasters)?.standardize()
}

/// Mock covariates: short-scale standardized GRFs (σ=1 before
/// standardization), ranges log-uniform over `rho_range`.
pub fn make_mock_covariates(
    grid: GridSpec,
    count: usize,
    rho_range: (f64, f64),
    node_spacing: usize,
    seed: u64,
) -> Result<CovariateStack> {
    make_grf_stack(grid, count, rho_range, node_spacing, seed, "mock")
}

/// Synthetic stand-ins for real covariate rasters: like the mock stack
/// but drawn from the upper (log-scale) half of `rho_range`, so they vary
/// on longer spatial scales.
pub fn make_real_covariate_stand_ins(
    grid: GridSpec,
    count: usize,
    rho_range: (f64, f64),
    node_spacing: usize,
    seed: u64,
) -> Result<CovariateStack> {
    let (lo, hi) = rho_range;
    if !(lo > 0.0 && hi >= lo) {
        return Err(Error::Argument(format!(
            "rho range must be a positive interval, got [{lo}, {hi}]"
        )));
    }
    let upper = ((lo.ln() + hi.ln()) / 2.0).exp();
    make_grf_stack(grid, count, (upper, hi), node_spacing, seed, "real")
}

/// Log-Gaussian population surface rescaled to the target total:
/// `p = exp(GRF(rho, sigma=clumpiness))`, then `sum(p) = total`.
/// `clumpiness = 0` yields a uniform surface.
pub fn make_population(
    grid: GridSpec,
    total: f64,
    clumpiness: f64,
    rho: f64,
    node_spacing: usize,
    seed: u64,
) -> Result<Raster> {
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Argument(format!(
            "total population must be positive, got {total}"
        )));
    }
    if !(clumpiness >= 0.0) || !clumpiness.is_finite() {
        return Err(Error::Argument(format!(
            "clumpiness must be non-negative, got {clumpiness}"
        )));
    }
    if clumpiness == 0.0 {
        return Ok(Raster::filled(grid, total / grid.n_pixels() as f64));
    }
    let p = MaternParams::new(rho, clumpiness)?;
    let field = simulate_grf(grid, &p, node_spacing, seed)?;
    let raw = field.map(f64::exp);
    let sum = raw.sum();
    Ok(raw.map(|v| v * total / sum))
}
