//! Reference computations the learned components are checked against:
//! Kalman filtering, central finite differences, a 1-D quadrature solver for
//! the flow's transport equation, and staged transports built on both.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::flow::{fit_potential, flow_gradient, FitOptions, Potential, VelocityPotential};
use crate::tensor::Tensor;

/// `z_{n+1} = A z_n + w`, `y_n = H z_n + v`, `w ~ N(0, Q)`, `v ~ N(0, R)`,
/// `z_0 ~ N(m0, P0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGaussianModel {
    pub a: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub m0: DVector<f64>,
    pub p0: DMatrix<f64>,
}

/// Gaussian belief over the state.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

fn check_spd(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::shape(name, format!("{}x{} is not square", m.nrows(), m.ncols())));
    }
    let asym = (m - m.transpose()).abs().max();
    if asym > 1e-10 * (1.0 + m.abs().max()) {
        return Err(Error::NotPositiveDefinite(format!("{name} is not symmetric")));
    }
    if m.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite(name.to_string()));
    }
    Ok(())
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

impl LinearGaussianModel {
    /// Dense `Q` and `P0` may be singular (noise-free transitions); `R` must be
    /// positive definite.
    pub fn validate(&self) -> Result<()> {
        let n = self.a.nrows();
        let m = self.h.nrows();
        let dims_ok = self.a.ncols() == n
            && self.q.shape() == (n, n)
            && self.h.ncols() == n
            && self.r.shape() == (m, m)
            && self.m0.len() == n
            && self.p0.shape() == (n, n);
        if !dims_ok {
            return Err(Error::shape("linear_gaussian", format!("state {n}, observation {m}")));
        }
        check_spd("R", &self.r)?;
        for (name, c) in [("Q", &self.q), ("P0", &self.p0)] {
            if (c - c.transpose()).abs().max() > 1e-10 * (1.0 + c.abs().max()) {
                return Err(Error::NotPositiveDefinite(format!("{name} is not symmetric")));
            }
        }
        Ok(())
    }
}

/// Bayes update of a Gaussian prior by `y = H z + v`, `v ~ N(0, R)`.
/// The covariance uses the Joseph form and is re-symmetrized.
pub fn kalman_update(prior: &Gaussian, h: &DMatrix<f64>, r: &DMatrix<f64>, y: &DVector<f64>) -> Result<Gaussian> {
    let s = symmetrize(h * &prior.cov * h.transpose() + r);
    let chol = s
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("innovation covariance".into()))?;
    // K = P H^T S^{-1}, computed as (S^{-1} H P)^T.
    let gain = chol.solve(&(h * &prior.cov)).transpose();
    let innovation = y - h * &prior.mean;
    let mean = &prior.mean + &gain * innovation;
    let n = prior.mean.len();
    let i_kh = DMatrix::identity(n, n) - &gain * h;
    let cov = symmetrize(&i_kh * &prior.cov * i_kh.transpose() + &gain * r * gain.transpose());
    if cov.clone().cholesky().is_none() || !mean.iter().all(|v| v.is_finite()) {
        return Err(Error::NotPositiveDefinite("posterior covariance".into()));
    }
    Ok(Gaussian { mean, cov })
}

/// Filtered posteriors `p(z_n | y_0..y_n)` for every observation.
pub fn kalman_filter(model: &LinearGaussianModel, observations: &[DVector<f64>]) -> Result<Vec<Gaussian>> {
    model.validate()?;
    let mut belief = Gaussian {
        mean: model.m0.clone(),
        cov: model.p0.clone(),
    };
    let mut out = Vec::with_capacity(observations.len());
    for (n, y) in observations.iter().enumerate() {
        if y.len() != model.h.nrows() {
            return Err(Error::shape("kalman_filter", format!("observation {n} has width {}", y.len())));
        }
        if n > 0 {
            belief = Gaussian {
                mean: &model.a * &belief.mean,
                cov: symmetrize(&model.a * &belief.cov * model.a.transpose() + &model.q),
            };
        }
        belief = kalman_update(&belief, &model.h, &model.r, y)?;
        out.push(belief.clone());
    }
    Ok(out)
}

/// Central differences `(f(p + eps e_i) - f(p - eps e_i)) / 2 eps`.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, point: &[f64], eps: f64) -> Vec<f64> {
    let mut p = point.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + eps;
            let up = f(&p);
            p[i] = orig - eps;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Uniform grid of `points` nodes over `mean +- half_width * sd`.
pub fn uniform_grid(mean: f64, sd: f64, half_width: f64, points: usize) -> Vec<f64> {
    let lo = mean - half_width * sd;
    let step = 2.0 * half_width * sd / (points - 1) as f64;
    (0..points).map(|i| lo + step * i as f64).collect()
}

pub fn normal_pdf(z: f64, mean: f64, var: f64) -> f64 {
    (-(z - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// Velocity of the 1-D transport equation on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PdeSolution {
    pub grid: Vec<f64>,
    /// `phi'` at every grid node.
    pub velocity: Vec<f64>,
    /// Prior-weighted mean of `Gamma`.
    pub gamma_hat: f64,
    /// Flux `q phi'` left at the upper boundary after centering.
    pub boundary: f64,
}

impl PdeSolution {
    /// Linear interpolation of the velocity; constant beyond the grid ends.
    pub fn velocity_at(&self, z: f64) -> f64 {
        let g = &self.grid;
        if z <= g[0] {
            return self.velocity[0];
        }
        if z >= g[g.len() - 1] {
            return self.velocity[g.len() - 1];
        }
        let i = g.partition_point(|&v| v <= z) - 1;
        let t = (z - g[i]) / (g[i + 1] - g[i]);
        self.velocity[i] * (1.0 - t) + self.velocity[i + 1] * t
    }
}

fn trapezoid_cumulative(grid: &[f64], f: &[f64]) -> Vec<f64> {
    let mut acc = vec![0.0; grid.len()];
    for i in 1..grid.len() {
        acc[i] = acc[i - 1] + 0.5 * (f[i] + f[i - 1]) * (grid[i] - grid[i - 1]);
    }
    acc
}

/// Solves `(q phi')' = 1/2 q (Gamma - Gamma_hat)` with zero flux at both ends:
/// `q phi'(z) = 1/2 int_{-inf}^{z} q (Gamma - Gamma_hat)`, where `Gamma_hat`
/// is chosen so the integral over the whole grid vanishes.
pub fn pde_quadrature_1d(grid: &[f64], q: &[f64], gamma: &[f64]) -> Result<PdeSolution> {
    let n = grid.len();
    if n < 3 || q.len() != n || gamma.len() != n {
        return Err(Error::shape(
            "pde_quadrature_1d",
            format!("grid {n}, density {}, gamma {}", q.len(), gamma.len()),
        ));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Invalid("grid must be strictly increasing".into()));
    }
    if q[1..n - 1].iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Invalid("density must be positive on the grid interior".into()));
    }
    let mass = trapezoid_cumulative(grid, q)[n - 1];
    // Averaging offsets from the minimum keeps a constant Gamma exactly centered.
    let base = gamma.iter().cloned().fold(f64::INFINITY, f64::min);
    let qg: Vec<f64> = q.iter().zip(gamma).map(|(a, b)| a * (b - base)).collect();
    let gamma_hat = base + trapezoid_cumulative(grid, &qg)[n - 1] / mass;
    let rhs: Vec<f64> = q.iter().zip(gamma).map(|(a, g)| 0.5 * a * (g - gamma_hat)).collect();
    let flux = trapezoid_cumulative(grid, &rhs);
    let boundary = flux[n - 1];
    let span = grid[n - 1] - grid[0];
    let edge_mass = (q[0].max(q[n - 1]) * span) / mass;
    if boundary.abs() > 1e-6 || edge_mass > 1e-6 {
        return Err(Error::Invalid(format!(
            "zero-flux boundary condition fails: residual flux {boundary:e}, edge density share {edge_mass:e}"
        )));
    }
    let velocity = flux.iter().zip(q).map(|(f, d)| f / d).collect();
    Ok(PdeSolution {
        grid: grid.to_vec(),
        velocity,
        gamma_hat,
        boundary,
    })
}

/// Interior residual `max |(q phi')' - 1/2 q (Gamma - Gamma_hat)|` by central
/// differences, over nodes whose density exceeds `min_density`.
pub fn pde_residual(sol: &PdeSolution, q: &[f64], gamma: &[f64], min_density: f64) -> f64 {
    let g = &sol.grid;
    (1..g.len() - 1)
        .filter(|&i| q[i] > min_density)
        .map(|i| {
            let d = (q[i + 1] * sol.velocity[i + 1] - q[i - 1] * sol.velocity[i - 1]) / (g[i + 1] - g[i - 1]);
            (d - 0.5 * q[i] * (gamma[i] - sol.gamma_hat)).abs()
        })
        .fold(0.0, f64::max)
}

/// Scalar Gaussian prior with a Gaussian measurement `x ~ N(z, obs_var)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConjugateGaussian1d {
    pub prior_mean: f64,
    pub prior_var: f64,
    pub x: f64,
    pub obs_var: f64,
}

impl ConjugateGaussian1d {
    pub fn posterior(&self) -> (f64, f64) {
        self.tempered(1.0)
    }

    /// Density proportional to `prior * likelihood^tau`, as `(mean, var)`.
    pub fn tempered(&self, tau: f64) -> (f64, f64) {
        let precision = 1.0 / self.prior_var + tau / self.obs_var;
        let mean = (self.prior_mean / self.prior_var + tau * self.x / self.obs_var) / precision;
        (mean, 1.0 / precision)
    }

    pub fn nis(&self, z: f64) -> f64 {
        (self.x - z).powi(2) / self.obs_var
    }

    /// Quadrature velocity at pseudo-time `tau` on a `points`-node grid over +-8 sd.
    pub fn velocity(&self, tau: f64, points: usize) -> Result<PdeSolution> {
        let (m, v) = self.tempered(tau);
        let grid = uniform_grid(m, v.sqrt(), 8.0, points);
        let q: Vec<f64> = grid.iter().map(|&z| normal_pdf(z, m, v)).collect();
        let gamma: Vec<f64> = grid.iter().map(|&z| self.nis(z)).collect();
        pde_quadrature_1d(&grid, &q, &gamma)
    }

    /// Moves samples through `stages` Euler steps of size `1 / stages`, each
    /// using the quadrature velocity of the tempered density at that stage.
    pub fn staged_quadrature_transport(&self, samples: &[f64], stages: usize, points: usize) -> Result<Vec<f64>> {
        let mut z = samples.to_vec();
        let dt = 1.0 / stages as f64;
        for k in 0..stages {
            let sol = self.velocity(k as f64 * dt, points)?;
            for v in &mut z {
                *v += dt * sol.velocity_at(*v);
            }
        }
        Ok(z)
    }
}

/// Result of transporting an ensemble with a potential re-fitted at every stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StagedTransport {
    pub particles: Tensor,
    /// Flow gradient at the initial ensemble after the first fit.
    pub first_gradient: Tensor,
    /// Minibatch objective trace of every stage's fit.
    pub objectives: Vec<Vec<f64>>,
}

/// Transports `particles` over pseudo-time `[0, 1]` in `stages` Euler steps.
/// Before each step the potential is fitted to the flow objective of the
/// current ensemble, with NIS values from `nis_of`, warm-started from the
/// previous stage.
pub fn staged_trained_transport<P, R>(
    potential: &mut P,
    x: &Tensor,
    particles: &Tensor,
    nis_of: &dyn Fn(&Tensor) -> Result<Vec<f64>>,
    stages: usize,
    opts: &FitOptions,
    rng: &mut R,
) -> Result<StagedTransport>
where
    P: Potential + ?Sized,
    R: Rng + ?Sized,
{
    if stages == 0 {
        return Err(Error::Invalid("at least one stage is needed".into()));
    }
    let dt = 1.0 / stages as f64;
    let mut current = particles.clone();
    let mut first_gradient = None;
    let mut objectives = Vec::with_capacity(stages);
    for k in 0..stages {
        let gamma = nis_of(&current)?;
        objectives.push(fit_potential(potential, x, &current, &gamma, opts, rng)?);
        let grad = flow_gradient(potential, x, &current)?;
        current = current.zip(&grad, |s, g| s + dt * g);
        if !current.is_finite() {
            return Err(Error::NonFinite(format!("staged transport at stage {}", k + 1)));
        }
        first_gradient.get_or_insert(grad);
    }
    Ok(StagedTransport {
        particles: current,
        first_gradient: first_gradient.expect("one stage"),
        objectives,
    })
}

/// Ensemble size, stage count, potential widths and per-stage fit settings
/// of a staged transport.
#[derive(Clone, Debug)]
pub struct TransportSettings {
    pub particles: usize,
    pub stages: usize,
    pub encoder_hidden: Vec<usize>,
    pub feature_width: usize,
    pub hidden: Vec<usize>,
    pub fit: FitOptions,
}

impl TransportSettings {
    /// Settings for the scalar conjugate case.
    pub fn scalar() -> Self {
        TransportSettings {
            particles: 10_000,
            stages: 16,
            encoder_hidden: vec![4],
            feature_width: 2,
            hidden: vec![64, 64],
            fit: FitOptions {
                iterations: 600,
                batch: 512,
                lr: 3e-4,
                lr_decay: 1.0,
                select_every: 25,
            },
        }
    }

    /// Settings for the two-dimensional linear-Gaussian case.
    pub fn planar() -> Self {
        TransportSettings {
            stages: 32,
            fit: FitOptions {
                iterations: 300,
                ..Self::scalar().fit
            },
            ..Self::scalar()
        }
    }
}

/// Scalar prior `N(0, 1)` observed once as `x = 1` with unit noise.
pub fn scalar_case() -> ConjugateGaussian1d {
    ConjugateGaussian1d {
        prior_mean: 0.0,
        prior_var: 1.0,
        x: 1.0,
        obs_var: 1.0,
    }
}

/// Correlated two-dimensional prior with a full-rank linear observation,
/// as `(prior, H, R, y)`.
pub fn planar_case() -> (Gaussian, DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
    (
        Gaussian {
            mean: DVector::zeros(2),
            cov: DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]),
        },
        DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]),
        DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 1.0]),
        DVector::from_vec(vec![1.0, -0.5]),
    )
}

impl ConjugateGaussian1d {
    /// The same model in matrix form, as `(prior, H, R, y)`.
    pub fn as_linear(&self) -> (Gaussian, DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
        (
            Gaussian {
                mean: DVector::from_element(1, self.prior_mean),
                cov: DMatrix::from_element(1, 1, self.prior_var),
            },
            DMatrix::identity(1, 1),
            DMatrix::from_element(1, 1, self.obs_var),
            DVector::from_element(1, self.x),
        )
    }
}

/// Draws `settings.particles` samples of `N(mean, cov)` and transports them
/// toward the posterior under `y = H z + v`, `v ~ N(0, R)`, fitting the
/// potential on the flow objective alone with NIS `(y - Hz)^T R^-1 (y - Hz)`.
/// Returns the prior samples and the transport.
pub fn transport_linear_gaussian<R: Rng + ?Sized>(
    prior: &Gaussian,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    y: &DVector<f64>,
    settings: &TransportSettings,
    rng: &mut R,
) -> Result<(Tensor, StagedTransport)> {
    let n = prior.mean.len();
    if h.shape() != (y.len(), n) {
        return Err(Error::shape("transport", format!("H {:?} for state {n}, observation {}", h.shape(), y.len())));
    }
    check_spd("R", r)?;
    let l = prior
        .cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("prior covariance".into()))?
        .l();
    let eps = Tensor::standard_normal(settings.particles, n, rng);
    let samples = Tensor::from_fn(settings.particles, n, |i, c| {
        prior.mean[c] + (0..n).map(|k| l[(c, k)] * eps.get(i, k)).sum::<f64>()
    });
    let r_inv = r.clone().cholesky().expect("checked above").inverse();
    let nis_of = |s: &Tensor| -> Result<Vec<f64>> {
        Ok((0..s.rows())
            .map(|i| {
                let e = y - h * DVector::from_row_slice(s.row(i));
                e.dot(&(&r_inv * &e))
            })
            .collect())
    };
    let mut potential = VelocityPotential::new(
        y.len(),
        n,
        &settings.encoder_hidden,
        settings.feature_width,
        &settings.hidden,
        rng,
    )?;
    let x = Tensor::row_vector(y.iter().copied().collect())?;
    let out = staged_trained_transport(&mut potential, &x, &samples, &nis_of, settings.stages, &settings.fit, rng)?;
    Ok((samples, out))
}

/// `sqrt(d^T C^-1 d)` for `d = point - g.mean`.
pub fn mahalanobis(point: &[f64], g: &Gaussian) -> Result<f64> {
    if point.len() != g.mean.len() {
        return Err(Error::shape("mahalanobis", format!("point {} for dimension {}", point.len(), g.mean.len())));
    }
    let d = DVector::from_row_slice(point) - &g.mean;
    let chol = g
        .cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("covariance".into()))?;
    Ok(d.dot(&chol.solve(&d)).sqrt())
}

/// Mean of `(y - H z)^T R^-1 (y - H z)` over the rows of `particles`.
pub fn mean_nis(h: &DMatrix<f64>, r: &DMatrix<f64>, y: &DVector<f64>, particles: &Tensor) -> Result<f64> {
    let chol = r
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("R".into()))?;
    if particles.cols() != h.ncols() || particles.rows() == 0 {
        return Err(Error::shape("mean_nis", format!("particles {:?} for H {:?}", particles.shape(), h.shape())));
    }
    let total: f64 = (0..particles.rows())
        .map(|i| {
            let e = y - h * DVector::from_row_slice(particles.row(i));
            e.dot(&chol.solve(&e))
        })
        .sum();
    Ok(total / particles.rows() as f64)
}

/// Column means of an ensemble.
pub fn ensemble_mean(particles: &Tensor) -> Vec<f64> {
    (0..particles.cols())
        .map(|c| particles.column(c).iter().sum::<f64>() / particles.rows() as f64)
        .collect()
}

/// Sample Pearson correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}
