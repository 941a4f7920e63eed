//! Ornstein-Uhlenbeck transport of Gaussian densities: closed-form
//! covariance path, force field, particle simulators and the spectral /
//! locality / permutation checks built on them.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_graph, cheb_basis, hop_masks, permutation_matrix, GraphSpec};
use crate::linalg::{cholesky, eig_sym, inverse, DenseMatrix};
use crate::metrics::sample_covariance;

/// Initial Gaussian covariance `Σ₀`, validated symmetric positive definite.
#[derive(Clone, Debug, PartialEq)]
pub struct OuSpec {
    sigma0: DenseMatrix,
}

impl OuSpec {
    pub fn new(sigma0: DenseMatrix) -> Result<Self> {
        let (eigs, _) = eig_sym(&sigma0)?;
        if eigs[0] <= 0.0 {
            return Err(Error::NotPositiveDefinite);
        }
        Ok(Self { sigma0 })
    }

    pub fn sigma0(&self) -> &DenseMatrix {
        &self.sigma0
    }

    pub fn dim(&self) -> usize {
        self.sigma0.rows()
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::Precondition(format!(
            "time must be finite and >= 0, got {t}"
        )));
    }
    Ok(())
}

fn check_square(m: &DenseMatrix, op: &'static str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::shape(
            op,
            format!("{}x{} is not square", m.rows(), m.cols()),
        ));
    }
    Ok(())
}

/// Largest absolute eigenvalue of the symmetric part.
fn sym_norm(m: &DenseMatrix) -> Result<f64> {
    let (e, _) = eig_sym(&m.symmetrized())?;
    Ok(e.iter().fold(0.0, |a, x| a.max(x.abs())))
}

/// `Σ_t = (1 − e^{−2t}) I + e^{−2t} Σ`.
pub fn sigma_t(sigma: &DenseMatrix, t: f64) -> Result<DenseMatrix> {
    check_time(t)?;
    check_square(sigma, "sigma_t")?;
    let e = (-2.0 * t).exp();
    DenseMatrix::identity(sigma.rows())
        .scale(1.0 - e)
        .add(&sigma.scale(e))
}

fn force_matrix(sigma: &DenseMatrix, t: f64) -> Result<DenseMatrix> {
    let inv = inverse(&sigma_t(sigma, t)?)?.symmetrized();
    DenseMatrix::identity(sigma.rows()).sub(&inv)
}

/// `f(x, t) = −(I − Σ_t^{-1}) x`.
pub fn force(x: &[f64], t: f64, sigma: &DenseMatrix) -> Result<Vec<f64>> {
    if x.len() != sigma.rows() {
        return Err(Error::shape(
            "force",
            format!(
                "x has {} entries, Σ is {}x{}",
                x.len(),
                sigma.rows(),
                sigma.cols()
            ),
        ));
    }
    let m = force_matrix(sigma, t)?;
    Ok(m.matmul(&DenseMatrix::column_vector(x))?
        .scale(-1.0)
        .into_data())
}

/// Applies the force to every row of `x`.
pub fn force_batch(x: &DenseMatrix, t: f64, sigma: &DenseMatrix) -> Result<DenseMatrix> {
    Ok(x.matmul(&force_matrix(sigma, t)?)?.scale(-1.0))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CovarianceSnapshot {
    pub t: f64,
    pub covariance: Vec<Vec<f64>>,
}

/// Particle positions and empirical covariances on the recorded time grid.
#[derive(Clone, Debug)]
pub struct FlowTrace {
    pub times: Vec<f64>,
    pub positions: Vec<DenseMatrix>,
    pub covariances: Vec<DenseMatrix>,
}

impl FlowTrace {
    pub fn particles(&self) -> usize {
        self.positions.first().map_or(0, DenseMatrix::rows)
    }

    pub fn final_covariance(&self) -> &DenseMatrix {
        self.covariances
            .last()
            .expect("trace has at least the initial snapshot")
    }

    /// Index of the recorded time closest to `t`.
    pub fn nearest(&self, t: f64) -> usize {
        let mut best = 0;
        for (i, &s) in self.times.iter().enumerate() {
            if (s - t).abs() < (self.times[best] - t).abs() {
                best = i;
            }
        }
        best
    }

    /// Rows `t,particle_id,x0,..`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let d = self.positions.first().map_or(0, DenseMatrix::cols);
        let cols: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
        writeln!(f, "t,particle_id,{}", cols.join(","))?;
        for (t, x) in self.times.iter().zip(&self.positions) {
            for i in 0..x.rows() {
                let v: Vec<String> = x.row(i).iter().map(f64::to_string).collect();
                writeln!(f, "{t},{i},{}", v.join(","))?;
            }
        }
        f.flush()?;
        Ok(())
    }

    pub fn snapshots(&self) -> Vec<CovarianceSnapshot> {
        self.times
            .iter()
            .zip(&self.covariances)
            .map(|(&t, c)| CovarianceSnapshot {
                t,
                covariance: c.to_rows(),
            })
            .collect()
    }

    pub fn write_covariance_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.snapshots())?)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimOptions {
    pub horizon: f64,
    pub dt: f64,
    /// Positions and covariances are kept every this many steps (and at the end).
    pub record_every: usize,
    pub seed: u64,
}

impl SimOptions {
    pub fn ode(horizon: f64) -> Self {
        Self {
            horizon,
            dt: 0.01,
            record_every: 10,
            seed: 0,
        }
    }

    pub fn sde(horizon: f64) -> Self {
        Self {
            horizon,
            dt: 0.005,
            record_every: 20,
            seed: 0,
        }
    }

    fn steps(&self) -> Result<usize> {
        if !(self.dt > 0.0) || !(self.horizon > 0.0) || self.record_every == 0 {
            return Err(Error::Config(format!(
                "need dt > 0, horizon > 0, record_every > 0 (got {}, {}, {})",
                self.dt, self.horizon, self.record_every
            )));
        }
        Ok(((self.horizon / self.dt).round() as usize).max(1))
    }

    fn records(&self, step: usize, steps: usize) -> bool {
        step.is_multiple_of(self.record_every) || step == steps
    }
}

fn particle_rng(seed: u64, particle: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(particle as u64);
    rng
}

fn initial_row(l: &DenseMatrix, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let d = l.rows();
    let eps: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    (0..d)
        .map(|i| (0..=i).map(|k| l.get(i, k) * eps[k]).sum())
        .collect()
}

/// Initial particles `X₀ ~ N(0, Σ₀)`, one RNG stream per particle.
pub fn initial_particles(spec: &OuSpec, n: usize, seed: u64) -> Result<DenseMatrix> {
    let l = cholesky(spec.sigma0())?;
    let d = spec.dim();
    let mut x = DenseMatrix::zeros(n, d);
    for i in 0..n {
        let row = initial_row(&l, &mut particle_rng(seed, i));
        x.row_mut(i).copy_from_slice(&row);
    }
    Ok(x)
}

/// RK4 integration of `dx/dt = f(x, t)` for particles started at `N(0, Σ₀)`.
pub fn ode_transport(spec: &OuSpec, n: usize, opts: SimOptions) -> Result<FlowTrace> {
    let x0 = initial_particles(spec, n, opts.seed)?;
    ode_transport_from(spec.sigma0(), x0, opts)
}

/// RK4 transport of given particles. The force is built from `sigma`, so
/// arbitrary starting clouds are allowed.
pub fn ode_transport_from(
    sigma: &DenseMatrix,
    mut x: DenseMatrix,
    opts: SimOptions,
) -> Result<FlowTrace> {
    let steps = opts.steps()?;
    let dt = opts.dt;
    let mut trace = FlowTrace {
        times: vec![0.0],
        covariances: vec![sample_covariance(&x)],
        positions: vec![x.clone()],
    };
    for step in 0..steps {
        let t = step as f64 * dt;
        let m0 = force_matrix(sigma, t)?.scale(-1.0);
        let mh = force_matrix(sigma, t + 0.5 * dt)?.scale(-1.0);
        let m1 = force_matrix(sigma, t + dt)?.scale(-1.0);
        let k1 = x.matmul(&m0)?;
        let mut y = x.clone();
        y.axpy(0.5 * dt, &k1)?;
        let k2 = y.matmul(&mh)?;
        let mut y = x.clone();
        y.axpy(0.5 * dt, &k2)?;
        let k3 = y.matmul(&mh)?;
        let mut y = x.clone();
        y.axpy(dt, &k3)?;
        let k4 = y.matmul(&m1)?;
        x.axpy(dt / 6.0, &k1)?;
        x.axpy(dt / 3.0, &k2)?;
        x.axpy(dt / 3.0, &k3)?;
        x.axpy(dt / 6.0, &k4)?;
        let now = (step + 1) as f64 * dt;
        if !x.is_finite() {
            return Err(Error::NonFiniteState { time: now });
        }
        if opts.records(step + 1, steps) {
            trace.times.push(now);
            trace.covariances.push(sample_covariance(&x));
            trace.positions.push(x.clone());
        }
    }
    Ok(trace)
}

/// Euler–Maruyama for `dX = −X dt + √2 dW` from `X₀ ~ N(0, Σ₀)`.
///
/// Each step consumes `brownian_substeps` normals per coordinate (summed into
/// one increment), so a run with `dt` and two substeps sees the same
/// Brownian path as a run with `dt / 2` and one substep.
pub fn sde_simulate(
    spec: &OuSpec,
    n: usize,
    opts: SimOptions,
    brownian_substeps: usize,
) -> Result<FlowTrace> {
    let steps = opts.steps()?;
    if brownian_substeps == 0 {
        return Err(Error::Config("brownian_substeps must be >= 1".into()));
    }
    let l = cholesky(spec.sigma0())?;
    let d = spec.dim();
    let dt = opts.dt;
    let mut times = vec![0.0];
    for step in 1..=steps {
        if opts.records(step, steps) {
            times.push(step as f64 * dt);
        }
    }
    let mut positions = vec![DenseMatrix::zeros(n, d); times.len()];
    let sub = (dt / brownian_substeps as f64).sqrt();
    let mut xi = vec![0.0; d];
    for p in 0..n {
        let mut rng = particle_rng(opts.seed, p);
        let mut x = initial_row(&l, &mut rng);
        positions[0].row_mut(p).copy_from_slice(&x);
        let mut r = 1;
        for step in 1..=steps {
            xi.iter_mut().for_each(|v| *v = 0.0);
            for _ in 0..brownian_substeps {
                for v in xi.iter_mut() {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    *v += sub * e;
                }
            }
            for (xj, w) in x.iter_mut().zip(&xi) {
                *xj += -*xj * dt + std::f64::consts::SQRT_2 * w;
            }
            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteState {
                    time: step as f64 * dt,
                });
            }
            if opts.records(step, steps) {
                positions[r].row_mut(p).copy_from_slice(&x);
                r += 1;
            }
        }
    }
    let covariances = positions.iter().map(sample_covariance).collect();
    Ok(FlowTrace {
        times,
        positions,
        covariances,
    })
}

/// Evaluates `Σ_k a_k M^k` (monomial coefficients).
pub fn matrix_polynomial(m: &DenseMatrix, coeffs: &[f64]) -> Result<DenseMatrix> {
    check_square(m, "matrix_polynomial")?;
    let n = m.rows();
    let mut out = DenseMatrix::zeros(n, n);
    let mut power = DenseMatrix::identity(n);
    for (k, &a) in coeffs.iter().enumerate() {
        if k > 0 {
            power = power.matmul(m)?;
        }
        out.axpy(a, &power)?;
    }
    Ok(out)
}

pub fn eval_polynomial(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &a| acc * x + a)
}

/// Rewrites `Σ_k c_k T_k(L̃)`, `L̃ = 2L/λ_max − I`, as monomial coefficients in `L`.
pub fn chebyshev_to_monomial(cheb: &[f64], lambda_max: f64) -> Vec<f64> {
    let s = 2.0 / lambda_max;
    // Coefficients (in L) of T_k(sL − 1), built by the three-term recurrence.
    let mut prev: Vec<f64> = vec![1.0];
    let mut cur: Vec<f64> = vec![-1.0, s];
    let mut out = vec![0.0; cheb.len().max(1)];
    for (k, &c) in cheb.iter().enumerate() {
        let t = match k {
            0 => prev.clone(),
            1 => cur.clone(),
            _ => {
                let mut next = vec![0.0; cur.len() + 1];
                for (i, &a) in cur.iter().enumerate() {
                    next[i] -= 2.0 * a;
                    next[i + 1] += 2.0 * s * a;
                }
                for (i, &a) in prev.iter().enumerate() {
                    next[i] -= a;
                }
                prev = std::mem::replace(&mut cur, next);
                cur.clone()
            }
        };
        if out.len() < t.len() {
            out.resize(t.len(), 0.0);
        }
        for (o, a) in out.iter_mut().zip(&t) {
            *o += c * a;
        }
    }
    out
}

/// `Σ_t^{-1}` for `Σ = P(L)` through the eigendecomposition of the graph
/// Laplacian `L = D − A`.
pub fn spectral_sigma_t_inv(g: &GraphSpec, coeffs: &[f64], t: f64) -> Result<DenseMatrix> {
    check_time(t)?;
    let (lam, u) = eig_sym(g.laplacian())?;
    let e = (-2.0 * t).exp();
    let vals: Vec<f64> = lam
        .iter()
        .map(|&l| (1.0 - e) + e * eval_polynomial(coeffs, l))
        .collect();
    if vals.iter().any(|&v| v <= 0.0) {
        return Err(Error::NotPositiveDefinite);
    }
    let mut out = DenseMatrix::zeros(lam.len(), lam.len());
    for (k, v) in vals.iter().enumerate() {
        let w = 1.0 / v;
        for i in 0..lam.len() {
            for j in 0..lam.len() {
                out.set(i, j, out.get(i, j) + w * u.get(i, k) * u.get(j, k));
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorollaryGap {
    pub lhs: f64,
    pub rhs: f64,
    pub delta: f64,
}

impl CorollaryGap {
    pub fn holds(&self) -> bool {
        self.lhs <= self.rhs * (1.0 + 1e-9) + 1e-14
    }
}

/// Spectral-norm gap between `Σ_t^{-1}` and `Σ̃_t^{-1}`, `Σ̃ = P̃(L)`, with its
/// closed-form bound. `Σ` must commute with `L`.
pub fn corollary_gap(
    sigma: &DenseMatrix,
    p_tilde: &[f64],
    l: &DenseMatrix,
    t: f64,
) -> Result<CorollaryGap> {
    check_time(t)?;
    check_square(sigma, "corollary_gap")?;
    if sigma.shape() != l.shape() {
        return Err(Error::shape("corollary_gap", "Σ and L differ in size"));
    }
    let comm = sigma.matmul(l)?.sub(&l.matmul(sigma)?)?;
    let cn = sym_norm(&comm.matmul_t(&comm)?)?.sqrt();
    if cn > 1e-8 {
        return Err(Error::Precondition(format!(
            "Σ and L do not share eigenvectors (commutator norm {cn:e})"
        )));
    }
    let (lam_l, _) = eig_sym(l)?;
    let min_pt = lam_l
        .iter()
        .map(|&x| eval_polynomial(p_tilde, x))
        .fold(f64::INFINITY, f64::min);
    if !(min_pt > 0.0) {
        return Err(Error::Precondition(format!(
            "min P̃(λ(L)) = {min_pt} is not positive"
        )));
    }
    let (lam_s, _) = eig_sym(sigma)?;
    if lam_s[0] <= 0.0 {
        return Err(Error::NotPositiveDefinite);
    }
    let sigma_tilde = matrix_polynomial(l, p_tilde)?;
    // Σ − P̃(L) is diagonal in the shared basis, so its norm is δ.
    let delta = sym_norm(&sigma.sub(&sigma_tilde)?)?;
    let lhs = sym_norm(&inverse(&sigma_t(sigma, t)?)?.sub(&inverse(&sigma_t(&sigma_tilde, t)?)?)?)?;
    let c = 1.0 - (-2.0 * t).exp();
    let rhs = (1.0 - c) * delta / ((c + (1.0 - c) * lam_s[0]) * (c + (1.0 - c) * min_pt));
    Ok(CorollaryGap { lhs, rhs, delta })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesBranch {
    /// Powers of `Σ`.
    LongTime,
    /// Powers of `Σ^{-1}`.
    ShortTime,
}

#[derive(Clone, Debug)]
pub struct SeriesInverse {
    pub branch: SeriesBranch,
    pub approximation: DenseMatrix,
    /// Hop-locality of the approximation; `None` if its support joins
    /// disconnected nodes.
    pub locality: Option<usize>,
    /// Spectral-norm distance to the exact `Σ_t^{-1}`.
    pub error: f64,
}

/// Smallest `v` such that `m` is supported within `v` hops on `g`.
pub fn hop_locality(g: &GraphSpec, m: &DenseMatrix, tol: f64) -> Result<Option<usize>> {
    let n = g.num_nodes();
    if m.shape() != (n, n) {
        return Err(Error::shape(
            "hop_locality",
            "matrix does not match the graph",
        ));
    }
    let orders: Vec<usize> = (0..n).collect();
    let masks = hop_masks(g, &orders)?;
    let cut = tol * m.max_abs();
    let mut worst = 0;
    for i in 0..n {
        for j in 0..n {
            if m.get(i, j).abs() > cut {
                match masks.iter().find(|h| h.mask.get(i, j) != 0.0) {
                    Some(h) => worst = worst.max(h.order),
                    None => return Ok(None),
                }
            }
        }
    }
    Ok(Some(worst))
}

/// Truncated power-series inverse of `Σ_t` at order `k`. The long-time series
/// in `c_t Σ`, `c_t = e^{−2t}/(1 − e^{−2t})`, is used when it converges,
/// otherwise the short-time series in `c_t^{-1} Σ^{-1}`.
pub fn local_series_inverse(
    g: &GraphSpec,
    sigma: &DenseMatrix,
    t: f64,
    k: usize,
) -> Result<SeriesInverse> {
    check_time(t)?;
    check_square(sigma, "local_series_inverse")?;
    let e = (-2.0 * t).exp();
    let c = e / (1.0 - e);
    let n = sigma.rows();
    let exact = inverse(&sigma_t(sigma, t)?)?;
    let long_radius = if t > 0.0 {
        c * sym_norm(sigma)?
    } else {
        f64::INFINITY
    };
    let sigma_inv = inverse(sigma)?;
    let short_radius = if t > 0.0 {
        sym_norm(&sigma_inv)? / c
    } else {
        0.0
    };
    let (branch, base, lead, tail) = if long_radius < 1.0 {
        (
            SeriesBranch::LongTime,
            sigma.scale(-c),
            1.0 / (1.0 - e),
            DenseMatrix::identity(n),
        )
    } else if short_radius < 1.0 {
        let base = if t > 0.0 {
            sigma_inv.scale(-1.0 / c)
        } else {
            DenseMatrix::zeros(n, n)
        };
        (SeriesBranch::ShortTime, base, 1.0 / e, sigma_inv.clone())
    } else {
        return Err(Error::InapplicableRegime {
            long_radius,
            short_radius,
        });
    };
    let mut term = DenseMatrix::identity(n);
    let mut sum = DenseMatrix::identity(n);
    for _ in 0..k {
        term = term.matmul(&base)?;
        sum.add_assign(&term)?;
    }
    let approximation = sum.matmul(&tail)?.scale(lead);
    let error = sym_norm(&approximation.sub(&exact)?)?;
    Ok(SeriesInverse {
        branch,
        locality: hop_locality(g, &approximation, 1e-12)?,
        approximation,
        error,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationGap {
    pub filter_sym: bool,
    pub sigma_sym: bool,
}

/// Whether `π` fixes the graph filters `A, A², T_0..T_2(L̃)` and whether it
/// fixes `Σ`, all within 1e-12.
pub fn permutation_gap(
    g: &GraphSpec,
    sigma: &DenseMatrix,
    perm: &[usize],
) -> Result<PermutationGap> {
    let n = g.num_nodes();
    if perm.len() != n || sigma.shape() != (n, n) {
        return Err(Error::shape(
            "permutation_gap",
            "permutation, Σ and graph sizes differ",
        ));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::Precondition("not a permutation".into()));
        }
    }
    let pi = permutation_matrix(perm);
    let conj = |m: &DenseMatrix| -> Result<f64> { pi.matmul(m)?.matmul_t(&pi)?.max_abs_diff(m) };
    let a = g.adjacency();
    let mut filters = vec![a.clone(), a.matmul(a)?];
    filters.extend(cheb_basis(g, 2));
    let mut filter_sym = true;
    for f in &filters {
        filter_sym &= conj(f)? <= 1e-12;
    }
    Ok(PermutationGap {
        filter_sym,
        sigma_sym: conj(sigma)? <= 1e-12,
    })
}

/// Series errors and localities over increasing truncation orders.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeriesCheck {
    pub t: f64,
    pub branch: SeriesBranch,
    pub orders: Vec<usize>,
    pub errors: Vec<f64>,
    pub localities: Vec<Option<usize>>,
    /// Allowed locality per order: `k·v(Σ)` on the long-time branch,
    /// `(k+1)·v(Σ⁻¹)` on the short-time branch; `None` when that factor has
    /// no finite hop support.
    pub bounds: Vec<Option<usize>>,
    pub strictly_decreasing: bool,
    pub within_bounds: bool,
}

impl SeriesCheck {
    pub fn pass(&self) -> bool {
        self.strictly_decreasing && self.within_bounds
    }
}

pub fn series_check(
    g: &GraphSpec,
    sigma: &DenseMatrix,
    t: f64,
    orders: &[usize],
) -> Result<SeriesCheck> {
    let mut errors = Vec::new();
    let mut localities = Vec::new();
    let mut branch = SeriesBranch::LongTime;
    for &k in orders {
        let r = local_series_inverse(g, sigma, t, k)?;
        branch = r.branch;
        errors.push(r.error);
        localities.push(r.locality);
    }
    let factor = match branch {
        SeriesBranch::LongTime => hop_locality(g, sigma, 1e-12)?,
        SeriesBranch::ShortTime => hop_locality(g, &inverse(sigma)?, 1e-12)?,
    };
    let bounds: Vec<Option<usize>> = orders
        .iter()
        .map(|&k| {
            factor.map(|v| match branch {
                SeriesBranch::LongTime => k * v,
                SeriesBranch::ShortTime => (k + 1) * v,
            })
        })
        .collect();
    let strictly_decreasing = errors.windows(2).all(|w| w[1] < w[0]);
    let within_bounds = localities.iter().zip(&bounds).all(|(l, b)| match (l, b) {
        (Some(l), Some(b)) => l <= b,
        (_, None) => true,
        (None, Some(_)) => false,
    });
    Ok(SeriesCheck {
        t,
        branch,
        orders: orders.to_vec(),
        errors,
        localities,
        bounds,
        strictly_decreasing,
        within_bounds,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorollaryCase {
    pub nodes: usize,
    pub t: f64,
    pub gap: CorollaryGap,
    /// `lhs(t+1)/lhs(t)` at `t = 2, 3`.
    pub decay_ratios: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorollarySuite {
    pub cases: Vec<CorollaryCase>,
    pub decay_limit: f64,
    pub bound_holds: bool,
    pub decay_holds: bool,
}

impl CorollarySuite {
    pub fn pass(&self) -> bool {
        self.bound_holds && self.decay_holds
    }
}

/// Connected graph on `n` nodes: a path plus up to `n` random extra edges.
pub fn random_connected_graph(rng: &mut impl Rng, n: usize) -> Result<GraphSpec> {
    let mut edges: Vec<(usize, usize)> = (0..n.saturating_sub(1)).map(|i| (i, i + 1)).collect();
    for _ in 0..n {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a != b {
            edges.push((a, b));
        }
    }
    build_graph(n, &edges)
}

/// Quadratic in `L` that is positive on `[0, λ_max]`.
fn random_positive_poly(rng: &mut impl Rng, lmax: f64) -> Vec<f64> {
    let a1 = rng.random_range(-0.5..0.5) / lmax;
    let a2 = rng.random_range(0.0..0.3) / (lmax * lmax);
    let a0 = 0.2 + a1.abs() * lmax + rng.random_range(0.0..1.0);
    vec![a0, a1, a2]
}

/// Bound and decay checks on `instances` random graphs with `Σ = P(L)` and a
/// constant-shifted `P̃`.
pub fn corollary_suite(instances: usize, seed: u64) -> Result<CorollarySuite> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let decay_limit = (-2.0f64).exp() * 1.1;
    let mut cases = Vec::with_capacity(instances);
    for _ in 0..instances {
        let n = rng.random_range(3..9);
        let g = random_connected_graph(&mut rng, n)?;
        let l = g.laplacian();
        let p = random_positive_poly(&mut rng, g.lambda_max());
        let sigma = matrix_polynomial(l, &p)?;
        let mut pt = p.clone();
        let shift = rng.random_range(0.02..0.1);
        pt[0] += if rng.random::<bool>() { shift } else { -shift };
        let t = rng.random_range(0.0..3.0);
        let gap = corollary_gap(&sigma, &pt, l, t)?;
        let lhs: Vec<f64> = [2.0, 3.0, 4.0]
            .iter()
            .map(|&s| corollary_gap(&sigma, &pt, l, s).map(|g| g.lhs))
            .collect::<Result<_>>()?;
        let decay_ratios = lhs.windows(2).map(|w| w[1] / w[0]).collect();
        cases.push(CorollaryCase {
            nodes: n,
            t,
            gap,
            decay_ratios,
        });
    }
    let bound_holds = cases.iter().all(|c| c.gap.holds());
    let decay_holds = cases
        .iter()
        .all(|c| c.decay_ratios.iter().all(|&r| r <= decay_limit));
    Ok(CorollarySuite {
        cases,
        decay_limit,
        bound_holds,
        decay_holds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{gp_local_covariance, gp_spectral_covariance};

    fn diag(v: &[f64]) -> DenseMatrix {
        DenseMatrix::from_fn(v.len(), v.len(), |i, j| if i == j { v[i] } else { 0.0 })
    }

    #[test]
    fn sigma_t_limits() {
        let (_, s) = gp_local_covariance();
        assert_eq!(sigma_t(&s, 0.0).unwrap(), s);
        let far = sigma_t(&s, 20.0).unwrap();
        assert!(far.max_abs_diff(&DenseMatrix::identity(3)).unwrap() <= 1e-8);
        assert!(sigma_t(&s, -1.0).is_err());
        for (a, b) in [(0.3, 0.4), (1.0, 0.25)] {
            let e = (-2.0f64 * (a + b)).exp();
            let direct = DenseMatrix::identity(3)
                .scale(1.0 - e)
                .add(&s.scale(e))
                .unwrap();
            assert!(sigma_t(&s, a + b).unwrap().max_abs_diff(&direct).unwrap() <= 1e-15);
        }
    }

    #[test]
    fn force_examples() {
        let x = [0.3, -1.2, 2.0];
        for t in [0.0, 0.4, 3.0] {
            let f = force(&x, t, &DenseMatrix::identity(3)).unwrap();
            assert!(f.iter().all(|v| v.abs() < 1e-15));
        }
        let f = force(&[1.0, 0.0], 0.0, &diag(&[2.0, 1.0])).unwrap();
        assert!((f[0] + 0.5).abs() < 1e-15 && f[1].abs() < 1e-15);
    }

    #[test]
    fn force_matches_score_of_gaussian() {
        // −x − ∇log N(0, Σ_t)(x), with the score from a Cholesky solve.
        let (_, s) = gp_spectral_covariance();
        let x: Vec<f64> = (0..7).map(|i| (i as f64 * 0.7).sin()).collect();
        for t in [0.0, 0.2, 1.5] {
            let st = sigma_t(&s, t).unwrap();
            let l = cholesky(&st).unwrap();
            let n = x.len();
            let mut y = vec![0.0; n];
            for i in 0..n {
                y[i] = (x[i] - (0..i).map(|k| l.get(i, k) * y[k]).sum::<f64>()) / l.get(i, i);
            }
            let mut w = vec![0.0; n];
            for i in (0..n).rev() {
                w[i] = (y[i] - ((i + 1)..n).map(|k| l.get(k, i) * w[k]).sum::<f64>()) / l.get(i, i);
            }
            let f = force(&x, t, &s).unwrap();
            for i in 0..n {
                assert!((f[i] - (-x[i] + w[i])).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn identity_covariance_is_stationary_under_ode() {
        let spec = OuSpec::new(DenseMatrix::identity(3)).unwrap();
        let tr = ode_transport(&spec, 200, SimOptions::ode(1.0)).unwrap();
        let d = tr
            .positions
            .last()
            .unwrap()
            .max_abs_diff(&tr.positions[0])
            .unwrap();
        assert!(d <= 1e-10);
        assert!(tr.times.windows(2).all(|w| w[1] > w[0]));
        assert!(tr.positions.iter().all(|p| p.rows() == 200));
    }

    #[test]
    fn spectral_inverse_matches_direct_inverse() {
        let g = GraphSpec::chordal_cycle(7).unwrap();
        let (_, s) = gp_spectral_covariance();
        let coeffs = chebyshev_to_monomial(&[0.5, 0.1, 0.5], g.lambda_max());
        assert!(
            matrix_polynomial(g.laplacian(), &coeffs)
                .unwrap()
                .max_abs_diff(&s)
                .unwrap()
                <= 1e-12
        );
        for t in [0.0, 0.3, 1.0, 4.0] {
            let a = spectral_sigma_t_inv(&g, &coeffs, t).unwrap();
            let b = inverse(&sigma_t(&s, t).unwrap()).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() <= 1e-9);
        }
        let far = spectral_sigma_t_inv(&g, &coeffs, 20.0).unwrap();
        assert!(far.max_abs_diff(&DenseMatrix::identity(7)).unwrap() <= 1e-8);
        let c = 2.5;
        let t = 0.7;
        let e = (-2.0f64 * t).exp();
        let a = spectral_sigma_t_inv(&g, &[c], t).unwrap();
        let expect = DenseMatrix::identity(7).scale(1.0 / ((1.0 - e) + c * e));
        assert!(a.max_abs_diff(&expect).unwrap() <= 1e-12);
    }

    #[test]
    fn corollary_bound_on_chordal_cycle() {
        let g = GraphSpec::chordal_cycle(7).unwrap();
        let l = g.laplacian();
        let p = chebyshev_to_monomial(&[0.5, 0.1, 0.5], g.lambda_max());
        let s = matrix_polynomial(l, &p).unwrap();
        let exact = corollary_gap(&s, &p, l, 0.5).unwrap();
        assert!(exact.lhs <= 1e-12);
        let mut pt = p.clone();
        pt[0] += 0.05;
        let mut prev = None;
        for t in [0.1, 0.5, 1.0, 2.0, 3.0] {
            let gap = corollary_gap(&s, &pt, l, t).unwrap();
            assert!((gap.delta - 0.05).abs() < 1e-12);
            assert!(gap.holds(), "t={t}: {gap:?}");
            if t >= 1.0 {
                if let Some((pt_, pl)) = prev {
                    if t - pt_ == 1.0 {
                        assert!(gap.lhs / pl <= (-2.0f64).exp() * 1.1);
                    }
                }
            }
            prev = Some((t, gap.lhs));
        }
        let bad = DenseMatrix::from_fn(7, 7, |i, j| if i == j { 1.0 + i as f64 } else { 0.0 });
        assert!(matches!(
            corollary_gap(&bad, &pt, l, 1.0),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn local_series_on_path() {
        let (g, s) = gp_local_covariance();
        let t = 1.0;
        let zero = local_series_inverse(&g, &s, t, 0).unwrap();
        assert_eq!(zero.branch, SeriesBranch::LongTime);
        let e = (-2.0f64 * t).exp();
        let expect = DenseMatrix::identity(3).scale(1.0 / (1.0 - e));
        assert!(zero.approximation.max_abs_diff(&expect).unwrap() <= 1e-15);
        let mut last = f64::INFINITY;
        for k in [1, 2, 4, 8] {
            let r = local_series_inverse(&g, &s, t, k).unwrap();
            assert!(r.error < last);
            assert!(r.locality.unwrap() <= k);
            last = r.error;
        }
        let short = local_series_inverse(&g, &s, 0.01, 6).unwrap();
        assert_eq!(short.branch, SeriesBranch::ShortTime);
        let exact = inverse(&sigma_t(&s, 0.01).unwrap()).unwrap();
        assert!(short.approximation.max_abs_diff(&exact).unwrap() < 1e-3);
    }

    #[test]
    fn inapplicable_regime_names_both_radii() {
        let g = GraphSpec::path(2).unwrap();
        let s = diag(&[0.5, 10.0]);
        // t where c_t = 0.5: long radius 5, short radius 4.
        let t = -0.5 * (1.0f64 / 3.0).ln();
        match local_series_inverse(&g, &s, t, 3) {
            Err(Error::InapplicableRegime {
                long_radius,
                short_radius,
            }) => {
                assert!((long_radius - 5.0).abs() < 1e-9);
                assert!((short_radius - 4.0).abs() < 1e-9);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn permutation_gap_examples() {
        let (g, s) = gp_local_covariance();
        let rev = [2, 1, 0];
        assert_eq!(
            permutation_gap(&g, &s, &rev).unwrap(),
            PermutationGap {
                filter_sym: true,
                sigma_sym: false
            }
        );
        let both = permutation_gap(&g, &DenseMatrix::identity(3), &rev).unwrap();
        assert!(both.filter_sym && both.sigma_sym);
        let mut eq = s.clone();
        eq.set(1, 2, 0.6);
        eq.set(2, 1, 0.6);
        assert!(permutation_gap(&g, &eq, &rev).unwrap().sigma_sym);
    }
}
