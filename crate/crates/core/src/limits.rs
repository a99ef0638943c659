//! Analytic predictors built on top of the tilted cocycle.
//!
//! The additive log trace `Pi_{omega,n}` behaves like a cumulant generating
//! function for the Birkhoff sums: its Hessian at 0 is the asymptotic
//! covariance, its convex conjugate is the large-deviation rate function,
//! its third derivative drives the first Edgeworth correction, and its
//! tilts give both sharp tail prefactors and importance-sampling proposals.
//! The conjugation machinery is generic over any cumulant source so it can
//! be exercised against closed-form i.i.d. inputs independently of the
//! dynamics.

use num_complex::Complex64;

use crate::dist::{normal_cdf, normal_pdf, r_squared};
use crate::error::{Error, Result};
use crate::system::QuenchedSystem;
use crate::twisted::{
    pi_trace, tilted_path, AcimFamily, Centering, CumulantReport, TwistedOpts,
};
use crate::ulam::StepDensity;

// ---------------------------------------------------------------------------
// small dense symmetric matrices

fn mat_get(m: &[f64], d: usize, i: usize, j: usize) -> f64 {
    m[i * d + j]
}

fn solve_small(a: &[f64], d: usize, b: &[f64]) -> Option<Vec<f64>> {
    // Gaussian elimination with partial pivoting; d is tiny here.
    let mut m = a.to_vec();
    let mut x = b.to_vec();
    for col in 0..d {
        let pivot = (col..d).max_by(|&r, &s| {
            mat_get(&m, d, r, col).abs().total_cmp(&mat_get(&m, d, s, col).abs())
        })?;
        if mat_get(&m, d, pivot, col).abs() < 1e-300 {
            return None;
        }
        if pivot != col {
            for j in 0..d {
                m.swap(col * d + j, pivot * d + j);
            }
            x.swap(col, pivot);
        }
        let diag = mat_get(&m, d, col, col);
        for row in (col + 1)..d {
            let factor = mat_get(&m, d, row, col) / diag;
            for j in col..d {
                m[row * d + j] -= factor * m[col * d + j];
            }
            x[row] -= factor * x[col];
        }
    }
    for col in (0..d).rev() {
        let mut acc = x[col];
        for j in (col + 1)..d {
            acc -= mat_get(&m, d, col, j) * x[j];
        }
        x[col] = acc / mat_get(&m, d, col, col);
    }
    Some(x)
}

fn det_small(a: &[f64], d: usize) -> f64 {
    let mut m = a.to_vec();
    let mut det = 1.0;
    for col in 0..d {
        let pivot = (col..d)
            .max_by(|&r, &s| mat_get(&m, d, r, col).abs().total_cmp(&mat_get(&m, d, s, col).abs()))
            .unwrap();
        if mat_get(&m, d, pivot, col).abs() < 1e-300 {
            return 0.0;
        }
        if pivot != col {
            for j in 0..d {
                m.swap(col * d + j, pivot * d + j);
            }
            det = -det;
        }
        let diag = mat_get(&m, d, col, col);
        det *= diag;
        for row in (col + 1)..d {
            let factor = mat_get(&m, d, row, col) / diag;
            for j in col..d {
                m[row * d + j] -= factor * m[col * d + j];
            }
        }
    }
    det
}

/// Smallest eigenvalue of a small symmetric matrix by cyclic Jacobi.
fn min_eig_small(a: &[f64], d: usize) -> f64 {
    let mut m = a.to_vec();
    for _ in 0..64 {
        let mut off = 0.0f64;
        let mut p = 0;
        let mut q = 1;
        for i in 0..d {
            for j in (i + 1)..d {
                let v = mat_get(&m, d, i, j).abs();
                if v > off {
                    off = v;
                    p = i;
                    q = j;
                }
            }
        }
        if d < 2 || off < 1e-14 {
            break;
        }
        let app = mat_get(&m, d, p, p);
        let aqq = mat_get(&m, d, q, q);
        let apq = mat_get(&m, d, p, q);
        let phi = 0.5 * (2.0 * apq).atan2(aqq - app);
        let (s, c) = phi.sin_cos();
        for k in 0..d {
            let akp = mat_get(&m, d, k, p);
            let akq = mat_get(&m, d, k, q);
            m[k * d + p] = c * akp - s * akq;
            m[k * d + q] = s * akp + c * akq;
        }
        for k in 0..d {
            let apk = mat_get(&m, d, p, k);
            let aqk = mat_get(&m, d, q, k);
            m[p * d + k] = c * apk - s * aqk;
            m[q * d + k] = s * apk + c * aqk;
        }
    }
    (0..d).map(|i| mat_get(&m, d, i, i)).fold(f64::INFINITY, f64::min)
}

/// Where a covariance estimate came from.
#[derive(Clone, Debug, PartialEq)]
pub enum CovProvenance {
    /// Summed autocorrelations, truncated at `lag_max`.
    GreenKubo { lag_max: usize },
    /// Hessian of the log-trace growth rate, via contours of `radius`.
    Hessian { radius: f64 },
}

/// Symmetric `d x d` covariance with provenance.
#[derive(Clone, Debug)]
pub struct CovMatrix {
    pub dim: usize,
    /// Row-major `d*d` entries.
    pub data: Vec<f64>,
    pub provenance: CovProvenance,
}

impl CovMatrix {
    pub fn new(dim: usize, data: Vec<f64>, provenance: CovProvenance) -> Result<Self> {
        if data.len() != dim * dim {
            return Err(Error::Dimension("covariance data has wrong length".into()));
        }
        Ok(CovMatrix { dim, data, provenance })
    }

    pub fn scalar(sigma2: f64, provenance: CovProvenance) -> Self {
        CovMatrix { dim: 1, data: vec![sigma2], provenance }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn symmetry_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.dim {
            for j in (i + 1)..self.dim {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn min_eigenvalue(&self) -> f64 {
        min_eig_small(&self.data, self.dim)
    }

    pub fn determinant(&self) -> f64 {
        det_small(&self.data, self.dim)
    }

    pub fn is_positive_definite(&self, tol: f64) -> bool {
        self.min_eigenvalue() > tol
    }

    /// `x^T M^{-1} x`.
    pub fn inverse_quadratic_form(&self, x: &[f64]) -> Result<f64> {
        let sol = solve_small(&self.data, self.dim, x)
            .ok_or_else(|| Error::invalid("singular covariance"))?;
        Ok(x.iter().zip(&sol).map(|(a, b)| a * b).sum())
    }
}

/// Green-Kubo covariance estimate with truncation diagnostics.
#[derive(Clone, Debug)]
pub struct GreenKubo {
    pub cov: CovMatrix,
    /// Largest cross term at the final lag, fiber-averaged.
    pub tail_size: f64,
    /// True when the tail fell below the requested tolerance.
    pub decayed: bool,
}

/// Fiber-averaged summed autocorrelations of the centered observable:
/// the lag-0 second moment plus both orderings of every positive lag,
/// each term computed by pushing `g_i v` forward with the operator cocycle
/// and integrating against `g_j` at the shifted fiber.
pub fn green_kubo(
    sys: &QuenchedSystem,
    centering: &Centering,
    acims: &AcimFamily,
    start: i64,
    n_avg: usize,
    lag_max: usize,
    tail_tol: f64,
) -> Result<GreenKubo> {
    let d = sys.dim();
    let n_bins = sys.n_bins();
    let nf = n_bins as f64;
    let mut acc = vec![0.0f64; d * d];
    let mut tail = 0.0f64;

    let centered_bins = |k: i64| -> Vec<Vec<f64>> {
        let consts = centering.constants_at(sys, k);
        sys.bins_at(k)
            .iter()
            .zip(consts)
            .map(|(col, c)| col.iter().map(|g| g - c).collect())
            .collect()
    };

    for k in start..start + n_avg as i64 {
        let v = &acims.density(k).values;
        let b0 = centered_bins(k);
        for i in 0..d {
            for j in 0..d {
                let term: f64 =
                    (0..n_bins).map(|m| b0[i][m] * b0[j][m] * v[m]).sum::<f64>() / nf;
                acc[i * d + j] += term;
            }
        }
        // pushed vectors u_i = L^{(l)} (g_i v)
        let mut pushed: Vec<Vec<f64>> =
            (0..d).map(|i| (0..n_bins).map(|m| b0[i][m] * v[m]).collect()).collect();
        let mut buf = vec![0.0; n_bins];
        for lag in 1..=lag_max {
            let fiber = k + lag as i64 - 1;
            let op = sys.op_at(fiber);
            for u in pushed.iter_mut() {
                op.apply_into(u, &mut buf);
                std::mem::swap(u, &mut buf);
            }
            let bl = centered_bins(k + lag as i64);
            let mut lag_worst = 0.0f64;
            for i in 0..d {
                for j in 0..d {
                    let cij: f64 =
                        pushed[i].iter().zip(&bl[j]).map(|(u, g)| u * g).sum::<f64>() / nf;
                    let cji: f64 =
                        pushed[j].iter().zip(&bl[i]).map(|(u, g)| u * g).sum::<f64>() / nf;
                    acc[i * d + j] += cij + cji;
                    lag_worst = lag_worst.max(cij.abs().max(cji.abs()));
                }
            }
            if lag == lag_max {
                tail += lag_worst;
            }
        }
    }
    let scale = 1.0 / n_avg as f64;
    for v in acc.iter_mut() {
        *v *= scale;
    }
    // symmetrize away roundoff
    for i in 0..d {
        for j in (i + 1)..d {
            let m = 0.5 * (acc[i * d + j] + acc[j * d + i]);
            acc[i * d + j] = m;
            acc[j * d + i] = m;
        }
    }
    let tail_size = tail * scale;
    Ok(GreenKubo {
        cov: CovMatrix::new(d, acc, CovProvenance::GreenKubo { lag_max })?,
        tail_size,
        decayed: tail_size <= tail_tol,
    })
}

/// Covariance from the Hessian of the growth rate.
pub fn hessian_covariance(report: &CumulantReport, opts: &TwistedOpts) -> CovMatrix {
    let d = report.grad.len();
    let mut data = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            data[i * d + j] = report.hessian[i][j] / report.n as f64;
        }
    }
    CovMatrix { dim: d, data, provenance: CovProvenance::Hessian { radius: opts.contour_radius } }
}

/// Entrywise comparison of two covariance estimates.
#[derive(Clone, Debug)]
pub struct ConsistencyReport {
    pub max_abs_diff: f64,
    pub scale: f64,
    pub rel_diff: f64,
    pub pass: bool,
}

pub fn sigma_consistency(a: &CovMatrix, b: &CovMatrix, rel_tol: f64) -> ConsistencyReport {
    let mut max_abs = 0.0f64;
    let mut scale = 0.0f64;
    for (x, y) in a.data.iter().zip(&b.data) {
        max_abs = max_abs.max((x - y).abs());
        scale = scale.max(x.abs()).max(y.abs());
    }
    let rel = if scale < 1e-12 { 0.0 } else { max_abs / scale };
    ConsistencyReport { max_abs_diff: max_abs, scale, rel_diff: rel, pass: rel <= rel_tol }
}

// ---------------------------------------------------------------------------
// cumulant sources and the convex conjugate

/// Anything that exposes a scaled cumulant generating function with two
/// derivatives. Closed-form sources make the conjugation machinery testable
/// without any dynamics behind it.
pub trait CumulantSource {
    fn dim(&self) -> usize;
    fn value(&self, t: &[f64]) -> Result<f64>;
    fn grad(&self, t: &[f64]) -> Result<Vec<f64>>;
    fn hessian(&self, t: &[f64]) -> Result<Vec<f64>>;
}

/// Gaussian source `t -> t^T S t / 2`.
pub struct QuadraticCgf {
    pub sigma2: Vec<f64>,
    pub dim: usize,
}

impl QuadraticCgf {
    pub fn scalar(sigma2: f64) -> Self {
        QuadraticCgf { sigma2: vec![sigma2], dim: 1 }
    }
}

impl CumulantSource for QuadraticCgf {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, t: &[f64]) -> Result<f64> {
        let d = self.dim;
        let mut acc = 0.0;
        for i in 0..d {
            for j in 0..d {
                acc += t[i] * self.sigma2[i * d + j] * t[j];
            }
        }
        Ok(0.5 * acc)
    }

    fn grad(&self, t: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim;
        Ok((0..d)
            .map(|i| (0..d).map(|j| self.sigma2[i * d + j] * t[j]).sum())
            .collect())
    }

    fn hessian(&self, _t: &[f64]) -> Result<Vec<f64>> {
        Ok(self.sigma2.clone())
    }
}

/// Scalar source `t -> log cosh t` (fair signed coin).
pub struct LogCoshCgf;

impl CumulantSource for LogCoshCgf {
    fn dim(&self) -> usize {
        1
    }

    fn value(&self, t: &[f64]) -> Result<f64> {
        Ok(t[0].cosh().ln())
    }

    fn grad(&self, t: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![t[0].tanh()])
    }

    fn hessian(&self, t: &[f64]) -> Result<Vec<f64>> {
        let c = t[0].cosh();
        Ok(vec![1.0 / (c * c)])
    }
}

/// Contour derivatives of `z -> Pi(base + z u)/n` at `z = 0`.
fn contour_derivs_at(
    sys: &QuenchedSystem,
    centering: &Centering,
    base: &[f64],
    u: &[f64],
    rho: f64,
    start: i64,
    n: usize,
    order: usize,
    opts: &TwistedOpts,
) -> Result<Vec<f64>> {
    use rayon::prelude::*;
    let m = opts.contour_nodes;
    let samples: Result<Vec<Complex64>> = (0..m)
        .into_par_iter()
        .map(|j| {
            let phi = 2.0 * std::f64::consts::PI * j as f64 / m as f64;
            let z = Complex64::from_polar(rho, phi);
            let theta: Vec<Complex64> =
                base.iter().zip(u).map(|(&b, &c)| Complex64::new(b, 0.0) + z * c).collect();
            Ok(pi_trace(sys, centering, &theta, start, n, opts)?.total())
        })
        .collect();
    let samples = samples?;
    let mut out = Vec::with_capacity(order);
    let mut kfact = 1.0;
    for k in 1..=order {
        kfact *= k as f64;
        let mut accum = Complex64::new(0.0, 0.0);
        for (j, f) in samples.iter().enumerate() {
            let phi = -2.0 * std::f64::consts::PI * (k * j) as f64 / m as f64;
            accum += f * Complex64::from_polar(1.0, phi);
        }
        out.push(kfact * (accum / m as f64 / rho.powi(k as i32)).re / n as f64);
    }
    Ok(out)
}

/// Cumulant source backed by the tilted cocycle of a quenched system:
/// `Lambda_n(t) = Pi_{omega,n}(t)/n` with derivatives from local contours.
pub struct CocycleCgf<'a> {
    pub sys: &'a QuenchedSystem,
    pub centering: &'a Centering,
    pub start: i64,
    pub n: usize,
    pub opts: TwistedOpts,
}

impl CocycleCgf<'_> {
    fn local_radius(&self, t: &[f64]) -> Result<f64> {
        let norm = t.iter().map(|x| x * x).sum::<f64>().sqrt();
        let rho = (0.9 * (self.opts.radius - norm)).min(self.opts.contour_radius);
        if rho < 1e-6 {
            return Err(Error::Domain(
                "tilt too close to the analyticity radius for contour derivatives".into(),
            ));
        }
        Ok(rho)
    }
}

impl CumulantSource for CocycleCgf<'_> {
    fn dim(&self) -> usize {
        self.sys.dim()
    }

    fn value(&self, t: &[f64]) -> Result<f64> {
        let theta: Vec<Complex64> = t.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        Ok(pi_trace(self.sys, self.centering, &theta, self.start, self.n, &self.opts)?
            .total()
            .re
            / self.n as f64)
    }

    fn grad(&self, t: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        let rho = self.local_radius(t)?;
        let mut g = vec![0.0; d];
        for i in 0..d {
            let mut u = vec![0.0; d];
            u[i] = 1.0;
            g[i] = contour_derivs_at(
                self.sys, self.centering, t, &u, rho, self.start, self.n, 1, &self.opts,
            )?[0];
        }
        Ok(g)
    }

    fn hessian(&self, t: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        let rho = self.local_radius(t)? / std::f64::consts::SQRT_2;
        let mut h = vec![0.0; d * d];
        for i in 0..d {
            let mut u = vec![0.0; d];
            u[i] = 1.0;
            h[i * d + i] = contour_derivs_at(
                self.sys, self.centering, t, &u, rho, self.start, self.n, 2, &self.opts,
            )?[1];
        }
        for i in 0..d {
            for j in (i + 1)..d {
                let mut up = vec![0.0; d];
                up[i] = 1.0;
                up[j] = 1.0;
                let mut um = vec![0.0; d];
                um[i] = 1.0;
                um[j] = -1.0;
                let dp = contour_derivs_at(
                    self.sys, self.centering, t, &up, rho, self.start, self.n, 2, &self.opts,
                )?[1];
                let dm = contour_derivs_at(
                    self.sys, self.centering, t, &um, rho, self.start, self.n, 2, &self.opts,
                )?[1];
                let mixed = 0.25 * (dp - dm);
                h[i * d + j] = mixed;
                h[j * d + i] = mixed;
            }
        }
        Ok(h)
    }
}

/// Convex conjugate data on a grid of levels.
#[derive(Clone, Debug)]
pub struct RateFunction {
    pub dim: usize,
    pub ball_radius: f64,
    pub xs: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub maximizers: Vec<Vec<f64>>,
    pub clipped: Vec<bool>,
    /// max over probe points of the conjugacy identity defect
    pub duality_residual: f64,
}

impl RateFunction {
    /// CSV rows `x_1..x_d, Lambda_star, t_1..t_d`.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        let xs: Vec<String> = (1..=self.dim).map(|i| format!("x_{i}")).collect();
        let ts: Vec<String> = (1..=self.dim).map(|i| format!("t_{i}")).collect();
        writeln!(w, "{},Lambda_star,{}", xs.join(","), ts.join(","))?;
        for i in 0..self.xs.len() {
            let x: Vec<String> = self.xs[i].iter().map(f64::to_string).collect();
            let t: Vec<String> = self.maximizers[i].iter().map(f64::to_string).collect();
            writeln!(w, "{},{},{}", x.join(","), self.values[i], t.join(","))?;
        }
        Ok(())
    }
}

/// Outcome of one conjugate solve.
#[derive(Clone, Debug)]
pub struct ConjugatePoint {
    pub value: f64,
    pub maximizer: Vec<f64>,
    pub clipped: bool,
}

fn vec_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Maximize `t.x - Lambda(t)` over the closed ball `|t| <= r` by safeguarded
/// Newton with a grid fallback; boundary maximizers are reported as clipped.
pub fn conjugate_at(src: &dyn CumulantSource, r: f64, x: &[f64]) -> Result<ConjugatePoint> {
    let d = src.dim();
    if x.len() != d {
        return Err(Error::Dimension("level has wrong dimension".into()));
    }
    let objective = |t: &[f64]| -> Result<f64> {
        Ok(t.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() - src.value(t)?)
    };
    let mut t = vec![0.0; d];
    let mut phi = objective(&t)?;
    let mut clipped = false;
    let mut converged = false;
    for _ in 0..80 {
        let g: Vec<f64> = src.grad(&t)?.iter().zip(x).map(|(lg, xv)| xv - lg).collect();
        let interior = vec_norm(&t) < r - 1e-12;
        let gnorm = vec_norm(&g);
        if gnorm < 1e-12 * (1.0 + vec_norm(x)) {
            converged = true;
            break;
        }
        if !interior {
            // stationary on the sphere when the gradient points outward
            let radial: f64 = g.iter().zip(&t).map(|(a, b)| a * b).sum::<f64>() / r;
            let tangential: f64 = (gnorm * gnorm - radial * radial).max(0.0).sqrt();
            if radial >= -1e-12 && tangential < 1e-10 * (1.0 + vec_norm(x)) {
                clipped = true;
                converged = true;
                break;
            }
        }
        let h = src.hessian(&t)?;
        let step = match solve_small(&h, d, &g) {
            Some(s) => s,
            None => g.clone(),
        };
        // backtracking onto the ball
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let mut cand: Vec<f64> = t.iter().zip(&step).map(|(a, b)| a + scale * b).collect();
            let norm = vec_norm(&cand);
            if norm > r {
                for c in cand.iter_mut() {
                    *c *= r / norm;
                }
            }
            let phi_c = objective(&cand)?;
            if phi_c >= phi - 1e-15 {
                t = cand;
                phi = phi_c;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if !converged {
        // grid + golden fallback (robust for d = 1, coarse otherwise)
        if d == 1 {
            let (mut lo, mut hi) = (-r, r);
            let golden = 0.5 * (3.0 - 5.0f64.sqrt());
            let mut x1 = lo + golden * (hi - lo);
            let mut x2 = hi - golden * (hi - lo);
            let mut f1 = objective(&[x1])?;
            let mut f2 = objective(&[x2])?;
            for _ in 0..200 {
                if f1 < f2 {
                    lo = x1;
                    x1 = x2;
                    f1 = f2;
                    x2 = hi - golden * (hi - lo);
                    f2 = objective(&[x2])?;
                } else {
                    hi = x2;
                    x2 = x1;
                    f2 = f1;
                    x1 = lo + golden * (hi - lo);
                    f1 = objective(&[x1])?;
                }
                if hi - lo < 1e-13 {
                    break;
                }
            }
            t = vec![0.5 * (lo + hi)];
            phi = objective(&t)?;
            clipped = t[0].abs() > r - 1e-9;
        } else {
            return Err(Error::NoConvergence("conjugate solve stalled".into()));
        }
    }
    Ok(ConjugatePoint { value: phi, maximizer: t, clipped })
}

/// Reject sources whose sampled growth rate is not convex (second
/// differences along the axes must be nonnegative up to noise).
pub fn check_convexity(src: &dyn CumulantSource, r: f64) -> Result<()> {
    let d = src.dim();
    for i in 0..d {
        let mut vals = Vec::new();
        for k in 0..9 {
            let mut t = vec![0.0; d];
            t[i] = -0.9 * r + k as f64 * (1.8 * r) / 8.0;
            vals.push(src.value(&t)?);
        }
        for w in vals.windows(3) {
            if w[0] - 2.0 * w[1] + w[2] < -1e-8 {
                return Err(Error::invalid(
                    "growth rate is not convex on the requested ball; configuration rejected",
                ));
            }
        }
    }
    Ok(())
}

/// Convex conjugate on a grid of levels, with a duality-identity audit at
/// interior probe tilts.
pub fn legendre(src: &dyn CumulantSource, r: f64, x_grid: &[Vec<f64>]) -> Result<RateFunction> {
    check_convexity(src, r)?;
    let d = src.dim();
    let mut values = Vec::with_capacity(x_grid.len());
    let mut maximizers = Vec::with_capacity(x_grid.len());
    let mut clipped = Vec::with_capacity(x_grid.len());
    for x in x_grid {
        let pt = conjugate_at(src, r, x)?;
        values.push(pt.value);
        maximizers.push(pt.maximizer);
        clipped.push(pt.clipped);
    }
    // duality audit: Lambda*(grad Lambda(eta)) = eta . grad Lambda(eta) - Lambda(eta)
    let mut residual = 0.0f64;
    for k in 1..=3 {
        for i in 0..d {
            let mut eta = vec![0.0; d];
            eta[i] = 0.2 * k as f64 * r;
            let g = src.grad(&eta)?;
            let pt = conjugate_at(src, r, &g)?;
            let direct: f64 =
                eta.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() - src.value(&eta)?;
            residual = residual.max((pt.value - direct).abs());
        }
    }
    Ok(RateFunction {
        dim: d,
        ball_radius: r,
        xs: x_grid.to_vec(),
        values,
        maximizers,
        clipped,
        duality_residual: residual,
    })
}

/// Target sets for large-deviation bounds.
#[derive(Clone, Debug)]
pub enum SetSpec {
    /// `{x : lo <= x <= hi}` componentwise.
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// `{x : normal . x >= level}`.
    HalfSpace { normal: Vec<f64>, level: f64 },
    /// Explicit candidate points.
    Points(Vec<Vec<f64>>),
}

/// `inf_{x in A} Lambda*(x)` by grid scan plus golden refinement along the
/// best coordinate line. The infimum of the conjugate over a set containing
/// the mean is zero by convexity.
pub fn ldp_bounds(src: &dyn CumulantSource, r: f64, set: &SetSpec) -> Result<f64> {
    let d = src.dim();
    let eval = |x: &[f64]| -> Result<f64> { Ok(conjugate_at(src, r, x)?.value) };
    match set {
        SetSpec::Points(pts) => {
            if pts.is_empty() {
                return Err(Error::invalid("empty candidate set"));
            }
            let mut best = f64::INFINITY;
            for p in pts {
                best = best.min(eval(p)?);
            }
            Ok(best)
        }
        SetSpec::HalfSpace { normal, level } => {
            if normal.len() != d {
                return Err(Error::Dimension("half-space normal dimension".into()));
            }
            let nn = vec_norm(normal);
            if nn == 0.0 {
                return Err(Error::invalid("zero half-space normal"));
            }
            if *level <= 0.0 {
                // the mean (origin for centered sums) lies in the set
                return Ok(0.0);
            }
            // scan along the normal ray; convexity puts the infimum on the
            // boundary at the point closest to the mean for scalar sets
            let dir: Vec<f64> = normal.iter().map(|v| v / nn).collect();
            let x_at = |s: f64| -> Vec<f64> { dir.iter().map(|v| v * s).collect() };
            let s0 = level / nn;
            let mut best = eval(&x_at(s0))?;
            let mut best_s = s0;
            for k in 1..=8 {
                let s = s0 * (1.0 + 0.25 * k as f64);
                let v = eval(&x_at(s))?;
                if v < best {
                    best = v;
                    best_s = s;
                }
            }
            // golden refinement around the best scan point
            let (mut lo, mut hi) = (best_s * 0.8, best_s * 1.2);
            lo = lo.max(s0);
            for _ in 0..40 {
                let m1 = lo + (hi - lo) / 3.0;
                let m2 = hi - (hi - lo) / 3.0;
                if eval(&x_at(m1))? < eval(&x_at(m2))? {
                    hi = m2;
                } else {
                    lo = m1;
                }
            }
            Ok(best.min(eval(&x_at(0.5 * (lo + hi)))?))
        }
        SetSpec::Box { lo, hi } => {
            if lo.len() != d || hi.len() != d {
                return Err(Error::Dimension("box bounds dimension".into()));
            }
            if lo.iter().zip(hi).any(|(a, b)| a > b) {
                return Err(Error::invalid("empty box"));
            }
            if lo.iter().all(|&a| a <= 0.0) && hi.iter().all(|&b| b >= 0.0) {
                return Ok(0.0);
            }
            // clamp the origin onto the box: convexity puts the infimum there
            // componentwise for product sets
            let closest: Vec<f64> =
                lo.iter().zip(hi).map(|(&a, &b)| 0.0f64.clamp(a, b)).collect();
            let mut best = eval(&closest)?;
            // audit with a coarse lattice in case of anisotropic curvature
            let steps = 4;
            let mut idx = vec![0usize; d];
            loop {
                let x: Vec<f64> = (0..d)
                    .map(|i| lo[i] + (hi[i] - lo[i]) * idx[i] as f64 / steps as f64)
                    .collect();
                best = best.min(eval(&x)?);
                let mut carry = 0;
                loop {
                    idx[carry] += 1;
                    if idx[carry] <= steps {
                        break;
                    }
                    idx[carry] = 0;
                    carry += 1;
                    if carry == d {
                        return Ok(best);
                    }
                }
            }
        }
    }
}

/// One rung of the moderate-deviation scaling curve.
#[derive(Clone, Copy, Debug)]
pub struct MdpPoint {
    pub n: usize,
    /// Scaled trace `Pi_{omega,n}(theta/c_n) * c_n^2 / n` with `c_n = n/a_n`.
    pub value: f64,
}

/// Evaluate the scaled log trace along a ladder of horizons for the speed
/// `a_n = n^exponent`. The curve converges to the Gaussian quadratic form.
pub fn mdp_scaling(
    sys: &QuenchedSystem,
    centering: &Centering,
    theta: &[f64],
    exponent: f64,
    ns: &[usize],
    start: i64,
    opts: &TwistedOpts,
) -> Result<Vec<MdpPoint>> {
    if !(0.5 < exponent && exponent < 1.0) {
        return Err(Error::invalid("moderate-deviation speed needs exponent in (1/2, 1)"));
    }
    let mut out = Vec::with_capacity(ns.len());
    for &n in ns {
        let c_n = (n as f64).powf(1.0 - exponent);
        let theta_n: Vec<Complex64> =
            theta.iter().map(|&t| Complex64::new(t / c_n, 0.0)).collect();
        let total = pi_trace(sys, centering, &theta_n, start, n, opts)?.total().re;
        out.push(MdpPoint { n, value: total * c_n * c_n / n as f64 });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Edgeworth correction

/// First-order distribution correction for self-normalized sums.
#[derive(Clone, Copy, Debug)]
pub struct EdgeworthModel {
    pub n: usize,
    /// Normalizing variance (second trace derivative by default).
    pub sigma_n2: f64,
    /// `(1 - Pi''(0)/sigma_n^2)/2`; zero under the default normalization.
    pub a: f64,
    /// `Pi'''(0)/(6 sigma_n^3)`.
    pub b: f64,
    /// `Pi'''(0)/sigma_n^2`.
    pub u: f64,
}

/// Build the correction model from trace derivatives at 0. The variance is
/// `pi2` unless an empirical override is supplied.
pub fn edgeworth_model(
    pi2: f64,
    pi3: f64,
    n: usize,
    sigma_override: Option<f64>,
) -> Result<EdgeworthModel> {
    let sigma_n2 = sigma_override.unwrap_or(pi2);
    if !(sigma_n2 > 0.0) {
        return Err(Error::invalid("normalizing variance must be positive"));
    }
    let sigma = sigma_n2.sqrt();
    Ok(EdgeworthModel {
        n,
        sigma_n2,
        a: 0.5 * (1.0 - pi2 / sigma_n2),
        b: pi3 / (6.0 * sigma_n2 * sigma),
        u: pi3 / sigma_n2,
    })
}

/// Corrected distribution function
/// `A(t) = Phi(t) + a t phi(t) - b (t^2 - 1) phi(t)`.
///
/// The sign of the cubic-cumulant term is pinned by inverting the
/// characteristic-function correction `e^{-t^2/2} (1 + a t^2 - i b t^3)`
/// numerically (see the Fourier-inversion test): a positive third cumulant
/// must raise the distribution function at the center.
pub fn edgeworth_cdf(model: &EdgeworthModel, t: f64) -> f64 {
    normal_cdf(t) + model.a * t * normal_pdf(t) - model.b * (t * t - 1.0) * normal_pdf(t)
}

// ---------------------------------------------------------------------------
// sharp tail expansion

/// Tilt data for one tail level.
#[derive(Clone, Debug)]
pub struct LdExpansion {
    pub n: usize,
    pub level: f64,
    /// Tilt solving `Pi'(theta)/n = level`.
    pub tilt: f64,
    /// `I(a) = theta a - Pi(theta)/n`.
    pub rate: f64,
    /// `I''(a) = n / Pi''(theta)`.
    pub rate_second: f64,
    /// Stabilized ratio `integral(L^{theta,(m)} v0)/exp(Pi_m)`.
    pub phi: f64,
    /// Step at which the ratio settled.
    pub phi_settled: usize,
    pub newton_residual: f64,
}

impl LdExpansion {
    /// Sharp prefactor `phi sqrt(I'') / (theta sqrt(2 pi n))` for
    /// non-lattice sums.
    pub fn prefactor(&self) -> f64 {
        self.phi * self.rate_second.sqrt()
            / (self.tilt * (2.0 * std::f64::consts::PI * self.n as f64).sqrt())
    }

    /// Window-sum correction `theta h / (1 - exp(-theta h))` for sums on a
    /// lattice of span `h`; reduces to 1 as the span vanishes.
    pub fn lattice_factor(&self, span: f64) -> f64 {
        let th = self.tilt * span;
        th / (-th).exp_m1().abs()
    }

    pub fn prefactor_lattice(&self, span: f64) -> f64 {
        self.prefactor() * self.lattice_factor(span)
    }

    /// Predicted tail probability `exp(-n I(a)) * prefactor`.
    pub fn tail_prediction(&self, lattice_span: Option<f64>) -> f64 {
        let pref = match lattice_span {
            Some(h) if h > 0.0 => self.prefactor_lattice(h),
            _ => self.prefactor(),
        };
        (-(self.n as f64) * self.rate).exp() * pref
    }
}

/// Solve the scalar tilt problem at level `a` and assemble the expansion
/// data. Scalar observables only.
pub fn ld_expansion(
    sys: &QuenchedSystem,
    centering: &Centering,
    v0_start: &StepDensity,
    start: i64,
    n: usize,
    a: f64,
    tilt_max: f64,
    opts: &TwistedOpts,
) -> Result<LdExpansion> {
    if sys.dim() != 1 {
        return Err(Error::Dimension("tail expansion is scalar-only".into()));
    }
    if !(a > 0.0) {
        return Err(Error::invalid("tail level must be positive"));
    }
    let r = tilt_max.min(opts.radius);
    let cgf = CocycleCgf { sys, centering, start, n, opts: *opts };
    // admissibility: the level must be reachable by the tilt derivative,
    // leaving contour headroom inside the ball
    let r = r.min(opts.radius * 0.98);
    let slope_at = |t: f64| -> Result<f64> { Ok(cgf.grad(&[t])?[0]) };
    let top = slope_at(r)?;
    if a > top {
        return Err(Error::Domain(format!(
            "level {a} above the admissible tilt range (max slope {top:.6})"
        )));
    }
    check_convexity(&cgf, r)?;

    // safeguarded Newton on Pi'(theta)/n = a with bracket [0, r]
    let mut lo = 0.0f64;
    let mut hi = r;
    let mut t = (a / cgf.hessian(&[0.0])?[0]).clamp(1e-6, hi);
    let mut residual = f64::INFINITY;
    for _ in 0..60 {
        let fp = slope_at(t)?;
        residual = (fp - a).abs();
        if residual <= 1e-10 {
            break;
        }
        if fp < a {
            lo = t;
        } else {
            hi = t;
        }
        let fpp = cgf.hessian(&[t])?[0];
        let mut cand = t - (fp - a) / fpp;
        if !(cand > lo && cand < hi) {
            cand = 0.5 * (lo + hi);
        }
        t = cand;
    }
    if residual > 1e-10 {
        return Err(Error::NoConvergence(format!(
            "tilt solve stalled with residual {residual:.2e}"
        )));
    }

    let value = cgf.value(&[t])?;
    let second = cgf.hessian(&[t])?[0];
    let path = tilted_path(sys, centering, v0_start, &[t], start, n, false, opts)?;
    let (phi, settled) = path.phi(1e-8);
    Ok(LdExpansion {
        n,
        level: a,
        tilt: t,
        rate: t * a - value,
        rate_second: 1.0 / second,
        phi,
        phi_settled: settled,
        newton_residual: residual,
    })
}

// ---------------------------------------------------------------------------
// concentration

/// Empirical tail point for the concentration fit.
#[derive(Clone, Copy, Debug)]
pub struct ConcPoint {
    pub eps: f64,
    pub n: usize,
    pub p_hat: f64,
}

/// Fitted exponential envelope `p <= 2 d exp(-c2 eps^2 n)`.
#[derive(Clone, Debug)]
pub struct ConcentrationFit {
    pub c1: f64,
    pub c2: f64,
    pub r_squared: f64,
    pub points: Vec<ConcPoint>,
}

/// Fit the envelope constant from empirical tails at offset `c1`. The rate
/// is the smallest log-ratio over the sample, shaved by `margin`, so the
/// bound covers every fitted point by construction; `r_squared` measures how
/// exponential the tails actually are.
pub fn fit_concentration(
    points: &[ConcPoint],
    dim: usize,
    c1: f64,
    margin: f64,
) -> Result<ConcentrationFit> {
    let valid: Vec<&ConcPoint> = points.iter().filter(|p| p.p_hat > 0.0 && p.eps > 0.0).collect();
    if valid.len() < 2 {
        return Err(Error::NoConvergence(
            "not enough positive tail estimates for a concentration fit".into(),
        ));
    }
    let bound_scale = (2.0 * dim as f64).ln();
    let mut c2 = f64::INFINITY;
    let mut reg = Vec::with_capacity(valid.len());
    for p in &valid {
        let x = p.eps * p.eps * p.n as f64;
        let ratio = (bound_scale - p.p_hat.ln()) / x;
        c2 = c2.min(ratio);
        reg.push((x, p.p_hat.ln()));
    }
    if !(c2 > 0.0) {
        return Err(Error::NoConvergence("tails are not exponentially small".into()));
    }
    Ok(ConcentrationFit {
        c1,
        c2: c2 * (1.0 - margin),
        r_squared: r_squared(&reg),
        points: points.to_vec(),
    })
}

/// Envelope value `2 d exp(-c2 eps^2 n)`.
pub fn concentration_bound(eps: f64, n: usize, dim: usize, c2: f64) -> f64 {
    2.0 * dim as f64 * (-c2 * eps * eps * n as f64).exp()
}

// ---------------------------------------------------------------------------
// local window asymptotics

/// Predicted mass of the window `prod [s_c - delta_c, s_c + delta_c]` for an
/// unnormalized sum at horizon `n`:
/// `|J| (2 pi n)^{-d/2} det(S)^{-1/2} exp(-s^T S^{-1} s / (2n))`.
///
/// Lattice-valued observables are refused: their window masses concentrate
/// on an arithmetic progression and no density-style prediction applies.
pub fn lclt_prediction(
    s: &[f64],
    n: usize,
    sigma2: &CovMatrix,
    half_widths: &[f64],
    lattice_span: Option<f64>,
) -> Result<f64> {
    if let Some(h) = lattice_span {
        return Err(Error::Lattice(format!(
            "observable is lattice-valued (span {h}); window asymptotics do not apply"
        )));
    }
    let d = sigma2.dim;
    if s.len() != d || half_widths.len() != d {
        return Err(Error::Dimension("window data does not match the covariance".into()));
    }
    if !sigma2.is_positive_definite(1e-12) {
        return Err(Error::invalid("covariance must be positive definite"));
    }
    let vol: f64 = half_widths.iter().map(|h| 2.0 * h).product();
    let quad = sigma2.inverse_quadratic_form(s)? / (2.0 * n as f64);
    let det = sigma2.determinant();
    Ok(vol * (2.0 * std::f64::consts::PI * n as f64).powf(-0.5 * d as f64) / det.sqrt()
        * (-quad).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base::BaseSystem;
    use crate::maps::{FiberSelector, Observable, PiecewiseAffineMap, Waveform};
    use crate::twisted::{acim_pullback, center_observable};

    fn cramer_conjugate(x: f64) -> f64 {
        // closed form for the fair signed coin
        0.5 * (1.0 + x) * (1.0 + x).ln() + 0.5 * (1.0 - x) * (1.0 - x).ln()
    }

    #[test]
    fn quadratic_source_conjugate_is_gaussian() {
        let src = QuadraticCgf::scalar(0.7);
        for &x in &[0.0, 0.05, 0.1, -0.12] {
            let pt = conjugate_at(&src, 0.5, &[x]).unwrap();
            assert!((pt.value - x * x / (2.0 * 0.7)).abs() < 1e-10, "x={x}");
            assert!((pt.maximizer[0] - x / 0.7).abs() < 1e-8);
        }
    }

    #[test]
    fn log_cosh_conjugate_matches_closed_form() {
        let src = LogCoshCgf;
        let r = 0.5f64;
        let reach = r.tanh();
        for k in 0..10 {
            let x = -0.9 * reach + k as f64 * (1.8 * reach) / 9.0;
            let pt = conjugate_at(&src, r, &[x]).unwrap();
            assert!(!pt.clipped);
            assert!((pt.value - cramer_conjugate(x)).abs() < 1e-9, "x={x}");
            assert!((pt.maximizer[0] - x.atanh()).abs() < 1e-7);
        }
        // at zero: value 0, maximizer 0
        let pt = conjugate_at(&src, r, &[0.0]).unwrap();
        assert!(pt.value.abs() < 1e-12 && pt.maximizer[0].abs() < 1e-9);
        // beyond the reach of the ball: boundary maximizer, clipped flag
        let pt = conjugate_at(&src, r, &[0.9]).unwrap();
        assert!(pt.clipped);
        assert!((pt.maximizer[0].abs() - r).abs() < 1e-9);
    }

    #[test]
    fn legendre_grid_and_duality_audit() {
        let src = LogCoshCgf;
        let grid: Vec<Vec<f64>> = (0..21).map(|k| vec![-0.2 + 0.02 * k as f64]).collect();
        let rf = legendre(&src, 0.5, &grid).unwrap();
        assert!(rf.duality_residual < 1e-8, "residual {}", rf.duality_residual);
        for (x, v) in rf.xs.iter().zip(&rf.values) {
            assert!(*v >= -1e-12);
            assert!((v - cramer_conjugate(x[0])).abs() < 1e-8);
        }
        // convex along the grid
        for w in rf.values.windows(3) {
            assert!(w[0] - 2.0 * w[1] + w[2] >= -1e-9);
        }
    }

    #[test]
    fn non_convex_source_is_rejected() {
        struct Bad;
        impl CumulantSource for Bad {
            fn dim(&self) -> usize {
                1
            }
            fn value(&self, t: &[f64]) -> Result<f64> {
                Ok(-t[0] * t[0])
            }
            fn grad(&self, t: &[f64]) -> Result<Vec<f64>> {
                Ok(vec![-2.0 * t[0]])
            }
            fn hessian(&self, _: &[f64]) -> Result<Vec<f64>> {
                Ok(vec![-2.0])
            }
        }
        assert!(legendre(&Bad, 0.5, &[vec![0.1]]).is_err());
    }

    #[test]
    fn half_space_bounds() {
        let src = LogCoshCgf;
        // containing the mean: zero
        assert_eq!(
            ldp_bounds(&src, 0.5, &SetSpec::HalfSpace { normal: vec![1.0], level: -0.3 }).unwrap(),
            0.0
        );
        // level set {x >= 0.2}: infimum at the boundary by monotonicity
        let v = ldp_bounds(&src, 0.5, &SetSpec::HalfSpace { normal: vec![1.0], level: 0.2 })
            .unwrap();
        assert!((v - cramer_conjugate(0.2)).abs() < 1e-8);
        assert!((v - 0.0201355).abs() < 1e-6);
        // a box containing zero
        let z = ldp_bounds(
            &src,
            0.5,
            &SetSpec::Box { lo: vec![-0.1], hi: vec![0.3] },
        )
        .unwrap();
        assert_eq!(z, 0.0);
    }

    #[test]
    fn edgeworth_closed_form_and_limits() {
        let gaussian = edgeworth_model(1.0, 0.0, 100, None).unwrap();
        for &t in &[-2.0, -0.3, 0.0, 1.1, 2.7] {
            assert!((edgeworth_cdf(&gaussian, t) - normal_cdf(t)).abs() < 1e-15);
        }
        let skewed = edgeworth_model(1.0, 0.5, 100, None).unwrap();
        assert_eq!(skewed.a, 0.0);
        assert!(edgeworth_cdf(&skewed, 40.0) > 1.0 - 1e-12);
        assert!(edgeworth_cdf(&skewed, -40.0) < 1e-12);
        // positive skew raises the center
        assert!(edgeworth_cdf(&skewed, 0.0) > 0.5);
    }

    #[test]
    fn edgeworth_sign_convention_via_fourier_inversion() {
        // invert e^{-t^2/2} (1 + a t^2 - i b t^3) numerically and integrate
        // the resulting density; the closed form must match
        let (a, b) = (0.01, 0.05);
        let model = EdgeworthModel { n: 0, sigma_n2: 1.0, a, b, u: 6.0 * b };
        let density = |x: f64| -> f64 {
            // (1/2pi) int e^{-itx} e^{-t^2/2} (1 + a t^2 - i b t^3) dt
            let mut acc = 0.0;
            let t_max = 12.0;
            let m = 4001;
            let h = 2.0 * t_max / (m - 1) as f64;
            for k in 0..m {
                let t = -t_max + k as f64 * h;
                let w = if k == 0 || k == m - 1 {
                    1.0
                } else if k % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                let envelope = (-0.5 * t * t).exp();
                // real part of e^{-itx} (1 + a t^2 - i b t^3)
                let re = (1.0 + a * t * t) * (t * x).cos() - b * t.powi(3) * (t * x).sin();
                acc += w * envelope * re;
            }
            acc * h / 3.0 / (2.0 * std::f64::consts::PI)
        };
        // CDF by integrating the density from far left
        let mut cdf;
        let x_lo = -10.0;
        let steps = 400;
        for &t in &[-1.0, 0.0, 0.8] {
            cdf = 0.0;
            let h = (t - x_lo) / steps as f64;
            for k in 0..=steps {
                let x = x_lo + k as f64 * h;
                let w = if k == 0 || k == steps { 0.5 } else { 1.0 };
                cdf += w * density(x);
            }
            cdf *= h;
            let closed = edgeworth_cdf(&model, t);
            assert!((cdf - closed).abs() < 1e-4, "t={t}: fourier {cdf} vs closed {closed}");
        }
    }

    #[test]
    fn concentration_fit_and_bound() {
        // ideal Gaussian-type tails: p = 2 exp(-0.5 eps^2 n)
        let pts: Vec<ConcPoint> = [(0.1, 200), (0.15, 200), (0.1, 400), (0.2, 300)]
            .iter()
            .map(|&(eps, n)| ConcPoint {
                eps,
                n,
                p_hat: 2.0 * (-0.5 * eps * eps * n as f64).exp(),
            })
            .collect();
        let fit = fit_concentration(&pts, 1, 0.0, 0.0).unwrap();
        assert!((fit.c2 - 0.5).abs() < 1e-12);
        assert!(fit.r_squared > 0.999);
        for p in &pts {
            assert!(p.p_hat <= concentration_bound(p.eps, p.n, 1, fit.c2) + 1e-12);
        }
        // vacuous at eps = 0 and prefactor doubles with the dimension
        assert_eq!(concentration_bound(0.0, 100, 1, 0.5), 2.0);
        assert_eq!(concentration_bound(0.0, 100, 2, 0.5), 4.0);
    }

    #[test]
    fn lclt_prediction_peak_and_refusal() {
        let sigma2 = CovMatrix::scalar(0.5, CovProvenance::GreenKubo { lag_max: 0 });
        let n = 4096;
        let delta = 2.0;
        let p = lclt_prediction(&[0.0], n, &sigma2, &[delta], None).unwrap();
        let expect = 2.0 * delta / (0.5f64.sqrt() * (2.0 * std::f64::consts::PI * n as f64).sqrt());
        assert!((p - expect).abs() < 1e-15);
        // far centers decay by the Gaussian factor
        let s = (n as f64).sqrt();
        let p_far = lclt_prediction(&[s], n, &sigma2, &[delta], None).unwrap();
        assert!((p_far / p - (-1.0f64).exp()).abs() < 1e-12);
        // lattice refusal
        let err = lclt_prediction(&[0.0], n, &sigma2, &[delta], Some(2.0));
        assert!(matches!(err, Err(Error::Lattice(_))));
    }

    #[test]
    fn green_kubo_anchor_values() {
        // digit observable: unit variance, no correlations
        let base = BaseSystem::iid(vec![1.0, 0.0], 3).unwrap();
        let sel = FiberSelector::Constant(PiecewiseAffineMap::doubling());
        let obs = Observable::scalar(Waveform::Rademacher);
        let sys = QuenchedSystem::new(base, sel, obs, 512, 128, 96).unwrap();
        let acims = acim_pullback(&sys, 0, 80, 1e-12, 16, 256).unwrap();
        let centering = center_observable(&sys, &acims);
        let gk = green_kubo(&sys, &centering, &acims, 0, 16, 32, 1e-10).unwrap();
        assert!((gk.cov.get(0, 0) - 1.0).abs() < 1e-10, "sigma2={}", gk.cov.get(0, 0));
        assert!(gk.decayed);

        // orthogonal pair: diagonal (1/2, 1/2)
        let base = BaseSystem::iid(vec![1.0, 0.0], 3).unwrap();
        let sel = FiberSelector::Constant(PiecewiseAffineMap::doubling());
        let obs = Observable::new(vec![
            crate::maps::Component::plain(Waveform::Cos),
            crate::maps::Component::plain(Waveform::Sin),
        ])
        .unwrap();
        let sys = QuenchedSystem::new(base, sel, obs, 1024, 128, 96).unwrap();
        let acims = acim_pullback(&sys, 0, 80, 1e-12, 16, 256).unwrap();
        let centering = center_observable(&sys, &acims);
        let gk = green_kubo(&sys, &centering, &acims, 0, 8, 24, 1e-8).unwrap();
        assert!((gk.cov.get(0, 0) - 0.5).abs() < 1e-6);
        assert!((gk.cov.get(1, 1) - 0.5).abs() < 1e-6);
        assert!(gk.cov.get(0, 1).abs() < 1e-6);
        assert!(gk.cov.min_eigenvalue() > 0.4);
    }

    #[test]
    fn mdp_scaling_trivial_and_anchor() {
        let base = BaseSystem::iid(vec![1.0, 0.0], 3).unwrap();
        let sel = FiberSelector::Constant(PiecewiseAffineMap::doubling());
        let obs = Observable::scalar(Waveform::Rademacher);
        let sys = QuenchedSystem::new(base, sel, obs, 64, 256, 64).unwrap();
        let centering = Centering::zero(&sys);
        let opts = TwistedOpts::default();
        let zero = mdp_scaling(&sys, &centering, &[0.0], 0.75, &[256, 1024], 0, &opts).unwrap();
        assert!(zero.iter().all(|p| p.value.abs() < 1e-14));
        let curve =
            mdp_scaling(&sys, &centering, &[1.0], 0.75, &[4096, 65536], 0, &opts).unwrap();
        // log cosh Taylor: the scaled value approaches 1/2 from below
        let last = curve.last().unwrap().value;
        assert!((last - 0.5).abs() < 0.01 * 0.5, "last={last}");
    }

    #[test]
    fn ld_expansion_anchor_and_small_level_limit() {
        let base = BaseSystem::iid(vec![1.0, 0.0], 3).unwrap();
        let sel = FiberSelector::Constant(PiecewiseAffineMap::doubling());
        let obs = Observable::scalar(Waveform::Rademacher);
        let sys = QuenchedSystem::new(base, sel, obs, 64, 256, 1200).unwrap();
        let centering = Centering::zero(&sys);
        let opts = TwistedOpts::default();
        let v0 = StepDensity::uniform(64);

        let exp = ld_expansion(&sys, &centering, &v0, 0, 1000, 0.2, 0.5, &opts).unwrap();
        assert!((exp.tilt - 0.2f64.atanh()).abs() < 1e-8);
        assert!((exp.rate - cramer_conjugate(0.2)).abs() < 1e-9);
        assert!((exp.rate_second - 1.0 / (1.0 - 0.04)).abs() < 1e-6);
        assert!((exp.phi - 1.0).abs() < 1e-9);
        assert!(exp.newton_residual < 1e-10);

        // quadratic limit: 2 I(a) Sigma^2 / a^2 -> 1 as a -> 0
        let tiny = ld_expansion(&sys, &centering, &v0, 0, 1000, 0.01, 0.5, &opts).unwrap();
        let ratio = 2.0 * tiny.rate * 1.0 / (0.01f64 * 0.01);
        assert!((ratio - 1.0).abs() < 1e-3, "ratio={ratio}");
    }

    #[test]
    fn ld_expansion_rejects_unreachable_levels() {
        let base = BaseSystem::iid(vec![1.0, 0.0], 3).unwrap();
        let sel = FiberSelector::Constant(PiecewiseAffineMap::doubling());
        let obs = Observable::scalar(Waveform::Rademacher);
        let sys = QuenchedSystem::new(base, sel, obs, 64, 256, 128).unwrap();
        let centering = Centering::zero(&sys);
        let opts = TwistedOpts::default();
        let v0 = StepDensity::uniform(64);
        // tanh(0.5) ~ 0.46: a level of 0.6 is unreachable inside the ball
        assert!(ld_expansion(&sys, &centering, &v0, 0, 100, 0.6, 0.5, &opts).is_err());
    }
}
