//! Tilted transfer-operator cocycles.
//!
//! For a twist parameter `theta` in `C^d` the fiber operator becomes
//! `f -> L(exp(theta . g) f)`. Pulling the cocycle back along the orbit
//! yields the equivariant density family `v_k` (at `theta = 0` the random
//! invariant density), the fiber multipliers `lambda_k`, and the additive
//! log trace `Pi_{omega,n}(theta) = sum_j log lambda_j`, whose derivatives
//! at 0 are the cumulants of the Birkhoff sums. Everything here works on the
//! step-function proxy built by [`crate::ulam`].

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::system::QuenchedSystem;
use crate::ulam::{ComplexStep, StepDensity};

/// Tolerances and budgets for pullbacks and contour derivatives.
#[derive(Clone, Copy, Debug)]
pub struct TwistedOpts {
    /// Twist parameters are accepted only inside this ball.
    pub radius: f64,
    /// Radius of the contour used for derivatives at 0.
    pub contour_radius: f64,
    /// Trapezoidal nodes on the contour.
    pub contour_nodes: usize,
    /// Initial pullback depth.
    pub depth: usize,
    /// Hard ceiling for adaptive deepening.
    pub max_depth: usize,
    /// Cauchy-difference tolerance for fiber multipliers.
    pub tol: f64,
}

impl Default for TwistedOpts {
    fn default() -> Self {
        TwistedOpts {
            radius: 0.5,
            contour_radius: 0.25,
            contour_nodes: 32,
            depth: 96,
            max_depth: 8192,
            tol: 1e-11,
        }
    }
}

fn theta_norm(theta: &[Complex64]) -> f64 {
    theta.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Equivariant density family along an orbit window.
#[derive(Clone, Debug)]
pub struct AcimFamily {
    start: i64,
    densities: Vec<StepDensity>,
    residuals: Vec<f64>,
    depth: usize,
}

impl AcimFamily {
    pub fn window(&self) -> (i64, i64) {
        (self.start, self.start + self.densities.len() as i64 - 1)
    }

    pub fn density(&self, k: i64) -> &StepDensity {
        let (lo, hi) = self.window();
        assert!((lo..=hi).contains(&k), "fiber {k} outside acim window [{lo}, {hi}]");
        &self.densities[(k - self.start) as usize]
    }

    /// Per-fiber equivariance defects `|L_k v_k - v_{k+1}|_1`.
    pub fn residuals(&self) -> &[f64] {
        &self.residuals
    }

    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().fold(0.0f64, |m, r| m.max(*r))
    }

    /// Smallest bin value over the family (lower-bound proxy).
    pub fn essinf(&self) -> f64 {
        self.densities.iter().map(|d| d.min_value()).fold(f64::INFINITY, f64::min)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    fn all_equal(&self, tol: f64) -> bool {
        let first = &self.densities[0];
        self.densities.iter().all(|d| {
            d.values.iter().zip(&first.values).all(|(a, b)| (a - b).abs() <= tol)
        })
    }
}

/// Invariant densities for fibers `start ..= start+len` by pulling the flat
/// density forward `depth` steps from the past. The depth doubles until the
/// worst equivariance residual is below `tol` (or `max_depth` is hit, which
/// signals a configuration without the expected uniform contraction).
pub fn acim_pullback(
    sys: &QuenchedSystem,
    start: i64,
    len: usize,
    tol: f64,
    depth0: usize,
    max_depth: usize,
) -> Result<AcimFamily> {
    let n = sys.n_bins();
    let (wlo, _) = sys.orbit().window();
    let mut depth = depth0.max(2);
    loop {
        if start - (depth as i64) < wlo {
            return Err(Error::invalid(format!(
                "orbit window too short for pullback depth {depth} before fiber {start}"
            )));
        }
        let densities: Vec<StepDensity> = (0..=len)
            .into_par_iter()
            .map(|off| {
                let k = start + off as i64;
                let mut cur = vec![1.0; n];
                let mut next = vec![0.0; n];
                for j in (k - depth as i64)..k {
                    sys.op_at(j).apply_into(&cur, &mut next);
                    std::mem::swap(&mut cur, &mut next);
                }
                StepDensity::from_values(cur)
            })
            .collect();
        let mut residuals = Vec::with_capacity(len);
        let mut worst = 0.0f64;
        let mut buf = vec![0.0; n];
        for k in 0..len {
            sys.op_at(start + k as i64).apply_into(&densities[k].values, &mut buf);
            let r = buf
                .iter()
                .zip(&densities[k + 1].values)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / n as f64;
            residuals.push(r);
            worst = worst.max(r);
        }
        if worst <= tol || len == 0 {
            return Ok(AcimFamily { start, densities, residuals, depth });
        }
        if depth >= max_depth {
            return Err(Error::NoConvergence(format!(
                "equivariance residual {worst:.3e} above {tol:.1e} at depth {max_depth}"
            )));
        }
        depth = (depth * 2).min(max_depth);
    }
}

/// Comparison of a computed invariant density against a two-plateau profile
/// with a single jump. Per-bin statistics skip the bins straddling the jump;
/// the L1 distance is global.
#[derive(Clone, Debug)]
pub struct PlateauMatch {
    pub hi_median_dev: f64,
    pub lo_median_dev: f64,
    pub l1: f64,
    deviations: Vec<f64>,
}

impl PlateauMatch {
    /// Fraction of plateau bins whose absolute deviation is below `tol`.
    pub fn fraction_within(&self, tol: f64) -> f64 {
        if self.deviations.is_empty() {
            return 1.0;
        }
        self.deviations.iter().filter(|d| **d < tol).count() as f64
            / self.deviations.len() as f64
    }
}

pub fn parry_match_report(
    values: &[f64],
    jump_bin: usize,
    hi_plateau: f64,
    lo_plateau: f64,
) -> PlateauMatch {
    let n = values.len();
    let median = |mut xs: Vec<f64>| -> f64 {
        xs.sort_unstable_by(f64::total_cmp);
        xs[xs.len() / 2]
    };
    let hi_vals: Vec<f64> =
        values.iter().take(jump_bin.saturating_sub(1)).copied().collect();
    let lo_vals: Vec<f64> = values.iter().skip(jump_bin + 2).copied().collect();
    let mut deviations = Vec::with_capacity(n);
    let mut l1 = 0.0;
    for (i, &v) in values.iter().enumerate() {
        let target = if i < jump_bin { hi_plateau } else { lo_plateau };
        let dev = (v - target).abs();
        l1 += dev;
        if i + 1 < jump_bin || i > jump_bin + 1 {
            deviations.push(dev);
        }
    }
    PlateauMatch {
        hi_median_dev: (median(hi_vals) - hi_plateau).abs(),
        lo_median_dev: (median(lo_vals) - lo_plateau).abs(),
        l1: l1 / n as f64,
        deviations,
    }
}

/// Fiberwise centering constants for an observable: `c_k = integral of g
/// against the invariant density of fiber k`.
#[derive(Clone, Debug)]
pub struct Centering {
    start: i64,
    /// `[fiber][component]`
    per_fiber: Vec<Vec<f64>>,
    /// Present when the constants only depend on the fiber symbol; enables
    /// weight caching and unbounded windows.
    by_symbol: Option<Vec<Vec<f64>>>,
}

impl Centering {
    /// No centering (raw observable).
    pub fn zero(sys: &QuenchedSystem) -> Self {
        let alphabet = sys.orbit().base().alphabet_size();
        Centering {
            start: 0,
            per_fiber: Vec::new(),
            by_symbol: Some(vec![vec![0.0; sys.dim()]; alphabet]),
        }
    }

    pub fn constants_at<'a>(&'a self, sys: &QuenchedSystem, k: i64) -> &'a [f64] {
        if let Some(by_symbol) = &self.by_symbol {
            return &by_symbol[sys.symbol(k)];
        }
        let idx = k - self.start;
        assert!(
            (0..self.per_fiber.len() as i64).contains(&idx),
            "fiber {k} outside centering window"
        );
        &self.per_fiber[idx as usize]
    }

    pub fn is_symbol_pure(&self) -> bool {
        self.by_symbol.is_some()
    }
}

/// Subtract the fiberwise mean of each component, so the centered values
/// integrate to zero against every fiber density in the family window.
pub fn center_observable(sys: &QuenchedSystem, acims: &AcimFamily) -> Centering {
    let (lo, hi) = acims.window();
    let n = sys.n_bins() as f64;
    let d = sys.dim();
    let per_fiber: Vec<Vec<f64>> = (lo..=hi)
        .map(|k| {
            let bins = sys.bins_at(k);
            let v = &acims.density(k).values;
            (0..d)
                .map(|c| bins[c].iter().zip(v).map(|(g, w)| g * w).sum::<f64>() / n)
                .collect()
        })
        .collect();

    // constants collapse onto symbols when the densities coincide
    let by_symbol = if acims.all_equal(1e-12) {
        let alphabet = sys.orbit().base().alphabet_size();
        let mut per_sym: Vec<Option<Vec<f64>>> = vec![None; alphabet];
        for (i, k) in (lo..=hi).enumerate() {
            per_sym[sys.symbol(k)].get_or_insert_with(|| per_fiber[i].clone());
        }
        // symbols never visited in the window: integrate against the shared density
        let shared = &acims.density(lo).values;
        let filled: Vec<Vec<f64>> = per_sym
            .into_iter()
            .enumerate()
            .map(|(s, slot)| {
                slot.unwrap_or_else(|| {
                    let bins = &sys.bins_at_symbol(s);
                    (0..d)
                        .map(|c| bins[c].iter().zip(shared).map(|(g, w)| g * w).sum::<f64>() / n)
                        .collect()
                })
            })
            .collect();
        Some(filled)
    } else {
        None
    };

    Centering { start: lo, per_fiber, by_symbol }
}

/// Lazily-built twisted weight vectors `w_i = exp(theta . (g_i - c))` for a
/// fixed `theta`, cached per symbol when the centering allows it.
pub struct WeightCache<'a> {
    sys: &'a QuenchedSystem,
    centering: &'a Centering,
    theta: Vec<Complex64>,
    per_symbol: Vec<Option<Vec<Complex64>>>,
    scratch: Vec<Complex64>,
}

impl<'a> WeightCache<'a> {
    pub fn new(sys: &'a QuenchedSystem, centering: &'a Centering, theta: &[Complex64]) -> Result<Self> {
        if theta.len() != sys.dim() {
            return Err(Error::Dimension(format!(
                "twist has {} components, observable has {}",
                theta.len(),
                sys.dim()
            )));
        }
        let alphabet = sys.orbit().base().alphabet_size();
        Ok(WeightCache {
            sys,
            centering,
            theta: theta.to_vec(),
            per_symbol: vec![None; alphabet],
            scratch: Vec::new(),
        })
    }

    fn compute(
        theta: &[Complex64],
        bins: &[Vec<f64>],
        consts: &[f64],
        out: &mut Vec<Complex64>,
    ) {
        let n = bins[0].len();
        out.clear();
        out.resize(n, Complex64::new(0.0, 0.0));
        for (c, th) in theta.iter().enumerate() {
            let cc = consts[c];
            for (slot, g) in out.iter_mut().zip(&bins[c]) {
                *slot += th * (g - cc);
            }
        }
        for slot in out.iter_mut() {
            *slot = slot.exp();
        }
    }

    /// Weight vector for fiber `k`.
    pub fn at(&mut self, k: i64) -> &[Complex64] {
        if self.centering.is_symbol_pure() {
            let s = self.sys.symbol(k);
            if self.per_symbol[s].is_none() {
                let mut out = Vec::new();
                Self::compute(
                    &self.theta,
                    self.sys.bins_at(k),
                    self.centering.constants_at(self.sys, k),
                    &mut out,
                );
                self.per_symbol[s] = Some(out);
            }
            self.per_symbol[s].as_deref().expect("cached above")
        } else {
            let consts = self.centering.constants_at(self.sys, k).to_vec();
            let mut out = std::mem::take(&mut self.scratch);
            Self::compute(&self.theta, self.sys.bins_at(k), &consts, &mut out);
            self.scratch = out;
            &self.scratch
        }
    }
}

/// One tilted application `L_k(w . f)`.
pub fn twisted_apply(
    sys: &QuenchedSystem,
    centering: &Centering,
    theta: &[Complex64],
    k: i64,
    f: &ComplexStep,
) -> Result<ComplexStep> {
    if f.len() != sys.n_bins() {
        return Err(Error::Dimension("step function does not match the partition".into()));
    }
    let mut cache = WeightCache::new(sys, centering, theta)?;
    let mut out = vec![Complex64::new(0.0, 0.0); sys.n_bins()];
    sys.op_at(k).apply_weighted_into(cache.at(k), &f.values, &mut out);
    Ok(ComplexStep { values: out })
}

/// Fiber multiplier and equivariant density at one fiber.
#[derive(Clone, Debug)]
pub struct FiberEigen {
    pub lambda: Complex64,
    pub density: ComplexStep,
    pub depth: usize,
}

fn pullback_once(
    sys: &QuenchedSystem,
    cache: &mut WeightCache<'_>,
    k: i64,
    depth: usize,
) -> Result<(Complex64, ComplexStep)> {
    let n = sys.n_bins();
    let (wlo, _) = sys.orbit().window();
    if k - (depth as i64) < wlo {
        return Err(Error::invalid(format!(
            "orbit window too short for twisted pullback depth {depth} before fiber {k}"
        )));
    }
    let mut cur = vec![Complex64::new(1.0, 0.0); n];
    let mut next = vec![Complex64::new(0.0, 0.0); n];
    for j in (k - depth as i64)..k {
        sys.op_at(j).apply_weighted_into(cache.at(j), &cur, &mut next);
        std::mem::swap(&mut cur, &mut next);
        let mass = cur.iter().sum::<Complex64>() / n as f64;
        if mass.norm() < 1e-12 {
            return Err(Error::NoConvergence(
                "twisted pullback mass collapsed; twist is outside the perturbative regime".into(),
            ));
        }
        let inv = 1.0 / mass;
        for v in cur.iter_mut() {
            *v *= inv;
        }
    }
    // multiplier of the next application at fiber k
    sys.op_at(k).apply_weighted_into(cache.at(k), &cur, &mut next);
    let lambda = next.iter().sum::<Complex64>() / n as f64;
    Ok((lambda, ComplexStep { values: cur }))
}

/// Equivariant density `v_k` (complex, integral 1) and multiplier
/// `lambda_k = integral of L_k^theta v_k`, computed by twisted pullback with
/// an adaptive depth validated by a Cauchy difference.
pub fn fiber_lambda(
    sys: &QuenchedSystem,
    centering: &Centering,
    theta: &[Complex64],
    k: i64,
    opts: &TwistedOpts,
) -> Result<FiberEigen> {
    if theta_norm(theta) > opts.radius + 1e-12 {
        return Err(Error::Domain(format!(
            "twist norm {} exceeds the analyticity radius {}",
            theta_norm(theta),
            opts.radius
        )));
    }
    let mut cache = WeightCache::new(sys, centering, theta)?;
    let mut depth = opts.depth.max(4);
    loop {
        let (lambda, density) = pullback_once(sys, &mut cache, k, depth)?;
        let (lambda_deep, density_deep) = pullback_once(sys, &mut cache, k, depth + depth / 2)?;
        if (lambda - lambda_deep).norm() <= opts.tol {
            return Ok(FiberEigen { lambda: lambda_deep, density: density_deep, depth });
        }
        let _ = (lambda, density);
        if depth >= opts.max_depth {
            return Err(Error::NoConvergence(format!(
                "fiber multiplier did not stabilize to {:.1e} at depth {depth}",
                opts.tol
            )));
        }
        depth = (depth * 2).min(opts.max_depth);
    }
}

/// Additive log trace along fibers `start .. start+n`.
#[derive(Clone, Debug)]
pub struct PiTrace {
    pub start: i64,
    pub increments: Vec<Complex64>,
}

impl PiTrace {
    pub fn total(&self) -> Complex64 {
        self.increments.iter().sum()
    }

    pub fn partial(&self, len: usize) -> Complex64 {
        self.increments[..len].iter().sum()
    }
}

fn principal_log_increment(lambda: Complex64) -> Result<Complex64> {
    if lambda.norm() < 1e-300 {
        return Err(Error::NoConvergence("fiber multiplier vanished".into()));
    }
    let inc = lambda.ln();
    if inc.im.abs() >= std::f64::consts::PI * (1.0 - 1e-9) {
        return Err(Error::BranchJump(format!(
            "fiber log increment {:.3}+{:.3}i too close to the principal cut",
            inc.re, inc.im
        )));
    }
    Ok(inc)
}

/// `Pi_{omega,n}(theta)` with per-fiber increments, branch-tracked by
/// keeping every increment inside the principal strip.
pub fn pi_trace(
    sys: &QuenchedSystem,
    centering: &Centering,
    theta: &[Complex64],
    start: i64,
    n: usize,
    opts: &TwistedOpts,
) -> Result<PiTrace> {
    if theta_norm(theta) > opts.radius + 1e-12 {
        return Err(Error::Domain(format!(
            "twist norm {} exceeds the analyticity radius {}",
            theta_norm(theta),
            opts.radius
        )));
    }
    // autonomous stretch: one multiplier serves every fiber
    if n > 0 && sys.is_autonomous_on(start - opts.depth as i64, start + n as i64) {
        let eigen = fiber_lambda(sys, centering, theta, start, opts)?;
        let inc = principal_log_increment(eigen.lambda)?;
        return Ok(PiTrace { start, increments: vec![inc; n] });
    }

    let eigen = fiber_lambda(sys, centering, theta, start, opts)?;
    let mut cache = WeightCache::new(sys, centering, theta)?;
    let n_bins = sys.n_bins();
    let mut cur = eigen.density.values;
    let mut next = vec![Complex64::new(0.0, 0.0); n_bins];
    let mut increments = Vec::with_capacity(n);
    for j in start..start + n as i64 {
        sys.op_at(j).apply_weighted_into(cache.at(j), &cur, &mut next);
        let lambda = next.iter().sum::<Complex64>() / n_bins as f64;
        increments.push(principal_log_increment(lambda)?);
        let inv = 1.0 / lambda;
        std::mem::swap(&mut cur, &mut next);
        for v in cur.iter_mut() {
            *v *= inv;
        }
    }
    Ok(PiTrace { start, increments })
}

/// Growth-rate samples over a real twist grid.
#[derive(Clone, Debug)]
pub struct LambdaGrid {
    /// Grid points, one `Vec<f64>` of length `d` per row.
    pub thetas: Vec<Vec<f64>>,
    /// Birkhoff average of `log |lambda|` per grid point.
    pub values: Vec<f64>,
    /// Fiber-average standard error of the log multipliers.
    pub std_errors: Vec<f64>,
    /// Fiber-averaged multiplier (real and imaginary parts).
    pub mean_lambdas: Vec<Complex64>,
    pub orbit_len: usize,
}

impl LambdaGrid {
    /// CSV rows `theta_1..theta_d, re_lambda, im_lambda, Lambda`.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        let d = self.thetas.first().map_or(1, Vec::len);
        let names: Vec<String> = (1..=d).map(|i| format!("theta_{i}")).collect();
        writeln!(w, "{},re_lambda,im_lambda,Lambda", names.join(","))?;
        for (i, th) in self.thetas.iter().enumerate() {
            let coords: Vec<String> = th.iter().map(f64::to_string).collect();
            writeln!(
                w,
                "{},{},{},{}",
                coords.join(","),
                self.mean_lambdas[i].re,
                self.mean_lambdas[i].im,
                self.values[i]
            )?;
        }
        Ok(())
    }
}

/// Evaluate the average growth rate `Lambda(theta) ~ Pi_{omega,n}(theta)/n`
/// over a real grid, in parallel across grid points.
pub fn lambda_grid(
    sys: &QuenchedSystem,
    centering: &Centering,
    grid: &[Vec<f64>],
    start: i64,
    n: usize,
    opts: &TwistedOpts,
) -> Result<LambdaGrid> {
    let rows: Result<Vec<(f64, f64, Complex64)>> = grid
        .par_iter()
        .map(|th| {
            let theta: Vec<Complex64> = th.iter().map(|&t| Complex64::new(t, 0.0)).collect();
            let trace = pi_trace(sys, centering, &theta, start, n, opts)?;
            let vals: Vec<f64> = trace.increments.iter().map(|z| z.re).collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let se = (var / n as f64).sqrt();
            let mean_lambda =
                trace.increments.iter().map(|z| z.exp()).sum::<Complex64>() / n as f64;
            Ok((mean, se, mean_lambda))
        })
        .collect();
    let rows = rows?;
    Ok(LambdaGrid {
        thetas: grid.to_vec(),
        values: rows.iter().map(|r| r.0).collect(),
        std_errors: rows.iter().map(|r| r.1).collect(),
        mean_lambdas: rows.iter().map(|r| r.2).collect(),
        orbit_len: n,
    })
}

/// Derivatives at 0 of `z -> Pi_{omega,n}(z u)` for a real direction `u`,
/// from a trapezoidal Cauchy contour of radius `opts.contour_radius`.
/// Returns `[f'(0), f''(0), ..., f^(order)(0)]`.
pub fn directional_derivs(
    sys: &QuenchedSystem,
    centering: &Centering,
    u: &[f64],
    start: i64,
    n: usize,
    order: usize,
    opts: &TwistedOpts,
) -> Result<Vec<f64>> {
    let m = opts.contour_nodes;
    let r = opts.contour_radius;
    let unorm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    if r * unorm > opts.radius {
        return Err(Error::Domain("contour leaves the analyticity ball".into()));
    }
    let samples: Result<Vec<Complex64>> = (0..m)
        .into_par_iter()
        .map(|j| {
            let phi = 2.0 * std::f64::consts::PI * j as f64 / m as f64;
            let z = Complex64::from_polar(r, phi);
            let theta: Vec<Complex64> = u.iter().map(|&c| z * c).collect();
            Ok(pi_trace(sys, centering, &theta, start, n, opts)?.total())
        })
        .collect();
    let samples = samples?;
    let mut out = Vec::with_capacity(order);
    let mut kfact = 1.0;
    for k in 1..=order {
        kfact *= k as f64;
        let mut acc = Complex64::new(0.0, 0.0);
        for (j, f) in samples.iter().enumerate() {
            let phi = -2.0 * std::f64::consts::PI * (k * j) as f64 / m as f64;
            acc += f * Complex64::from_polar(1.0, phi);
        }
        let coeff = acc / m as f64 / r.powi(k as i32);
        out.push(kfact * coeff.re);
    }
    Ok(out)
}

/// Cumulant data of the log trace at 0: gradient, Hessian (via polarization
/// of directional second derivatives) and diagonal third derivatives, plus
/// a finite-difference cross-check of the Hessian diagonal.
#[derive(Clone, Debug)]
pub struct CumulantReport {
    pub n: usize,
    pub grad: Vec<f64>,
    pub hessian: Vec<Vec<f64>>,
    pub third_diag: Vec<f64>,
    /// max relative disagreement between contour and Richardson-extrapolated
    /// central differences on the Hessian diagonal
    pub fd_reldiff: f64,
}

pub fn cumulant_report(
    sys: &QuenchedSystem,
    centering: &Centering,
    start: i64,
    n: usize,
    opts: &TwistedOpts,
) -> Result<CumulantReport> {
    let d = sys.dim();
    let mut grad = vec![0.0; d];
    let mut hessian = vec![vec![0.0; d]; d];
    let mut third_diag = vec![0.0; d];
    let mut fd_reldiff = 0.0f64;

    let real_pi = |t: &[f64]| -> Result<f64> {
        let theta: Vec<Complex64> = t.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        Ok(pi_trace(sys, centering, &theta, start, n, opts)?.total().re)
    };

    for i in 0..d {
        let mut u = vec![0.0; d];
        u[i] = 1.0;
        let derivs = directional_derivs(sys, centering, &u, start, n, 3, opts)?;
        grad[i] = derivs[0];
        hessian[i][i] = derivs[1];
        third_diag[i] = derivs[2];

        // Richardson-extrapolated central second difference along u
        let h = (opts.contour_radius * 0.2).min(opts.radius * 0.2);
        let fd = |hh: f64| -> Result<f64> {
            let mut plus = vec![0.0; d];
            let mut minus = vec![0.0; d];
            plus[i] = hh;
            minus[i] = -hh;
            Ok((real_pi(&plus)? + real_pi(&minus)?) / (hh * hh))
        };
        let d2 = (4.0 * fd(h / 2.0)? - fd(h)?) / 3.0;
        let scale = derivs[1].abs().max(1e-9 * n as f64);
        fd_reldiff = fd_reldiff.max((d2 - derivs[1]).abs() / scale);
    }

    // mixed entries by polarization: 4 H_ij = D^2_{e_i+e_j} - D^2_{e_i-e_j}
    for i in 0..d {
        for j in (i + 1)..d {
            let mut up = vec![0.0; d];
            up[i] = 1.0;
            up[j] = 1.0;
            let mut um = vec![0.0; d];
            um[i] = 1.0;
            um[j] = -1.0;
            let dp = directional_derivs(sys, centering, &up, start, n, 2, opts)?[1];
            let dm = directional_derivs(sys, centering, &um, start, n, 2, opts)?[1];
            let mixed = 0.25 * (dp - dm);
            hessian[i][j] = mixed;
            hessian[j][i] = mixed;
        }
    }

    if fd_reldiff > 1e-3 {
        return Err(Error::NoConvergence(format!(
            "contour and finite-difference Hessians disagree by {fd_reldiff:.2e}; \
             shrink the contour radius"
        )));
    }

    Ok(CumulantReport { n, grad, hessian, third_diag, fd_reldiff })
}

/// Estimated exponential growth rate of the purely oscillatory cocycle
/// `L^{i t}` in the `|f|_1 + var` norm: `(1/n) log |L^{it,(n)} f|` maximized
/// over the flat function and `trials` random probes. A rate pinned at 0
/// flags an arithmetic obstruction (lattice-valued sums); a negative rate
/// supports local-limit window asymptotics.
pub fn twisted_norm_growth(
    sys: &QuenchedSystem,
    centering: &Centering,
    t: &[f64],
    start: i64,
    n: usize,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    if t.len() != sys.dim() {
        return Err(Error::Dimension("probe frequency must match the observable dimension".into()));
    }
    let theta: Vec<Complex64> = t.iter().map(|&x| Complex64::new(0.0, x)).collect();
    let mut cache = WeightCache::new(sys, centering, &theta)?;
    let n_bins = sys.n_bins();
    let mut best = f64::NEG_INFINITY;
    for trial in 0..=trials {
        let mut cur: Vec<Complex64> = if trial == 0 {
            vec![Complex64::new(1.0, 0.0); n_bins]
        } else {
            let mut rng = CounterRng::keyed(seed, trial as u64);
            (0..n_bins).map(|_| Complex64::new(rng.range_f64(-1.0, 1.0), 0.0)).collect()
        };
        let norm0 = ComplexStep { values: cur.clone() }.bv_norm();
        if norm0 <= 0.0 {
            continue;
        }
        let inv = Complex64::new(1.0 / norm0, 0.0);
        for v in cur.iter_mut() {
            *v *= inv;
        }
        let mut log_growth = 0.0;
        let mut next = vec![Complex64::new(0.0, 0.0); n_bins];
        let mut dead = false;
        for j in start..start + n as i64 {
            sys.op_at(j).apply_weighted_into(cache.at(j), &cur, &mut next);
            std::mem::swap(&mut cur, &mut next);
            let norm = ComplexStep { values: cur.clone() }.bv_norm();
            if norm < 1e-280 {
                dead = true;
                break;
            }
            log_growth += norm.ln();
            let inv = Complex64::new(1.0 / norm, 0.0);
            for v in cur.iter_mut() {
                *v *= inv;
            }
        }
        let rate = if dead { f64::NEG_INFINITY } else { log_growth / n as f64 };
        best = best.max(rate);
    }
    Ok(best)
}

/// Real-tilt cocycle pass retaining the per-step pushforwards of the
/// invariant density; powers sharp-tail prefactors and tilted sampling.
#[derive(Clone, Debug)]
pub struct TiltedPath {
    pub start: i64,
    pub theta: Vec<f64>,
    /// `log lambda_j` along fibers `start..start+n`.
    pub log_lambdas: Vec<f64>,
    /// `u_j ~ L^{theta,(j)} v0`, each normalized to integral 1
    /// (`j = 0..=n`); empty unless requested.
    pub step_densities: Vec<StepDensity>,
    /// Ratio `integral(L^{theta,(m)} v0) / exp(Pi_m)` per step.
    pub phi_history: Vec<f64>,
}

impl TiltedPath {
    pub fn pi_total(&self) -> f64 {
        self.log_lambdas.iter().sum()
    }

    /// Stabilized eigenfunctional ratio with its settling index.
    pub fn phi(&self, tol: f64) -> (f64, usize) {
        let last = *self.phi_history.last().unwrap_or(&1.0);
        let mut settled = self.phi_history.len();
        for (i, v) in self.phi_history.iter().enumerate() {
            if (v - last).abs() <= tol {
                settled = i;
                break;
            }
        }
        (last, settled)
    }
}

pub fn tilted_path(
    sys: &QuenchedSystem,
    centering: &Centering,
    v0_start: &StepDensity,
    theta: &[f64],
    start: i64,
    n: usize,
    keep_densities: bool,
    opts: &TwistedOpts,
) -> Result<TiltedPath> {
    let theta_c: Vec<Complex64> = theta.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    if theta_norm(&theta_c) > opts.radius + 1e-12 {
        return Err(Error::Domain("tilt outside the analyticity ball".into()));
    }
    let n_bins = sys.n_bins();
    if v0_start.len() != n_bins {
        return Err(Error::Dimension("density does not match the partition".into()));
    }
    // real weights per fiber
    let mut cache = WeightCache::new(sys, centering, &theta_c)?;
    fn real_weights(cache: &mut WeightCache<'_>, k: i64) -> Vec<f64> {
        cache.at(k).iter().map(|z| z.re).collect()
    }

    // eigen-direction warmup for the multipliers
    let eigen = fiber_lambda(sys, centering, &theta_c, start, opts)?;
    let mut v: Vec<f64> = eigen.density.values.iter().map(|z| z.re).collect();

    let mut w = v0_start.values.clone();
    let mut log_lambdas = Vec::with_capacity(n);
    let mut phi_history = Vec::with_capacity(n + 1);
    let mut step_densities = Vec::new();
    let mass0 = w.iter().sum::<f64>() / n_bins as f64;
    phi_history.push(mass0);
    if keep_densities {
        let mut d = StepDensity::from_values(w.clone());
        d.normalize()?;
        step_densities.push(d);
    }

    let mut next = vec![0.0; n_bins];
    for j in start..start + n as i64 {
        let weights = real_weights(&mut cache, j);
        let op = sys.op_at(j);
        op.apply_weighted_real_into(&weights, &v, &mut next);
        let lambda = next.iter().sum::<f64>() / n_bins as f64;
        if lambda <= 0.0 {
            return Err(Error::NoConvergence("real tilt lost positivity".into()));
        }
        log_lambdas.push(lambda.ln());
        std::mem::swap(&mut v, &mut next);
        for x in v.iter_mut() {
            *x /= lambda;
        }

        op.apply_weighted_real_into(&weights, &w, &mut next);
        std::mem::swap(&mut w, &mut next);
        for x in w.iter_mut() {
            *x /= lambda;
        }
        phi_history.push(w.iter().sum::<f64>() / n_bins as f64);
        if keep_densities {
            let mut d = StepDensity::from_values(w.clone());
            d.normalize()?;
            step_densities.push(d);
        }
    }

    Ok(TiltedPath { start, theta: theta.to_vec(), log_lambdas, step_densities, phi_history })
}
