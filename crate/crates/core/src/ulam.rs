//! Step densities on a uniform partition and discretized transfer operators.
//!
//! The function space proxy is the lattice of step functions on `n` equal
//! half-open bins. The norm is `|f|_1 + var(f)` with
//! `var(f) = sum |f_i - f_{i-1}|`, the discrete analogue of total variation
//! on `[0,1]`. Operator entries are exact interval intersections of branch
//! images with bins, so the only approximation in the whole pipeline is the
//! partition itself.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::maps::PiecewiseAffineMap;
use crate::rng::CounterRng;

/// A uniform partition of `[0,1)` into `n >= 2` half-open bins.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Partition {
    n: usize,
}

impl Partition {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid(format!("partition needs n >= 2 bins, got {n}")));
        }
        Ok(Partition { n })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn bin_of(&self, x: f64) -> usize {
        ((x * self.n as f64) as usize).min(self.n - 1)
    }

    #[inline]
    pub fn midpoint(&self, i: usize) -> f64 {
        (i as f64 + 0.5) / self.n as f64
    }
}

/// Real step function; doubles as a density when nonnegative with integral 1.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDensity {
    pub values: Vec<f64>,
}

/// Complex step function, used by tilted pullbacks.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexStep {
    pub values: Vec<Complex64>,
}

impl StepDensity {
    pub fn from_values(values: Vec<f64>) -> Self {
        StepDensity { values }
    }

    pub fn constant(n: usize, c: f64) -> Self {
        StepDensity { values: vec![c; n] }
    }

    /// The flat probability density.
    pub fn uniform(n: usize) -> Self {
        Self::constant(n, 1.0)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `integral f dm = (1/n) sum f_i`.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.len() as f64
    }

    /// Discrete total variation `sum_{i>=1} |f_i - f_{i-1}|`.
    pub fn variation(&self) -> f64 {
        self.values.windows(2).map(|w| (w[1] - w[0]).abs()).sum()
    }

    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum::<f64>() / self.len() as f64
    }

    /// The working norm `|f|_1 + var(f)`.
    pub fn bv_norm(&self) -> f64 {
        self.l1_norm() + self.variation()
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().fold(f64::INFINITY, |m, v| m.min(*v))
    }

    pub fn is_density(&self, tol: f64) -> bool {
        self.min_value() >= -tol && (self.integral() - 1.0).abs() <= tol
    }

    /// Rescale to integral 1; errors when the mass is numerically zero.
    pub fn normalize(&mut self) -> Result<()> {
        let mass = self.integral();
        if mass.abs() < 1e-300 {
            return Err(Error::NoConvergence("cannot normalize zero-mass step function".into()));
        }
        for v in &mut self.values {
            *v /= mass;
        }
        Ok(())
    }

    pub fn to_complex(&self) -> ComplexStep {
        ComplexStep { values: self.values.iter().map(|&v| Complex64::new(v, 0.0)).collect() }
    }

    /// CSV export with header `bin_index,value`.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "bin_index,value")?;
        for (i, v) in self.values.iter().enumerate() {
            writeln!(w, "{i},{v}")?;
        }
        Ok(())
    }
}

impl ComplexStep {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn integral(&self) -> Complex64 {
        self.values.iter().sum::<Complex64>() / self.len() as f64
    }

    pub fn variation(&self) -> f64 {
        self.values.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
    }

    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).sum::<f64>() / self.len() as f64
    }

    pub fn bv_norm(&self) -> f64 {
        self.l1_norm() + self.variation()
    }

    pub fn scale(&mut self, by: Complex64) {
        for v in &mut self.values {
            *v *= by;
        }
    }
}

/// Row-sparse discretized transfer operator: `P_ij` is the fraction of bin
/// `i` that the map sends into bin `j`.
#[derive(Clone, Debug)]
pub struct UlamOperator {
    n: usize,
    rows: Vec<Vec<(u32, f64)>>,
}

impl UlamOperator {
    /// Exact construction by intersecting each branch image with the bins.
    /// Rejects maps whose expansion contract is violated.
    pub fn build(map: &PiecewiseAffineMap, partition: Partition) -> Result<Self> {
        if map.min_slope() <= 1.0 {
            return Err(Error::invalid("transfer operator needs uniformly expanding branches"));
        }
        let n = partition.len();
        let nf = n as f64;
        let mut rows: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
        for branch in map.branches() {
            let abs_slope = branch.slope.abs();
            let i_lo = (branch.lo * nf).floor() as usize;
            let i_hi = ((branch.hi * nf).ceil() as usize).min(n);
            for (i, row) in rows.iter_mut().enumerate().take(i_hi).skip(i_lo) {
                let seg_lo = branch.lo.max(i as f64 / nf);
                let seg_hi = branch.hi.min((i + 1) as f64 / nf);
                if seg_hi <= seg_lo {
                    continue;
                }
                let (y_lo, y_hi) = {
                    let a = branch.slope * seg_lo + branch.offset;
                    let b = branch.slope * seg_hi + branch.offset;
                    if a <= b {
                        (a, b)
                    } else {
                        (b, a)
                    }
                };
                let j_lo = (y_lo * nf).floor().max(0.0) as usize;
                for j in j_lo..n {
                    let b_lo = j as f64 / nf;
                    let b_hi = (j + 1) as f64 / nf;
                    if b_lo >= y_hi {
                        break;
                    }
                    let overlap = y_hi.min(b_hi) - y_lo.max(b_lo);
                    if overlap > 0.0 {
                        row.push((j as u32, overlap * nf / abs_slope));
                    }
                }
            }
        }
        for row in &mut rows {
            row.sort_unstable_by_key(|&(j, _)| j);
            row.dedup_by(|later, earlier| {
                if later.0 == earlier.0 {
                    earlier.1 += later.1;
                    true
                } else {
                    false
                }
            });
        }
        Ok(UlamOperator { n, rows })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn rows(&self) -> &[Vec<(u32, f64)>] {
        &self.rows
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.iter().map(|&(_, p)| p).sum()).collect()
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.n {
            return Err(Error::Dimension(format!(
                "operator on {} bins applied to {} bins",
                self.n, len
            )));
        }
        Ok(())
    }

    /// Push a real step function forward: `(Lf)_j = sum_i f_i P_ij`.
    pub fn apply(&self, f: &StepDensity) -> Result<StepDensity> {
        self.check_len(f.len())?;
        let mut out = vec![0.0; self.n];
        self.apply_into(&f.values, &mut out);
        Ok(StepDensity { values: out })
    }

    #[inline]
    pub fn apply_into(&self, f: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (i, row) in self.rows.iter().enumerate() {
            let fi = f[i];
            if fi == 0.0 {
                continue;
            }
            for &(j, p) in row {
                out[j as usize] += fi * p;
            }
        }
    }

    pub fn apply_complex(&self, f: &ComplexStep) -> Result<ComplexStep> {
        self.check_len(f.len())?;
        let mut out = vec![Complex64::new(0.0, 0.0); self.n];
        self.apply_complex_into(&f.values, &mut out);
        Ok(ComplexStep { values: out })
    }

    #[inline]
    pub fn apply_complex_into(&self, f: &[Complex64], out: &mut [Complex64]) {
        out.fill(Complex64::new(0.0, 0.0));
        for (i, row) in self.rows.iter().enumerate() {
            let fi = f[i];
            if fi.re == 0.0 && fi.im == 0.0 {
                continue;
            }
            for &(j, p) in row {
                out[j as usize] += fi * p;
            }
        }
    }

    /// Tilted application `L(w . f)` without materializing the product.
    #[inline]
    pub fn apply_weighted_into(&self, w: &[Complex64], f: &[Complex64], out: &mut [Complex64]) {
        out.fill(Complex64::new(0.0, 0.0));
        for (i, row) in self.rows.iter().enumerate() {
            let fi = w[i] * f[i];
            for &(j, p) in row {
                out[j as usize] += fi * p;
            }
        }
    }

    /// Real tilted application for real twist parameters.
    #[inline]
    pub fn apply_weighted_real_into(&self, w: &[f64], f: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (i, row) in self.rows.iter().enumerate() {
            let fi = w[i] * f[i];
            for &(j, p) in row {
                out[j as usize] += fi * p;
            }
        }
    }

    /// Bin averages of `h . T` (the adjoint action on step functions):
    /// `out_i = sum_j P_ij h_j`.
    #[inline]
    pub fn koopman_into(&self, h: &[f64], out: &mut [f64]) {
        for (i, row) in self.rows.iter().enumerate() {
            out[i] = row.iter().map(|&(j, p)| p * h[j as usize]).sum();
        }
    }
}

/// Fitted constants of the variation inequality
/// `var(L^(N) f) <= alpha * var(f) + beta * |f|_1` over a probe sample.
#[derive(Clone, Copy, Debug)]
pub struct LasotaYorkeFit {
    pub alpha: f64,
    pub beta: f64,
    /// Whether the fitted `alpha` is strictly below 1.
    pub contracting: bool,
    pub n_steps: usize,
}

/// Probe the variation inequality for the composition of `ops` (applied
/// left to right) using basis indicators plus `trials` random step functions.
///
/// `beta` is pinned first from the constant function (whose variation is 0),
/// then `alpha` is the smallest slope covering the rest of the sample.
pub fn probe_lasota_yorke(ops: &[&UlamOperator], trials: usize, seed: u64) -> Result<LasotaYorkeFit> {
    let Some(first) = ops.first() else {
        return Err(Error::invalid("need at least one operator"));
    };
    let n = first.n();
    let compose = |f: &StepDensity| -> Result<StepDensity> {
        let mut cur = f.clone();
        for op in ops {
            cur = op.apply(&cur)?;
        }
        Ok(cur)
    };

    let beta = compose(&StepDensity::uniform(n))?.variation();

    let mut alpha = 0.0f64;
    let mut consider = |f: &StepDensity| -> Result<()> {
        let var_f = f.variation();
        if var_f < 1e-14 {
            return Ok(());
        }
        let lf = compose(f)?;
        let slope = (lf.variation() - beta * f.l1_norm()).max(0.0) / var_f;
        alpha = alpha.max(slope);
        Ok(())
    };

    let stride = (n / 256).max(1);
    for i in (0..n).step_by(stride) {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        consider(&StepDensity::from_values(v))?;
    }
    let mut rng = CounterRng::keyed(seed, 0x17_9B0B);
    for _ in 0..trials {
        let v: Vec<f64> = (0..n).map(|_| rng.range_f64(-1.0, 1.0)).collect();
        consider(&StepDensity::from_values(v))?;
    }

    Ok(LasotaYorkeFit { alpha, beta, contracting: alpha < 1.0, n_steps: ops.len() })
}

/// Norm decay of a mean-zero step function under the operator sequence,
/// with a least-squares exponential rate fit.
#[derive(Clone, Debug)]
pub struct DecayCurve {
    /// `norms[k] = |L^(k) f|_bv`, starting at `k = 0`.
    pub norms: Vec<f64>,
    /// Fitted rate `lambda` in `norms ~ K exp(-lambda k)`.
    pub rate: f64,
}

pub fn probe_decay(ops: &[&UlamOperator], f0: &StepDensity, n_max: usize) -> Result<DecayCurve> {
    if ops.len() < n_max {
        return Err(Error::invalid("need one operator per decay step"));
    }
    let mut norms = Vec::with_capacity(n_max + 1);
    norms.push(f0.bv_norm());
    let mut cur = f0.clone();
    for op in ops.iter().take(n_max) {
        cur = op.apply(&cur)?;
        norms.push(cur.bv_norm());
    }
    // least squares on log-norms, ignoring the numerically-zero tail
    let pts: Vec<(f64, f64)> = norms
        .iter()
        .enumerate()
        .take_while(|(_, &v)| v > 1e-13 * norms[0].max(1.0))
        .map(|(k, &v)| (k as f64, v.ln()))
        .collect();
    let rate = if pts.len() >= 2 {
        -ols_slope(&pts)
    } else {
        // decay so fast the curve has no usable points: report a floor from
        // the first step
        if norms.len() > 1 && norms[1] > 0.0 {
            (norms[0] / norms[1]).ln()
        } else {
            f64::INFINITY
        }
    };
    Ok(DecayCurve { norms, rate })
}

/// Slope of the ordinary least squares line through `(x, y)` points.
pub fn ols_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}
