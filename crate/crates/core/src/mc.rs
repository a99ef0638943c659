//! Reproducible quenched Monte Carlo.
//!
//! Trajectory segments are sampled in reverse: the endpoint is drawn from
//! the invariant density of the last fiber and predecessors are chosen among
//! the inverse branches with probabilities `v(y)/|T'(y)|`. This realizes the
//! exact stationary path law while keeping full floating-point resolution at
//! every step; iterating an expanding map forward instead would exhaust the
//! 53-bit mantissa after ~50 steps and silently freeze the tail of the
//! trajectory. Every sample is a pure function of `(seed, sample id)`, so
//! batches replay bit-for-bit under any scheduling.

use rayon::prelude::*;

use crate::dist::wilson_interval;
use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::system::QuenchedSystem;
use crate::twisted::{AcimFamily, Centering, TiltedPath};
use crate::ulam::StepDensity;

/// Invariant densities for the fibers of a batch: either one shared profile
/// (exact for full-branch integer-slope catalogs, where the density is flat)
/// or a per-fiber family.
#[derive(Clone, Copy, Debug)]
pub enum FiberDensities<'a> {
    Shared(&'a StepDensity),
    Family(&'a AcimFamily),
}

impl<'a> FiberDensities<'a> {
    fn density(&self, k: i64) -> &'a StepDensity {
        match self {
            FiberDensities::Shared(d) => d,
            FiberDensities::Family(f) => f.density(k),
        }
    }
}

/// Inverse-CDF sample from a step density: pick a bin proportionally to its
/// mass, then a uniform point inside it.
pub fn sample_initial(v: &StepDensity, rng: &mut CounterRng) -> Result<f64> {
    if !v.is_density(1e-9) {
        return Err(Error::invalid("initial sampler needs a probability density"));
    }
    let n = v.len() as f64;
    let target = rng.next_f64() * v.values.iter().sum::<f64>();
    let mut acc = 0.0;
    let mut bin = v.len() - 1;
    for (i, &val) in v.values.iter().enumerate() {
        acc += val;
        if target < acc {
            bin = i;
            break;
        }
    }
    Ok(((bin as f64) + rng.next_f64()) / n)
}

#[derive(Clone, Copy)]
struct IntegerBetaStep {
    beta: f64,
    branches: u32,
}

/// Per-symbol fast path: flat density and `beta x mod 1` with integer slope
/// makes every inverse branch equally likely.
fn integer_beta_fast_path(
    sys: &QuenchedSystem,
    dens: &FiberDensities<'_>,
    start: i64,
    n: usize,
) -> Option<Vec<IntegerBetaStep>> {
    let flat = match dens {
        FiberDensities::Shared(d) => d.values.iter().all(|&v| (v - 1.0).abs() < 1e-12),
        FiberDensities::Family(f) => {
            let (lo, hi) = f.window();
            lo <= start
                && hi >= start + n as i64 - 1
                && (start..start + n as i64)
                    .all(|k| f.density(k).values.iter().all(|&v| (v - 1.0).abs() < 1e-12))
        }
    };
    if !flat {
        return None;
    }
    let alphabet = sys.orbit().base().alphabet_size();
    let mut per_symbol = Vec::with_capacity(alphabet);
    for s in 0..alphabet {
        let map = sys.selector().map_for(s);
        let b = map.branches();
        let beta = b[0].slope;
        let integer = beta.fract() == 0.0
            && beta >= 2.0
            && b.len() == beta as usize
            && b.iter().enumerate().all(|(k, br)| {
                br.slope == beta && (br.offset + k as f64).abs() < 1e-15
            });
        if !integer {
            return None;
        }
        per_symbol.push(IntegerBetaStep { beta, branches: beta as u32 });
    }
    Some(per_symbol)
}

/// Walk one stationary segment backwards, visiting `(fiber, point)` pairs in
/// forward order of the *callbacks* being arbitrary; the visitor receives
/// every pair exactly once.
fn walk_path<F: FnMut(i64, f64)>(
    sys: &QuenchedSystem,
    dens: &FiberDensities<'_>,
    fast: Option<&[IntegerBetaStep]>,
    start: i64,
    n: usize,
    rng: &mut CounterRng,
    mut visit: F,
) -> Result<()> {
    let last = start + n as i64 - 1;
    let mut x = sample_initial(dens.density(last), rng)?;
    visit(last, x);
    match fast {
        Some(steps) => {
            for j in (start..last).rev() {
                let step = steps[sys.symbol(j)];
                let b = (rng.next_u64() % step.branches as u64) as f64;
                x = (x + b) / step.beta;
                visit(j, x);
            }
        }
        None => {
            let mut pre: Vec<(f64, f64)> = Vec::with_capacity(8);
            for j in (start..last).rev() {
                let map = sys.map_at(j);
                let v = dens.density(j);
                pre.clear();
                for br in map.branches() {
                    let y = (x - br.offset) / br.slope;
                    if y >= br.lo && y < br.hi {
                        let w = v.values[((y * v.len() as f64) as usize).min(v.len() - 1)]
                            / br.slope.abs();
                        pre.push((y, w));
                    }
                }
                if pre.is_empty() {
                    return Err(Error::NoConvergence(format!(
                        "point {x} has no inverse branch at fiber {j}"
                    )));
                }
                let total: f64 = pre.iter().map(|p| p.1).sum();
                let mut target = rng.next_f64() * total;
                let mut chosen = pre[pre.len() - 1].0;
                for &(y, w) in &pre {
                    target -= w;
                    if target < 0.0 {
                        chosen = y;
                        break;
                    }
                }
                x = chosen;
                visit(j, x);
            }
        }
    }
    Ok(())
}

/// A batch of Birkhoff-sum samples over a fixed fiber window.
#[derive(Clone, Debug)]
pub struct TrajectoryBatch {
    pub start: i64,
    pub n: usize,
    pub dim: usize,
    pub seed: u64,
    /// Row-major `samples x dim`.
    pub sums: Vec<f64>,
}

impl TrajectoryBatch {
    pub fn samples(&self) -> usize {
        self.sums.len() / self.dim
    }

    #[inline]
    pub fn sum(&self, sample: usize) -> &[f64] {
        &self.sums[sample * self.dim..(sample + 1) * self.dim]
    }

    /// One component of every sample, multiplied by `scale`.
    pub fn scaled_component(&self, component: usize, scale: f64) -> Vec<f64> {
        (0..self.samples()).map(|i| self.sum(i)[component] * scale).collect()
    }

    pub fn component_mean_and_var(&self, component: usize) -> (f64, f64) {
        let m = self.samples() as f64;
        let mean = (0..self.samples()).map(|i| self.sum(i)[component]).sum::<f64>() / m;
        let var = (0..self.samples())
            .map(|i| (self.sum(i)[component] - mean).powi(2))
            .sum::<f64>()
            / (m - 1.0);
        (mean, var)
    }
}

/// Sample `m` independent Birkhoff sums of the centered observable over
/// fibers `start .. start+n`, partitioned across workers by sample id.
pub fn birkhoff_batch(
    sys: &QuenchedSystem,
    centering: &Centering,
    dens: FiberDensities<'_>,
    start: i64,
    n: usize,
    m: usize,
    seed: u64,
) -> Result<TrajectoryBatch> {
    if n == 0 || m == 0 {
        return Err(Error::invalid("batch needs n >= 1 and m >= 1"));
    }
    let d = sys.dim();
    let fast = integer_beta_fast_path(sys, &dens, start, n);
    let mut sums = vec![0.0f64; m * d];
    let chunk = 4096.min(m).max(1);
    let result: Result<Vec<()>> = sums
        .par_chunks_mut(chunk * d)
        .enumerate()
        .map(|(ci, block)| {
            let base_id = ci * chunk;
            for (row, slot) in block.chunks_mut(d).enumerate() {
                let sample_id = (base_id + row) as u64;
                let mut rng = CounterRng::keyed(seed, sample_id);
                let mut acc = [0.0f64; 8];
                let obs = sys.observable();
                walk_path(sys, &dens, fast.as_deref(), start, n, &mut rng, |k, x| {
                    let symbol = sys.symbol(k);
                    let consts = centering.constants_at(sys, k);
                    for (c, comp) in obs.components.iter().enumerate() {
                        acc[c] += comp.eval(symbol, x) - consts[c];
                    }
                })?;
                slot.copy_from_slice(&acc[..d]);
            }
            Ok(())
        })
        .collect();
    result?;
    Ok(TrajectoryBatch { start, n, dim: d, seed, sums })
}

/// Diagnostic single-path sampler retaining every visited point.
pub fn sample_path(
    sys: &QuenchedSystem,
    dens: FiberDensities<'_>,
    start: i64,
    n: usize,
    rng: &mut CounterRng,
) -> Result<Vec<f64>> {
    let mut points = vec![0.0; n];
    let fast = integer_beta_fast_path(sys, &dens, start, n);
    walk_path(sys, &dens, fast.as_deref(), start, n, rng, |k, x| {
        points[(k - start) as usize] = x;
    })?;
    Ok(points)
}

/// Exact Kolmogorov-Smirnov statistic of a sample against a reference CDF.
pub fn ks_distance<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_unstable_by(f64::total_cmp);
    let m = xs.len() as f64;
    let mut worst = 0.0f64;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        worst = worst.max(f - i as f64 / m).max((i + 1) as f64 / m - f);
    }
    worst
}

/// Max modulus deviation of the empirical characteristic function of
/// `S_n / sqrt(n)` from the Gaussian limit over a frequency grid.
pub fn cf_distance(
    batch: &TrajectoryBatch,
    sigma2: &crate::limits::CovMatrix,
    ts: &[Vec<f64>],
) -> Result<f64> {
    let d = batch.dim;
    if sigma2.dim != d {
        return Err(Error::Dimension("covariance does not match the batch".into()));
    }
    let m = batch.samples();
    let scale = 1.0 / (batch.n as f64).sqrt();
    let mut worst = 0.0f64;
    for t in ts {
        if t.len() != d {
            return Err(Error::Dimension("frequency grid has wrong dimension".into()));
        }
        // fixed-size chunks reduced in index order keep the sum deterministic
        let chunk = 8192;
        let partials: Vec<(f64, f64)> = (0..m.div_ceil(chunk))
            .into_par_iter()
            .map(|ci| {
                let lo = ci * chunk;
                let hi = ((ci + 1) * chunk).min(m);
                let mut re = 0.0;
                let mut im = 0.0;
                for i in lo..hi {
                    let arg: f64 =
                        batch.sum(i).iter().zip(t).map(|(s, tc)| s * tc).sum::<f64>() * scale;
                    re += arg.cos();
                    im += arg.sin();
                }
                (re, im)
            })
            .collect();
        let (re, im) = partials.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
        let phat_re = re / m as f64;
        let phat_im = im / m as f64;
        let mut quad = 0.0;
        for i in 0..d {
            for j in 0..d {
                quad += t[i] * sigma2.get(i, j) * t[j];
            }
        }
        let target = (-0.5 * quad).exp();
        let dev = ((phat_re - target).powi(2) + phat_im.powi(2)).sqrt();
        worst = worst.max(dev);
    }
    Ok(worst)
}

/// How a tail probability was estimated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TailMode {
    Direct,
    Tilted,
}

/// Tail estimate with 95% interval, on both probability and rate scales.
#[derive(Clone, Debug)]
pub struct TailEstimate {
    pub mode: TailMode,
    pub level: f64,
    pub n: usize,
    pub samples: usize,
    pub hits: u64,
    pub p: f64,
    pub p_lo: f64,
    pub p_hi: f64,
    /// `-(1/n) log p`, with the interval endpoints mapped through the log.
    pub rate: f64,
    pub rate_lo: f64,
    pub rate_hi: f64,
}

fn rate_triple(n: usize, p: f64, p_lo: f64, p_hi: f64) -> (f64, f64, f64) {
    let nf = n as f64;
    (-(p.ln()) / nf, -(p_hi.ln()) / nf, -(p_lo.ln()) / nf)
}

/// Direct counting estimate of `P(S_n / n >= a)` for scalar batches.
/// A zero count is an error instructing the caller to switch to the tilted
/// estimator.
pub fn tail_log_prob_direct(batch: &TrajectoryBatch, a: f64) -> Result<TailEstimate> {
    if batch.dim != 1 {
        return Err(Error::Dimension("tail estimates are scalar-only".into()));
    }
    let m = batch.samples();
    let level = a * batch.n as f64;
    let hits = (0..m).filter(|&i| batch.sum(i)[0] >= level).count() as u64;
    if hits == 0 {
        return Err(Error::NoConvergence(
            "no tail hits in the direct batch; use the tilted estimator".into(),
        ));
    }
    let p = hits as f64 / m as f64;
    let (p_lo, p_hi) = wilson_interval(hits, m as u64);
    let (rate, rate_lo, rate_hi) = rate_triple(batch.n, p, p_lo, p_hi);
    Ok(TailEstimate {
        mode: TailMode::Direct,
        level: a,
        n: batch.n,
        samples: m,
        hits,
        p,
        p_lo,
        p_hi,
        rate,
        rate_lo,
        rate_hi,
    })
}

/// Importance-sampling estimate of `P(S_n / n >= a)` under the exponential
/// tilt prepared by [`crate::twisted::tilted_path`] (which must have kept its
/// step densities). Paths are proposed by tilting the backward kernel with
/// the per-step pushforwards; weights carry the exact density ratio, so the
/// estimator is unbiased for the sampled stationary law.
#[allow(clippy::too_many_arguments)]
pub fn tail_log_prob_tilted(
    sys: &QuenchedSystem,
    centering: &Centering,
    dens: FiberDensities<'_>,
    path: &TiltedPath,
    start: i64,
    n: usize,
    m: usize,
    a: f64,
    seed: u64,
) -> Result<TailEstimate> {
    if sys.dim() != 1 {
        return Err(Error::Dimension("tail estimates are scalar-only".into()));
    }
    if path.step_densities.len() != n + 1 || path.start != start {
        return Err(Error::invalid("tilted path does not match the requested window"));
    }
    let theta = path.theta[0];
    let n_bins = sys.n_bins();
    let nf = n_bins as f64;
    let level = a * n as f64;

    // terminal proposal: u_{n-1} tilted by the bin weights of the last fiber
    let last = start + n as i64 - 1;
    let last_bins = sys.bins_at(last);
    let last_consts = centering.constants_at(sys, last);
    let mut terminal = StepDensity::from_values(
        path.step_densities[n - 1]
            .values
            .iter()
            .enumerate()
            .map(|(i, &u)| u * (theta * (last_bins[0][i] - last_consts[0])).exp())
            .collect(),
    );
    terminal.normalize()?;

    let chunk = 2048usize;
    let partials: Vec<Result<(f64, f64, u64)>> = (0..m.div_ceil(chunk))
        .into_par_iter()
        .map(|ci| {
            let lo = ci * chunk;
            let hi = ((ci + 1) * chunk).min(m);
            let mut sum_w = 0.0f64;
            let mut sum_w2 = 0.0f64;
            let mut hits = 0u64;
            let mut pre: Vec<(f64, f64)> = Vec::with_capacity(8);
            for sample in lo..hi {
                let mut rng = CounterRng::keyed(seed, sample as u64);
                // log density ratio target/proposal, accumulated backwards
                let mut x = sample_initial(&terminal, &mut rng)?;
                let bin = ((x * nf) as usize).min(n_bins - 1);
                let mut log_w = dens.density(last).values[bin].max(1e-300).ln()
                    - terminal.values[bin].max(1e-300).ln();
                let mut s = eval_centered(sys, centering, last, x);
                for j in (start..last).rev() {
                    let map = sys.map_at(j);
                    let u_j = &path.step_densities[(j - start) as usize];
                    let bins_j = sys.bins_at(j);
                    let consts_j = centering.constants_at(sys, j);
                    pre.clear();
                    let mut total = 0.0;
                    for br in map.branches() {
                        let y = (x - br.offset) / br.slope;
                        if y >= br.lo && y < br.hi {
                            let b = ((y * nf) as usize).min(n_bins - 1);
                            let w = u_j.values[b].max(1e-300)
                                * (theta * (bins_j[0][b] - consts_j[0])).exp()
                                / br.slope.abs();
                            pre.push((y, w));
                            total += w;
                        }
                    }
                    if pre.is_empty() {
                        return Err(Error::NoConvergence(format!(
                            "point {x} has no inverse branch at fiber {j}"
                        )));
                    }
                    let mut target = rng.next_f64() * total;
                    let mut idx = pre.len() - 1;
                    for (i, &(_, w)) in pre.iter().enumerate() {
                        target -= w;
                        if target < 0.0 {
                            idx = i;
                            break;
                        }
                    }
                    let (y, w) = pre[idx];
                    // target backward kernel: v_j(y)/|T'| normalized by the
                    // total over branches; proposal: w / total
                    let mut t_total = 0.0;
                    let mut t_chosen = 0.0;
                    let v_j = dens.density(j);
                    for br in map.branches() {
                        let yy = (x - br.offset) / br.slope;
                        if yy >= br.lo && yy < br.hi {
                            let b = ((yy * nf) as usize).min(n_bins - 1);
                            let tw = v_j.values[b].max(1e-300) / br.slope.abs();
                            t_total += tw;
                            if (yy - y).abs() == 0.0 {
                                t_chosen = tw;
                            }
                        }
                    }
                    log_w += (t_chosen / t_total).ln() - (w / total).ln();
                    x = y;
                    s += eval_centered(sys, centering, j, x);
                }
                let weight = log_w.exp();
                if s >= level {
                    sum_w += weight;
                    hits += 1;
                }
                sum_w2 += if s >= level { weight * weight } else { 0.0 };
            }
            Ok((sum_w, sum_w2, hits))
        })
        .collect();
    let mut sum_w = 0.0;
    let mut sum_w2 = 0.0;
    let mut hits = 0u64;
    for p in partials {
        let (w, w2, h) = p?;
        sum_w += w;
        sum_w2 += w2;
        hits += h;
    }
    if hits == 0 {
        return Err(Error::NoConvergence("tilted estimator recorded no hits".into()));
    }
    let mf = m as f64;
    let p = sum_w / mf;
    let var = (sum_w2 / mf - p * p).max(0.0) / mf;
    let half = 1.959963984540054 * var.sqrt();
    let p_lo = (p - half).max(1e-300);
    let p_hi = p + half;
    let (rate, rate_lo, rate_hi) = rate_triple(n, p, p_lo, p_hi);
    Ok(TailEstimate {
        mode: TailMode::Tilted,
        level: a,
        n,
        samples: m,
        hits,
        p,
        p_lo,
        p_hi,
        rate,
        rate_lo,
        rate_hi,
    })
}

#[inline]
fn eval_centered(sys: &QuenchedSystem, centering: &Centering, k: i64, x: f64) -> f64 {
    let symbol = sys.symbol(k);
    sys.observable().components[0].eval(symbol, x) - centering.constants_at(sys, k)[0]
}

/// Empirical mass of the box `prod [s_c - delta_c, s_c + delta_c]` with a
/// Wilson 95% interval.
pub fn window_prob(
    batch: &TrajectoryBatch,
    center: &[f64],
    half_widths: &[f64],
) -> Result<(f64, f64, f64)> {
    if center.len() != batch.dim || half_widths.len() != batch.dim {
        return Err(Error::Dimension("window does not match the batch dimension".into()));
    }
    let m = batch.samples();
    let hits = (0..m)
        .filter(|&i| {
            batch
                .sum(i)
                .iter()
                .zip(center)
                .zip(half_widths)
                .all(|((s, c), h)| (s - c).abs() <= *h)
        })
        .count() as u64;
    let p = hits as f64 / m as f64;
    let (lo, hi) = wilson_interval(hits, m as u64);
    Ok((p, lo, hi))
}

/// One summary line `n,M,statistic,value,ci_lo,ci_hi`.
#[derive(Clone, Debug)]
pub struct SummaryRow {
    pub n: usize,
    pub m: usize,
    pub statistic: String,
    pub value: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

/// Batch summaries in the shared CSV dialect.
pub fn write_summary_csv<W: std::io::Write>(rows: &[SummaryRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "n,M,statistic,value,ci_lo,ci_hi")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{},{}", r.n, r.m, r.statistic, r.value, r.ci_lo, r.ci_hi)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base::BaseSystem;
    use crate::dist::{binomial_upper_tail, normal_cdf};
    use crate::maps::{FiberSelector, Observable, Waveform};
    use crate::twisted::{acim_pullback, tilted_path, Centering, TwistedOpts};

    fn rademacher_doubling(n_bins: usize, fwd: usize) -> QuenchedSystem {
        let base = BaseSystem::iid(vec![1.0, 0.0], 3).unwrap();
        let sel = FiberSelector::Constant(crate::maps::PiecewiseAffineMap::doubling());
        let obs = Observable::scalar(Waveform::Rademacher);
        QuenchedSystem::new(base, sel, obs, n_bins, 256, fwd).unwrap()
    }

    #[test]
    fn sample_initial_uniform_and_concentrated() {
        let uniform = StepDensity::uniform(64);
        let mut rng = CounterRng::keyed(1, 0);
        let m = 100_000;
        let xs: Vec<f64> = (0..m).map(|_| sample_initial(&uniform, &mut rng).unwrap()).collect();
        let ks = ks_distance(&xs, |x| x.clamp(0.0, 1.0));
        assert!(ks < 0.01, "ks={ks}");

        let mut spike = vec![0.0; 16];
        spike[5] = 16.0;
        let spike = StepDensity::from_values(spike);
        for s in 0..200 {
            let mut rng = CounterRng::keyed(2, s);
            let x = sample_initial(&spike, &mut rng).unwrap();
            assert!((5.0 / 16.0..6.0 / 16.0).contains(&x));
        }
    }

    #[test]
    fn golden_parry_bin_frequencies() {
        // multinomial oracle on the two plateaus of the golden invariant density
        let n_bins = 64;
        let base = BaseSystem::iid(vec![1.0, 0.0], 4).unwrap();
        let sel = FiberSelector::Constant(crate::maps::PiecewiseAffineMap::golden_beta());
        let obs = Observable::scalar(Waveform::Cos);
        let sys = QuenchedSystem::new(base, sel, obs, n_bins, 128, 16).unwrap();
        let acims = acim_pullback(&sys, 0, 8, 1e-9, 64, 1024).unwrap();
        let v = acims.density(0);
        let mut rng = CounterRng::keyed(3, 0);
        let m = 200_000;
        let mut counts = vec![0u64; n_bins];
        for _ in 0..m {
            let x = sample_initial(v, &mut rng).unwrap();
            counts[((x * n_bins as f64) as usize).min(n_bins - 1)] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            let p = v.values[i] / n_bins as f64;
            let se = (p * (1.0 - p) / m as f64).sqrt();
            assert!(
                ((c as f64 / m as f64) - p).abs() < 3.5 * se + 1e-9,
                "bin {i}: freq {} vs mass {p}",
                c as f64 / m as f64
            );
        }
    }

    #[test]
    fn batches_replay_bitwise() {
        let sys = rademacher_doubling(64, 64);
        let centering = Centering::zero(&sys);
        let flat = StepDensity::uniform(64);
        let a = birkhoff_batch(&sys, &centering, FiberDensities::Shared(&flat), 0, 32, 512, 9)
            .unwrap();
        let b = birkhoff_batch(&sys, &centering, FiberDensities::Shared(&flat), 0, 32, 512, 9)
            .unwrap();
        assert_eq!(a.sums, b.sums);
        let c = birkhoff_batch(&sys, &centering, FiberDensities::Shared(&flat), 0, 32, 512, 10)
            .unwrap();
        assert_ne!(a.sums, c.sums);
    }

    #[test]
    fn single_step_digit_sums_are_fair() {
        let sys = rademacher_doubling(64, 8);
        let centering = Centering::zero(&sys);
        let flat = StepDensity::uniform(64);
        let batch =
            birkhoff_batch(&sys, &centering, FiberDensities::Shared(&flat), 0, 1, 100_000, 11)
                .unwrap();
        let ones = (0..batch.samples()).filter(|&i| batch.sum(i)[0] > 0.0).count();
        let freq = ones as f64 / batch.samples() as f64;
        assert!((freq - 0.5).abs() < 0.005, "freq={freq}");
        for i in 0..batch.samples() {
            assert!(batch.sum(i)[0].abs() == 1.0);
        }
    }

    #[test]
    fn digit_sums_are_binomial() {
        // binary-digit independence oracle: (S_n + n)/2 ~ Binomial(n, 1/2)
        let sys = rademacher_doubling(64, 32);
        let centering = Centering::zero(&sys);
        let flat = StepDensity::uniform(64);
        let n = 20;
        let m = 200_000;
        let batch =
            birkhoff_batch(&sys, &centering, FiberDensities::Shared(&flat), 0, n, m, 12).unwrap();
        let mut counts = vec![0u64; n + 1];
        for i in 0..m {
            let k = ((batch.sum(i)[0] + n as f64) / 2.0).round() as usize;
            counts[k] += 1;
        }
        // chi-squared against the exact binomial, pooling sparse cells
        let mut chi2 = 0.0;
        let mut dof = 0usize;
        let mut pool_obs = 0.0;
        let mut pool_exp = 0.0;
        for (k, &c) in counts.iter().enumerate() {
            let p = binomial_upper_tail(n as u64, 0.5, k as u64)
                - binomial_upper_tail(n as u64, 0.5, k as u64 + 1);
            let e = p * m as f64;
            pool_obs += c as f64;
            pool_exp += e;
            if pool_exp >= 10.0 {
                chi2 += (pool_obs - pool_exp).powi(2) / pool_exp;
                dof += 1;
                pool_obs = 0.0;
                pool_exp = 0.0;
            }
        }
        // p > 0.001 for chi-squared with ~15 dof corresponds to chi2 < ~37.7;
        // allow slack for the pooled tail cells
        assert!(dof >= 10 && chi2 < 45.0, "chi2={chi2} dof={dof}");
    }

    #[test]
    fn zero_observable_gives_zero_sums() {
        let base = BaseSystem::iid(vec![1.0, 0.0], 3).unwrap();
        let sel = FiberSelector::Constant(crate::maps::PiecewiseAffineMap::doubling());
        let obs = Observable::scalar(Waveform::Table(vec![0.0, 0.0]));
        let sys = QuenchedSystem::new(base, sel, obs, 64, 64, 64).unwrap();
        let centering = Centering::zero(&sys);
        let flat = StepDensity::uniform(64);
        let batch =
            birkhoff_batch(&sys, &centering, FiberDensities::Shared(&flat), 0, 16, 100, 1).unwrap();
        assert!(batch.sums.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn stationarity_along_the_path() {
        // the empirical mean of g at inner fibers matches the fiber mean
        let base = BaseSystem::iid(vec![0.5, 0.5], 21).unwrap();
        let sel = FiberSelector::beta_per_symbol(&[2.0, 3.0]).unwrap();
        let obs = Observable::scalar(Waveform::Cos);
        let sys = QuenchedSystem::new(base, sel, obs, 128, 64, 64).unwrap();
        let acims = acim_pullback(&sys, 0, 16, 1e-12, 16, 256).unwrap();
        let m = 40_000;
        let n = 12;
        let mut means = vec![0.0f64; n];
        for s in 0..m {
            let mut rng = CounterRng::keyed(77, s);
            let pts = sample_path(&sys, FiberDensities::Family(&acims), 0, n, &mut rng).unwrap();
            for (j, &x) in pts.iter().enumerate() {
                means[j] += (2.0 * std::f64::consts::PI * x).cos();
            }
        }
        let se = (0.5f64 / m as f64).sqrt();
        for (j, acc) in means.iter().enumerate() {
            let mean = acc / m as f64;
            assert!(mean.abs() < 3.5 * se + 1e-12, "fiber {j}: mean {mean}");
        }
    }

    #[test]
    fn ks_distance_basics_and_gaussian_reference() {
        // the empirical CDF against itself is 0 up to the 1/m staircase
        let xs: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let emp = |x: f64| ((x.floor() + 1.0) / 100.0).clamp(0.0, 1.0);
        assert!(ks_distance(&xs, emp) <= 0.01 + 1e-12);

        // DKW oracle at m = 1e5: distance below 1.36/sqrt(m) * 1.5
        let m = 100_000;
        let mut rng = CounterRng::keyed(5, 5);
        let zs: Vec<f64> = (0..m).map(|_| rng.next_normal()).collect();
        let ks = ks_distance(&zs, normal_cdf);
        assert!(ks < 1.36 / (m as f64).sqrt() * 1.5, "ks={ks}");
    }

    #[test]
    fn direct_tail_matches_binomial_oracle() {
        let sys = rademacher_doubling(64, 128);
        let centering = Centering::zero(&sys);
        let flat = StepDensity::uniform(64);
        let n = 100;
        let m = 200_000;
        let batch =
            birkhoff_batch(&sys, &centering, FiberDensities::Shared(&flat), 0, n, m, 31).unwrap();
        let est = tail_log_prob_direct(&batch, 0.2).unwrap();
        // exact oracle: P(S_100 >= 20) = P(K >= 60), K ~ Bin(100, 1/2)
        let exact = binomial_upper_tail(100, 0.5, 60);
        assert!(
            est.p_lo <= exact && exact <= est.p_hi,
            "exact {exact} outside [{}, {}]",
            est.p_lo,
            est.p_hi
        );
        // whole space: rate 0
        let all = tail_log_prob_direct(&batch, -10.0).unwrap();
        assert_eq!(all.p, 1.0);
        assert_eq!(all.rate, 0.0);
    }

    #[test]
    fn tilted_tail_agrees_with_exact_binomial() {
        let sys = rademacher_doubling(64, 256);
        let centering = Centering::zero(&sys);
        let flat = StepDensity::uniform(64);
        let opts = TwistedOpts::default();
        let n = 100;
        let a: f64 = 0.2;
        let theta = a.atanh();
        let path = tilted_path(&sys, &centering, &flat, &[theta], 0, n, true, &opts).unwrap();
        let est = tail_log_prob_tilted(
            &sys,
            &centering,
            FiberDensities::Shared(&flat),
            &path,
            0,
            n,
            40_000,
            a,
            91,
        )
        .unwrap();
        let exact = binomial_upper_tail(100, 0.5, 60);
        assert!(
            est.p_lo <= exact && exact <= est.p_hi,
            "exact {exact} outside tilted [{}, {}] (p={})",
            est.p_lo,
            est.p_hi,
            est.p
        );
        // the tilted interval should be far narrower than the direct one at
        // equal sample size
        let batch = birkhoff_batch(&sys, &centering, FiberDensities::Shared(&flat), 0, n, 40_000, 92)
            .unwrap();
        let direct = tail_log_prob_direct(&batch, a).unwrap();
        assert!(est.p_hi - est.p_lo < 0.5 * (direct.p_hi - direct.p_lo));
    }

    #[test]
    fn window_prob_trivial_windows() {
        let sys = rademacher_doubling(64, 64);
        let centering = Centering::zero(&sys);
        let flat = StepDensity::uniform(64);
        let batch =
            birkhoff_batch(&sys, &centering, FiberDensities::Shared(&flat), 0, 16, 5_000, 2)
                .unwrap();
        let (p_all, _, _) = window_prob(&batch, &[0.0], &[1e9]).unwrap();
        assert_eq!(p_all, 1.0);
        let far = 10.0 * (batch.n as f64).sqrt();
        let (p_far, _, hi) = window_prob(&batch, &[far * batch.n as f64], &[0.5]).unwrap();
        assert_eq!(p_far, 0.0);
        assert!(hi < 0.01);
    }

    #[test]
    fn centered_mean_is_small() {
        // componentwise mean within 3 sqrt(Sigma2_max/M) sqrt(n)
        let sys = rademacher_doubling(64, 600);
        let centering = Centering::zero(&sys);
        let flat = StepDensity::uniform(64);
        let n = 512;
        let m = 20_000;
        let batch =
            birkhoff_batch(&sys, &centering, FiberDensities::Shared(&flat), 0, n, m, 55).unwrap();
        let (mean, var) = batch.component_mean_and_var(0);
        assert!(mean.abs() < 3.0 * (var / m as f64).sqrt());
        assert!((var / n as f64 - 1.0).abs() < 0.05);
    }
}
