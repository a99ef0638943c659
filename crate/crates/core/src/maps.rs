//! Fiber maps and observables.
//!
//! Maps are piecewise affine with uniformly expanding branches on half-open
//! intervals `[c_{i-1}, c_i)`; ties at breakpoints always resolve to the
//! right branch. Keeping branches affine makes preimage geometry and the
//! discretized operator entries exact interval arithmetic, so discretization
//! error lives in the partition alone.

use crate::error::{Error, Result};

/// Minimum allowed expansion above 1 for any branch slope.
pub const MIN_EXPANSION_DELTA: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub lo: f64,
    pub hi: f64,
    pub slope: f64,
    pub offset: f64,
}

impl Branch {
    #[inline]
    fn image(&self) -> (f64, f64) {
        let a = self.slope * self.lo + self.offset;
        let b = self.slope * self.hi + self.offset;
        if a <= b {
            (a, b)
        } else {
            (b, a)
        }
    }
}

/// A piecewise-affine uniformly expanding map of `[0,1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PiecewiseAffineMap {
    branches: Vec<Branch>,
    min_slope: f64,
}

impl PiecewiseAffineMap {
    /// Build from breakpoints `0 = c_0 < ... < c_b = 1` with per-branch
    /// slopes and offsets. Every `|slope|` must exceed `1 + delta` and every
    /// branch image must stay inside `[0, 1]`.
    pub fn from_tables(breakpoints: &[f64], slopes: &[f64], offsets: &[f64]) -> Result<Self> {
        let b = slopes.len();
        if b == 0 || offsets.len() != b || breakpoints.len() != b + 1 {
            return Err(Error::invalid("need b slopes, b offsets and b+1 breakpoints"));
        }
        if breakpoints[0] != 0.0 || breakpoints[b] != 1.0 {
            return Err(Error::invalid("breakpoints must start at 0 and end at 1"));
        }
        if breakpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("breakpoints must be strictly increasing"));
        }
        let mut branches = Vec::with_capacity(b);
        let mut min_slope = f64::INFINITY;
        for i in 0..b {
            let br = Branch {
                lo: breakpoints[i],
                hi: breakpoints[i + 1],
                slope: slopes[i],
                offset: offsets[i],
            };
            if slopes[i].abs() <= 1.0 + MIN_EXPANSION_DELTA {
                return Err(Error::invalid(format!(
                    "branch {i} slope {} is not uniformly expanding",
                    slopes[i]
                )));
            }
            let (ilo, ihi) = br.image();
            if ilo < -1e-12 || ihi > 1.0 + 1e-12 {
                return Err(Error::invalid(format!(
                    "branch {i} image [{ilo}, {ihi}] leaves [0,1]"
                )));
            }
            min_slope = min_slope.min(slopes[i].abs());
            branches.push(br);
        }
        Ok(PiecewiseAffineMap { branches, min_slope })
    }

    /// `x -> beta * x mod 1` for `beta > 1`.
    pub fn beta_map(beta: f64) -> Result<Self> {
        if !(beta > 1.0) || !beta.is_finite() {
            return Err(Error::invalid(format!("beta map needs beta > 1, got {beta}")));
        }
        let full = beta.floor() as usize;
        let mut breakpoints = Vec::new();
        let mut slopes = Vec::new();
        let mut offsets = Vec::new();
        breakpoints.push(0.0);
        for k in 0..full {
            let hi = (k + 1) as f64 / beta;
            if hi < 1.0 - 1e-15 {
                breakpoints.push(hi);
                slopes.push(beta);
                offsets.push(-(k as f64));
            } else {
                // integer beta: the k-th full branch ends exactly at 1
                breakpoints.push(1.0);
                slopes.push(beta);
                offsets.push(-(k as f64));
                return Self::from_tables(&breakpoints, &slopes, &offsets);
            }
        }
        // trailing partial branch [full/beta, 1) -> [0, beta - full)
        breakpoints.push(1.0);
        slopes.push(beta);
        offsets.push(-(full as f64));
        Self::from_tables(&breakpoints, &slopes, &offsets)
    }

    pub fn doubling() -> Self {
        Self::beta_map(2.0).expect("doubling is a valid beta map")
    }

    /// Tent map `x -> 1 - |2x - 1|`.
    pub fn tent() -> Self {
        Self::from_tables(&[0.0, 0.5, 1.0], &[2.0, -2.0], &[0.0, 2.0])
            .expect("tent is a valid map")
    }

    /// Golden-ratio beta map, `beta = (1 + sqrt 5)/2`; its invariant density
    /// is a two-plateau step function.
    pub fn golden_beta() -> Self {
        Self::beta_map((1.0 + 5.0f64.sqrt()) / 2.0).expect("golden beta map")
    }

    #[inline]
    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    #[inline]
    pub fn min_slope(&self) -> f64 {
        self.min_slope
    }

    #[inline]
    fn branch_index(&self, x: f64) -> usize {
        // right-branch tie rule: first branch with hi > x
        self.branches.partition_point(|b| b.hi <= x)
    }

    /// Image of `x` under its branch, folded into `[0,1)`.
    pub fn eval(&self, x: f64) -> Result<f64> {
        if !(0.0..1.0).contains(&x) {
            return Err(Error::Domain(format!("map argument {x} outside [0,1)")));
        }
        Ok(self.eval_unchecked(x))
    }

    /// Same as [`eval`](Self::eval) without the domain check; used in hot
    /// trajectory loops where the invariant is maintained by construction.
    #[inline(always)]
    pub fn eval_unchecked(&self, x: f64) -> f64 {
        debug_assert!((0.0..1.0).contains(&x));
        let b = &self.branches[self.branch_index(x)];
        let y = b.slope * x + b.offset;
        if y >= 1.0 {
            y - 1.0
        } else if y < 0.0 {
            0.0
        } else {
            y
        }
    }

    /// All solutions of `T(x) = y` with weights `1/|T'(x)|`. Partial-branch
    /// maps may return fewer preimages than branches.
    pub fn preimages(&self, y: f64) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let x = (y - b.offset) / b.slope;
            if x >= b.lo && x < b.hi {
                out.push((x, 1.0 / b.slope.abs()));
            }
        }
        out
    }
}

/// Assigns a map to each fiber of the driving orbit.
#[derive(Clone, Debug, PartialEq)]
pub enum FiberSelector {
    /// One map everywhere (an autonomous system).
    Constant(PiecewiseAffineMap),
    /// One map per base symbol.
    PerSymbol(Vec<PiecewiseAffineMap>),
}

impl FiberSelector {
    pub fn beta_per_symbol(betas: &[f64]) -> Result<Self> {
        let maps = betas
            .iter()
            .map(|&b| PiecewiseAffineMap::beta_map(b))
            .collect::<Result<Vec<_>>>()?;
        match <[PiecewiseAffineMap; 1]>::try_from(maps) {
            Ok([only]) => Ok(FiberSelector::Constant(only)),
            Err(maps) => Ok(FiberSelector::PerSymbol(maps)),
        }
    }

    pub fn map_for(&self, symbol: usize) -> &PiecewiseAffineMap {
        match self {
            FiberSelector::Constant(m) => m,
            FiberSelector::PerSymbol(ms) => &ms[symbol % ms.len()],
        }
    }

    pub fn maps(&self) -> Vec<&PiecewiseAffineMap> {
        match self {
            FiberSelector::Constant(m) => vec![m],
            FiberSelector::PerSymbol(ms) => ms.iter().collect(),
        }
    }

    /// Smallest expansion over all selectable maps.
    pub fn global_min_slope(&self) -> f64 {
        self.maps().iter().map(|m| m.min_slope()).fold(f64::INFINITY, f64::min)
    }
}

/// Shapes from the observable catalog.
#[derive(Clone, Debug, PartialEq)]
pub enum Waveform {
    Cos,
    Sin,
    /// `+1` on `[0, 1/2)`, `-1` on `[1/2, 1)`.
    Rademacher,
    /// Piecewise-constant values on `values.len()` equal bins of `[0,1)`.
    Table(Vec<f64>),
}

impl Waveform {
    #[inline(always)]
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Waveform::Cos => (2.0 * std::f64::consts::PI * x).cos(),
            Waveform::Sin => (2.0 * std::f64::consts::PI * x).sin(),
            Waveform::Rademacher => {
                if x < 0.5 {
                    1.0
                } else {
                    -1.0
                }
            }
            Waveform::Table(v) => {
                let b = ((x * v.len() as f64) as usize).min(v.len() - 1);
                v[b]
            }
        }
    }

    /// Essential sup of `|value|`.
    pub fn bound(&self) -> f64 {
        match self {
            Waveform::Cos | Waveform::Sin | Waveform::Rademacher => 1.0,
            Waveform::Table(v) => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }

    /// True when the shape is constant on every bin of an `n`-bin partition.
    pub fn is_partition_constant(&self, n: usize) -> bool {
        match self {
            Waveform::Cos | Waveform::Sin => false,
            Waveform::Rademacher => n % 2 == 0,
            Waveform::Table(v) => n % v.len() == 0,
        }
    }

    /// Per-bin values on the partition, sampled at bin midpoints. For
    /// partition-constant shapes the midpoint value is the exact bin value.
    pub fn bin_values(&self, n: usize) -> Vec<f64> {
        (0..n).map(|i| self.eval((i as f64 + 0.5) / n as f64)).collect()
    }

    /// Arithmetic span when the values of the shape all lie on a lattice
    /// `{v0 + k*h}`; `None` for genuinely continuous shapes.
    pub fn lattice_span(&self) -> Option<f64> {
        match self {
            Waveform::Cos | Waveform::Sin => None,
            Waveform::Rademacher => Some(2.0),
            Waveform::Table(v) => {
                let base = v[0];
                let mut span: f64 = 0.0;
                let mut largest: f64 = 0.0;
                for &x in &v[1..] {
                    let diff = (x - base).abs();
                    largest = largest.max(diff);
                    span = float_gcd(span, diff);
                    if span == f64::INFINITY {
                        return None;
                    }
                }
                if span == 0.0 {
                    // constant table: degenerate lattice
                    Some(0.0)
                } else if span > 1e-6 * largest {
                    Some(span)
                } else {
                    // the "gcd" collapsed: values are incommensurable
                    None
                }
            }
        }
    }
}

/// Euclidean gcd on positive floats with tolerance; `INFINITY` marks failure
/// (incommensurable within tolerance).
fn float_gcd(a: f64, b: f64) -> f64 {
    let (mut a, mut b) = (a.abs(), b.abs());
    if a == 0.0 {
        return b;
    }
    if b == 0.0 {
        return a;
    }
    let tol = 1e-9 * a.max(b);
    for _ in 0..64 {
        if b < tol {
            return a;
        }
        let r = a % b;
        a = b;
        b = r;
    }
    f64::INFINITY
}

/// One coordinate of a vector observable: a shape, optionally rescaled per
/// base symbol.
#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub wave: Waveform,
    /// Multiplier applied when the fiber symbol is `s`; `None` means 1.
    pub symbol_scale: Option<Vec<f64>>,
}

impl Component {
    pub fn plain(wave: Waveform) -> Self {
        Component { wave, symbol_scale: None }
    }

    #[inline(always)]
    pub fn scale(&self, symbol: usize) -> f64 {
        match &self.symbol_scale {
            None => 1.0,
            Some(s) => s[symbol % s.len()],
        }
    }

    #[inline(always)]
    pub fn eval(&self, symbol: usize, x: f64) -> f64 {
        self.scale(symbol) * self.wave.eval(x)
    }

    pub fn bound(&self) -> f64 {
        let scale = match &self.symbol_scale {
            None => 1.0,
            Some(s) => s.iter().fold(0.0f64, |m, x| m.max(x.abs())),
        };
        scale * self.wave.bound()
    }
}

/// A bounded vector-valued observable `g(omega, x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Observable {
    pub components: Vec<Component>,
}

impl Observable {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::invalid("observable needs at least one component"));
        }
        Ok(Observable { components })
    }

    pub fn scalar(wave: Waveform) -> Self {
        Observable { components: vec![Component::plain(wave)] }
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    /// Uniform bound `M` over components, symbols and points.
    pub fn bound(&self) -> f64 {
        self.components.iter().map(Component::bound).fold(0.0, f64::max)
    }

    #[inline(always)]
    pub fn eval_into(&self, symbol: usize, x: f64, out: &mut [f64]) {
        for (c, slot) in self.components.iter().zip(out.iter_mut()) {
            *slot = c.eval(symbol, x);
        }
    }

    /// Lattice span of a scalar observable whose symbol scales are all equal;
    /// vector observables and scale-modulated lattices report `None`.
    pub fn lattice_span(&self) -> Option<f64> {
        if self.components.len() != 1 {
            return None;
        }
        let c = &self.components[0];
        let span = c.wave.lattice_span()?;
        match &c.symbol_scale {
            None => Some(span),
            Some(scales) => {
                let s0 = scales[0].abs();
                if scales.iter().all(|s| (s.abs() - s0).abs() < 1e-12) {
                    Some(span * s0)
                } else {
                    None
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doubling_values() {
        let t = PiecewiseAffineMap::doubling();
        assert!((t.eval(0.3).unwrap() - 0.6).abs() < 1e-15);
        assert!((t.eval(0.75).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn tent_values() {
        let t = PiecewiseAffineMap::tent();
        assert!((t.eval(0.75).unwrap() - 0.5).abs() < 1e-15);
        assert!((t.eval(0.25).unwrap() - 0.5).abs() < 1e-15);
        // the peak folds to 0 under the half-open convention
        assert_eq!(t.eval(0.5).unwrap(), 0.0);
    }

    #[test]
    fn eval_rejects_out_of_domain() {
        let t = PiecewiseAffineMap::doubling();
        assert!(t.eval(1.0).is_err());
        assert!(t.eval(-0.1).is_err());
    }

    #[test]
    fn doubling_preimages_by_algebra() {
        // direct algebra on 2x mod 1: y = 0.4 lifts to 0.2 and 0.7
        let t = PiecewiseAffineMap::doubling();
        let pre = t.preimages(0.4);
        assert_eq!(pre.len(), 2);
        assert!((pre[0].0 - 0.2).abs() < 1e-15 && (pre[0].1 - 0.5).abs() < 1e-15);
        assert!((pre[1].0 - 0.7).abs() < 1e-15 && (pre[1].1 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn beta3_preimages_of_zero() {
        let t = PiecewiseAffineMap::beta_map(3.0).unwrap();
        let pre = t.preimages(0.0);
        let expect = [0.0, 1.0 / 3.0, 2.0 / 3.0];
        assert_eq!(pre.len(), 3);
        for ((x, w), e) in pre.iter().zip(expect) {
            assert!((x - e).abs() < 1e-15);
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn tent_preimages_near_peak() {
        let t = PiecewiseAffineMap::tent();
        let y = 1.0 - 1e-9;
        let pre = t.preimages(y);
        assert_eq!(pre.len(), 2);
        for (x, _) in pre {
            assert!((x - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn full_branch_preimage_weights_tile() {
        // sum of 1/|T'| over preimages is 1 for full-branch maps
        for t in [PiecewiseAffineMap::doubling(), PiecewiseAffineMap::beta_map(5.0).unwrap()] {
            for y in [0.0, 0.17, 0.5, 0.93] {
                let s: f64 = t.preimages(y).iter().map(|(_, w)| w).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn slope_at_most_one_is_rejected() {
        assert!(PiecewiseAffineMap::from_tables(&[0.0, 1.0], &[1.0], &[0.0]).is_err());
        assert!(PiecewiseAffineMap::from_tables(&[0.0, 0.5, 1.0], &[2.0, 0.5], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn golden_beta_has_partial_branch() {
        let t = PiecewiseAffineMap::golden_beta();
        assert_eq!(t.branches().len(), 2);
        // second branch image is [0, phi - 1): y close to 1 has one preimage
        assert_eq!(t.preimages(0.9).len(), 1);
        assert_eq!(t.preimages(0.1).len(), 2);
    }

    #[test]
    fn observable_catalog_values() {
        let cos = Observable::scalar(Waveform::Cos);
        let mut out = [0.0];
        cos.eval_into(0, 0.0, &mut out);
        assert!((out[0] - 1.0).abs() < 1e-15);

        let rad = Observable::scalar(Waveform::Rademacher);
        rad.eval_into(0, 0.7, &mut out);
        assert_eq!(out[0], -1.0);

        let two = Observable::new(vec![
            Component::plain(Waveform::Cos),
            Component::plain(Waveform::Rademacher),
        ])
        .unwrap();
        let mut v = [0.0, 0.0];
        two.eval_into(0, 0.25, &mut v);
        assert!(v[0].abs() < 1e-15);
        assert_eq!(v[1], 1.0);
    }

    #[test]
    fn lattice_flags() {
        assert_eq!(Observable::scalar(Waveform::Rademacher).lattice_span(), Some(2.0));
        assert_eq!(Observable::scalar(Waveform::Cos).lattice_span(), None);
        // commensurable table: values on lattice of span 0.5
        let t = Observable::scalar(Waveform::Table(vec![1.0, -0.5, 0.0, 0.5]));
        assert!((t.lattice_span().unwrap() - 0.5).abs() < 1e-9);
        // incommensurable values defeat the lattice detector
        let t = Observable::scalar(Waveform::Table(vec![0.0, 1.0, std::f64::consts::SQRT_2]));
        assert_eq!(t.lattice_span(), None);
    }

    #[test]
    fn symbol_scales_modulate() {
        let comp = Component {
            wave: Waveform::Rademacher,
            symbol_scale: Some(vec![1.0, 2.0]),
        };
        assert_eq!(comp.eval(0, 0.1), 1.0);
        assert_eq!(comp.eval(1, 0.1), 2.0);
        let obs = Observable::new(vec![comp]).unwrap();
        assert_eq!(obs.bound(), 2.0);
        assert_eq!(obs.lattice_span(), None);
    }
}
