//! Glue: a base orbit, its fiber maps, discretized operators and per-fiber
//! observable values, bundled for the cocycle and Monte Carlo layers.

use crate::base::{BaseOrbit, BaseSystem};
use crate::error::{Error, Result};
use crate::maps::{FiberSelector, Observable, PiecewiseAffineMap};
use crate::ulam::{Partition, UlamOperator};

/// One driven system: everything downstream (pullbacks, tilted traces,
/// sampling) reads fibers through this bundle. Construction precomputes the
/// per-symbol operators and per-symbol observable bin values once; fibers
/// share them by symbol.
#[derive(Clone, Debug)]
pub struct QuenchedSystem {
    orbit: BaseOrbit,
    selector: FiberSelector,
    observable: Observable,
    partition: Partition,
    symbol_ops: Vec<UlamOperator>,
    /// `[symbol][component][bin]`
    symbol_bins: Vec<Vec<Vec<f64>>>,
}

impl QuenchedSystem {
    pub fn new(
        base: BaseSystem,
        selector: FiberSelector,
        observable: Observable,
        n_bins: usize,
        n_back: usize,
        n_fwd: usize,
    ) -> Result<Self> {
        let partition = Partition::new(n_bins)?;
        if selector.global_min_slope() <= 1.0 {
            return Err(Error::invalid("all fiber maps must be uniformly expanding"));
        }
        let origin = base.origin();
        let orbit = BaseOrbit::new(base, origin, n_back, n_fwd);
        let alphabet = orbit.base().alphabet_size();
        let mut symbol_ops = Vec::with_capacity(alphabet);
        let mut symbol_bins = Vec::with_capacity(alphabet);
        for s in 0..alphabet {
            let map = selector.map_for(s);
            symbol_ops.push(UlamOperator::build(map, partition)?);
            let bins = observable
                .components
                .iter()
                .map(|c| {
                    let scale = c.scale(s);
                    c.wave.bin_values(n_bins).into_iter().map(|v| scale * v).collect()
                })
                .collect();
            symbol_bins.push(bins);
        }
        Ok(QuenchedSystem { orbit, selector, observable, partition, symbol_ops, symbol_bins })
    }

    pub fn orbit(&self) -> &BaseOrbit {
        &self.orbit
    }

    pub fn observable(&self) -> &Observable {
        &self.observable
    }

    pub fn selector(&self) -> &FiberSelector {
        &self.selector
    }

    pub fn partition(&self) -> Partition {
        self.partition
    }

    pub fn n_bins(&self) -> usize {
        self.partition.len()
    }

    pub fn dim(&self) -> usize {
        self.observable.dim()
    }

    #[inline]
    pub fn symbol(&self, k: i64) -> usize {
        self.orbit.symbol(k)
    }

    #[inline]
    pub fn op_at(&self, k: i64) -> &UlamOperator {
        &self.symbol_ops[self.symbol(k)]
    }

    #[inline]
    pub fn map_at(&self, k: i64) -> &PiecewiseAffineMap {
        self.selector.map_for(self.symbol(k))
    }

    /// Observable bin values at fiber `k`, uncentered: `[component][bin]`.
    #[inline]
    pub fn bins_at(&self, k: i64) -> &[Vec<f64>] {
        &self.symbol_bins[self.symbol(k)]
    }

    pub fn op_for_symbol(&self, s: usize) -> &UlamOperator {
        &self.symbol_ops[s]
    }

    /// Uncentered observable bin values for a symbol: `[component][bin]`.
    pub fn bins_at_symbol(&self, s: usize) -> &[Vec<f64>] {
        &self.symbol_bins[s]
    }

    /// True when the orbit stretch `[lo, hi]` uses a single map, so the
    /// cocycle is autonomous there.
    pub fn is_autonomous_on(&self, lo: i64, hi: i64) -> bool {
        match &self.selector {
            FiberSelector::Constant(_) => true,
            FiberSelector::PerSymbol(_) => self.orbit.is_constant_on(lo, hi),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::Waveform;

    #[test]
    fn per_symbol_operators_follow_the_orbit() {
        let base = BaseSystem::iid(vec![0.5, 0.5], 42).unwrap();
        let sel = FiberSelector::beta_per_symbol(&[2.0, 3.0]).unwrap();
        let obs = Observable::scalar(Waveform::Rademacher);
        let sys = QuenchedSystem::new(base, sel, obs, 64, 16, 16).unwrap();
        for k in -16..=16 {
            let s = sys.symbol(k);
            let want = if s == 0 { 2 } else { 3 };
            assert_eq!(sys.map_at(k).branches().len(), want);
            assert_eq!(sys.op_at(k).n(), 64);
        }
    }

    #[test]
    fn min_expansion_over_an_orbit_window() {
        let base = BaseSystem::iid(vec![0.3, 0.7], 9).unwrap();
        let sel = FiberSelector::beta_per_symbol(&[2.0, 3.0]).unwrap();
        let obs = Observable::scalar(Waveform::Cos);
        let sys = QuenchedSystem::new(base, sel, obs, 32, 0, 10_000).unwrap();
        let min = (0..10_000).map(|k| sys.map_at(k).min_slope()).fold(f64::INFINITY, f64::min);
        assert!(min >= 2.0 - 1e-15);
    }

    #[test]
    fn autonomy_detection() {
        let base = BaseSystem::iid(vec![1.0, 0.0], 5).unwrap();
        let sel = FiberSelector::beta_per_symbol(&[2.0, 3.0]).unwrap();
        let obs = Observable::scalar(Waveform::Cos);
        let sys = QuenchedSystem::new(base, sel, obs, 32, 8, 64).unwrap();
        assert!(sys.is_autonomous_on(-8, 64));

        let fair = BaseSystem::iid(vec![0.5, 0.5], 5).unwrap();
        let sel = FiberSelector::beta_per_symbol(&[2.0, 3.0]).unwrap();
        let obs = Observable::scalar(Waveform::Cos);
        let sys = QuenchedSystem::new(fair, sel, obs, 32, 8, 64).unwrap();
        assert!(!sys.is_autonomous_on(-8, 64));
    }
}
