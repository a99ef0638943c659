//! Driving systems: invertible ergodic bases and their two-sided orbits.
//!
//! A base system selects which fiber map and observable act at each time
//! step. Two families are provided: an irrational circle rotation and a
//! two-sided i.i.d. symbol sequence. States carry an exact integer index, so
//! advancing by `k` and then by `-k` returns the identical state and symbol
//! sequences extend as far into the past as into the future.

use crate::error::{Error, Result};
use crate::rng::{mix64, unit_f64};

/// Default rotation angle: the golden-mean conjugate `(sqrt 5 - 1)/2`,
/// a badly approximable irrational.
pub const GOLDEN_ROTATION: f64 = 0.6180339887498949;

#[derive(Clone, Debug, PartialEq)]
pub enum BaseKind {
    /// `x -> frac(x + alpha)` on the circle; symbols are the halves of `[0,1)`.
    Rotation { alpha: f64, x0: f64 },
    /// Two-sided i.i.d. symbols; the symbol at absolute index `j` is a pure
    /// function of `(seed, j)` via a counter-keyed mixer.
    Iid { weights: Vec<f64>, seed: u64 },
}

/// An invertible driving system together with a human-readable description.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseSystem {
    pub kind: BaseKind,
    pub description: String,
}

/// A point of the base: the system it belongs to is implicit, the state is
/// the exact integer index `k` (meaning "advance the origin by k").
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct OmegaState {
    pub index: i64,
}

impl BaseSystem {
    pub fn rotation(alpha: f64, x0: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) || !alpha.is_finite() {
            return Err(Error::invalid(format!("rotation angle must lie in (0,1), got {alpha}")));
        }
        if !(0.0..1.0).contains(&x0) {
            return Err(Error::invalid(format!("rotation origin must lie in [0,1), got {x0}")));
        }
        Ok(BaseSystem {
            kind: BaseKind::Rotation { alpha, x0 },
            description: format!("rotation(alpha={alpha})"),
        })
    }

    pub fn golden_rotation(x0: f64) -> Result<Self> {
        Self::rotation(GOLDEN_ROTATION, x0)
    }

    /// Two-sided i.i.d. base over `weights.len() >= 2` symbols. Weights must
    /// be nonnegative and sum to 1 within `1e-12`.
    pub fn iid(weights: Vec<f64>, seed: u64) -> Result<Self> {
        if weights.len() < 2 {
            return Err(Error::invalid("iid base needs an alphabet of size >= 2"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("iid weights must be nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("iid weights must sum to 1, got {total}")));
        }
        Ok(BaseSystem {
            kind: BaseKind::Iid { weights: weights.clone(), seed },
            description: format!("iid(m={}, seed={seed})", weights.len()),
        })
    }

    /// The state at the orbit origin.
    pub fn origin(&self) -> OmegaState {
        OmegaState { index: 0 }
    }

    /// `sigma^k omega`; exact on the index, so the group law holds bitwise.
    pub fn advance(&self, omega: OmegaState, k: i64) -> OmegaState {
        OmegaState { index: omega.index + k }
    }

    /// Number of symbols the base can emit.
    pub fn alphabet_size(&self) -> usize {
        match &self.kind {
            BaseKind::Rotation { .. } => 2,
            BaseKind::Iid { weights, .. } => weights.len(),
        }
    }

    /// Circle coordinate of a rotation state, `frac(x0 + k*alpha)`.
    pub fn point(&self, omega: OmegaState) -> Option<f64> {
        match &self.kind {
            BaseKind::Rotation { alpha, x0 } => {
                let p = (x0 + omega.index as f64 * alpha).rem_euclid(1.0);
                Some(if p >= 1.0 { 0.0 } else { p })
            }
            BaseKind::Iid { .. } => None,
        }
    }

    /// Symbol at the given state. For rotations the circle is split at 1/2;
    /// for i.i.d. bases the symbol is a pure function of `(seed, index)`.
    pub fn symbol_at(&self, omega: OmegaState) -> usize {
        match &self.kind {
            BaseKind::Rotation { .. } => {
                let p = self.point(omega).expect("rotation state has a point");
                usize::from(p >= 0.5)
            }
            BaseKind::Iid { weights, seed } => {
                let bits = mix64(seed ^ mix64(omega.index as u64 ^ 0x51A0_9E66_7F3B_CC09));
                let u = unit_f64(bits);
                let mut acc = 0.0;
                for (s, w) in weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        return s;
                    }
                }
                weights.len() - 1
            }
        }
    }
}

/// A cached window of a two-sided orbit: symbols for indices in
/// `[-n_back, n_fwd]` relative to the origin state.
#[derive(Clone, Debug)]
pub struct BaseOrbit {
    base: BaseSystem,
    origin: OmegaState,
    n_back: i64,
    symbols: Vec<u16>,
}

impl BaseOrbit {
    pub fn new(base: BaseSystem, origin: OmegaState, n_back: usize, n_fwd: usize) -> Self {
        let n_back = n_back as i64;
        let len = n_back + n_fwd as i64 + 1;
        let symbols = (0..len)
            .map(|i| base.symbol_at(base.advance(origin, i - n_back)) as u16)
            .collect();
        BaseOrbit { base, origin, n_back, symbols }
    }

    pub fn base(&self) -> &BaseSystem {
        &self.base
    }

    pub fn window(&self) -> (i64, i64) {
        (-self.n_back, self.symbols.len() as i64 - self.n_back - 1)
    }

    /// State at relative index `k` (must lie inside the window for symbols,
    /// but the state itself is defined for any `k`).
    pub fn state(&self, k: i64) -> OmegaState {
        self.base.advance(self.origin, k)
    }

    /// Cached symbol at relative index `k`.
    pub fn symbol(&self, k: i64) -> usize {
        let i = k + self.n_back;
        debug_assert!(
            (0..self.symbols.len() as i64).contains(&i),
            "orbit index {k} outside window {:?}",
            self.window()
        );
        self.symbols[i as usize] as usize
    }

    /// True when every symbol in `[lo, hi]` coincides; such a stretch drives
    /// an autonomous (single-map) cocycle and enables fast paths.
    pub fn is_constant_on(&self, lo: i64, hi: i64) -> bool {
        let (wlo, whi) = self.window();
        if lo < wlo || hi > whi {
            return false;
        }
        let first = self.symbol(lo);
        (lo..=hi).all(|k| self.symbol(k) == first)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn advance_zero_is_identity() {
        let base = BaseSystem::iid(vec![0.5, 0.5], 1).unwrap();
        let omega = base.origin();
        assert_eq!(base.advance(omega, 0), omega);
    }

    #[test]
    fn rotation_quarter_advances_by_half_in_two_steps() {
        // test-only rational angle: frac(0.1 + 2*0.25) = 0.6
        let base = BaseSystem::rotation(0.25, 0.1).unwrap();
        let s = base.advance(base.origin(), 2);
        assert!((base.point(s).unwrap() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn rotation_symbol_threshold() {
        let base = BaseSystem::rotation(0.25, 0.7).unwrap();
        assert_eq!(base.symbol_at(base.origin()), 1);
        let base = BaseSystem::rotation(0.25, 0.2).unwrap();
        assert_eq!(base.symbol_at(base.origin()), 0);
    }

    #[test]
    fn iid_symbol_recomputes_from_scratch() {
        // the symbol at index 5 must equal the one recomputed via a fresh state
        let base = BaseSystem::iid(vec![0.3, 0.7], 7).unwrap();
        let via_orbit = base.symbol_at(base.advance(base.origin(), 5));
        let fresh = BaseSystem::iid(vec![0.3, 0.7], 7).unwrap();
        let direct = fresh.symbol_at(OmegaState { index: 5 });
        assert_eq!(via_orbit, direct);
    }

    #[test]
    fn degenerate_weights_always_first_symbol() {
        let base = BaseSystem::iid(vec![1.0, 0.0], 9).unwrap();
        for k in -50..50 {
            assert_eq!(base.symbol_at(OmegaState { index: k }), 0);
        }
    }

    #[test]
    fn fair_coin_frequency_binomial_ci() {
        // binomial oracle: one-sided deviation of the mean at 10^6 draws
        let base = BaseSystem::iid(vec![0.5, 0.5], 2024).unwrap();
        let n = 1_000_000;
        let zeros = (0..n)
            .filter(|&k| base.symbol_at(OmegaState { index: k }) == 0)
            .count();
        let freq = zeros as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.002, "freq={freq}");
    }

    #[test]
    fn birkhoff_average_within_three_se() {
        // bounded symbol function s -> s on a 3-letter base at n = 1e5
        let w = vec![0.2, 0.5, 0.3];
        let base = BaseSystem::iid(w.clone(), 77).unwrap();
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|k| base.symbol_at(OmegaState { index: k }) as f64)
            .sum::<f64>()
            / n as f64;
        let expect = 0.0 * w[0] + 1.0 * w[1] + 2.0 * w[2];
        let var = w
            .iter()
            .enumerate()
            .map(|(s, p)| p * (s as f64 - expect).powi(2))
            .sum::<f64>();
        let se = (var / n as f64).sqrt();
        assert!((mean - expect).abs() < 3.0 * se, "mean={mean} expect={expect}");
    }

    #[test]
    fn orbits_reproduce_and_cache_consistently() {
        let base = BaseSystem::iid(vec![0.25, 0.25, 0.5], 5).unwrap();
        let a = BaseOrbit::new(base.clone(), base.origin(), 100, 100);
        let b = BaseOrbit::new(base.clone(), base.origin(), 100, 100);
        for k in -100..=100 {
            assert_eq!(a.symbol(k), b.symbol(k));
            assert_eq!(a.symbol(k), base.symbol_at(a.state(k)));
        }
    }

    proptest! {
        #[test]
        fn group_law_is_exact(a in -1_000_000i64..1_000_000, b in -1_000_000i64..1_000_000) {
            let base = BaseSystem::iid(vec![0.5, 0.5], 11).unwrap();
            let omega = base.origin();
            let lhs = base.advance(omega, a + b);
            let rhs = base.advance(base.advance(omega, a), b);
            prop_assert_eq!(lhs, rhs);
            prop_assert_eq!(base.symbol_at(lhs), base.symbol_at(rhs));
        }

        #[test]
        fn rotation_round_trip_is_bitwise(k in -1_000_000i64..1_000_000) {
            let base = BaseSystem::golden_rotation(0.31).unwrap();
            let omega = base.origin();
            let there = base.advance(omega, k);
            let back = base.advance(there, -k);
            prop_assert_eq!(back, omega);
            prop_assert_eq!(base.point(back).unwrap().to_bits(), base.point(omega).unwrap().to_bits());
        }
    }
}
