//! Data-masking geometry: reflections, left/right partitions and the masked
//! view in which candidate hypotheses are only seen as `{U, Ǔ}` pairs.

use serde::{Deserialize, Serialize};

use crate::error::{Result, ZapError};
use crate::model::TestingInput;
use crate::numeric::{clamp_unit, UnitInterval};
use crate::scalar::Scalar;

/// Reflection about 0.25 on the left half and about 0.75 on the right half.
pub fn reflect<F: Scalar>(u: UnitInterval<F>) -> UnitInterval<F> {
    UnitInterval::new(reflect_raw(u.get())).expect("reflection stays in the unit interval")
}

#[inline]
pub(crate) fn reflect_raw<F: Scalar>(u: F) -> F {
    let half = F::lit(0.5);
    let r = if u > half { F::lit(1.5) - u } else { half - u };
    clamp_unit(r)
}

/// The pair `{u, ǔ}` built from its element in the outer quarter of the
/// group, where the reflection is exact. Both members of a pair therefore
/// map to bit-identical values.
pub(crate) fn canonical_pair<F: Scalar>(u: F) -> MaskedValue<F> {
    let half = F::lit(0.5);
    if u <= half {
        let anchor = if u >= F::lit(0.25) { u } else { half - u };
        MaskedValue::pair(clamp_unit(half - anchor), anchor)
    } else {
        let anchor = if u >= F::lit(0.75) { u } else { F::lit(1.5) - u };
        MaskedValue::pair(F::lit(1.5) - anchor, anchor)
    }
}

#[inline]
pub(crate) fn is_left<F: Scalar>(u: F) -> bool {
    u <= F::lit(0.5)
}

/// Placement of a hypothesis relative to the thresholding functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    RejectLeft,
    AcceptLeft,
    RejectRight,
    AcceptRight,
    Unmasked,
}

impl Region {
    pub fn is_masked(self) -> bool {
        self != Region::Unmasked
    }

    pub fn is_reject(self) -> bool {
        matches!(self, Region::RejectLeft | Region::RejectRight)
    }

    pub fn is_accept(self) -> bool {
        matches!(self, Region::AcceptLeft | Region::AcceptRight)
    }
}

fn check_thresholds<F: Scalar>(s_l: F, s_r: F) -> Result<()> {
    if !(s_l >= F::zero() && s_l <= F::lit(0.25)) {
        return Err(ZapError::Domain(format!("left threshold {s_l} outside [0, 0.25]")));
    }
    if !(s_r >= F::lit(0.75) && s_r <= F::one()) {
        return Err(ZapError::Domain(format!("right threshold {s_r} outside [0.75, 1]")));
    }
    Ok(())
}

/// Region of `u` under thresholds `s_l` and `s_r`.
pub fn partition<F: Scalar>(u: UnitInterval<F>, s_l: F, s_r: F) -> Result<Region> {
    check_thresholds(s_l, s_r)?;
    Ok(partition_raw(u.get(), s_l, s_r))
}

pub(crate) fn partition_raw<F: Scalar>(u: F, s_l: F, s_r: F) -> Region {
    let half = F::lit(0.5);
    if u <= half {
        if u <= s_l {
            Region::RejectLeft
        } else if u >= half - s_l {
            Region::AcceptLeft
        } else {
            Region::Unmasked
        }
    } else if u >= s_r {
        Region::RejectRight
    } else if u <= F::lit(1.5) - s_r {
        Region::AcceptRight
    } else {
        Region::Unmasked
    }
}

/// Pointwise thresholding functions, one value per hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct ThresholdFunctions<F> {
    pub s_l: Vec<F>,
    pub s_r: Vec<F>,
}

impl<F: Scalar> ThresholdFunctions<F> {
    pub fn constant(m: usize, s_l: F, s_r: F) -> Result<Self> {
        check_thresholds(s_l, s_r)?;
        Ok(Self { s_l: vec![s_l; m], s_r: vec![s_r; m] })
    }

    pub fn new(s_l: Vec<F>, s_r: Vec<F>) -> Result<Self> {
        if s_l.len() != s_r.len() {
            return Err(ZapError::Dimension { expected: s_l.len(), got: s_r.len() });
        }
        for (&l, &r) in s_l.iter().zip(&s_r) {
            check_thresholds(l, r)?;
        }
        Ok(Self { s_l, s_r })
    }

    pub fn len(&self) -> usize {
        self.s_l.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s_l.is_empty()
    }

    /// True when `self` is a legal successor of `prev`: `s_l` pointwise
    /// non-increasing and `s_r` pointwise non-decreasing.
    pub fn refines(&self, prev: &Self) -> bool {
        self.len() == prev.len()
            && self.s_l.iter().zip(&prev.s_l).all(|(a, b)| a <= b)
            && self.s_r.iter().zip(&prev.s_r).all(|(a, b)| a >= b)
    }
}

/// What the fitting procedures see of one hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MaskedValue<F> {
    Single(F),
    /// Sorted pair `(lo, hi)`; the true value is not recorded.
    Pair(F, F),
}

impl<F: Scalar> MaskedValue<F> {
    pub fn pair(a: F, b: F) -> Self {
        if a <= b {
            MaskedValue::Pair(a, b)
        } else {
            MaskedValue::Pair(b, a)
        }
    }

    pub fn is_pair(&self) -> bool {
        matches!(self, MaskedValue::Pair(..))
    }

    /// Both masked elements lie on the same side of 0.5.
    pub fn is_left(&self) -> bool {
        match *self {
            MaskedValue::Single(u) => is_left(u),
            MaskedValue::Pair(lo, _) => is_left(lo),
        }
    }

    /// The element nearer the extreme of the unit interval.
    pub fn extreme(&self) -> F {
        match *self {
            MaskedValue::Single(u) => u,
            MaskedValue::Pair(lo, hi) => {
                if is_left(lo) {
                    lo
                } else {
                    hi
                }
            }
        }
    }
}

/// Snapshot of the masking state at one step of the reveal loop.
///
/// Masked entries expose only their sorted pair. The true u-values are
/// kept privately so that a reveal can publish them.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskState<F> {
    region: Vec<Region>,
    u_tilde: Vec<MaskedValue<F>>,
    thresholds: ThresholdFunctions<F>,
    revealed: Vec<bool>,
    truth: Vec<F>,
    step: usize,
    n_reject: usize,
    n_accept: usize,
}

/// Applies the partition to every hypothesis.
pub fn masked_view<F: Scalar>(data: &TestingInput<F>, thresholds: ThresholdFunctions<F>) -> Result<MaskState<F>> {
    let m = data.m();
    MaskState::build(data.u_values().to_vec(), thresholds, vec![false; m], 0)
}

impl<F: Scalar> MaskState<F> {
    fn build(truth: Vec<F>, thresholds: ThresholdFunctions<F>, revealed: Vec<bool>, step: usize) -> Result<Self> {
        let m = truth.len();
        if thresholds.len() != m {
            return Err(ZapError::Dimension { expected: m, got: thresholds.len() });
        }
        let mut region = Vec::with_capacity(m);
        let mut u_tilde = Vec::with_capacity(m);
        let (mut n_reject, mut n_accept) = (0, 0);
        for i in 0..m {
            let u = truth[i];
            let r = if revealed[i] {
                Region::Unmasked
            } else {
                partition_raw(u, thresholds.s_l[i], thresholds.s_r[i])
            };
            n_reject += r.is_reject() as usize;
            n_accept += r.is_accept() as usize;
            region.push(r);
            u_tilde.push(if r.is_masked() { canonical_pair(u) } else { MaskedValue::Single(u) });
        }
        Ok(Self { region, u_tilde, thresholds, revealed, truth, step, n_reject, n_accept })
    }

    pub fn m(&self) -> usize {
        self.u_tilde.len()
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn region(&self, i: usize) -> Region {
        self.region[i]
    }

    pub fn u_tilde(&self) -> &[MaskedValue<F>] {
        &self.u_tilde
    }

    pub fn thresholds(&self) -> &ThresholdFunctions<F> {
        &self.thresholds
    }

    pub fn is_revealed(&self, i: usize) -> bool {
        self.revealed[i]
    }

    pub fn n_reject(&self) -> usize {
        self.n_reject
    }

    pub fn n_accept(&self) -> usize {
        self.n_accept
    }

    pub fn n_masked(&self) -> usize {
        self.n_reject + self.n_accept
    }

    /// Indices in the current rejection set, ascending.
    pub fn rejected(&self) -> Vec<usize> {
        (0..self.m()).filter(|&i| self.region[i].is_reject()).collect()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.m()).filter(|&i| self.u_tilde[i].is_pair()).collect()
    }

    /// Reveals hypothesis `j`: moves its threshold onto the outer pair
    /// element, flags it as revealed and publishes its u-value.
    pub(crate) fn reveal(&mut self, j: usize) -> Result<()> {
        let MaskedValue::Pair(lo, hi) = self.u_tilde[j] else {
            return Err(ZapError::InvalidInput(format!("hypothesis {j} is not masked")));
        };
        if is_left(lo) {
            self.thresholds.s_l[j] = lo;
        } else {
            self.thresholds.s_r[j] = hi;
        }
        let r = self.region[j];
        self.n_reject -= r.is_reject() as usize;
        self.n_accept -= r.is_accept() as usize;
        self.region[j] = Region::Unmasked;
        self.revealed[j] = true;
        self.u_tilde[j] = MaskedValue::Single(self.truth[j]);
        self.step += 1;
        Ok(())
    }
}

/// Finite-sample FDP estimate `(1 + |A|) / max(|R|, 1)`.
pub fn fdp_finite<F: Scalar>(state: &MaskState<F>) -> F {
    fdp_from_counts(state.n_reject(), state.n_accept())
}

pub(crate) fn fdp_from_counts<F: Scalar>(n_reject: usize, n_accept: usize) -> F {
    F::from_usize_lossy(1 + n_accept) / F::from_usize_lossy(n_reject.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn u(v: f64) -> UnitInterval<f64> {
        UnitInterval::clamped(v).unwrap()
    }

    #[test]
    fn reflect_examples() {
        assert!((reflect(u(0.1)).get() - 0.4).abs() < 1e-15);
        assert_eq!(reflect(u(0.25)).get(), 0.25);
        assert_eq!(reflect(u(0.75)).get(), 0.75);
        assert!((reflect(u(0.9)).get() - 0.6).abs() < 1e-15);
        assert_eq!(reflect(u(0.5)).get(), 1e-15);
    }

    #[test]
    fn partition_examples() {
        assert_eq!(partition(u(0.05), 0.2, 0.8).unwrap(), Region::RejectLeft);
        assert_eq!(partition(u(0.35), 0.2, 0.8).unwrap(), Region::AcceptLeft);
        assert_eq!(partition(u(0.22), 0.2, 0.8).unwrap(), Region::Unmasked);
        assert_eq!(partition(u(0.85), 0.2, 0.8).unwrap(), Region::RejectRight);
        assert_eq!(partition(u(0.65), 0.2, 0.8).unwrap(), Region::AcceptRight);
        assert_eq!(partition(u(0.72), 0.2, 0.8).unwrap(), Region::Unmasked);
        assert_eq!(partition(u(0.5), 0.2, 0.8).unwrap(), Region::AcceptLeft);
        assert!(partition(u(0.5), 0.3, 0.8).is_err());
        assert!(partition(u(0.5), 0.2, 0.7).is_err());
    }

    #[test]
    fn fdp_examples() {
        assert_eq!(fdp_from_counts::<f64>(4, 0), 0.25);
        assert!((fdp_from_counts::<f64>(389, 193) - 194.0 / 389.0).abs() < 1e-15);
        assert_eq!(fdp_from_counts::<f64>(0, 7), 8.0);
    }

    #[test]
    fn masked_view_extremes() {
        let us = vec![0.22f64, 0.27, 0.72, 0.71];
        let data = TestingInput::from_u(us, vec![], 0).unwrap();
        let state = masked_view(&data, ThresholdFunctions::constant(4, 0.2, 0.8).unwrap()).unwrap();
        assert_eq!(state.n_masked(), 0);
        assert!(state.u_tilde().iter().all(|v| !v.is_pair()));

        let state = masked_view(&data, ThresholdFunctions::constant(4, 0.25, 0.75).unwrap()).unwrap();
        assert_eq!(state.n_masked(), 4);
        assert_eq!(state.n_reject(), 1);
        assert_eq!(state.n_accept(), 3);
    }

    #[test]
    fn reveal_updates_threshold_and_flag() {
        let data = TestingInput::from_u(vec![0.1f64, 0.9, 0.4], vec![], 0).unwrap();
        let mut state = masked_view(&data, ThresholdFunctions::constant(3, 0.2, 0.8).unwrap()).unwrap();
        assert_eq!(state.rejected(), vec![0, 1]);
        assert_eq!(state.n_accept(), 1);
        state.reveal(2).unwrap();
        assert!((state.thresholds().s_l[2] - 0.1).abs() < 1e-15);
        assert!(state.is_revealed(2));
        assert_eq!(state.u_tilde()[2], MaskedValue::Single(0.4));
        state.reveal(1).unwrap();
        assert_eq!(state.thresholds().s_r[1], 0.9);
        assert_eq!(state.n_masked(), 1);
        assert_eq!(state.step(), 2);
        assert!(state.reveal(1).is_err());
    }

    proptest! {
        #[test]
        fn reflection_is_an_involution(v in 1e-6f64..(1.0 - 1e-6)) {
            let once = reflect(u(v));
            let twice = reflect(once).get();
            prop_assert!((twice - v).abs() < 1e-14);
            prop_assert_eq!(is_left(once.get()), is_left(v));
        }

        #[test]
        fn canonical_pair_is_shared_by_both_members(v in 1e-9f64..(1.0 - 1e-9)) {
            prop_assert_eq!(canonical_pair(v), canonical_pair(reflect_raw(v)));
        }

        #[test]
        fn partition_is_exclusive_and_mirrored(v in 1e-6f64..(1.0 - 1e-6), s_l in 0.0f64..0.2499, s_r in 0.7501f64..1.0) {
            let r = partition(u(v), s_l, s_r).unwrap();
            let rr = partition(reflect(u(v)), s_l, s_r).unwrap();
            // A masked pair always splits across reject and accept.
            prop_assert_eq!(r.is_reject(), rr.is_accept());
            prop_assert_eq!(r.is_masked(), rr.is_masked());
        }

        #[test]
        fn pair_view_ignores_which_element_is_true(vals in proptest::collection::vec(1e-6f64..(1.0 - 1e-6), 1..40)) {
            let flipped: Vec<f64> = vals.iter().map(|&v| reflect_raw(v)).collect();
            let th = ThresholdFunctions::constant(vals.len(), 0.2, 0.8).unwrap();
            let a = masked_view(&TestingInput::from_u(vals.clone(), vec![], 0).unwrap(), th.clone()).unwrap();
            let b = masked_view(&TestingInput::from_u(flipped, vec![], 0).unwrap(), th).unwrap();
            for i in 0..vals.len() {
                if a.region(i).is_masked() {
                    let (MaskedValue::Pair(l1, h1), MaskedValue::Pair(l2, h2)) = (a.u_tilde()[i], b.u_tilde()[i]) else {
                        panic!("masked entry without pair");
                    };
                    prop_assert!(l1 == l2 && h1 == h2);
                }
            }
            prop_assert_eq!(a.n_masked(), b.n_masked());
            prop_assert_eq!(a.n_reject(), b.n_accept());
        }
    }

    #[test]
    fn null_symmetry_of_reject_and_accept_measure() {
        // Uniform left half: RejectLeft has measure s_l and AcceptLeft [0.5 - s_l, 0.5] too.
        let n = 200_000;
        for s_l in [0.05, 0.13, 0.2] {
            let (mut rej, mut acc) = (0usize, 0usize);
            for k in 0..n {
                let v = 0.5 * (k as f64 + 0.5) / n as f64;
                match partition_raw(v, s_l, 0.8) {
                    Region::RejectLeft => rej += 1,
                    Region::AcceptLeft => acc += 1,
                    _ => {}
                }
            }
            assert!((rej as f64 - acc as f64).abs() <= 2.0);
        }
    }
}
