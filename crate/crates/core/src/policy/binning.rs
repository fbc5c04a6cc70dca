//! Uniform per-dimension action binning over the 1st–99th percentile range.

use crate::error::{Error, Result};
use crate::scene::Action;

pub const ACTION_DIM: usize = Action::DIM;

#[derive(Clone, Debug, PartialEq)]
pub struct ActionBinning {
    pub bins: usize,
    range: Option<([f64; ACTION_DIM], [f64; ACTION_DIM])>,
}

/// Linear-interpolated percentile of sorted data.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

impl ActionBinning {
    pub fn unfitted(bins: usize) -> Self {
        Self { bins, range: None }
    }

    pub fn from_ranges(bins: usize, lo: [f64; ACTION_DIM], hi: [f64; ACTION_DIM]) -> Result<Self> {
        if bins == 0 {
            return Err(Error::Parameter("bin count must be positive".into()));
        }
        for d in 0..ACTION_DIM {
            if !(lo[d] < hi[d]) || !lo[d].is_finite() || !hi[d].is_finite() {
                return Err(Error::Parameter(format!("bad range [{}, {}] for dimension {d}", lo[d], hi[d])));
            }
        }
        Ok(Self {
            bins,
            range: Some((lo, hi)),
        })
    }

    /// A dimension with a degenerate range gets a unit-width range placing
    /// its value at the center of bin `bins / 2`.
    pub fn fit(actions: &[Action], bins: usize) -> Result<Self> {
        if actions.is_empty() {
            return Err(Error::Data("cannot fit binning on zero actions".into()));
        }
        let mut lo = [0.0; ACTION_DIM];
        let mut hi = [0.0; ACTION_DIM];
        for d in 0..ACTION_DIM {
            let mut v: Vec<f64> = actions.iter().map(|a| a.to_array()[d]).collect();
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Data(format!("non-finite action value in dimension {d}")));
            }
            v.sort_by(f64::total_cmp);
            let (a, b) = (percentile(&v, 1.0), percentile(&v, 99.0));
            if b - a > 1e-12 {
                lo[d] = a;
                hi[d] = b;
            } else {
                let w = 1.0 / bins as f64;
                let mid = 0.5 * (a + b);
                lo[d] = mid - ((bins / 2) as f64 + 0.5) * w;
                hi[d] = lo[d] + 1.0;
            }
        }
        Self::from_ranges(bins, lo, hi)
    }

    pub fn is_fitted(&self) -> bool {
        self.range.is_some()
    }

    pub fn ranges(&self) -> Result<([f64; ACTION_DIM], [f64; ACTION_DIM])> {
        self.range.ok_or(Error::UnfittedBinning)
    }

    pub fn width(&self, d: usize) -> Result<f64> {
        let (lo, hi) = self.ranges()?;
        Ok((hi[d] - lo[d]) / self.bins as f64)
    }

    /// Bins are `[lo + i·w, lo + (i+1)·w)`, the last one closed; values
    /// outside the range clip to the edge bins.
    pub fn encode_value(&self, d: usize, x: f64) -> Result<usize> {
        let (lo, hi) = self.ranges()?;
        let t = (x - lo[d]) / (hi[d] - lo[d]) * self.bins as f64;
        Ok(if t.is_nan() || t < 0.0 {
            0
        } else {
            (t.floor() as usize).min(self.bins - 1)
        })
    }

    pub fn decode_value(&self, d: usize, bin: usize) -> Result<f64> {
        let (lo, hi) = self.ranges()?;
        let b = bin.min(self.bins - 1) as f64;
        Ok(lo[d] + (b + 0.5) * (hi[d] - lo[d]) / self.bins as f64)
    }

    pub fn encode(&self, a: &Action) -> Result<[usize; ACTION_DIM]> {
        let v = a.to_array();
        let mut out = [0; ACTION_DIM];
        for d in 0..ACTION_DIM {
            out[d] = self.encode_value(d, v[d])?;
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[usize; ACTION_DIM]) -> Result<Action> {
        let mut v = [0.0; ACTION_DIM];
        for d in 0..ACTION_DIM {
            v[d] = self.decode_value(d, ids[d])?;
        }
        Ok(Action::from_array(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dyadic() -> ActionBinning {
        ActionBinning::from_ranges(64, [-1.0; 7], [1.0; 7]).unwrap()
    }

    /// Brute-force scan of the bin edges.
    fn scan(lo: f64, hi: f64, bins: usize, x: f64) -> usize {
        let w = (hi - lo) / bins as f64;
        let mut b = 0;
        for i in 0..bins {
            if x >= lo + i as f64 * w {
                b = i;
            }
        }
        b
    }

    #[test]
    fn endpoints_midpoint_and_clip() {
        let b = dyadic();
        assert_eq!(b.encode_value(0, -1.0).unwrap(), 0);
        assert_eq!(b.encode_value(0, 1.0).unwrap(), 63);
        assert_eq!(b.encode_value(0, 0.0).unwrap(), 32);
        assert_eq!(scan(-1.0, 1.0, 64, 0.0), 32);
        assert_eq!(b.encode_value(0, 2.0).unwrap(), 63);
        assert_eq!(b.encode_value(0, -5.0).unwrap(), 0);
    }

    #[test]
    fn unfitted_errors() {
        let b = ActionBinning::unfitted(64);
        assert!(matches!(b.encode(&Action::from_array([0.0; 7])), Err(Error::UnfittedBinning)));
        assert!(matches!(b.decode(&[0; 7]), Err(Error::UnfittedBinning)));
    }

    #[test]
    fn fit_percentiles_and_degenerate() {
        let actions: Vec<Action> = (0..=100)
            .map(|i| {
                let x = i as f64 / 100.0;
                Action::from_array([x, -x, 0.0, 0.0, 0.0, 0.0, 1.0])
            })
            .collect();
        let b = ActionBinning::fit(&actions, 64).unwrap();
        let (lo, hi) = b.ranges().unwrap();
        assert!((lo[0] - 0.01).abs() < 1e-12 && (hi[0] - 0.99).abs() < 1e-12);
        assert!((lo[1] + 0.99).abs() < 1e-12);
        // Degenerate dimensions decode back to their constant value.
        assert_eq!(b.encode_value(2, 0.0).unwrap(), 32);
        assert!(b.decode_value(2, 32).unwrap().abs() < 1e-12);
        assert!((b.decode_value(6, b.encode_value(6, 1.0).unwrap()).unwrap() - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn matches_edge_scan(x in -1.5f64..1.5, lo in -3.0f64..0.0, span in 0.1f64..4.0) {
            let hi = lo + span;
            let b = ActionBinning::from_ranges(64, [lo; 7], [hi; 7]).unwrap();
            let w = span / 64.0;
            let t = (x - lo) / w;
            // Skip values within rounding distance of an edge.
            prop_assume!((t - t.round()).abs() > 1e-9);
            prop_assert_eq!(b.encode_value(0, x).unwrap(), scan(lo, hi, 64, x.min(hi)));
        }

        #[test]
        fn round_trip(bin in 0usize..64, x in -1.0f64..=1.0) {
            let b = dyadic();
            prop_assert_eq!(b.encode_value(3, b.decode_value(3, bin).unwrap()).unwrap(), bin);
            let back = b.decode_value(3, b.encode_value(3, x).unwrap()).unwrap();
            prop_assert!((back - x).abs() <= b.width(3).unwrap() / 2.0 + 1e-12);
        }
    }
}
