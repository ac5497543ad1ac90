//! Reliability masks built from total-uncertainty maps, and the schedule of
//! the binary mask's selected portion ρ.

use std::fmt;
use std::str::FromStr;

use crate::data::ImageGrid;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Binary,
    Continuous,
    Attentive,
}

impl MaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskKind::Binary => "binary",
            MaskKind::Continuous => "continuous",
            MaskKind::Attentive => "attentive",
        }
    }
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(MaskKind::Binary),
            "continuous" => Ok(MaskKind::Continuous),
            "attentive" => Ok(MaskKind::Attentive),
            _ => Err(Error::InvalidArgument(format!("unknown mask kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityMask {
    pub weights: ImageGrid,
    pub kind: MaskKind,
    /// Selected portion, binary masks only.
    pub rho_used: Option<f64>,
    /// Smallest excluded uncertainty (`+∞` when nothing is excluded), binary
    /// masks only.
    pub epsilon_used: Option<f64>,
}

impl ReliabilityMask {
    pub fn sum(&self) -> f64 {
        self.weights.values().iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RhoSchedule {
    rho_start: f64,
    rho_end: f64,
    total_iters: u64,
}

impl RhoSchedule {
    pub const DEFAULT_START: f64 = 0.30;
    pub const DEFAULT_END: f64 = 0.80;

    pub fn new(rho_start: f64, rho_end: f64, total_iters: u64) -> Result<Self> {
        if !(0.0 <= rho_start && rho_start <= rho_end && rho_end <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "rho schedule needs 0 <= start <= end <= 1, got {rho_start}..{rho_end}"
            )));
        }
        if total_iters == 0 {
            return Err(Error::InvalidArgument("rho schedule needs total_iters >= 1".into()));
        }
        Ok(Self {
            rho_start,
            rho_end,
            total_iters,
        })
    }

    pub fn with_defaults(total_iters: u64) -> Result<Self> {
        Self::new(Self::DEFAULT_START, Self::DEFAULT_END, total_iters)
    }

    pub fn total_iters(&self) -> u64 {
        self.total_iters
    }

    /// Linear interpolation; iterations past the horizon clamp to the end
    /// value with a logged warning.
    pub fn rho_at(&self, iter: u64) -> f64 {
        if iter > self.total_iters {
            log::warn!(
                "rho schedule queried at iteration {iter} beyond horizon {}; clamping",
                self.total_iters
            );
            return self.rho_end;
        }
        self.rho_start + (self.rho_end - self.rho_start) * iter as f64 / self.total_iters as f64
    }
}

fn check_uncertainty(u: &ImageGrid) -> Result<()> {
    if let Some(n) = u.values().iter().position(|&v| v < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "uncertainty must be nonnegative, pixel {n} is {}",
            u.values()[n]
        )));
    }
    Ok(())
}

/// Selects the `floor(ρ·N)` pixels with the smallest uncertainty, breaking
/// ties by pixel index, and gives them weight 1.
pub fn binary_mask(u: &ImageGrid, rho: f64) -> Result<ReliabilityMask> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidArgument(format!("rho must lie in [0, 1], got {rho}")));
    }
    check_uncertainty(u)?;
    let n = u.len();
    let count = (rho * n as f64).floor() as usize;
    let values = u.values();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut weights = vec![0.0; n];
    for &i in &order[..count] {
        weights[i] = 1.0;
    }
    let epsilon = order.get(count).map_or(f64::INFINITY, |&i| values[i]);
    Ok(ReliabilityMask {
        weights: ImageGrid::new(u.height(), u.width(), weights, 0.0, 1.0)?,
        kind: MaskKind::Binary,
        rho_used: Some(rho),
        epsilon_used: Some(epsilon),
    })
}

/// `m′ = exp(−u)`, in `(0, 1]`.
pub fn continuous_mask(u: &ImageGrid) -> Result<ReliabilityMask> {
    check_uncertainty(u)?;
    Ok(ReliabilityMask {
        weights: u.map(0.0, 1.0, |v| (-v).exp())?,
        kind: MaskKind::Continuous,
        rho_used: None,
        epsilon_used: None,
    })
}

fn weighted_by(base: &ReliabilityMask, attention: &ImageGrid) -> Result<ReliabilityMask> {
    if let Some(n) = attention.values().iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument(format!("attention pixel {n} is outside [0, 1]")));
    }
    Ok(ReliabilityMask {
        weights: base.weights.zip_map(attention, 0.0, 1.0, |m, a| a * m)?,
        kind: MaskKind::Attentive,
        rho_used: base.rho_used,
        epsilon_used: base.epsilon_used,
    })
}

/// `m = a · m′` for a continuous mask `m′`.
pub fn attentive_mask(continuous: &ReliabilityMask, attention: &ImageGrid) -> Result<ReliabilityMask> {
    if continuous.kind != MaskKind::Continuous {
        return Err(Error::InvalidArgument(format!(
            "attentive masks weight a continuous mask, got {}",
            continuous.kind
        )));
    }
    weighted_by(continuous, attention)
}

/// Attention applied to a binary selection instead of the continuous map.
pub fn attentive_binary_mask(binary: &ReliabilityMask, attention: &ImageGrid) -> Result<ReliabilityMask> {
    if binary.kind != MaskKind::Binary {
        return Err(Error::InvalidArgument(format!(
            "expected a binary base mask, got {}",
            binary.kind
        )));
    }
    weighted_by(binary, attention)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(v: &[f64]) -> ImageGrid {
        ImageGrid::new(1, v.len(), v.to_vec(), 0.0, 1.0).unwrap()
    }

    #[test]
    fn schedule_endpoints_and_clamp() {
        let s = RhoSchedule::with_defaults(100).unwrap();
        assert_eq!(s.rho_at(0), 0.30);
        assert!((s.rho_at(50) - 0.55).abs() < 1e-15);
        assert_eq!(s.rho_at(100), 0.80);
        assert_eq!(s.rho_at(1000), 0.80);
        assert!(RhoSchedule::new(0.9, 0.2, 10).is_err());
        assert!(RhoSchedule::new(0.1, 0.2, 0).is_err());
    }

    #[test]
    fn binary_selection_with_ties() {
        let m = binary_mask(&grid(&[0.5, 0.1, 0.5, 0.5, 0.9]), 0.6).unwrap();
        assert_eq!(m.weights.values(), &[1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(m.epsilon_used, Some(0.5));
        let all = binary_mask(&grid(&[0.3, 0.2]), 1.0).unwrap();
        assert_eq!(all.epsilon_used, Some(f64::INFINITY));
        let none = binary_mask(&grid(&[0.3, 0.2]), 0.0).unwrap();
        assert_eq!(none.sum(), 0.0);
        assert_eq!(none.epsilon_used, Some(0.2));
    }

    #[test]
    fn binary_rejects_bad_inputs() {
        assert!(binary_mask(&grid(&[0.1]), 1.5).is_err());
        assert!(binary_mask(&grid(&[-0.1]), 0.5).is_err());
    }

    #[test]
    fn continuous_values() {
        let m = continuous_mask(&grid(&[0.0, 2f64.ln()])).unwrap();
        assert_eq!(m.weights.values()[0], 1.0);
        assert!((m.weights.values()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn attentive_product_and_identity() {
        let c = continuous_mask(&grid(&[0.8f64.ln().abs()])).unwrap();
        let m = attentive_mask(&c, &grid(&[0.5])).unwrap();
        assert!((m.weights.values()[0] - 0.4).abs() < 1e-12);
        let ones = attentive_mask(&c, &grid(&[1.0])).unwrap();
        assert_eq!(ones.weights, c.weights);
        assert!(attentive_mask(&m, &grid(&[1.0])).is_err());
        let b = binary_mask(&grid(&[0.2]), 1.0).unwrap();
        assert!(attentive_mask(&b, &grid(&[1.0])).is_err());
        assert_eq!(attentive_binary_mask(&b, &grid(&[0.25])).unwrap().weights.values(), &[0.25]);
    }

    proptest! {
        #[test]
        fn selection_count_is_exact(
            u in prop::collection::vec(prop_oneof![Just(0.0), Just(1.0), 0.0..5.0f64], 1..200),
            rho in 0.0..=1.0f64,
        ) {
            let m = binary_mask(&grid(&u), rho).unwrap();
            prop_assert_eq!(m.sum() as usize, (rho * u.len() as f64).floor() as usize);
            let eps = m.epsilon_used.unwrap();
            for (w, v) in m.weights.values().iter().zip(&u) {
                if *w == 1.0 { prop_assert!(*v <= eps); } else { prop_assert!(*v >= eps); }
            }
        }

        #[test]
        fn continuous_is_monotone(u in prop::collection::vec(0.0..20.0f64, 1..50), d in 0.0..3.0f64) {
            let a = continuous_mask(&grid(&u)).unwrap();
            let bigger: Vec<f64> = u.iter().map(|v| v + d).collect();
            let b = continuous_mask(&grid(&bigger)).unwrap();
            for (x, y) in a.weights.values().iter().zip(b.weights.values()) {
                prop_assert!(x >= y);
            }
        }

        #[test]
        fn attentive_is_bounded_by_factors(
            pairs in prop::collection::vec((0.0..10.0f64, 0.0..=1.0f64), 1..50),
        ) {
            let u: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let a: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let c = continuous_mask(&grid(&u)).unwrap();
            let m = attentive_mask(&c, &grid(&a)).unwrap();
            for ((mv, cv), av) in m.weights.values().iter().zip(c.weights.values()).zip(&a) {
                prop_assert!(*mv <= cv.min(*av));
            }
        }
    }
}
