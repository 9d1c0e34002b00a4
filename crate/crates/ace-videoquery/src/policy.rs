//! Crop scheduling policies for the in-app controller: the basic
//! threshold policy, the latency-balancing advanced policy, EWMA inference
//! latency estimators, and adaptive threshold shrinking.

use ace_core::inapp::Ewma;
use serde::{Deserialize, Serialize};

use crate::model::{COC_SERVICE_US, EOC_SERVICE_US};

/// Confidence thresholds: above `hi` the crop is identified locally, below
/// `lo` it is dropped, in between it is escalated to the cloud classifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyThresholds {
    pub lo: f64,
    pub hi: f64,
}

pub const NOMINAL_THRESHOLDS: PolicyThresholds = PolicyThresholds { lo: 0.10, hi: 0.80 };
/// The upload band never shrinks below this width.
pub const MIN_BAND: f64 = 0.10;
/// Per-epoch threshold step.
pub const THRESHOLD_STEP: f64 = 0.05;

impl PolicyThresholds {
    pub fn band(&self) -> f64 {
        self.hi - self.lo
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BpDecision {
    Positive,
    Drop,
    UploadToCoc,
}

/// Basic policy: strict inequalities at both thresholds; boundary values are
/// escalated.
pub fn bp_route(confidence: f64, th: &PolicyThresholds) -> BpDecision {
    if confidence > th.hi {
        BpDecision::Positive
    } else if confidence < th.lo {
        BpDecision::Drop
    } else {
        BpDecision::UploadToCoc
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ApDest {
    Eoc,
    Coc,
}

/// Advanced-policy routing at the detector: send the crop wherever the
/// estimated inference latency is lower; ties stay local.
pub fn ap_route(eil_eoc_us: f64, eil_coc_us: f64) -> ApDest {
    if eil_coc_us < eil_eoc_us {
        ApDest::Coc
    } else {
        ApDest::Eoc
    }
}

/// EWMA estimator over observed inference latencies of one target; before
/// the first sample it reports the target's service time as the prior.
#[derive(Debug, Clone)]
pub struct EilEstimator {
    pub ewma: Ewma,
    pub prior_us: f64,
}

impl EilEstimator {
    pub fn for_eoc(alpha: f64) -> EilEstimator {
        EilEstimator {
            ewma: Ewma::new(alpha),
            prior_us: EOC_SERVICE_US as f64,
        }
    }

    pub fn for_coc(alpha: f64) -> EilEstimator {
        EilEstimator {
            ewma: Ewma::new(alpha),
            prior_us: COC_SERVICE_US as f64,
        }
    }

    pub fn estimate_us(&self) -> f64 {
        self.ewma.estimate_or(self.prior_us)
    }

    pub fn samples(&self) -> u64 {
        self.ewma.samples
    }
}

/// `ewma <- alpha*sample + (1-alpha)*ewma`, first sample initializes.
pub fn update_eil(est: &mut EilEstimator, sample_us: f64) -> f64 {
    est.ewma.update(sample_us)
}

/// Shrink the upload band one step while either estimated latency is past the
/// target; otherwise relax one step back toward the nominal thresholds. The
/// band is clamped to its minimum width and to the nominal bounds.
pub fn adapt_thresholds(
    th: &PolicyThresholds,
    eil_eoc_us: f64,
    eil_coc_us: f64,
    target_us: f64,
) -> PolicyThresholds {
    let deteriorated = eil_eoc_us.max(eil_coc_us) > target_us;
    if deteriorated {
        let mut lo = th.lo + THRESHOLD_STEP;
        let mut hi = th.hi - THRESHOLD_STEP;
        if hi - lo < MIN_BAND {
            let mid = (th.lo + th.hi) / 2.0;
            lo = mid - MIN_BAND / 2.0;
            hi = mid + MIN_BAND / 2.0;
        }
        PolicyThresholds { lo, hi }
    } else {
        let snap = |v: f64, nominal: f64| {
            if (v - nominal).abs() < 1e-9 {
                nominal
            } else {
                v
            }
        };
        PolicyThresholds {
            lo: snap(
                (th.lo - THRESHOLD_STEP).max(NOMINAL_THRESHOLDS.lo),
                NOMINAL_THRESHOLDS.lo,
            ),
            hi: snap(
                (th.hi + THRESHOLD_STEP).min(NOMINAL_THRESHOLDS.hi),
                NOMINAL_THRESHOLDS.hi,
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{band_mass, neg_exponent, EOC_ERROR_TARGET, P_POS};

    #[test]
    fn bp_route_thresholds_and_boundaries() {
        let th = NOMINAL_THRESHOLDS;
        assert_eq!(bp_route(0.85, &th), BpDecision::Positive);
        assert_eq!(bp_route(0.05, &th), BpDecision::Drop);
        assert_eq!(bp_route(0.50, &th), BpDecision::UploadToCoc);
        // Boundary values escalate.
        assert_eq!(bp_route(0.80, &th), BpDecision::UploadToCoc);
        assert_eq!(bp_route(0.10, &th), BpDecision::UploadToCoc);
    }

    #[test]
    fn ap_route_argmin_and_tie() {
        assert_eq!(ap_route(120_000.0, 90_000.0), ApDest::Coc);
        assert_eq!(ap_route(90_000.0, 120_000.0), ApDest::Eoc);
        assert_eq!(ap_route(100_000.0, 100_000.0), ApDest::Eoc);
    }

    #[test]
    fn ap_route_scale_invariance() {
        // Scaling both estimates by any positive constant never flips the
        // decision.
        let pairs = [(120.0, 90.0), (90.0, 120.0), (55.0, 55.0), (1.0, 2.0)];
        for (a, b) in pairs {
            let base = ap_route(a, b);
            for k in [0.001, 0.5, 3.0, 1e6] {
                assert_eq!(ap_route(a * k, b * k), base);
            }
        }
    }

    #[test]
    fn estimator_init_fixed_point_and_prior() {
        let mut e = EilEstimator::for_eoc(0.2);
        assert_eq!(e.estimate_us(), 44_000.0);
        assert_eq!(update_eil(&mut e, 66_000.0), 66_000.0);
        let mut e2 = EilEstimator::for_coc(0.2);
        update_eil(&mut e2, 100_000.0);
        assert!((update_eil(&mut e2, 50_000.0) - 90_000.0).abs() < 1e-9);
        for _ in 0..200 {
            update_eil(&mut e2, 70_000.0);
        }
        assert!((e2.estimate_us() - 70_000.0).abs() < 1e-6);
    }

    #[test]
    fn adapt_shrinks_and_recovers() {
        let th = NOMINAL_THRESHOLDS;
        // Healthy: unchanged at nominal.
        let same = adapt_thresholds(&th, 50_000.0, 60_000.0, 300_000.0);
        assert_eq!(same, NOMINAL_THRESHOLDS);
        // One deteriorated epoch: one symmetric step.
        let step = adapt_thresholds(&th, 50_000.0, 400_000.0, 300_000.0);
        assert!((step.lo - 0.15).abs() < 1e-12 && (step.hi - 0.75).abs() < 1e-12);
        // Recovery steps back and never overshoots nominal.
        let back = adapt_thresholds(&step, 50_000.0, 60_000.0, 300_000.0);
        assert_eq!(back, NOMINAL_THRESHOLDS);
        let still = adapt_thresholds(&back, 50_000.0, 60_000.0, 300_000.0);
        assert_eq!(still, NOMINAL_THRESHOLDS);
    }

    #[test]
    fn sustained_deterioration_strictly_shrinks_band_mass_until_clamp() {
        // Band-mass oracle: integrate the confidence mix over the band via
        // the closed-form CDFs and check strict decrease per epoch.
        let a_neg = neg_exponent(P_POS, EOC_ERROR_TARGET);
        let mut th = NOMINAL_THRESHOLDS;
        let mut prev_mass = band_mass(P_POS, a_neg, th.lo, th.hi);
        let mut epochs = 0;
        loop {
            let next = adapt_thresholds(&th, 500_000.0, 500_000.0, 300_000.0);
            let mass = band_mass(P_POS, a_neg, next.lo, next.hi);
            if (next.band() - MIN_BAND).abs() < 1e-12 && (th.band() - MIN_BAND).abs() < 1e-12 {
                // Clamped: stable from here on.
                assert!((mass - prev_mass).abs() < 1e-12);
                break;
            }
            assert!(
                mass < prev_mass - 1e-9,
                "band mass must strictly decrease while shrinking"
            );
            th = next;
            prev_mass = mass;
            epochs += 1;
            assert!(epochs < 32, "must reach the clamp in finitely many epochs");
        }
        assert!(epochs >= 6, "several strict shrink epochs before the clamp");
    }
}
