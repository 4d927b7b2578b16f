//! Closed-form expected rates and QBER for the simulated link.
//!
//! Used where a full timetag simulation would be wasteful (long-distance
//! extrapolation, alignment budgeting) and as an independent cross-check of
//! the Monte Carlo pipeline.

use statrs::function::erf::erf;

use crate::channel::{background_rate_per_detector, ChannelConfig, SecondModePolarization};
use crate::distill::{asymptotic_rate, asymptotic_yield};
use crate::error::{check_fraction, Result};
use crate::netsim::AnalysisParams;
use crate::pairgen::SourceParams;
use crate::receiver::{DetectorParams, NUM_DETECTORS};
use crate::{Tick, PS_PER_S};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    /// Detected singles per second on each side, all four detectors.
    pub singles_a: f64,
    pub singles_b: f64,
    /// Coincidences per second from true pairs inside the retained window.
    pub true_coincidence_rate: f64,
    pub accidental_rate: f64,
    pub sifted_rate: f64,
    pub qber: f64,
}

impl OperatingPoint {
    pub fn asymptotic_rate(&self, f: f64) -> Result<f64> {
        asymptotic_rate(self.sifted_rate, self.qber.min(0.5), f)
    }

    pub fn secret_fraction(&self, f: f64) -> Result<f64> {
        asymptotic_yield(self.qber.min(0.5), f)
    }
}

/// Probability that a Gaussian delta centred on `mu` lands in `[-h, h]`.
pub fn window_capture(mu: f64, sigma: f64, h: f64) -> f64 {
    if sigma <= 0.0 {
        return if mu.abs() <= h { 1.0 } else { 0.0 };
    }
    let s = sigma * std::f64::consts::SQRT_2;
    0.5 * (erf((h - mu) / s) + erf((h + mu) / s))
}

struct ModeBranch {
    weight: f64,
    delay: f64,
    rotation: Option<f64>,
}

fn branches(arm: &ChannelConfig) -> [ModeBranch; 2] {
    let s = arm.second_mode_fraction;
    let rotation = match arm.second_mode_polarization {
        SecondModePolarization::Rotated { rad_per_km } => Some(rad_per_km * arm.length_km),
        SecondModePolarization::Depolarized => None,
    };
    [
        ModeBranch {
            weight: 1.0 - s,
            delay: 0.0,
            rotation: Some(0.0),
        },
        ModeBranch {
            weight: s,
            delay: arm.mode_delay() as f64,
            rotation,
        },
    ]
}

/// Half-width of the central window whose coincidences make the key.
pub fn retained_half_width(
    analysis: &AnalysisParams,
    arm_a: &ChannelConfig,
    arm_b: &ChannelConfig,
) -> Tick {
    if analysis.mode_filter && max_mode_delay(arm_a, arm_b) > 0 {
        analysis.reject_half_width_ps
    } else {
        analysis.coincidence_window_ps / 2
    }
}

/// Largest second-mode delay over the arms that carry a second mode at all.
pub fn max_mode_delay(arm_a: &ChannelConfig, arm_b: &ChannelConfig) -> Tick {
    [arm_a, arm_b]
        .iter()
        .filter(|arm| arm.second_mode_fraction > 0.0)
        .map(|arm| arm.mode_delay())
        .max()
        .unwrap_or(0)
}

/// Expected steady-state rates for one session.
///
/// True pairs are split over the four mode combinations; each lands in the
/// retained window with a Gaussian capture probability and carries the
/// visibility left after any relative polarization rotation. Accidentals are
/// the product of singles rates times the window width, with error 1/2.
/// Dead time and multi-pair emission are neglected.
pub fn operating_point(
    source: &SourceParams,
    arm_a: &ChannelConfig,
    arm_b: &ChannelConfig,
    det_a: &DetectorParams,
    det_b: &DetectorParams,
    analysis: &AnalysisParams,
    visibility: f64,
) -> Result<OperatingPoint> {
    source.validate()?;
    arm_a.validate()?;
    arm_b.validate()?;
    det_a.validate()?;
    det_b.validate()?;
    check_fraction("visibility", visibility)?;

    let eta_a = arm_a.survival_probability() * det_a.efficiency;
    let eta_b = arm_b.survival_probability() * det_b.efficiency;
    let pair_rate = source.pair_rate * eta_a * eta_b;
    let sigma = det_a.jitter_sigma_ps.hypot(det_b.jitter_sigma_ps);
    let h = retained_half_width(analysis, arm_a, arm_b) as f64;

    let mut captured = 0.0;
    let mut errors = 0.0;
    for ba in branches(arm_a) {
        for bb in branches(arm_b) {
            let weight = ba.weight * bb.weight;
            if weight == 0.0 {
                continue;
            }
            let cap = window_capture(bb.delay - ba.delay, sigma, h);
            let v = match (ba.rotation, bb.rotation) {
                (Some(ra), Some(rb)) => visibility * (2.0 * (ra - rb)).cos(),
                _ => 0.0,
            };
            captured += weight * cap;
            errors += weight * cap * (1.0 - v) / 2.0;
        }
    }

    let noise = |arm: &ChannelConfig, det: &DetectorParams| {
        f64::from(NUM_DETECTORS) * (det.dark_cps + background_rate_per_detector(&arm.traffic))
    };
    let singles_a = source.pair_rate * eta_a + noise(arm_a, det_a);
    let singles_b = source.pair_rate * eta_b + noise(arm_b, det_b);
    let accidental_rate = singles_a * singles_b * (2.0 * h + 1.0) / PS_PER_S;

    let true_rate = pair_rate * captured;
    let total = true_rate + accidental_rate;
    let qber = if total > 0.0 {
        (pair_rate * errors + 0.5 * accidental_rate) / total
    } else {
        0.5
    };
    Ok(OperatingPoint {
        singles_a,
        singles_b,
        true_coincidence_rate: true_rate,
        accidental_rate,
        sifted_rate: total / 2.0,
        qber,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{ClassicalTraffic, TrafficDirection};

    fn defaults(length: f64) -> (SourceParams, ChannelConfig, DetectorParams, AnalysisParams) {
        (
            SourceParams::default(),
            ChannelConfig::with_length(length),
            DetectorParams::default(),
            AnalysisParams::default(),
        )
    }

    #[test]
    fn capture_matches_erf_limits() {
        assert_eq!(window_capture(0.0, 0.0, 10.0), 1.0);
        assert_eq!(window_capture(20.0, 0.0, 10.0), 0.0);
        let c = window_capture(0.0, 500.0 * 2f64.sqrt(), 1000.0);
        assert!((c - erf(1.0)).abs() < 1e-12);
        assert!(window_capture(4400.0, 707.0, 1000.0) < 1e-5);
    }

    #[test]
    fn no_second_mode_no_noise_leaves_source_qber_plus_accidentals() {
        let (src, mut arm, mut det, an) = defaults(1.0);
        arm.second_mode_fraction = 0.0;
        det.dark_cps = 0.0;
        let p = operating_point(&src, &arm, &arm, &det, &det, &an, 0.95).unwrap();
        // Only photons whose partner was lost make accidentals.
        let eta = arm.survival_probability() * det.efficiency;
        let singles = src.pair_rate * eta;
        assert_eq!(p.singles_a, singles);
        let acc = singles * singles * 2001e-12;
        assert!((p.accidental_rate - acc).abs() < 1e-12 * acc);
        let expected =
            (p.true_coincidence_rate * 0.025 + 0.5 * acc) / (p.true_coincidence_rate + acc);
        assert!((p.qber - expected).abs() < 1e-12);
        assert!((p.qber - 0.025).abs() < 1e-3);
    }

    #[test]
    fn filtered_fraction_near_half_at_two_km() {
        let (src, arm, det, an) = defaults(2.0);
        let p = operating_point(&src, &arm, &arm, &det, &det, &an, 0.95).unwrap();
        let eta = arm.survival_probability() * det.efficiency;
        let retained = p.true_coincidence_rate / (src.pair_rate * eta * eta);
        assert!((retained - 0.4594).abs() < 2e-3, "{retained}");
    }

    #[test]
    fn qber_grows_with_length_and_noise() {
        let (mut src, mut arm, det, an) = defaults(8.0);
        src.pair_rate = 15e6;
        let dark = operating_point(&src, &arm, &arm, &det, &det, &an, 0.95).unwrap();
        arm.traffic = ClassicalTraffic::counter_propagating(10.5);
        assert_eq!(arm.traffic.direction, TrafficDirection::CounterPropagating);
        let active = operating_point(&src, &arm, &arm, &det, &det, &an, 0.95).unwrap();
        assert!(active.qber > dark.qber);
        arm.length_km = 12.0;
        let far = operating_point(&src, &arm, &arm, &det, &det, &an, 0.95).unwrap();
        assert!(far.qber > active.qber);
    }
}
