//! Entangled-pair source: Poisson emission times and the polarization
//! correlation model that outcomes are sampled from.

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{check_fraction, check_non_negative, invalid, Result};
use crate::{seed, Tick, PS_PER_S};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SourceParams {
    /// Mean pair emission rate in pairs per second.
    pub pair_rate: f64,
    /// Correlation visibility of the emitted state in both analyzer bases.
    pub intrinsic_visibility: f64,
    /// Emission window in seconds.
    pub duration: f64,
    pub seed: u64,
}

impl Default for SourceParams {
    fn default() -> Self {
        Self {
            pair_rate: 0.4e6,
            intrinsic_visibility: 0.95,
            duration: 30.0,
            seed: 0,
        }
    }
}

impl SourceParams {
    pub fn validate(&self) -> Result<()> {
        check_non_negative("pair_rate", self.pair_rate)?;
        check_fraction("intrinsic_visibility", self.intrinsic_visibility)?;
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(invalid(format!(
                "duration must be finite and > 0, got {}",
                self.duration
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairEvent {
    pub emission_time: Tick,
    pub pair_id: u64,
}

/// Emits a homogeneous Poisson stream over `[0, duration)`.
pub fn generate_pair_stream(params: &SourceParams) -> Result<Vec<PairEvent>> {
    generate_pair_chunk(params, 0, 0)
}

/// Like [`generate_pair_stream`], but the window starts at `start` and pair
/// ids count up from `first_id`. Long sessions are built from consecutive
/// chunks; the Poisson process is memoryless so the seams are invisible.
pub fn generate_pair_chunk(
    params: &SourceParams,
    start: Tick,
    first_id: u64,
) -> Result<Vec<PairEvent>> {
    params.validate()?;
    if params.pair_rate == 0.0 {
        return Ok(Vec::new());
    }
    let mut rng = seed::rng(params.seed);
    let rate_per_ps = params.pair_rate / PS_PER_S;
    let gap = Exp::new(rate_per_ps).map_err(|e| invalid(e.to_string()))?;
    let window = params.duration * PS_PER_S;

    let expected = (params.pair_rate * params.duration) as usize;
    let mut events = Vec::with_capacity(expected + expected / 64 + 16);
    let mut t = 0.0_f64;
    let mut last: Option<Tick> = None;
    let mut id = first_id;
    loop {
        t += gap.sample(&mut rng);
        if t >= window {
            break;
        }
        let mut tick = start + t.round() as Tick;
        // Two emissions inside one picosecond tick are nudged apart.
        if let Some(prev) = last {
            if tick <= prev {
                tick = prev + 1;
            }
        }
        events.push(PairEvent {
            emission_time: tick,
            pair_id: id,
        });
        last = Some(tick);
        id += 1;
    }
    Ok(events)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    Rectilinear,
    Diagonal,
}

impl Basis {
    /// Analyzer orientation of the bit-0 port, in radians.
    pub fn angle(self) -> f64 {
        match self {
            Basis::Rectilinear => 0.0,
            Basis::Diagonal => std::f64::consts::FRAC_PI_4,
        }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        if rng.random::<bool>() {
            Basis::Diagonal
        } else {
            Basis::Rectilinear
        }
    }
}

/// Joint probability of outcomes `(bit_a, bit_b)` for a correlated pair
/// measured in the given bases.
///
/// Matched bases give `(1 + (-1)^(a xor b) V) / 4`; mismatched bases are
/// uniform.
pub fn joint_outcome_probability(
    basis_a: Basis,
    basis_b: Basis,
    bit_a: bool,
    bit_b: bool,
    visibility: f64,
) -> Result<f64> {
    check_fraction("visibility", visibility)?;
    if basis_a != basis_b {
        return Ok(0.25);
    }
    let sign = if bit_a == bit_b { 1.0 } else { -1.0 };
    Ok(0.25 * (1.0 + sign * visibility))
}

/// Probability that both analyzers report the same bit when each photon's
/// polarization has been rotated by a real (linear-polarization) rotation.
///
/// A rotation by `theta` is equivalent to turning the analyzer by `-theta`,
/// so the pair correlation is `V cos 2(alpha_eff - beta_eff)`. With zero
/// rotations this reduces to [`joint_outcome_probability`].
pub fn same_outcome_probability(
    basis_a: Basis,
    basis_b: Basis,
    visibility: f64,
    rotation_a: f64,
    rotation_b: f64,
) -> f64 {
    let alpha = basis_a.angle() - rotation_a;
    let beta = basis_b.angle() - rotation_b;
    0.5 * (1.0 + visibility * (2.0 * (alpha - beta)).cos())
}
