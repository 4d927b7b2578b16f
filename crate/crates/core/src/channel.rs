//! One fiber arm between the central source and a user.
//!
//! The 810 nm photons travel through fiber that is single-moded only at
//! 1550 nm, so a fraction of them propagates in the second-order spatial mode.
//! That mode is slower (a fixed delay per kilometre) and carries its own
//! polarization transformation. Classical traffic on the same fiber adds a
//! background count rate at the receiver.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_fraction, check_non_negative, invalid, Result};
use crate::pairgen::PairEvent;
use crate::{seed, Tick};

const SPEED_OF_LIGHT_KM_PER_PS: f64 = 299_792.458e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrafficDirection {
    None,
    CounterPropagating,
    CoPropagating,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassicalTraffic {
    pub direction: TrafficDirection,
    pub optical_power_mw: f64,
    pub data_rate_mbps: f64,
    /// Extra counts/s per detector with counter-propagating traffic.
    pub background_counter_cps: f64,
    /// Extra counts/s per detector per mW with co-propagating traffic.
    pub background_co_cps_per_mw: f64,
    /// Launch power slope in mW per Mbps for transceivers whose power follows
    /// the load. `None` models a constant-power transmitter.
    pub power_per_mbps_mw: Option<f64>,
}

impl Default for ClassicalTraffic {
    fn default() -> Self {
        Self {
            direction: TrafficDirection::None,
            optical_power_mw: 0.55,
            data_rate_mbps: 0.0,
            background_counter_cps: 500.0,
            background_co_cps_per_mw: 5000.0,
            power_per_mbps_mw: None,
        }
    }
}

impl ClassicalTraffic {
    pub fn dark() -> Self {
        Self::default()
    }

    pub fn counter_propagating(data_rate_mbps: f64) -> Self {
        Self {
            direction: TrafficDirection::CounterPropagating,
            data_rate_mbps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_non_negative("optical_power_mw", self.optical_power_mw)?;
        check_non_negative("data_rate_mbps", self.data_rate_mbps)?;
        check_non_negative("background_counter_cps", self.background_counter_cps)?;
        check_non_negative("background_co_cps_per_mw", self.background_co_cps_per_mw)?;
        if let Some(slope) = self.power_per_mbps_mw {
            check_non_negative("power_per_mbps_mw", slope)?;
        }
        Ok(())
    }

    /// Launched classical power. Constant unless a power-vs-load slope is set.
    pub fn effective_power_mw(&self) -> f64 {
        match self.power_per_mbps_mw {
            None => self.optical_power_mw,
            Some(slope) => self.optical_power_mw + slope * self.data_rate_mbps,
        }
    }
}

/// What happens to the polarization of a photon in the second-order mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum SecondModePolarization {
    /// The mode sees an extra linear-polarization rotation growing with
    /// length, relative to the first-order mode that the analyzers are
    /// aligned to.
    Rotated { rad_per_km: f64 },
    /// Outcomes of second-order photons are uniformly random.
    Depolarized,
}

impl Default for SecondModePolarization {
    fn default() -> Self {
        SecondModePolarization::Rotated {
            rad_per_km: 1.0 / 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelConfig {
    pub length_km: f64,
    pub alpha_quantum_db_per_km: f64,
    pub alpha_classical_db_per_km: f64,
    pub splitter_quantum_loss_db: f64,
    pub splitters_per_arm: u32,
    pub second_mode_fraction: f64,
    pub mode_delay_ns_per_km: f64,
    pub second_mode_polarization: SecondModePolarization,
    pub group_index: f64,
    pub traffic: ClassicalTraffic,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            length_km: 1.0,
            alpha_quantum_db_per_km: 3.0,
            alpha_classical_db_per_km: 0.2,
            splitter_quantum_loss_db: 0.5,
            splitters_per_arm: 2,
            second_mode_fraction: 0.35,
            mode_delay_ns_per_km: 2.2,
            second_mode_polarization: SecondModePolarization::default(),
            group_index: 1.47,
            traffic: ClassicalTraffic::default(),
        }
    }
}

impl ChannelConfig {
    pub fn with_length(length_km: f64) -> Self {
        Self {
            length_km,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_non_negative("length_km", self.length_km)?;
        check_non_negative("alpha_quantum_db_per_km", self.alpha_quantum_db_per_km)?;
        check_non_negative("alpha_classical_db_per_km", self.alpha_classical_db_per_km)?;
        check_non_negative("splitter_quantum_loss_db", self.splitter_quantum_loss_db)?;
        check_fraction("second_mode_fraction", self.second_mode_fraction)?;
        check_non_negative("mode_delay_ns_per_km", self.mode_delay_ns_per_km)?;
        if let SecondModePolarization::Rotated { rad_per_km } = self.second_mode_polarization {
            if !rad_per_km.is_finite() {
                return Err(invalid("second-mode rotation must be finite"));
            }
        }
        if !(self.group_index.is_finite() && self.group_index >= 1.0) {
            return Err(invalid(format!(
                "group_index must be >= 1, got {}",
                self.group_index
            )));
        }
        self.traffic.validate()
    }

    /// Probability that a launched quantum photon reaches the receiver.
    pub fn survival_probability(&self) -> f64 {
        let fiber = 10f64.powf(-self.alpha_quantum_db_per_km * self.length_km / 10.0);
        let splitters =
            10f64.powf(-self.splitter_quantum_loss_db * f64::from(self.splitters_per_arm) / 10.0);
        fiber * splitters
    }

    /// First-order-mode propagation time.
    pub fn first_order_delay(&self) -> Tick {
        (self.length_km * self.group_index / SPEED_OF_LIGHT_KM_PER_PS).round() as Tick
    }

    /// Extra delay of the second-order mode over the whole arm.
    pub fn mode_delay(&self) -> Tick {
        // Validated configs cannot fail here.
        second_mode_delay(self.length_km, self.mode_delay_ns_per_km).unwrap_or(0)
    }

    fn second_mode_polarization_state(&self) -> Polarization {
        match self.second_mode_polarization {
            SecondModePolarization::Rotated { rad_per_km } => Polarization::Preserved {
                rotation_rad: rad_per_km * self.length_km,
            },
            SecondModePolarization::Depolarized => Polarization::Scrambled,
        }
    }
}

/// Fraction of power left after `length_km` of fiber with loss `alpha`.
pub fn transmittance(alpha_db_per_km: f64, length_km: f64) -> Result<f64> {
    check_non_negative("alpha_db_per_km", alpha_db_per_km)?;
    check_non_negative("length_km", length_km)?;
    Ok(10f64.powf(-alpha_db_per_km * length_km / 10.0))
}

/// Group delay of the second-order mode relative to the first, in ps.
pub fn second_mode_delay(length_km: f64, mode_delay_ns_per_km: f64) -> Result<Tick> {
    check_non_negative("length_km", length_km)?;
    check_non_negative("mode_delay_ns_per_km", mode_delay_ns_per_km)?;
    // f64::round rounds half away from zero.
    Ok((length_km * mode_delay_ns_per_km * 1000.0).round() as Tick)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialMode {
    FirstOrder,
    SecondOrder,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Polarization {
    /// Polarization carried through, up to a rotation relative to the
    /// analyzer frame.
    Preserved {
        rotation_rad: f64,
    },
    Scrambled,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmTransit {
    pub pair_id: u64,
    pub survived: bool,
    pub mode: SpatialMode,
    pub arrival_time: Tick,
    pub polarization: Polarization,
}

impl ArmTransit {
    pub fn depolarized(&self) -> bool {
        matches!(self.polarization, Polarization::Scrambled)
    }
}

/// Sends one photon of every pair down the arm.
pub fn propagate_arm(
    pairs: &[PairEvent],
    config: &ChannelConfig,
    seed: u64,
) -> Result<Vec<ArmTransit>> {
    config.validate()?;
    let mut rng = seed::rng(seed);
    let survive = config.survival_probability();
    let first_delay = config.first_order_delay();
    let extra = config.mode_delay();
    let second_pol = config.second_mode_polarization_state();

    Ok(pairs
        .iter()
        .map(|pair| {
            let survived = rng.random::<f64>() < survive;
            let second = survived && rng.random::<f64>() < config.second_mode_fraction;
            let (mode, arrival_time, polarization) = if second {
                (
                    SpatialMode::SecondOrder,
                    pair.emission_time + first_delay + extra,
                    second_pol,
                )
            } else {
                (
                    SpatialMode::FirstOrder,
                    pair.emission_time + first_delay,
                    Polarization::Preserved { rotation_rad: 0.0 },
                )
            };
            ArmTransit {
                pair_id: pair.pair_id,
                survived,
                mode,
                arrival_time,
                polarization,
            }
        })
        .collect())
}

/// Background counts per second added to each detector by classical traffic.
pub fn background_rate_per_detector(traffic: &ClassicalTraffic) -> f64 {
    match traffic.direction {
        TrafficDirection::None => 0.0,
        TrafficDirection::CounterPropagating => match traffic.power_per_mbps_mw {
            None => traffic.background_counter_cps,
            Some(_) if traffic.optical_power_mw > 0.0 => {
                traffic.background_counter_cps * traffic.effective_power_mw()
                    / traffic.optical_power_mw
            }
            Some(_) => 0.0,
        },
        TrafficDirection::CoPropagating => {
            traffic.background_co_cps_per_mw * traffic.effective_power_mw()
        }
    }
}
