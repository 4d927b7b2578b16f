use std::path::{Path, PathBuf};

use fiberqkd::channel::{ChannelConfig, TrafficDirection};
use fiberqkd::distill::DistillParams;
use fiberqkd::netsim::{AlignmentParams, AnalysisParams, Topology, User};
use fiberqkd::pairgen::SourceParams;
use fiberqkd::receiver::DetectorParams;
use serde::{Deserialize, Serialize};

use crate::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Scenario {
    #[default]
    LengthSweep,
    TrafficSweep,
    Extrapolation,
    SingleRun,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::LengthSweep => "length_sweep",
            Scenario::TrafficSweep => "traffic_sweep",
            Scenario::Extrapolation => "extrapolation",
            Scenario::SingleRun => "single_run",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceSection {
    pub pair_rate: f64,
    pub intrinsic_visibility: f64,
}

impl Default for SourceSection {
    fn default() -> Self {
        let s = SourceParams::default();
        Self {
            pair_rate: s.pair_rate,
            intrinsic_visibility: s.intrinsic_visibility,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtrapolationSection {
    pub pair_rate: f64,
    pub lengths_km: Vec<f64>,
}

impl Default for ExtrapolationSection {
    fn default() -> Self {
        Self {
            pair_rate: 15e6,
            lengths_km: (1..=8).map(f64::from).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SingleRunSection {
    pub length_km: f64,
    pub active: bool,
    /// Write both tag streams and the coincidence list next to the report.
    pub dump_tags: bool,
}

impl Default for SingleRunSection {
    fn default() -> Self {
        Self {
            length_km: 1.0,
            active: false,
            dump_tags: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub lengths_km: Vec<f64>,
    pub traffics_mbps: Vec<f64>,
    pub repetitions: u32,
    pub seed: u64,
    /// Simulated source time per session.
    pub duration_s: f64,
    pub output_dir: PathBuf,
    /// Traffic carried in the active variant of the length sweep.
    pub active_traffic_mbps: f64,
    pub traffic_sweep_length_km: f64,
    pub extrapolation: ExtrapolationSection,
    pub single_run: SingleRunSection,
    pub source: SourceSection,
    /// Per-arm fiber model. `length_km` is set by the scenario and the
    /// traffic direction by the variant; the rest applies as given.
    pub channel: ChannelConfig,
    pub detector: DetectorParams,
    pub analysis: AnalysisParams,
    pub distill: DistillParams,
    pub alignment: AlignmentParams,
    pub clock_offset_ps: i64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::default(),
            lengths_km: vec![0.25, 0.5, 1.0, 2.0, 3.0],
            traffics_mbps: vec![0.0, 25.0, 50.0, 75.0, 100.0],
            repetitions: 5,
            seed: 0,
            duration_s: 30.0,
            output_dir: PathBuf::from("results"),
            active_traffic_mbps: 10.5,
            traffic_sweep_length_km: 4.0,
            extrapolation: ExtrapolationSection::default(),
            single_run: SingleRunSection::default(),
            source: SourceSection::default(),
            channel: ChannelConfig::default(),
            detector: DetectorParams::default(),
            analysis: AnalysisParams::default(),
            distill: DistillParams::default(),
            alignment: AlignmentParams::default(),
            clock_offset_ps: 0,
        }
    }
}

fn check_lengths(name: &str, values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(CliError::Config(format!("{name} must not be empty")));
    }
    if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(CliError::Config(format!(
            "{name} contains invalid value {v}"
        )));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(CliError::Config("repetitions must be >= 1".into()));
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(CliError::Config("duration_s must be > 0".into()));
        }
        match self.scenario {
            Scenario::LengthSweep => check_lengths("lengths_km", &self.lengths_km)?,
            Scenario::TrafficSweep => {
                check_lengths("traffics_mbps", &self.traffics_mbps)?;
                check_lengths("traffic_sweep_length_km", &[self.traffic_sweep_length_km])?;
            }
            Scenario::Extrapolation => {
                check_lengths("extrapolation.lengths_km", &self.extrapolation.lengths_km)?
            }
            Scenario::SingleRun => {
                check_lengths("single_run.length_km", &[self.single_run.length_km])?
            }
        }
        check_lengths("active_traffic_mbps", &[self.active_traffic_mbps])?;
        // Build one topology so the core validators see every section.
        self.topology(self.arm(1.0, None))?;
        Ok(())
    }

    /// The configured arm at `length_km`. `traffic_mbps = None` is dark fiber;
    /// otherwise the configured traffic runs at that data rate, counter-
    /// propagating unless the config picks a direction.
    pub fn arm(&self, length_km: f64, traffic_mbps: Option<f64>) -> ChannelConfig {
        let mut arm = self.channel.clone();
        arm.length_km = length_km;
        match traffic_mbps {
            None => {
                arm.traffic.direction = TrafficDirection::None;
                arm.traffic.data_rate_mbps = 0.0;
            }
            Some(mbps) => {
                if arm.traffic.direction == TrafficDirection::None {
                    arm.traffic.direction = TrafficDirection::CounterPropagating;
                }
                arm.traffic.data_rate_mbps = mbps;
            }
        }
        arm
    }

    pub fn source_params(&self, pair_rate: f64) -> SourceParams {
        SourceParams {
            pair_rate,
            intrinsic_visibility: self.source.intrinsic_visibility,
            duration: self.duration_s,
            seed: self.seed,
        }
    }

    /// Two users on identical copies of `arm`.
    pub fn topology(&self, arm: ChannelConfig) -> Result<Topology> {
        self.topology_with_rate(arm, self.source.pair_rate)
    }

    pub fn topology_with_rate(&self, arm: ChannelConfig, pair_rate: f64) -> Result<Topology> {
        let users = vec![
            User {
                name: "alice".into(),
                channel: arm.clone(),
            },
            User {
                name: "bob".into(),
                channel: arm,
            },
        ];
        let mut topology =
            Topology::new(users, self.source_params(pair_rate), self.detector.clone())?;
        topology.analysis = self.analysis.clone();
        topology.distill = self.distill;
        topology.alignment = self.alignment;
        topology.clock_offset_ps = self.clock_offset_ps;
        topology.validate()?;
        Ok(topology)
    }
}
