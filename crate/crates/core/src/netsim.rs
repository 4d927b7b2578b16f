//! Star network with one central entangled-pair source switched between
//! user pairs, and the end-to-end session pipeline.

use std::collections::HashSet;
use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};

use crate::analytic::{self, max_mode_delay};
use crate::channel::{background_rate_per_detector, propagate_arm, ChannelConfig};
use crate::distill::{sift, DistillParams, KeyRateReport};
use crate::error::{check_non_negative, invalid, Error, Result};
use crate::pairgen::{generate_pair_chunk, SourceParams};
use crate::receiver::{
    add_noise_tags, apply_dead_time, detect_pairs, sort_tags, DetectorParams, NoiseKind, TimeTag,
};
use crate::seed;
use crate::tagproc::{
    estimate_visibility_and_qber, find_offset, match_coincidences, mode_filter_resolves,
    temporal_mode_filter, CoincidenceRecord, VisibilityEstimate,
};
use crate::{Tick, PS_PER_S};

/// Source time simulated per pipeline chunk.
const CHUNK_S: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisParams {
    /// Full width of the coincidence window.
    pub coincidence_window_ps: Tick,
    /// Half-width of the central window kept by the mode filter.
    pub reject_half_width_ps: Tick,
    pub mode_filter: bool,
    pub offset_bin_ps: Tick,
    pub offset_span_ps: Tick,
    /// Leading stretch of the tag streams used for the offset search.
    pub offset_search_s: f64,
}

impl Default for AnalysisParams {
    fn default() -> Self {
        Self {
            coincidence_window_ps: 2000,
            reject_half_width_ps: 1000,
            mode_filter: true,
            offset_bin_ps: 200,
            offset_span_ps: 50_000_000,
            offset_search_s: 2.0,
        }
    }
}

impl AnalysisParams {
    pub fn validate(&self) -> Result<()> {
        if self.coincidence_window_ps <= 0 || self.reject_half_width_ps <= 0 {
            return Err(invalid(
                "coincidence window and reject half-width must be > 0",
            ));
        }
        if self.offset_bin_ps <= 0 || self.offset_span_ps < 0 {
            return Err(invalid("offset bin must be > 0 and span >= 0"));
        }
        if self.offset_search_s.is_nan() || self.offset_search_s <= 0.0 {
            return Err(invalid("offset_search_s must be > 0"));
        }
        Ok(())
    }
}

/// Polarization reference-frame errors on top of the source visibility.
///
/// `drift_per_s` adds a QBER term growing linearly through the session.
/// `error_scale_cps` models count-limited basis alignment: the parties
/// compensate the fiber rotation from their own coincidences, so the residual
/// misalignment error is `error_scale_cps / expected_sifted_rate`. It is
/// negligible on short arms and dominates when the coincidence rate collapses.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignmentParams {
    pub drift_per_s: f64,
    pub error_scale_cps: f64,
}

impl AlignmentParams {
    /// Calibrated so that the QBER at 3 km per arm with the default source,
    /// channel and detectors sits near 10%, just under the asymptotic limit.
    pub fn count_limited() -> Self {
        Self {
            drift_per_s: 0.0,
            error_scale_cps: 17.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_non_negative("drift_per_s", self.drift_per_s)?;
        check_non_negative("error_scale_cps", self.error_scale_cps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct User {
    pub name: String,
    pub channel: ChannelConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub users: Vec<User>,
    pub source: SourceParams,
    pub detectors: DetectorParams,
    pub analysis: AnalysisParams,
    pub distill: DistillParams,
    pub alignment: AlignmentParams,
    /// Offset of B's timetagger clock relative to A's.
    pub clock_offset_ps: Tick,
}

impl Topology {
    pub fn new(users: Vec<User>, source: SourceParams, detectors: DetectorParams) -> Result<Self> {
        let topology = Self {
            users,
            source,
            detectors,
            analysis: AnalysisParams::default(),
            distill: DistillParams::default(),
            alignment: AlignmentParams::default(),
            clock_offset_ps: 0,
        };
        topology.validate()?;
        Ok(topology)
    }

    /// Two users, `alice` and `bob`, on identical arms.
    pub fn symmetric(arm: ChannelConfig) -> Result<Self> {
        Self::new(
            vec![
                User {
                    name: "alice".into(),
                    channel: arm.clone(),
                },
                User {
                    name: "bob".into(),
                    channel: arm,
                },
            ],
            SourceParams::default(),
            DetectorParams::default(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.users.len() < 2 {
            return Err(invalid("a topology needs at least two users"));
        }
        let mut names = HashSet::new();
        for user in &self.users {
            if !names.insert(user.name.as_str()) {
                return Err(invalid(format!("duplicate user name `{}`", user.name)));
            }
            user.channel.validate()?;
        }
        self.source.validate()?;
        self.detectors.validate()?;
        self.analysis.validate()?;
        self.distill.validate()?;
        self.alignment.validate()
    }

    pub fn user(&self, name: &str) -> Result<&User> {
        self.users
            .iter()
            .find(|u| u.name == name)
            .ok_or_else(|| Error::UnknownUser(name.to_owned()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionPlan {
    pub user_a: String,
    pub user_b: String,
    pub arm_a: ChannelConfig,
    pub arm_b: ChannelConfig,
    pub duration: f64,
    pub traffic_mbps_a: f64,
    pub traffic_mbps_b: f64,
    pub seed: u64,
}

impl SessionPlan {
    pub fn with_traffic(mut self, mbps_a: f64, mbps_b: f64) -> Self {
        self.traffic_mbps_a = mbps_a;
        self.traffic_mbps_b = mbps_b;
        self
    }

    /// The arms as they run in this session, with the plan's traffic levels.
    pub fn arms(&self) -> (ChannelConfig, ChannelConfig) {
        let mut a = self.arm_a.clone();
        let mut b = self.arm_b.clone();
        a.traffic.data_rate_mbps = self.traffic_mbps_a;
        b.traffic.data_rate_mbps = self.traffic_mbps_b;
        (a, b)
    }
}

/// Builds a plan connecting two users to the source.
pub fn schedule_session(
    topology: &Topology,
    user_a: &str,
    user_b: &str,
    duration: f64,
    seed: u64,
) -> Result<SessionPlan> {
    if user_a == user_b {
        return Err(Error::SelfPairing(user_a.to_owned()));
    }
    let a = topology.user(user_a)?;
    let b = topology.user(user_b)?;
    if !(duration.is_finite() && duration > 0.0) {
        return Err(invalid(format!("duration must be > 0, got {duration}")));
    }
    Ok(SessionPlan {
        user_a: a.name.clone(),
        user_b: b.name.clone(),
        arm_a: a.channel.clone(),
        arm_b: b.channel.clone(),
        duration,
        traffic_mbps_a: a.channel.traffic.data_rate_mbps,
        traffic_mbps_b: b.channel.traffic.data_rate_mbps,
        seed,
    })
}

/// The central service provider. The source is switched to one user pair at
/// a time; a second request while a session holds it fails with
/// [`Error::SourceBusy`].
#[derive(Debug)]
pub struct Provider {
    topology: Topology,
    busy: AtomicBool,
}

impl Provider {
    pub fn new(topology: Topology) -> Result<Self> {
        topology.validate()?;
        Ok(Self {
            topology,
            busy: AtomicBool::new(false),
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn is_busy(&self) -> bool {
        self.busy.load(Ordering::Acquire)
    }

    /// Reserves the source. It is released when the lease is dropped.
    pub fn schedule_session(
        &self,
        user_a: &str,
        user_b: &str,
        duration: f64,
        seed: u64,
    ) -> Result<SessionLease<'_>> {
        let plan = schedule_session(&self.topology, user_a, user_b, duration, seed)?;
        self.busy
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .map_err(|_| Error::SourceBusy)?;
        Ok(SessionLease {
            provider: self,
            plan,
        })
    }
}

#[derive(Debug)]
pub struct SessionLease<'a> {
    provider: &'a Provider,
    plan: SessionPlan,
}

impl SessionLease<'_> {
    pub fn plan(&self) -> &SessionPlan {
        &self.plan
    }

    pub fn with_traffic(mut self, mbps_a: f64, mbps_b: f64) -> Self {
        self.plan.traffic_mbps_a = mbps_a;
        self.plan.traffic_mbps_b = mbps_b;
        self
    }

    /// Runs the session and frees the source.
    pub fn run(self) -> Result<SessionOutput> {
        run_session(&self.provider.topology, &self.plan)
    }
}

impl Drop for SessionLease<'_> {
    fn drop(&mut self) {
        self.provider.busy.store(false, Ordering::Release);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionStats {
    pub offset_ps: Tick,
    pub unfiltered: VisibilityEstimate,
    pub filtered: VisibilityEstimate,
    pub unfiltered_coincidences: usize,
    pub filtered_coincidences: usize,
    /// Filtered over unfiltered coincidence count.
    pub retained_fraction: f64,
    /// Visibility fed to the detectors at the start of the session, after
    /// alignment error.
    pub visibility_first_order: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionOutput {
    pub report: KeyRateReport,
    pub stats: SessionStats,
    pub tags_a: Vec<TimeTag>,
    pub tags_b: Vec<TimeTag>,
    /// Coincidences that survived the mode filter.
    pub coincidences: Vec<CoincidenceRecord>,
}

impl SessionOutput {
    pub fn coincidence_csv(&self) -> Result<String> {
        let mut buf = Vec::new();
        crate::tagproc::write_coincidences_csv(&mut buf, &self.coincidences)?;
        Ok(String::from_utf8(buf).expect("csv output is ascii"))
    }
}

/// Source visibility left after the static part of the alignment error.
pub fn aligned_visibility(
    topology: &Topology,
    arm_a: &ChannelConfig,
    arm_b: &ChannelConfig,
) -> Result<f64> {
    let v0 = topology.source.intrinsic_visibility;
    let scale = topology.alignment.error_scale_cps;
    if scale == 0.0 {
        return Ok(v0);
    }
    let point = analytic::operating_point(
        &topology.source,
        arm_a,
        arm_b,
        &topology.detectors,
        &topology.detectors,
        &topology.analysis,
        v0,
    )?;
    let error = if point.sifted_rate > 0.0 {
        (scale / point.sifted_rate).min(0.5)
    } else {
        0.5
    };
    Ok((v0 - 2.0 * error).max(0.0))
}

/// Visibility as a function of session time, including drift.
fn visibility_schedule(
    topology: &Topology,
    arm_a: &ChannelConfig,
    arm_b: &ChannelConfig,
) -> Result<impl Fn(f64) -> f64> {
    let v = aligned_visibility(topology, arm_a, arm_b)?;
    let drift = topology.alignment.drift_per_s;
    Ok(move |t: f64| (v - 2.0 * drift * t).clamp(0.0, 1.0))
}

fn prefix(tags: &[TimeTag], end: Tick) -> &[TimeTag] {
    &tags[..tags.partition_point(|t| t.time < end)]
}

/// Runs pairgen → channel → receiver → tagproc → distill for one plan.
pub fn run_session(topology: &Topology, plan: &SessionPlan) -> Result<SessionOutput> {
    topology.validate()?;
    let (arm_a, arm_b) = plan.arms();
    arm_a.validate()?;
    arm_b.validate()?;
    if !(plan.duration.is_finite() && plan.duration > 0.0) {
        return Err(invalid("session duration must be > 0"));
    }
    let det = &topology.detectors;
    let analysis = &topology.analysis;
    let visibility = visibility_schedule(topology, &arm_a, &arm_b)?;

    let chunks = (plan.duration / CHUNK_S).ceil().max(1.0) as u64;
    let mut tags_a = Vec::new();
    let mut tags_b = Vec::new();
    let mut next_id = 0u64;
    for k in 0..chunks {
        let start_s = k as f64 * CHUNK_S;
        let length_s = (plan.duration - start_s).min(CHUNK_S);
        if length_s <= 0.0 {
            break;
        }
        let source = SourceParams {
            duration: length_s,
            seed: seed::derive(plan.seed, seed::STREAM_PAIRS, k),
            ..topology.source.clone()
        };
        let start = (start_s * PS_PER_S).round() as Tick;
        let pairs = generate_pair_chunk(&source, start, next_id)?;
        next_id += pairs.len() as u64;
        let ta = propagate_arm(
            &pairs,
            &arm_a,
            seed::derive(plan.seed, seed::STREAM_ARM_A, k),
        )?;
        let tb = propagate_arm(
            &pairs,
            &arm_b,
            seed::derive(plan.seed, seed::STREAM_ARM_B, k),
        )?;
        let v = visibility(start_s + length_s / 2.0);
        let (a, b) = detect_pairs(
            &ta,
            &tb,
            v,
            det,
            det,
            seed::derive(plan.seed, seed::STREAM_DETECT, k),
        )?;
        tags_a.extend(a);
        tags_b.extend(b);
    }
    // Jitter can carry tags across chunk seams.
    sort_tags(&mut tags_a);
    sort_tags(&mut tags_b);

    let noise = |tags, arm: &ChannelConfig, bg_stream, dark_stream| -> Result<Vec<TimeTag>> {
        let tags = add_noise_tags(
            tags,
            background_rate_per_detector(&arm.traffic),
            NoiseKind::Background,
            plan.duration,
            seed::derive(plan.seed, bg_stream, 0),
        )?;
        add_noise_tags(
            tags,
            det.dark_cps,
            NoiseKind::Dark,
            plan.duration,
            seed::derive(plan.seed, dark_stream, 0),
        )
    };
    let tags_a = noise(
        tags_a,
        &arm_a,
        seed::STREAM_BACKGROUND_A,
        seed::STREAM_DARK_A,
    )?;
    let mut tags_b = noise(
        tags_b,
        &arm_b,
        seed::STREAM_BACKGROUND_B,
        seed::STREAM_DARK_B,
    )?;
    for t in &mut tags_b {
        t.time += topology.clock_offset_ps;
    }
    let tags_a = apply_dead_time(&tags_a, det.dead_time_ns)?;
    let tags_b = apply_dead_time(&tags_b, det.dead_time_ns)?;

    let search_end = (analysis.offset_search_s * PS_PER_S).round() as Tick;
    let offset = find_offset(
        prefix(&tags_a, search_end),
        prefix(
            &tags_b,
            search_end + analysis.offset_span_ps + topology.clock_offset_ps.abs(),
        ),
        analysis.offset_span_ps,
        analysis.offset_bin_ps,
    )?;

    let mut warnings = Vec::new();
    let delay = max_mode_delay(&arm_a, &arm_b);
    let filtering = analysis.mode_filter && delay > 0;
    let (unfiltered, coincidences) = if filtering {
        // Wide enough to take in both side peaks whole.
        let wide = 2 * (delay + analysis.coincidence_window_ps);
        let all = match_coincidences(&tags_a, &tags_b, offset, wide)?;
        if !mode_filter_resolves(delay, analysis.reject_half_width_ps) {
            warnings.push(format!(
                "second-mode delay {delay} ps does not clear the ±{} ps filter window; \
                 the two modes cannot be separated",
                analysis.reject_half_width_ps
            ));
        }
        let kept = temporal_mode_filter(&all, delay, analysis.reject_half_width_ps);
        (all, kept)
    } else {
        let all = match_coincidences(&tags_a, &tags_b, offset, analysis.coincidence_window_ps)?;
        (all.clone(), all)
    };

    let unfiltered_est = estimate_visibility_and_qber(&unfiltered)?;
    let filtered_est = estimate_visibility_and_qber(&coincidences)?;
    let key = sift(&coincidences, plan.duration)?;
    let report = KeyRateReport::from_sifted(
        &key,
        topology.distill,
        (arm_a.length_km + arm_b.length_km) / 2.0,
        (plan.traffic_mbps_a + plan.traffic_mbps_b) / 2.0,
    )?;

    let stats = SessionStats {
        offset_ps: offset,
        unfiltered: unfiltered_est,
        filtered: filtered_est,
        unfiltered_coincidences: unfiltered.len(),
        filtered_coincidences: coincidences.len(),
        retained_fraction: coincidences.len() as f64 / unfiltered.len() as f64,
        visibility_first_order: visibility(0.0),
        warnings,
    };
    Ok(SessionOutput {
        report,
        stats,
        tags_a,
        tags_b,
        coincidences,
    })
}
