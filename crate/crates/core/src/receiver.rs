//! Passive-basis polarization analyzer with four single-photon detectors.
//!
//! Detectors are indexed 0..3 as (rectilinear, 0), (rectilinear, 1),
//! (diagonal, 0), (diagonal, 1).

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::channel::{ArmTransit, Polarization, SpatialMode};
use crate::error::{check_fraction, check_non_negative, invalid, Error, Result};
use crate::pairgen::{same_outcome_probability, Basis};
use crate::{seed, Tick, PS_PER_S};

pub const NUM_DETECTORS: u8 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorParams {
    pub efficiency: f64,
    pub dark_cps: f64,
    pub jitter_sigma_ps: f64,
    pub dead_time_ns: f64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            efficiency: 0.5,
            dark_cps: 300.0,
            jitter_sigma_ps: 500.0,
            dead_time_ns: 50.0,
        }
    }
}

impl DetectorParams {
    pub fn validate(&self) -> Result<()> {
        check_fraction("efficiency", self.efficiency)?;
        check_non_negative("dark_cps", self.dark_cps)?;
        check_non_negative("jitter_sigma_ps", self.jitter_sigma_ps)?;
        check_non_negative("dead_time_ns", self.dead_time_ns)
    }
}

pub fn detector_index(basis: Basis, bit: bool) -> u8 {
    let base = match basis {
        Basis::Rectilinear => 0,
        Basis::Diagonal => 2,
    };
    base + u8::from(bit)
}

pub fn detector_basis(detector: u8) -> Basis {
    if detector < 2 {
        Basis::Rectilinear
    } else {
        Basis::Diagonal
    }
}

pub fn detector_bit(detector: u8) -> bool {
    detector % 2 == 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    Pair { pair_id: u64, mode: SpatialMode },
    Background,
    Dark,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Background,
    Dark,
}

impl From<NoiseKind> for Origin {
    fn from(kind: NoiseKind) -> Self {
        match kind {
            NoiseKind::Background => Origin::Background,
            NoiseKind::Dark => Origin::Dark,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TimeTag {
    pub time: Tick,
    pub detector: u8,
    pub origin: Origin,
}

pub(crate) fn sort_tags(tags: &mut [TimeTag]) {
    tags.sort_by_key(|t| (t.time, t.detector));
}

pub(crate) fn is_sorted(tags: &[TimeTag]) -> bool {
    tags.windows(2).all(|w| w[0].time <= w[1].time)
}

/// Merges two time-sorted streams; ties keep `a` first.
pub(crate) fn merge_sorted(a: Vec<TimeTag>, b: Vec<TimeTag>) -> Vec<TimeTag> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut ia, mut ib) = (a.into_iter().peekable(), b.into_iter().peekable());
    loop {
        match (ia.peek(), ib.peek()) {
            (Some(x), Some(y)) => {
                if (y.time, y.detector) < (x.time, x.detector) {
                    out.push(ib.next().unwrap());
                } else {
                    out.push(ia.next().unwrap());
                }
            }
            (Some(_), None) => {
                out.extend(ia);
                break;
            }
            (None, _) => {
                out.extend(ib);
                break;
            }
        }
    }
    out
}

struct Side<'a> {
    params: &'a DetectorParams,
    jitter: Option<Normal<f64>>,
    tags: Vec<TimeTag>,
}

impl<'a> Side<'a> {
    fn new(params: &'a DetectorParams, capacity: usize) -> Result<Self> {
        params.validate()?;
        let jitter = if params.jitter_sigma_ps > 0.0 {
            Some(Normal::new(0.0, params.jitter_sigma_ps).map_err(|e| invalid(e.to_string()))?)
        } else {
            None
        };
        Ok(Self {
            params,
            jitter,
            tags: Vec::with_capacity(capacity),
        })
    }

    fn record<R: Rng>(&mut self, rng: &mut R, transit: &ArmTransit, basis: Basis, bit: bool) {
        if rng.random::<f64>() >= self.params.efficiency {
            return;
        }
        let offset = match &self.jitter {
            Some(n) => n.sample(rng).round() as Tick,
            None => 0,
        };
        self.tags.push(TimeTag {
            time: transit.arrival_time + offset,
            detector: detector_index(basis, bit),
            origin: Origin::Pair {
                pair_id: transit.pair_id,
                mode: transit.mode,
            },
        });
    }
}

/// Turns the photons that reached each side into detector tags.
///
/// Each surviving photon picks a basis at a 50/50 splitter. When both photons
/// arrive with their polarization intact, the pair outcome follows the
/// correlation model at `visibility_first_order`, reduced by any relative
/// polarization rotation between the two photons. A scrambled photon gives a
/// uniform outcome independent of its partner.
pub fn detect_pairs(
    transits_a: &[ArmTransit],
    transits_b: &[ArmTransit],
    visibility_first_order: f64,
    det_a: &DetectorParams,
    det_b: &DetectorParams,
    seed: u64,
) -> Result<(Vec<TimeTag>, Vec<TimeTag>)> {
    check_fraction("visibility_first_order", visibility_first_order)?;
    if transits_a.len() != transits_b.len()
        || transits_a
            .iter()
            .zip(transits_b)
            .any(|(a, b)| a.pair_id != b.pair_id)
    {
        return Err(Error::PairMismatch);
    }
    let mut rng = seed::rng(seed);
    let expect = |d: &DetectorParams, tr: &[ArmTransit]| {
        let n = tr.iter().filter(|t| t.survived).count();
        (n as f64 * d.efficiency * 1.05) as usize + 16
    };
    let mut side_a = Side::new(det_a, expect(det_a, transits_a))?;
    let mut side_b = Side::new(det_b, expect(det_b, transits_b))?;

    for (ta, tb) in transits_a.iter().zip(transits_b) {
        match (ta.survived, tb.survived) {
            (false, false) => {}
            (true, false) => {
                let basis = Basis::random(&mut rng);
                let bit = rng.random::<bool>();
                side_a.record(&mut rng, ta, basis, bit);
            }
            (false, true) => {
                let basis = Basis::random(&mut rng);
                let bit = rng.random::<bool>();
                side_b.record(&mut rng, tb, basis, bit);
            }
            (true, true) => {
                let basis_a = Basis::random(&mut rng);
                let basis_b = Basis::random(&mut rng);
                let bit_a = rng.random::<bool>();
                let bit_b = match (ta.polarization, tb.polarization) {
                    (
                        Polarization::Preserved { rotation_rad: ra },
                        Polarization::Preserved { rotation_rad: rb },
                    ) => {
                        let same = same_outcome_probability(
                            basis_a,
                            basis_b,
                            visibility_first_order,
                            ra,
                            rb,
                        );
                        if rng.random::<f64>() < same {
                            bit_a
                        } else {
                            !bit_a
                        }
                    }
                    _ => rng.random::<bool>(),
                };
                side_a.record(&mut rng, ta, basis_a, bit_a);
                side_b.record(&mut rng, tb, basis_b, bit_b);
            }
        }
    }

    let (mut a, mut b) = (side_a.tags, side_b.tags);
    sort_tags(&mut a);
    sort_tags(&mut b);
    Ok((a, b))
}

/// Adds an independent Poisson process of `rate_cps_per_detector` on each of
/// the four detectors over `[0, duration_s)`.
pub fn add_noise_tags(
    stream: Vec<TimeTag>,
    rate_cps_per_detector: f64,
    origin: NoiseKind,
    duration_s: f64,
    seed: u64,
) -> Result<Vec<TimeTag>> {
    check_non_negative("rate_cps_per_detector", rate_cps_per_detector)?;
    check_non_negative("duration_s", duration_s)?;
    if rate_cps_per_detector == 0.0 || duration_s == 0.0 {
        return Ok(stream);
    }
    let mut rng = seed::rng(seed);
    let window = duration_s * PS_PER_S;
    let count =
        Poisson::new(rate_cps_per_detector * duration_s).map_err(|e| invalid(e.to_string()))?;
    let mut noise = Vec::new();
    for detector in 0..NUM_DETECTORS {
        let n = count.sample(&mut rng) as usize;
        noise.extend((0..n).map(|_| TimeTag {
            time: (rng.random::<f64>() * window) as Tick,
            detector,
            origin: origin.into(),
        }));
    }
    sort_tags(&mut noise);
    let mut stream = stream;
    if !is_sorted(&stream) {
        sort_tags(&mut stream);
    }
    Ok(merge_sorted(stream, noise))
}

/// Drops every tag that falls within `dead_time_ns` of the previous kept tag
/// on the same detector.
pub fn apply_dead_time(stream: &[TimeTag], dead_time_ns: f64) -> Result<Vec<TimeTag>> {
    check_non_negative("dead_time_ns", dead_time_ns)?;
    if !is_sorted(stream) {
        return Err(Error::Unsorted);
    }
    let dead = (dead_time_ns * 1000.0).round() as Tick;
    let mut last: [Option<Tick>; NUM_DETECTORS as usize] = [None; NUM_DETECTORS as usize];
    let mut out = Vec::with_capacity(stream.len());
    for tag in stream {
        let slot = &mut last[usize::from(tag.detector % NUM_DETECTORS)];
        match *slot {
            Some(prev) if tag.time - prev < dead => {}
            _ => {
                *slot = Some(tag.time);
                out.push(*tag);
            }
        }
    }
    Ok(out)
}

fn origin_code(origin: &Origin) -> String {
    match origin {
        Origin::Pair { pair_id, mode } => {
            let order = match mode {
                SpatialMode::FirstOrder => 1,
                SpatialMode::SecondOrder => 2,
            };
            format!("pair:{pair_id}:{order}")
        }
        Origin::Background => "bg".to_owned(),
        Origin::Dark => "dark".to_owned(),
    }
}

fn parse_origin(code: &str) -> Option<Origin> {
    match code {
        "bg" => Some(Origin::Background),
        "dark" => Some(Origin::Dark),
        _ => {
            let mut parts = code.strip_prefix("pair:")?.split(':');
            let pair_id = parts.next()?.parse().ok()?;
            let mode = match parts.next()? {
                "1" => SpatialMode::FirstOrder,
                "2" => SpatialMode::SecondOrder,
                _ => return None,
            };
            parts
                .next()
                .is_none()
                .then_some(Origin::Pair { pair_id, mode })
        }
    }
}

/// Writes one tag per line: `<time_ps> <detector> <origin-code>`.
///
/// Origin codes are `bg`, `dark` and `pair:<id>:<mode order>`.
pub fn write_tags<W: Write>(mut out: W, tags: &[TimeTag]) -> Result<()> {
    for t in tags {
        writeln!(out, "{} {} {}", t.time, t.detector, origin_code(&t.origin))?;
    }
    Ok(())
}

/// Reads the format produced by [`write_tags`]. Blank lines and lines
/// starting with `#` are skipped.
pub fn read_tags<R: BufRead>(input: R) -> Result<Vec<TimeTag>> {
    let mut tags = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let err = |msg: &str| Error::Parse {
            line: i + 1,
            msg: msg.to_owned(),
        };
        let mut fields = text.split_whitespace();
        let time = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| err("bad time"))?;
        let detector: u8 = fields
            .next()
            .and_then(|f| f.parse().ok())
            .filter(|d| *d < NUM_DETECTORS)
            .ok_or_else(|| err("bad detector index"))?;
        let origin = fields
            .next()
            .and_then(parse_origin)
            .ok_or_else(|| err("bad origin code"))?;
        if fields.next().is_some() {
            return Err(err("trailing fields"));
        }
        tags.push(TimeTag {
            time,
            detector,
            origin,
        });
    }
    Ok(tags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn transit(pair_id: u64, t: Tick) -> ArmTransit {
        ArmTransit {
            pair_id,
            survived: true,
            mode: SpatialMode::FirstOrder,
            arrival_time: t,
            polarization: Polarization::Preserved { rotation_rad: 0.0 },
        }
    }

    fn ideal() -> DetectorParams {
        DetectorParams {
            efficiency: 1.0,
            dark_cps: 0.0,
            jitter_sigma_ps: 0.0,
            dead_time_ns: 0.0,
        }
    }

    fn both_arms(n: u64) -> (Vec<ArmTransit>, Vec<ArmTransit>) {
        let a: Vec<_> = (0..n).map(|i| transit(i, i as Tick * 10_000)).collect();
        (a.clone(), a)
    }

    /// Discordant fraction among matched-basis pairs, joined by pair id.
    fn matched_error(a: &[TimeTag], b: &[TimeTag]) -> (usize, usize) {
        let mut by_id = std::collections::HashMap::new();
        for t in b {
            if let Origin::Pair { pair_id, .. } = t.origin {
                by_id.insert(pair_id, t.detector);
            }
        }
        let (mut n, mut err) = (0, 0);
        for t in a {
            if let Origin::Pair { pair_id, .. } = t.origin {
                if let Some(&db) = by_id.get(&pair_id) {
                    if detector_basis(db) == detector_basis(t.detector) {
                        n += 1;
                        err += usize::from(detector_bit(db) != detector_bit(t.detector));
                    }
                }
            }
        }
        (n, err)
    }

    #[test]
    fn zero_efficiency_gives_no_pair_tags() {
        let (a, b) = both_arms(1000);
        let dead = DetectorParams {
            efficiency: 0.0,
            ..ideal()
        };
        let (ta, tb) = detect_pairs(&a, &b, 0.95, &dead, &dead, 1).unwrap();
        assert!(ta.is_empty() && tb.is_empty());
    }

    #[test]
    fn perfect_visibility_has_no_discordance() {
        let (a, b) = both_arms(20_000);
        let (ta, tb) = detect_pairs(&a, &b, 1.0, &ideal(), &ideal(), 2).unwrap();
        let (n, err) = matched_error(&ta, &tb);
        assert!(n > 9000);
        assert_eq!(err, 0);
    }

    #[test]
    fn discordance_matches_visibility() {
        let (a, b) = both_arms(200_000);
        let (ta, tb) = detect_pairs(&a, &b, 0.95, &ideal(), &ideal(), 3).unwrap();
        let (n, err) = matched_error(&ta, &tb);
        let q = err as f64 / n as f64;
        let sd = (0.025 * 0.975 / n as f64).sqrt();
        assert!((q - 0.025).abs() < 4.0 * sd, "q = {q}");
    }

    #[test]
    fn scrambled_photon_is_uncorrelated() {
        let (a, mut b) = both_arms(100_000);
        for t in &mut b {
            t.polarization = Polarization::Scrambled;
        }
        let (ta, tb) = detect_pairs(&a, &b, 1.0, &ideal(), &ideal(), 4).unwrap();
        let (n, err) = matched_error(&ta, &tb);
        let q = err as f64 / n as f64;
        assert!((q - 0.5).abs() < 4.0 * (0.25 / n as f64).sqrt(), "q = {q}");
    }

    #[test]
    fn basis_choice_is_balanced() {
        let (a, b) = both_arms(100_000);
        let (ta, _) = detect_pairs(&a, &b, 0.95, &ideal(), &ideal(), 5).unwrap();
        let rect = ta.iter().filter(|t| t.detector < 2).count() as f64;
        let n = ta.len() as f64;
        assert!((rect / n - 0.5).abs() < 4.0 * (0.25 / n).sqrt());
    }

    #[test]
    fn mismatched_pair_ids_rejected() {
        let (a, mut b) = both_arms(10);
        b[3].pair_id = 99;
        assert!(matches!(
            detect_pairs(&a, &b, 0.9, &ideal(), &ideal(), 0),
            Err(Error::PairMismatch)
        ));
        assert!(detect_pairs(&a, &b[..5], 0.9, &ideal(), &ideal(), 0).is_err());
    }

    #[test]
    fn jitter_spreads_tag_times() {
        let (a, b) = both_arms(50_000);
        let det = DetectorParams {
            jitter_sigma_ps: 500.0,
            ..ideal()
        };
        let (ta, _) = detect_pairs(&a, &b, 0.95, &det, &det, 6).unwrap();
        let offsets: Vec<f64> = ta
            .iter()
            .map(|t| match t.origin {
                Origin::Pair { pair_id, .. } => (t.time - pair_id as Tick * 10_000) as f64,
                _ => unreachable!(),
            })
            .collect();
        let n = offsets.len() as f64;
        let mean = offsets.iter().sum::<f64>() / n;
        let sd = (offsets.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 4.0 * 500.0 / n.sqrt());
        assert!((sd - 500.0).abs() < 10.0, "sd = {sd}");
    }

    #[test]
    fn noise_rate_zero_is_identity() {
        let s = vec![TimeTag {
            time: 5,
            detector: 1,
            origin: Origin::Dark,
        }];
        assert_eq!(
            add_noise_tags(s.clone(), 0.0, NoiseKind::Dark, 1.0, 1).unwrap(),
            s
        );
    }

    #[test]
    fn background_noise_counts_per_detector() {
        let tags = add_noise_tags(Vec::new(), 500.0, NoiseKind::Background, 10.0, 7).unwrap();
        assert!(is_sorted(&tags));
        for d in 0..NUM_DETECTORS {
            let n = tags.iter().filter(|t| t.detector == d).count() as f64;
            assert!(
                (n - 5000.0).abs() < 4.0 * 5000f64.sqrt(),
                "detector {d}: {n}"
            );
        }
        assert!(tags.iter().all(|t| t.origin == Origin::Background));
        assert!(tags
            .iter()
            .all(|t| (0..10_000_000_000_000).contains(&t.time)));
    }

    #[test]
    fn dark_noise_mean_over_seeds() {
        let total: usize = (0..20)
            .map(|s| {
                add_noise_tags(Vec::new(), 300.0, NoiseKind::Dark, 1.0, s)
                    .unwrap()
                    .len()
            })
            .sum();
        let per_detector = total as f64 / 80.0;
        assert!((per_detector - 300.0).abs() < 4.0 * (300.0f64 / 80.0).sqrt());
    }

    #[test]
    fn dead_time_examples() {
        let tag = |time| TimeTag {
            time,
            detector: 2,
            origin: Origin::Dark,
        };
        let s = vec![tag(0), tag(10_000)];
        assert_eq!(apply_dead_time(&s, 0.0).unwrap(), s);
        assert_eq!(apply_dead_time(&s, 50.0).unwrap(), vec![tag(0)]);
        let unsorted = vec![tag(10), tag(0)];
        assert!(matches!(
            apply_dead_time(&unsorted, 1.0),
            Err(Error::Unsorted)
        ));
    }

    #[test]
    fn dead_time_idempotent_on_large_stream() {
        let tags = add_noise_tags(Vec::new(), 2.5e6, NoiseKind::Dark, 0.01, 8).unwrap();
        assert!(tags.len() > 90_000);
        let once = apply_dead_time(&tags, 50.0).unwrap();
        let twice = apply_dead_time(&once, 50.0).unwrap();
        assert_eq!(once, twice);
        assert!(once.len() < tags.len());
    }

    #[test]
    fn tag_text_format_roundtrip() {
        let tags = vec![
            TimeTag {
                time: -12,
                detector: 0,
                origin: Origin::Pair {
                    pair_id: 7,
                    mode: SpatialMode::SecondOrder,
                },
            },
            TimeTag {
                time: 40,
                detector: 3,
                origin: Origin::Background,
            },
            TimeTag {
                time: 41,
                detector: 1,
                origin: Origin::Dark,
            },
        ];
        let mut buf = Vec::new();
        write_tags(&mut buf, &tags).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "-12 0 pair:7:2\n40 3 bg\n41 1 dark\n"
        );
        assert_eq!(read_tags(&buf[..]).unwrap(), tags);
    }

    #[test]
    fn tag_parse_errors_name_the_line() {
        let err = read_tags("# header\n1 0 bg\n2 9 bg\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
        assert!(read_tags("1 0 pair:x:1\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn dead_time_output_respects_spacing(
            times in proptest::collection::vec((0i64..2_000_000, 0u8..4), 0..2000),
            dead_ns in 0.0f64..200.0,
        ) {
            let mut tags: Vec<TimeTag> = times
                .into_iter()
                .map(|(time, detector)| TimeTag { time, detector, origin: Origin::Dark })
                .collect();
            sort_tags(&mut tags);
            let out = apply_dead_time(&tags, dead_ns).unwrap();
            let dead = (dead_ns * 1000.0).round() as Tick;
            for d in 0..NUM_DETECTORS {
                let per: Vec<Tick> = out.iter().filter(|t| t.detector == d).map(|t| t.time).collect();
                prop_assert!(per.windows(2).all(|w| w[1] - w[0] >= dead));
            }
            prop_assert_eq!(apply_dead_time(&out, dead_ns).unwrap(), out);
        }
    }
}
