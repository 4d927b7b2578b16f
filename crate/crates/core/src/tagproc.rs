//! Timetag post-processing: offset recovery, coincidence matching, the
//! temporal filter against delayed second-order-mode photons, and
//! visibility/QBER estimation.

use std::io::Write;

use crate::error::{Error, Result};
use crate::receiver::{detector_basis, detector_bit, is_sorted, TimeTag};
use crate::Tick;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CoincidenceRecord {
    pub time_a: Tick,
    pub time_b: Tick,
    pub detector_a: u8,
    pub detector_b: u8,
    /// `time_b - time_a - offset`.
    pub delta: Tick,
}

impl CoincidenceRecord {
    pub fn bases_match(&self) -> bool {
        detector_basis(self.detector_a) == detector_basis(self.detector_b)
    }

    pub fn discordant(&self) -> bool {
        detector_bit(self.detector_a) != detector_bit(self.detector_b)
    }
}

/// Counts of A-B time differences `t_b - t_a` in bins of `bin_width_ps`.
/// Bin `k` is centred on `origin_ps + k * bin_width_ps` and covers
/// `[centre - w/2, centre + w/2)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrelationHistogram {
    pub bin_width_ps: Tick,
    pub origin_ps: Tick,
    pub counts: Vec<u64>,
}

impl CorrelationHistogram {
    pub fn bin_center(&self, k: usize) -> Tick {
        self.origin_ps + k as Tick * self.bin_width_ps
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

fn times(tags: &[TimeTag]) -> Vec<Tick> {
    tags.iter().map(|t| t.time).collect()
}

/// Histogram of every A-B pairing with a time difference inside
/// `[-span, +span]` (rounded out to whole bins).
pub fn correlation_histogram(
    tags_a: &[TimeTag],
    tags_b: &[TimeTag],
    search_span_ps: Tick,
    bin_width_ps: Tick,
) -> Result<CorrelationHistogram> {
    if tags_a.is_empty() || tags_b.is_empty() {
        return Err(Error::EmptyStream);
    }
    if bin_width_ps <= 0 || search_span_ps < 0 {
        return Err(Error::InvalidParameter(
            "bin width must be > 0 and span >= 0".into(),
        ));
    }
    if !is_sorted(tags_a) || !is_sorted(tags_b) {
        return Err(Error::Unsorted);
    }
    let half_bins = (search_span_ps + bin_width_ps - 1) / bin_width_ps;
    let origin = -half_bins * bin_width_ps;
    let low = origin - bin_width_ps / 2;
    let nbins = (2 * half_bins + 1) as usize;
    let high = low + nbins as Tick * bin_width_ps;
    let mut counts = vec![0u64; nbins];

    let b = times(tags_b);
    let mut start = 0usize;
    for a in tags_a.iter().map(|t| t.time) {
        while start < b.len() && b[start] - a < low {
            start += 1;
        }
        for &tb in b[start..].iter().take_while(|&&tb| tb - a < high) {
            counts[((tb - a - low) / bin_width_ps) as usize] += 1;
        }
    }
    Ok(CorrelationHistogram {
        bin_width_ps,
        origin_ps: origin,
        counts,
    })
}

/// Offset (`t_b - t_a`) that maximises A-B coincidences, as the centre of the
/// fullest histogram bin. Ties go to the smallest absolute offset.
///
/// Fails with [`Error::NoCorrelationPeak`] unless the peak clears the median
/// bin count by five standard deviations (with the deviation floored at one
/// count, so sparse uncorrelated streams do not produce spurious peaks).
pub fn find_offset(
    tags_a: &[TimeTag],
    tags_b: &[TimeTag],
    search_span_ps: Tick,
    bin_width_ps: Tick,
) -> Result<Tick> {
    let hist = correlation_histogram(tags_a, tags_b, search_span_ps, bin_width_ps)?;
    let (best, &peak) = hist
        .counts
        .iter()
        .enumerate()
        .max_by(|(i, x), (j, y)| {
            x.cmp(y).then_with(|| {
                let (ci, cj) = (hist.bin_center(*i), hist.bin_center(*j));
                // Prefer smaller |offset|; on a ± tie prefer the negative side.
                (cj.abs(), cj).cmp(&(ci.abs(), ci))
            })
        })
        .expect("histogram has at least one bin");

    let mut sorted = hist.counts.clone();
    sorted.sort_unstable();
    let floor = sorted[sorted.len() / 2] as f64;
    let sigma = floor.sqrt().max(1.0);
    if (peak as f64) <= floor + 5.0 * sigma {
        return Err(Error::NoCorrelationPeak);
    }
    Ok(hist.bin_center(best))
}

/// Greedy earliest-first matching: each A tag takes the earliest unused B tag
/// with `|t_b - t_a - offset| <= window/2`.
pub fn match_coincidences(
    tags_a: &[TimeTag],
    tags_b: &[TimeTag],
    offset_ps: Tick,
    window_ps: Tick,
) -> Result<Vec<CoincidenceRecord>> {
    if !is_sorted(tags_a) || !is_sorted(tags_b) {
        return Err(Error::Unsorted);
    }
    let half = window_ps / 2;
    let mut records = Vec::new();
    let mut j = 0usize;
    for a in tags_a {
        while j < tags_b.len() && tags_b[j].time - offset_ps - a.time < -half {
            j += 1;
        }
        if j == tags_b.len() {
            break;
        }
        let b = &tags_b[j];
        let delta = b.time - offset_ps - a.time;
        if delta <= half {
            records.push(CoincidenceRecord {
                time_a: a.time,
                time_b: b.time,
                detector_a: a.detector,
                detector_b: b.detector,
                delta,
            });
            j += 1;
        }
    }
    Ok(records)
}

/// Keeps only records with `|delta| <= reject_half_width_ps`.
///
/// A photon in the slower mode on one side shifts `delta` by about
/// `±mode_delay_ps`, so the side peaks are cut away. Pairs where both photons
/// took the same mode stay in the central peak.
pub fn temporal_mode_filter(
    records: &[CoincidenceRecord],
    mode_delay_ps: Tick,
    reject_half_width_ps: Tick,
) -> Vec<CoincidenceRecord> {
    if !mode_filter_resolves(mode_delay_ps, reject_half_width_ps) {
        log::warn!(
            "mode delay {mode_delay_ps} ps is inside the retained window ±{reject_half_width_ps} ps; \
             second-order photons cannot be separated"
        );
    }
    records
        .iter()
        .filter(|r| r.delta.abs() <= reject_half_width_ps)
        .copied()
        .collect()
}

/// Whether the side peaks at `±mode_delay_ps` lie outside the retained
/// central window.
pub fn mode_filter_resolves(mode_delay_ps: Tick, reject_half_width_ps: Tick) -> bool {
    mode_delay_ps > reject_half_width_ps
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisibilityEstimate {
    pub visibility: f64,
    pub qber: f64,
    pub matched_basis: usize,
}

pub fn estimate_visibility_and_qber(records: &[CoincidenceRecord]) -> Result<VisibilityEstimate> {
    let (matched, errors) = records
        .iter()
        .filter(|r| r.bases_match())
        .fold((0usize, 0usize), |(n, e), r| {
            (n + 1, e + usize::from(r.discordant()))
        });
    if matched == 0 {
        return Err(Error::NoMatchedBasis);
    }
    let qber = errors as f64 / matched as f64;
    Ok(VisibilityEstimate {
        visibility: 1.0 - 2.0 * qber,
        qber,
        matched_basis: matched,
    })
}

pub const COINCIDENCE_CSV_HEADER: &str = "time_a_ps,time_b_ps,det_a,det_b,delta_ps";

pub fn write_coincidences_csv<W: Write>(mut out: W, records: &[CoincidenceRecord]) -> Result<()> {
    writeln!(out, "{COINCIDENCE_CSV_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.time_a, r.time_b, r.detector_a, r.detector_b, r.delta
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::receiver::{add_noise_tags, NoiseKind, Origin};
    use crate::seed;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn tag(time: Tick, detector: u8) -> TimeTag {
        TimeTag {
            time,
            detector,
            origin: Origin::Dark,
        }
    }

    fn shifted(tags: &[TimeTag], by: Tick) -> Vec<TimeTag> {
        tags.iter().map(|t| tag(t.time + by, t.detector)).collect()
    }

    /// Random sorted stream with mean spacing `gap`.
    fn stream(n: usize, gap: f64, seed: u64) -> Vec<TimeTag> {
        let mut rng = seed::rng(seed);
        let mut t = 0.0;
        (0..n)
            .map(|_| {
                t += -gap * (1.0 - rng.random::<f64>()).ln();
                tag(t as Tick, rng.random_range(0..4))
            })
            .collect()
    }

    fn jittered(tags: &[TimeTag], sigma: f64, seed: u64) -> Vec<TimeTag> {
        let mut rng = seed::rng(seed);
        let n = Normal::new(0.0, sigma).unwrap();
        let mut out: Vec<_> = tags
            .iter()
            .map(|t| tag(t.time + n.sample(&mut rng).round() as Tick, t.detector))
            .collect();
        out.sort_by_key(|t| t.time);
        out
    }

    #[test]
    fn recovers_exact_offset_without_jitter() {
        let a = stream(5000, 1.0e6, 1);
        let b = shifted(&a, 5_000_000);
        assert_eq!(find_offset(&a, &b, 10_000_000, 200).unwrap(), 5_000_000);
    }

    #[test]
    fn recovers_offset_with_jitter() {
        let a = stream(20_000, 2.0e6, 2);
        let b = jittered(&shifted(&a, 5_000_000), 500.0, 3);
        let a = jittered(&a, 500.0, 4);
        let off = find_offset(&a, &b, 10_000_000, 200).unwrap();
        assert!((off - 5_000_000).abs() <= 600, "offset {off}");
    }

    #[test]
    fn independent_streams_have_no_peak() {
        let a = add_noise_tags(Vec::new(), 5000.0, NoiseKind::Dark, 1.0, 5).unwrap();
        let b = add_noise_tags(Vec::new(), 5000.0, NoiseKind::Dark, 1.0, 6).unwrap();
        assert!(matches!(
            find_offset(&a, &b, 50_000_000, 200),
            Err(Error::NoCorrelationPeak)
        ));
    }

    #[test]
    fn empty_stream_rejected() {
        assert!(matches!(
            find_offset(&[], &[tag(0, 0)], 100, 10),
            Err(Error::EmptyStream)
        ));
    }

    #[test]
    fn histogram_counts_every_pairing_in_range() {
        let a = stream(300, 5000.0, 7);
        let b = stream(300, 5000.0, 8);
        let span = 20_000;
        let hist = correlation_histogram(&a, &b, span, 300).unwrap();
        let low = hist.origin_ps - 150;
        let high = low + hist.counts.len() as Tick * 300;
        let brute = a
            .iter()
            .flat_map(|x| b.iter().map(move |y| y.time - x.time))
            .filter(|d| (low..high).contains(d))
            .count() as u64;
        assert_eq!(hist.total(), brute);
    }

    #[test]
    fn tie_breaks_toward_zero() {
        // Eight coincidences at +400 and eight at -200.
        let a: Vec<_> = (0..16).map(|i| tag(i * 1_000_000, 0)).collect();
        let mut b: Vec<_> = (0..16)
            .map(|i| tag(i * 1_000_000 + if i % 2 == 0 { 400 } else { -200 }, 0))
            .collect();
        b.sort_by_key(|t| t.time);
        assert_eq!(find_offset(&a, &b, 1000, 200).unwrap(), -200);
    }

    #[test]
    fn disjoint_ranges_match_nothing() {
        let a: Vec<_> = (0..100).map(|i| tag(i * 10, 0)).collect();
        let b: Vec<_> = (0..100).map(|i| tag(1_000_000 + i * 10, 0)).collect();
        assert!(match_coincidences(&a, &b, 0, 2000).unwrap().is_empty());
    }

    #[test]
    fn aligned_streams_match_fully() {
        let a = stream(1000, 1.0e5, 9);
        let r = match_coincidences(&a, &a, 0, 1).unwrap();
        assert_eq!(r.len(), 1000);
        assert!(r.iter().all(|r| r.delta == 0));
    }

    #[test]
    fn unsorted_input_rejected() {
        let a = vec![tag(5, 0), tag(1, 0)];
        assert!(matches!(
            match_coincidences(&a, &a, 0, 10),
            Err(Error::Unsorted)
        ));
    }

    /// Independent reference: for each A tag in order, scan all of B for the
    /// earliest unused tag inside the window.
    fn brute_force_match(
        a: &[TimeTag],
        b: &[TimeTag],
        offset: Tick,
        window: Tick,
    ) -> Vec<CoincidenceRecord> {
        let mut used = vec![false; b.len()];
        let mut out = Vec::new();
        for x in a {
            if let Some(j) = (0..b.len())
                .find(|&j| !used[j] && (b[j].time - x.time - offset).abs() <= window / 2)
            {
                used[j] = true;
                out.push(CoincidenceRecord {
                    time_a: x.time,
                    time_b: b[j].time,
                    detector_a: x.detector,
                    detector_b: b[j].detector,
                    delta: b[j].time - x.time - offset,
                });
            }
        }
        out
    }

    #[test]
    fn capture_fraction_matches_gaussian_prediction() {
        let n = 10_000;
        let truth = stream(n, 1.0e7, 10);
        let a = jittered(&truth, 500.0, 11);
        let b = jittered(&truth, 500.0, 12);
        let r = match_coincidences(&a, &b, 0, 2000).unwrap();
        assert_eq!(r, brute_force_match(&a, &b, 0, 2000));
        // delta ~ N(0, 500*sqrt 2); P(|delta| <= 1000) = erf(1).
        let p = statrs::function::erf::erf(1.0);
        let frac = r.len() as f64 / n as f64;
        assert!(
            (frac - p).abs() < 4.0 * (p * (1.0 - p) / n as f64).sqrt(),
            "{frac}"
        );
    }

    #[test]
    fn filter_is_identity_on_central_records() {
        let r: Vec<_> = (0..50)
            .map(|i| CoincidenceRecord {
                time_a: i,
                time_b: i,
                detector_a: 0,
                detector_b: 0,
                delta: 0,
            })
            .collect();
        assert_eq!(temporal_mode_filter(&r, 4400, 1000), r);
    }

    #[test]
    fn filter_removes_side_peaks() {
        let rec = |delta| CoincidenceRecord {
            time_a: 0,
            time_b: delta,
            detector_a: 0,
            detector_b: 0,
            delta,
        };
        let r = vec![rec(0), rec(4400), rec(-4400), rec(1000), rec(-1001)];
        assert_eq!(
            temporal_mode_filter(&r, 4400, 1000),
            vec![rec(0), rec(1000)]
        );
        assert!(mode_filter_resolves(4400, 1000));
        assert!(!mode_filter_resolves(550, 1000));
    }

    fn rec(a: u8, b: u8) -> CoincidenceRecord {
        CoincidenceRecord {
            time_a: 0,
            time_b: 0,
            detector_a: a,
            detector_b: b,
            delta: 0,
        }
    }

    #[test]
    fn visibility_estimates() {
        let concordant = vec![rec(0, 0), rec(1, 1), rec(2, 2), rec(3, 3), rec(0, 2)];
        let e = estimate_visibility_and_qber(&concordant).unwrap();
        assert_eq!((e.qber, e.visibility, e.matched_basis), (0.0, 1.0, 4));

        assert!(matches!(
            estimate_visibility_and_qber(&[rec(0, 2), rec(1, 3)]),
            Err(Error::NoMatchedBasis)
        ));

        let mut rng = seed::rng(13);
        let n = 40_000;
        let mixed: Vec<_> = (0..n)
            .map(|_| {
                let wrong = rng.random::<f64>() < 0.025;
                let a = rng.random_range(0..4u8);
                rec(a, if wrong { a ^ 1 } else { a })
            })
            .collect();
        let e = estimate_visibility_and_qber(&mixed).unwrap();
        let sd_v = 2.0 * (0.025 * 0.975 / n as f64).sqrt();
        assert!((e.visibility - 0.95).abs() < 4.0 * sd_v);

        let random: Vec<_> = (0..n)
            .map(|_| rec(rng.random_range(0..4u8), rng.random_range(0..4u8)))
            .collect();
        let e = estimate_visibility_and_qber(&random).unwrap();
        let m = e.matched_basis as f64;
        assert!((e.qber - 0.5).abs() < 4.0 * (0.25 / m).sqrt());
        assert!(e.visibility.abs() < 8.0 * (0.25 / m).sqrt());
    }

    #[test]
    fn coincidence_csv_layout() {
        let mut buf = Vec::new();
        let r = CoincidenceRecord {
            time_a: 10,
            time_b: 25,
            detector_a: 1,
            detector_b: 3,
            delta: -5,
        };
        write_coincidences_csv(&mut buf, &[r]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "time_a_ps,time_b_ps,det_a,det_b,delta_ps\n10,25,1,3,-5\n"
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn offset_shift_equivariant(seed_a in 0u64..1000, shift_bins in -200i64..200) {
            let a = stream(2000, 1.0e6, seed_a);
            let b = jittered(&shifted(&a, 1_000_000), 300.0, seed_a + 1);
            let base = find_offset(&a, &b, 3_000_000, 200).unwrap();
            let moved = find_offset(&a, &shifted(&b, shift_bins * 200), 3_000_000, 200).unwrap();
            prop_assert_eq!(moved - base, shift_bins * 200);
        }

        #[test]
        fn matching_is_injective_and_greedy(seed_a in 0u64..1000, offset in -3000i64..3000) {
            let a = stream(1500, 3000.0, seed_a);
            let b = stream(1500, 3000.0, seed_a + 7);
            let r = match_coincidences(&a, &b, offset, 2000).unwrap();
            let mut ta: Vec<_> = r.iter().map(|x| x.time_a).collect();
            let mut tb: Vec<_> = r.iter().map(|x| x.time_b).collect();
            ta.dedup();
            tb.dedup();
            // Streams can repeat a time on different detectors; compare with
            // the record count only when times are unique.
            if a.windows(2).all(|w| w[0].time < w[1].time) && b.windows(2).all(|w| w[0].time < w[1].time) {
                prop_assert_eq!(ta.len(), r.len());
                prop_assert_eq!(tb.len(), r.len());
            }
            prop_assert!(r.iter().all(|x| x.delta.abs() <= 1000));
            prop_assert_eq!(r, brute_force_match(&a, &b, offset, 2000));
        }

        #[test]
        fn filter_is_subset_and_idempotent(
            deltas in proptest::collection::vec(-6000i64..6000, 0..500),
            half in 0i64..3000,
        ) {
            let r: Vec<_> = deltas.iter().map(|&d| CoincidenceRecord {
                time_a: 0, time_b: d, detector_a: 0, detector_b: 1, delta: d,
            }).collect();
            let once = temporal_mode_filter(&r, 4400, half);
            prop_assert!(once.iter().all(|x| r.contains(x)));
            prop_assert_eq!(temporal_mode_filter(&once, 4400, half), once.clone());
        }
    }
}
