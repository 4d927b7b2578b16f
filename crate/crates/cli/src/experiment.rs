use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;

use fiberqkd::analytic::operating_point;
use fiberqkd::channel::ChannelConfig;
use fiberqkd::distill::KeyRateReport;
use fiberqkd::netsim::{aligned_visibility, run_session, schedule_session, Topology};
use fiberqkd::receiver::write_tags;
use fiberqkd::seed;
use rayon::prelude::*;

use crate::config::{ExperimentConfig, Scenario};
use crate::output::{
    emit_csv, write_text, ExtrapolationRow, QberLengthRow, ReportRow, SkrLengthRow, TrafficRow,
};
use crate::{CliError, Result};

pub const DARK: &str = "dark";
pub const ACTIVE: &str = "active";

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub files: Vec<PathBuf>,
    pub summary: String,
    pub reports: Vec<KeyRateReport>,
}

#[derive(Debug, Clone)]
struct SessionSummary {
    report: KeyRateReport,
    visibility_unfiltered: f64,
    visibility_filtered: f64,
    retained_fraction: f64,
    warnings: Vec<String>,
}

struct Task {
    point: usize,
    repetition: u32,
    arm: ChannelConfig,
}

fn session_seed(config: &ExperimentConfig, point: usize, repetition: u32) -> u64 {
    seed::derive(config.seed, point as u64, u64::from(repetition))
}

fn run_task(config: &ExperimentConfig, task: &Task) -> Result<SessionSummary> {
    let topology = config.topology(task.arm.clone())?;
    let plan = schedule_session(
        &topology,
        "alice",
        "bob",
        config.duration_s,
        session_seed(config, task.point, task.repetition),
    )?;
    let out = run_session(&topology, &plan)?;
    Ok(SessionSummary {
        report: out.report,
        visibility_unfiltered: out.stats.unfiltered.visibility,
        visibility_filtered: out.stats.filtered.visibility,
        retained_fraction: out.stats.retained_fraction,
        warnings: out.stats.warnings,
    })
}

/// Runs every (point, repetition) pair; results come back in task order.
fn run_tasks(config: &ExperimentConfig, tasks: &[Task]) -> Vec<Result<SessionSummary, String>> {
    tasks
        .par_iter()
        .map(|t| run_task(config, t).map_err(|e| e.to_string()))
        .collect()
}

/// Sample mean and standard error of the mean.
pub fn mean_sem(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

struct Point {
    length_km: f64,
    variant: &'static str,
    traffic_mbps: f64,
    arm: ChannelConfig,
}

struct PointResult<'a> {
    point: &'a Point,
    sessions: Vec<&'a SessionSummary>,
}

impl PointResult<'_> {
    fn stat(&self, f: impl Fn(&SessionSummary) -> f64) -> (f64, f64) {
        mean_sem(&self.sessions.iter().map(|s| f(s)).collect::<Vec<_>>())
    }
}

struct Collected {
    reports: Vec<KeyRateReport>,
    warnings: BTreeSet<String>,
    failures: Vec<String>,
}

fn simulate_points<'a>(
    config: &ExperimentConfig,
    points: &'a [Point],
    results: &'a mut Vec<Result<SessionSummary, String>>,
) -> (Vec<PointResult<'a>>, Collected) {
    let reps = config.repetitions;
    let tasks: Vec<Task> = points
        .iter()
        .enumerate()
        .flat_map(|(i, p)| {
            (0..reps).map(move |r| Task {
                point: i,
                repetition: r,
                arm: p.arm.clone(),
            })
        })
        .collect();
    *results = run_tasks(config, &tasks);

    let mut collected = Collected {
        reports: Vec::new(),
        warnings: BTreeSet::new(),
        failures: Vec::new(),
    };
    let mut grouped: Vec<PointResult<'a>> = points
        .iter()
        .map(|point| PointResult {
            point,
            sessions: Vec::new(),
        })
        .collect();
    for (task, result) in tasks.iter().zip(results.iter()) {
        let p = &points[task.point];
        match result {
            Ok(s) => {
                collected.reports.push(s.report.clone());
                collected.warnings.extend(
                    s.warnings
                        .iter()
                        .map(|w| format!("{} km {}: {w}", p.length_km, p.variant)),
                );
                grouped[task.point].sessions.push(s);
            }
            Err(e) => collected.failures.push(format!(
                "{} km {} repetition {}: {e}",
                p.length_km, p.variant, task.repetition
            )),
        }
    }
    (grouped, collected)
}

fn analytic_point(
    config: &ExperimentConfig,
    topology: &Topology,
    arm: &ChannelConfig,
) -> Result<(f64, f64, f64)> {
    let v = aligned_visibility(topology, arm, arm)?;
    let p = operating_point(
        &topology.source,
        arm,
        arm,
        &topology.detectors,
        &topology.detectors,
        &topology.analysis,
        v,
    )?;
    Ok((p.sifted_rate, p.qber, p.asymptotic_rate(config.distill.f)?))
}

fn header(config: &ExperimentConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "fiberqkd experiment summary");
    let _ = writeln!(s, "scenario: {}", config.scenario.name());
    let _ = writeln!(s, "seed: {}", config.seed);
    let _ = writeln!(s, "repetitions: {}", config.repetitions);
    let _ = writeln!(s, "session duration: {} s", config.duration_s);
    let _ = writeln!(s, "pair rate: {} pairs/s", config.source.pair_rate);
    let _ = writeln!(
        s,
        "error correction f = {}, epsilon = {}",
        config.distill.f, config.distill.epsilon
    );
    s
}

fn footer(s: &mut String, collected: &Collected) {
    if !collected.warnings.is_empty() {
        let _ = writeln!(s, "\nwarnings:");
        for w in &collected.warnings {
            let _ = writeln!(s, "  {w}");
        }
    }
    if !collected.failures.is_empty() {
        let _ = writeln!(s, "\nfailed sessions:");
        for f in &collected.failures {
            let _ = writeln!(s, "  {f}");
        }
    }
}

/// Runs the configured scenario and writes its tables and summary into
/// `config.output_dir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let dir = &config.output_dir;
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
    match config.scenario {
        Scenario::LengthSweep => length_sweep(config),
        Scenario::TrafficSweep => traffic_sweep(config),
        Scenario::Extrapolation => extrapolation(config),
        Scenario::SingleRun => single_run(config),
    }
}

fn write_reports(
    config: &ExperimentConfig,
    reports: &[KeyRateReport],
    files: &mut Vec<PathBuf>,
) -> Result<()> {
    let path = config.output_dir.join("reports.csv");
    emit_csv(
        &reports.iter().map(ReportRow::from).collect::<Vec<_>>(),
        &path,
    )?;
    files.push(path);
    Ok(())
}

fn finish(
    config: &ExperimentConfig,
    mut summary: String,
    collected: Collected,
    mut files: Vec<PathBuf>,
) -> Result<ExperimentOutcome> {
    footer(&mut summary, &collected);
    write_reports(config, &collected.reports, &mut files)?;
    let path = config.output_dir.join("summary.txt");
    write_text(&path, &summary)?;
    files.push(path);
    Ok(ExperimentOutcome {
        files,
        summary,
        reports: collected.reports,
    })
}

fn length_sweep(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let points: Vec<Point> = config
        .lengths_km
        .iter()
        .flat_map(|&l| {
            [
                Point {
                    length_km: l,
                    variant: DARK,
                    traffic_mbps: 0.0,
                    arm: config.arm(l, None),
                },
                Point {
                    length_km: l,
                    variant: ACTIVE,
                    traffic_mbps: config.active_traffic_mbps,
                    arm: config.arm(l, Some(config.active_traffic_mbps)),
                },
            ]
        })
        .collect();
    let mut results = Vec::new();
    let (grouped, collected) = simulate_points(config, &points, &mut results);

    let mut qber_rows = Vec::new();
    let mut skr_rows = Vec::new();
    let mut summary = header(config);
    let _ = writeln!(
        summary,
        "\n{:>8} {:>7} {:>9} {:>9} {:>12} {:>12} {:>9}",
        "km/arm", "variant", "qber", "±sem", "sifted/s", "secret/s", "sessions"
    );
    for g in &grouped {
        let p = g.point;
        let topology = config.topology(p.arm.clone())?;
        let (_, a_qber, a_rate) = analytic_point(config, &topology, &p.arm)?;
        let (q, q_sem) = g.stat(|s| s.report.qber);
        let (sr, sr_sem) = g.stat(|s| s.report.sifted_rate);
        let (ar, ar_sem) = g.stat(|s| s.report.asymptotic_secret_rate);
        let (fl, fl_sem) = g.stat(|s| s.report.finite_secret_length as f64);
        let n = g.sessions.len() as u32;
        qber_rows.push(QberLengthRow {
            length_km_per_arm: p.length_km,
            variant: p.variant.into(),
            traffic_mbps: p.traffic_mbps,
            repetitions: n,
            qber_mean: q,
            qber_sem: q_sem,
            visibility_unfiltered_mean: g.stat(|s| s.visibility_unfiltered).0,
            visibility_filtered_mean: g.stat(|s| s.visibility_filtered).0,
            retained_fraction_mean: g.stat(|s| s.retained_fraction).0,
            analytic_qber: a_qber,
        });
        skr_rows.push(SkrLengthRow {
            length_km_per_arm: p.length_km,
            variant: p.variant.into(),
            traffic_mbps: p.traffic_mbps,
            repetitions: n,
            sifted_rate_mean: sr,
            sifted_rate_sem: sr_sem,
            asymptotic_rate_mean: ar,
            asymptotic_rate_sem: ar_sem,
            finite_length_mean: fl,
            finite_length_sem: fl_sem,
            analytic_asymptotic_rate: a_rate,
        });
        let _ = writeln!(
            summary,
            "{:>8} {:>7} {:>9.5} {:>9.5} {:>12.1} {:>12.1} {:>9}",
            p.length_km, p.variant, q, q_sem, sr, ar, n
        );
    }
    let mut files = Vec::new();
    let path = config.output_dir.join("qber_vs_length.csv");
    emit_csv(&qber_rows, &path)?;
    files.push(path);
    let path = config.output_dir.join("skr_vs_length.csv");
    emit_csv(&skr_rows, &path)?;
    files.push(path);
    finish(config, summary, collected, files)
}

fn traffic_sweep(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let length = config.traffic_sweep_length_km;
    let points: Vec<Point> = config
        .traffics_mbps
        .iter()
        .map(|&mbps| Point {
            length_km: length,
            variant: ACTIVE,
            traffic_mbps: mbps,
            arm: config.arm(length, Some(mbps)),
        })
        .collect();
    let mut results = Vec::new();
    let (grouped, collected) = simulate_points(config, &points, &mut results);

    let mut rows = Vec::new();
    let mut summary = header(config);
    let _ = writeln!(summary, "arm length: {length} km");
    let _ = writeln!(
        summary,
        "\n{:>8} {:>9} {:>9} {:>12} {:>12} {:>9}",
        "Mbps", "qber", "±sem", "sifted/s", "secret/s", "sessions"
    );
    for g in &grouped {
        let (q, q_sem) = g.stat(|s| s.report.qber);
        let (sr, sr_sem) = g.stat(|s| s.report.sifted_rate);
        let (ar, ar_sem) = g.stat(|s| s.report.asymptotic_secret_rate);
        let n = g.sessions.len() as u32;
        rows.push(TrafficRow {
            length_km_per_arm: length,
            traffic_mbps: g.point.traffic_mbps,
            repetitions: n,
            qber_mean: q,
            qber_sem: q_sem,
            sifted_rate_mean: sr,
            sifted_rate_sem: sr_sem,
            asymptotic_rate_mean: ar,
            asymptotic_rate_sem: ar_sem,
        });
        let _ = writeln!(
            summary,
            "{:>8} {:>9.5} {:>9.5} {:>12.1} {:>12.1} {:>9}",
            g.point.traffic_mbps, q, q_sem, sr, ar, n
        );
    }
    let qs: Vec<f64> = rows.iter().map(|r| r.qber_mean).collect();
    let spread =
        qs.iter().cloned().fold(f64::MIN, f64::max) - qs.iter().cloned().fold(f64::MAX, f64::min);
    let _ = writeln!(summary, "\nqber spread over traffic levels: {spread:.5}");

    let path = config.output_dir.join("qber_vs_traffic.csv");
    emit_csv(&rows, &path)?;
    finish(config, summary, collected, vec![path])
}

fn extrapolation(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let rate = config.extrapolation.pair_rate;
    let mut rows = Vec::new();
    let mut summary = header(config);
    let _ = writeln!(
        summary,
        "extrapolated pair rate: {rate} pairs/s (closed-form model)"
    );
    let _ = writeln!(
        summary,
        "\n{:>8} {:>7} {:>9} {:>12} {:>12}",
        "km/arm", "variant", "qber", "sifted/s", "secret/s"
    );
    for &l in &config.extrapolation.lengths_km {
        for (variant, traffic) in [(DARK, None), (ACTIVE, Some(config.active_traffic_mbps))] {
            let arm = config.arm(l, traffic);
            let topology = config.topology_with_rate(arm.clone(), rate)?;
            let (sifted, qber, secret) = analytic_point(config, &topology, &arm)?;
            rows.push(ExtrapolationRow {
                length_km_per_arm: l,
                variant: variant.into(),
                pair_rate: rate,
                sifted_rate: sifted,
                qber,
                asymptotic_rate: secret,
            });
            let _ = writeln!(
                summary,
                "{:>8} {:>7} {:>9.5} {:>12.3} {:>12.3}",
                l, variant, qber, sifted, secret
            );
        }
    }
    let path = config.output_dir.join("extrapolation.csv");
    emit_csv(&rows, &path)?;
    let collected = Collected {
        reports: Vec::new(),
        warnings: BTreeSet::new(),
        failures: Vec::new(),
    };
    footer(&mut summary, &collected);
    let summary_path = config.output_dir.join("summary.txt");
    write_text(&summary_path, &summary)?;
    Ok(ExperimentOutcome {
        files: vec![path, summary_path],
        summary,
        reports: Vec::new(),
    })
}

fn single_run(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let run = &config.single_run;
    let traffic = run.active.then_some(config.active_traffic_mbps);
    let arm = config.arm(run.length_km, traffic);
    let topology = config.topology(arm)?;
    let plan = schedule_session(
        &topology,
        "alice",
        "bob",
        config.duration_s,
        session_seed(config, 0, 0),
    )?;
    let out = run_session(&topology, &plan)?;

    let mut files = Vec::new();
    let path = config.output_dir.join("report.csv");
    emit_csv(&[ReportRow::from(&out.report)], &path)?;
    files.push(path);
    if run.dump_tags {
        for (name, tags) in [("tags_a.txt", &out.tags_a), ("tags_b.txt", &out.tags_b)] {
            let path = config.output_dir.join(name);
            write_tags(std::io::BufWriter::new(std::fs::File::create(&path)?), tags)?;
            files.push(path);
        }
        let path = config.output_dir.join("coincidences.csv");
        write_text(&path, &out.coincidence_csv()?)?;
        files.push(path);
    }

    let r = &out.report;
    let s = &out.stats;
    let mut summary = header(config);
    let _ = writeln!(
        summary,
        "\narm length: {} km, {}",
        run.length_km,
        if run.active { ACTIVE } else { DARK }
    );
    let _ = writeln!(summary, "offset: {} ps", s.offset_ps);
    let _ = writeln!(
        summary,
        "coincidences: {} unfiltered, {} after mode filter (retained {:.3})",
        s.unfiltered_coincidences, s.filtered_coincidences, s.retained_fraction
    );
    let _ = writeln!(
        summary,
        "visibility: {:.4} unfiltered, {:.4} filtered",
        s.unfiltered.visibility, s.filtered.visibility
    );
    let _ = writeln!(
        summary,
        "sifted bits: {} ({:.1} /s)",
        r.sifted_bits, r.sifted_rate
    );
    let _ = writeln!(summary, "qber: {:.5}", r.qber);
    let _ = writeln!(
        summary,
        "asymptotic secret rate: {:.2} bits/s",
        r.asymptotic_secret_rate
    );
    let _ = writeln!(
        summary,
        "finite-key secret length: {} bits",
        r.finite_secret_length
    );
    match r.n_required {
        Some(n) => {
            let _ = writeln!(summary, "minimum raw key: {n} bits");
        }
        None => {
            let _ = writeln!(
                summary,
                "minimum raw key: none (no key at any block length)"
            );
        }
    }
    let collected = Collected {
        reports: vec![out.report.clone()],
        warnings: s.warnings.iter().cloned().collect(),
        failures: Vec::new(),
    };
    footer(&mut summary, &collected);
    let path = config.output_dir.join("summary.txt");
    write_text(&path, &summary)?;
    files.push(path);
    Ok(ExperimentOutcome {
        files,
        summary,
        reports: collected.reports,
    })
}
