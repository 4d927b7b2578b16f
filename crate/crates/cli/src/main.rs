use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use fiberqkd::distill::{sift, DistillParams, KeyRateReport};
use fiberqkd::receiver::{read_tags, TimeTag};
use fiberqkd::tagproc::{
    estimate_visibility_and_qber, find_offset, match_coincidences, temporal_mode_filter,
};
use fiberqkd_cli::{run_experiment, ExperimentConfig, Scenario};

#[derive(Parser)]
#[command(
    name = "fiberqkd",
    version,
    about = "Entanglement-based QKD over shared telecom fiber"
)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    scenario: Option<Scenario>,
}

#[derive(Subcommand)]
enum Command {
    /// Post-process two recorded tag files into a key-rate report.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct AnalyzeArgs {
    tags_a: PathBuf,
    tags_b: PathBuf,
    /// Full width of the coincidence window.
    #[arg(long, default_value_t = 2000)]
    window_ps: i64,
    /// Second-mode delay; side peaks beyond this are cut when > 0.
    #[arg(long, default_value_t = 0)]
    mode_delay_ps: i64,
    #[arg(long, default_value_t = 1000)]
    reject_half_width_ps: i64,
    #[arg(long, default_value_t = 50_000_000)]
    search_span_ps: i64,
    #[arg(long, default_value_t = 200)]
    bin_ps: i64,
    #[arg(long, default_value_t = 1.1)]
    f: f64,
    #[arg(long, default_value_t = 1e-10)]
    epsilon: f64,
}

fn load_tags(path: &Path) -> Result<Vec<TimeTag>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut tags =
        read_tags(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
    tags.sort_by_key(|t| (t.time, t.detector));
    Ok(tags)
}

fn analyze(args: &AnalyzeArgs) -> Result<()> {
    let a = load_tags(&args.tags_a)?;
    let b = load_tags(&args.tags_b)?;
    let span = |t: &[TimeTag]| t.last().map_or(0, |l| l.time) - t.first().map_or(0, |f| f.time);
    let duration = span(&a).max(span(&b)) as f64 / fiberqkd::PS_PER_S;
    let offset = find_offset(&a, &b, args.search_span_ps, args.bin_ps)?;
    let mut width = args.window_ps;
    if args.mode_delay_ps > 0 {
        width = 2 * (args.mode_delay_ps + args.window_ps);
    }
    let all = match_coincidences(&a, &b, offset, width)?;
    let kept = if args.mode_delay_ps > 0 {
        temporal_mode_filter(&all, args.mode_delay_ps, args.reject_half_width_ps)
    } else {
        all.clone()
    };
    let vis = estimate_visibility_and_qber(&kept)?;
    let key = sift(&kept, duration.max(f64::MIN_POSITIVE))?;
    let params = DistillParams {
        f: args.f,
        epsilon: args.epsilon,
    };
    let report = KeyRateReport::from_sifted(&key, params, f64::NAN, f64::NAN)?;
    println!("offset_ps: {offset}");
    println!("coincidences: {} ({} kept)", all.len(), kept.len());
    println!("visibility: {:.4}", vis.visibility);
    println!("{}", KeyRateReport::CSV_HEADER);
    println!("{}", report.csv_row());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(Command::Analyze(args)) = &cli.command {
        return analyze(args);
    }
    let mut config = match &cli.run.config {
        Some(path) => {
            ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.run.seed {
        config.seed = seed;
    }
    if let Some(out) = cli.run.out {
        config.output_dir = out;
    }
    if let Some(scenario) = cli.run.scenario {
        config.scenario = scenario;
    }
    let outcome = run_experiment(&config)?;
    print!("{}", outcome.summary);
    for f in &outcome.files {
        log::info!("wrote {}", f.display());
    }
    Ok(())
}
