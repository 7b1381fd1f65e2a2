use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use ensgap::data::{make_dataset, write_csv};
use ensgap::harness::{resolve_task, rerun_from_manifest, run_experiment, write_report, ExperimentConfig, ExperimentKind, RunManifest, RunOutcome};
use ensgap::metrics::read_records_csv;
use ensgap::rng::{derive_rng, Purpose};

/// Deep-ensemble experiments: weight decay, temperature scaling, early
/// stopping and BatchEnsemble under shared, disjoint and overlapping holdout.
///
/// Any config key can be overridden after the options as `--dotted.key=value`,
/// e.g. `ensgap early-stop --config c.toml --out runs/es -- --train.patience=5`.
/// The worker count comes from ENSGAP_WORKERS.
#[derive(Parser)]
#[command(name = "ensgap", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured task and write it as CSV.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Weight-decay grid sweep: individual vs ensemble selection.
    SweepWd(RunArgs),
    /// Temperature scaling in none/individual/joint/pool modes.
    TempScale(RunArgs),
    /// Individual vs joint early stopping.
    EarlyStop(RunArgs),
    /// BatchEnsemble with different fast-weight initializations.
    BatchEnsemble(RunArgs),
    /// Joint early stopping followed by joint temperature scaling.
    StopThenScale(RunArgs),
    /// Rebuild aggregate and plot CSVs from a metrics CSV.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML config; `experiment` may be omitted.
    #[arg(long, conflicts_with = "from_manifest")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Rerun the config recorded in a previous manifest.json.
    #[arg(long)]
    from_manifest: Option<PathBuf>,
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

fn run(kind: ExperimentKind, args: RunArgs) -> anyhow::Result<bool> {
    let outcome: RunOutcome = match &args.from_manifest {
        Some(manifest) => {
            if !args.overrides.is_empty() {
                bail!("overrides cannot be combined with --from-manifest");
            }
            let recorded = RunManifest::load(manifest)?.config.experiment;
            if recorded != kind {
                bail!("manifest holds a {} run, not {}", recorded.as_str(), kind.as_str());
            }
            rerun_from_manifest(manifest, &args.out)?
        }
        None => {
            let config = ExperimentConfig::resolve(args.config.as_deref(), &args.overrides, Some(kind))?;
            run_experiment(&config, &args.out)?
        }
    };
    let m = &outcome.manifest;
    println!(
        "{}: {} rows, {} failed run(s), {:.1}s on {} worker(s); manifest at {}",
        kind.as_str(),
        outcome.records.len(),
        m.failures(),
        m.wall_clock_secs,
        m.workers,
        args.out.join("manifest.json").display()
    );
    for s in m.sweeps.iter().filter_map(|s| s.summary.as_ref().map(|sum| (s.val_pct, sum))) {
        let (val_pct, sum) = s;
        println!(
            "  val_pct {val_pct}: h_ind={} h_ens={} gap={:.5} ± {:.5}",
            sum.h_ind, sum.h_ens, sum.gap, sum.gap_sem
        );
    }
    Ok(outcome.complete())
}

fn gen_data(config: Option<&Path>, out: &Path, overrides: &[String]) -> anyhow::Result<()> {
    let (task, data_seed) = resolve_task(config, overrides)?;
    let data = make_dataset(&task, &mut derive_rng(data_seed, 0, Purpose::Data))?;
    write_csv(&data, out)?;
    println!("wrote {} rows, {} features, {} classes to {}", data.len(), data.features(), data.n_classes, out.display());
    Ok(())
}

fn report(metrics: &Path, out: &Path) -> anyhow::Result<()> {
    let file = File::open(metrics).with_context(|| format!("opening {}", metrics.display()))?;
    let records = read_records_csv(file)?;
    if records.is_empty() {
        bail!("{} has no metric rows", metrics.display());
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let files = write_report(&records, out)?;
    println!("wrote {} and {} plot file(s)", files.aggregate.display(), files.plots.len());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { config, out, overrides } => gen_data(config.as_deref(), &out, &overrides).map(|()| true),
        Command::SweepWd(a) => run(ExperimentKind::WdSweep, a),
        Command::TempScale(a) => run(ExperimentKind::TempScale, a),
        Command::EarlyStop(a) => run(ExperimentKind::EarlyStop, a),
        Command::BatchEnsemble(a) => run(ExperimentKind::BatchEnsemble, a),
        Command::StopThenScale(a) => run(ExperimentKind::StopThenScale, a),
        Command::Report { metrics, out } => report(&metrics, &out).map(|()| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
