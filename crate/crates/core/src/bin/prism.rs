use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use prism_core::datagen::NoiseModel;
use prism_core::harness::train::build_datasets;
use prism_core::harness::{
    bench_avgsim, bench_setup, run_kappa_experiment, sweep, write_sweep_summary, ExperimentConfig, Trainer,
};
use prism_core::vmf::write_kappa_mse_csv;
use prism_core::Result;

#[derive(Parser)]
#[command(name = "prism", version, about = "Online noisy-label filtering for metric learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "prism-out")]
    out: PathBuf,
    /// `key=value` override, applied after the config file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train with online filtering and write metrics.
    Train(Common),
    /// Time naive and center-based average similarity on a full bank.
    BenchAvgsim(Common),
    /// Concentration-estimation error versus sample count.
    KappaMse(Common),
    /// One training run per value of a config key.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Config key to vary.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Write the synthetic training set (with label noise) to disk.
    GenData(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    for s in &common.set {
        cfg.apply_override(s)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    cfg.write_effective(BufWriter::new(File::create(out.join("effective_config"))?))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let cfg = load(&common)?;
            prepare_out(&cfg, &common.out)?;
            let mut trainer = Trainer::new(cfg)?;
            trainer.run()?;
            trainer.write_outputs(&common.out)?;
            if let Some(m) = trainer.record.final_metrics() {
                println!("iter {} p_at_1 {:.4} map_at_r {:.4}", m.iter, m.p_at_1, m.map_at_r);
            }
            if let Some(m) = trainer.record.best_metrics() {
                println!("best iter {} p_at_1 {:.4} map_at_r {:.4}", m.iter, m.p_at_1, m.map_at_r);
            }
        }
        Command::BenchAvgsim(common) => {
            let cfg = load(&common)?;
            prepare_out(&cfg, &common.out)?;
            let report = bench_avgsim(bench_setup(&cfg))?;
            report.write_csv(BufWriter::new(File::create(common.out.join("timing.csv"))?))?;
            println!(
                "naive {:.3}s centers {:.3}s ratio {:.1}",
                report.naive_secs, report.centers_secs, report.ratio
            );
        }
        Command::KappaMse(common) => {
            let cfg = load(&common)?;
            prepare_out(&cfg, &common.out)?;
            let rows = run_kappa_experiment(&cfg)?;
            write_kappa_mse_csv(&rows, BufWriter::new(File::create(common.out.join("kappa_mse.csv"))?))?;
            for r in &rows {
                println!("n {:>6} mse {:.3}", r.n, r.mse);
            }
        }
        Command::Sweep { common, param, values } => {
            let cfg = load(&common)?;
            prepare_out(&cfg, &common.out)?;
            let points = sweep(&cfg, &param, &values)?;
            for p in &points {
                p.record.write_outputs(&common.out.join(format!("{param}={}", p.value)))?;
            }
            write_sweep_summary(&param, &points, BufWriter::new(File::create(common.out.join("sweep.csv"))?))?;
            for p in &points {
                let p1 = p.record.final_metrics().map_or(f64::NAN, |m| m.p_at_1);
                println!("{param}={} seed {} p_at_1 {:.4}", p.value, p.seed, p1);
            }
        }
        Command::GenData(common) => {
            let cfg = load(&common)?;
            prepare_out(&cfg, &common.out)?;
            let d = build_datasets(&cfg)?;
            if cfg.noise_model != NoiseModel::None {
                println!(
                    "noise requested {:.4} achieved {:.4}{}",
                    d.noise.requested,
                    d.noise.achieved,
                    if d.noise.reached { "" } else { " (not reached)" }
                );
            }
            let data = d.train;
            data.write_manifest(BufWriter::new(File::create(common.out.join("manifest.csv"))?))?;
            data.write_inputs(BufWriter::new(File::create(common.out.join("inputs.csv"))?))?;
            println!("{} samples written to {}", data.len(), common.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
