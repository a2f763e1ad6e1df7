use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use mixgan::config::{parse_overrides, ExperimentConfig, Preset};
use mixgan::runner::{
    aggregate_reports, eval_run, load_checkpoint, load_run, projection, run_experiment, run_suite, write_projection,
    Factor, RunOptions,
};
use mixgan::{oracle, Error};

const EXIT_CONFIG: u8 = 2;
const EXIT_ORACLE: u8 = 3;

#[derive(Parser)]
#[command(name = "mixgan", version, about = "Mixtures of Wasserstein GANs on synthetic data")]
struct Cli {
    /// Output root for run directories.
    #[arg(long, global = true, env = "MIXGAN_OUT", default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Base preset.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Config file applied on top of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Skip training the Judge and the independent critic.
    #[arg(long)]
    skip_aux: bool,
    /// Skip the projection plot.
    #[arg(long)]
    skip_projection: bool,
    /// Dotted overrides such as `--train.lr_g=1e-4` or `--mixture.generators 3`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one configuration.
    Train(ConfigArgs),
    /// Run one configuration per value of a factor and tabulate final metrics.
    Suite {
        /// Factor grid, e.g. `mixture=1x1,3x3`, `depth=3,5`, `width=64,128`,
        /// `training_set=256,infinite`, `target_depth=2,3`.
        #[arg(long)]
        factor: String,
        /// Root seeds; every factor value runs once per seed.
        #[arg(long, value_delimiter = ',', default_value = "1")]
        seeds: Vec<u64>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Recompute the final report of a run from its checkpoint.
    Eval { run_dir: PathBuf },
    /// Write the plane projection of a finished run.
    Project {
        run_dir: PathBuf,
        /// Real and generated points per plot.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Run the square-root, total-variation and gradient oracles.
    Oracle {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Collect every run's final report under a root into one CSV.
    Report {
        /// Root holding run directories; defaults to the output root.
        root: Option<PathBuf>,
        /// Also write the table to this file.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn resolve(args: &ConfigArgs) -> Result<ExperimentConfig, Error> {
    let preset: Preset = args.preset.parse()?;
    let mut cfg = ExperimentConfig::preset(preset);
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg = ExperimentConfig::parse_with_base(&text, cfg)?;
    }
    cfg.apply(&parse_overrides(&args.overrides)?)?;
    cfg.validate()?;
    Ok(cfg)
}

fn options(args: &ConfigArgs) -> RunOptions {
    RunOptions { skip_aux: args.skip_aux, skip_projection: args.skip_projection }
}

fn train(out: &Path, args: &ConfigArgs) -> Result<()> {
    let cfg = resolve(args)?;
    let s = run_experiment(&cfg, out, options(args))?;
    println!("run: {}", s.run_dir.display());
    println!("{}", mixgan::metrics::MetricReport::CSV_HEADER);
    println!("{}", s.report.csv_row());
    if let Some(m) = &s.modes {
        print!("{}", m.to_csv());
    }
    Ok(())
}

fn suite(out: &Path, factor: &str, seeds: &[u64], args: &ConfigArgs) -> Result<()> {
    let base = resolve(args)?;
    let f = Factor::parse(factor)?;
    let mut configs = Vec::new();
    for (label, cfg) in f.expand(&base) {
        for &seed in seeds {
            let mut c = cfg.clone();
            c.seed = seed;
            configs.push((label.clone(), c));
        }
    }
    let s = run_suite(f.name(), configs, out, options(args))?;
    print!("{}", fs::read_to_string(&s.table_path)?);
    Ok(())
}

fn project(run_dir: &Path, samples: Option<usize>) -> Result<()> {
    let (cfg, model, data) = load_run(run_dir)?;
    let (iteration, _) = load_checkpoint(&run_dir.join("checkpoints").join("final"))?;
    let plot = projection(&model, &data, samples.unwrap_or(cfg.eval.projection_samples), cfg.seed)?;
    let (csv, svg) = write_projection(run_dir, iteration, &plot)?;
    println!("{}\n{}", csv.display(), svg.display());
    Ok(())
}

fn run_oracles(seed: u64) -> Result<bool> {
    let mut ok = true;
    for r in oracle::run_all(seed)? {
        println!(
            "{} {}: checked {}, violations {}, max error {:e} (tolerance {:e})",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.checked,
            r.violations,
            r.max_error,
            r.tolerance
        );
        ok &= r.passed();
    }
    Ok(ok)
}

fn report(root: &Path, output: Option<&Path>) -> Result<()> {
    let table = aggregate_reports(root).with_context(|| format!("reading runs under {}", root.display()))?;
    if let Some(p) = output {
        fs::write(p, &table)?;
    }
    print!("{table}");
    Ok(())
}

fn is_config_error(e: &anyhow::Error) -> bool {
    matches!(
        e.downcast_ref::<Error>(),
        Some(Error::Config(_) | Error::InvalidSpec(_) | Error::InvalidArgument(_))
    )
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => train(&cli.out, args),
        Command::Suite { factor, seeds, config } => suite(&cli.out, factor, seeds, config),
        Command::Eval { run_dir } => eval_run(run_dir).map_err(Into::into).map(|r| {
            println!("{}", mixgan::metrics::MetricReport::CSV_HEADER);
            println!("{}", r.csv_row());
        }),
        Command::Project { run_dir, samples } => project(run_dir, *samples),
        Command::Oracle { seed } => match run_oracles(*seed) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(EXIT_ORACLE),
            Err(e) => Err(e),
        },
        Command::Report { root, output } => report(root.as_ref().unwrap_or(&cli.out), output.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_config_error(&e) {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
