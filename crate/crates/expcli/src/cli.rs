use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use fedsim_core::data::client_stats;
use fedsim_core::runner::Backend;

use crate::bench::{bench_cohort_scaling, write_bench};
use crate::config::{DatasetSpec, ExperimentConfig};
use crate::error::{ExpError, Result};
use crate::experiment::{load_dataset, report_csv, write_outputs, Experiment};
use crate::io::{load_params, save_federated};
use crate::synthetic::{generate_synthetic, SyntheticFedSpec};

#[derive(Debug, Parser)]
#[command(
    name = "fedsim",
    version,
    about = "Federated learning simulation experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic federated dataset file from a generator spec.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Output dataset file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run an experiment and write metrics and final parameters.
    Run(RunArgs),
    /// Evaluate saved parameters on the experiment's eval data.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        params: PathBuf,
    },
    /// Time rounds across cohort sizes and backends.
    Bench {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated cohort sizes; overrides `bench.cohort_sizes`.
        #[arg(long, value_delimiter = ',')]
        cohorts: Option<Vec<usize>>,
        /// Comma-separated backends; overrides `bench.backends`.
        #[arg(long, value_delimiter = ',')]
        backends: Option<Vec<Backend>>,
    },
    /// Print the client-size histogram (`num_examples,num_clients`).
    Inspect {
        /// Dataset file.
        #[arg(long, conflicts_with = "config", required_unless_present = "config")]
        data: Option<PathBuf>,
        /// Experiment config whose training dataset to inspect.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// `sequential` or `parallel:N`.
    #[arg(long)]
    pub backend: Option<Backend>,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn absolute(p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir()
            .map(|d| d.join(p))
            .unwrap_or_else(|_| p.to_path_buf())
    }
}

impl RunArgs {
    pub fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(b) = self.backend {
            cfg.backend = b;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = absolute(o);
        }
        cfg.pin_data_seeds();
        cfg.validate()?;
        Ok(cfg)
    }
}

fn generate(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let text = fs::read_to_string(config)
        .map_err(|e| ExpError::config("<file>", format!("{}: {e}", config.display())))?;
    let de = toml::Deserializer::parse(&text)
        .map_err(|e| ExpError::config("<document>", e.to_string()))?;
    let mut spec: SyntheticFedSpec = serde_path_to_error::deserialize(de).map_err(|e| {
        ExpError::config(
            e.path().to_string(),
            e.into_inner().message().trim().to_string(),
        )
    })?;
    if let Some(s) = seed {
        spec.seed = Some(s);
    }
    let seed = spec.seed.ok_or_else(|| {
        ExpError::config("seed", "a seed is required (in the spec or via --seed)")
    })?;
    let data = generate_synthetic(&spec, seed)?;
    let meta = json!({ "generator": spec, "w_star": data.w_star });
    save_federated(out, &data.data, &meta)?;
    println!(
        "wrote {} clients, {} examples to {}",
        data.data.num_clients(),
        data.data.total_examples(),
        out.display()
    );
    Ok(())
}

fn run(args: &RunArgs) -> Result<()> {
    let exp = Experiment::build(args.load()?)?;
    let outcome = exp.run()?;
    let dir = exp.config.output_dir.clone();
    write_outputs(&dir, &exp, &outcome)?;
    let last = outcome.records.last().and_then(|r| r.train_loss);
    print!("{} rounds", outcome.state.round_index);
    if let Some(l) = last {
        print!(", final train loss {l}");
    }
    if let Some(d) = exp.w_star_distance(&outcome.state.server_params) {
        print!(", |w - w*| {d}");
    }
    println!("; outputs in {}", dir.display());
    Ok(())
}

fn eval(args: &RunArgs, params: &Path) -> Result<()> {
    let exp = Experiment::build(args.load()?)?;
    let p = load_params(params)?;
    let report = exp.evaluate(&p)?;
    let dir = &exp.config.output_dir;
    fs::create_dir_all(dir).map_err(|e| ExpError::io(dir, e))?;
    let path = dir.join("eval.csv");
    fs::write(&path, report_csv(&report)?).map_err(|e| ExpError::io(&path, e))?;
    for (k, v) in &report.overall {
        println!("{k} = {v}");
    }
    Ok(())
}

fn bench(
    args: &RunArgs,
    cohorts: Option<Vec<usize>>,
    backends: Option<Vec<Backend>>,
) -> Result<()> {
    let cfg = args.load()?;
    let spec = cfg.bench.clone();
    let cohorts = cohorts
        .or_else(|| spec.as_ref().map(|b| b.cohort_sizes.clone()))
        .ok_or_else(|| ExpError::config("bench.cohort_sizes", "no cohort sizes given"))?;
    let backends = backends
        .or_else(|| spec.as_ref().map(|b| b.backends.clone()))
        .unwrap_or_else(|| vec![Backend::Sequential, Backend::Parallel(8)]);
    let warmup = spec.as_ref().map_or(2, |b| b.warmup_rounds);
    let measured = spec.as_ref().map_or(10, |b| b.measured_rounds);
    let exp = Experiment::build(cfg)?;
    let rows = bench_cohort_scaling(&exp, &cohorts, &backends, warmup, measured)?;
    write_bench(&exp.config.output_dir, &rows)?;
    for r in &rows {
        println!(
            "cohort {:>4} {:<12} mean {:.6}s std {:.6}s",
            r.cohort_size, r.backend, r.mean_s, r.std_s
        );
    }
    Ok(())
}

fn inspect(data: Option<&Path>, config: Option<&Path>) -> Result<()> {
    let fd = match (data, config) {
        (Some(d), _) => {
            load_dataset(
                &DatasetSpec::File {
                    path: d.to_path_buf(),
                },
                0,
            )?
            .data
        }
        (None, Some(c)) => {
            let mut cfg = ExperimentConfig::load(c)?;
            cfg.pin_data_seeds();
            load_dataset(&cfg.dataset, cfg.seed)?.data
        }
        (None, None) => return Err(ExpError::config("<args>", "need --data or --config")),
    };
    let mut out = std::io::stdout().lock();
    let mut w = csv::Writer::from_writer(&mut out);
    w.write_record(["num_examples", "num_clients"])?;
    for (n, c) in client_stats(&fd) {
        w.write_record([n.to_string(), c.to_string()])?;
    }
    w.flush().map_err(|e| ExpError::io("<stdout>", e))?;
    Ok(())
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, out, seed } => generate(&config, &out, seed),
        Command::Run(args) => run(&args),
        Command::Eval { run: args, params } => eval(&args, &params),
        Command::Bench {
            run: args,
            cohorts,
            backends,
        } => bench(&args, cohorts, backends),
        Command::Inspect { data, config } => inspect(data.as_deref(), config.as_deref()),
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            e.exit_code()
        }
    }
}
