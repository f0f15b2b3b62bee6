use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sepcal::diagnostics::{symmetric_sweep, write_kld_csv};
use sepcal::harness::{read_metrics_csv, run_experiment, summarize, write_outputs, write_summary_csv, RunConfig, DEFAULT_CONFIG_TOML};
use sepcal::likelihood::LikelihoodVariant;
use sepcal::scenario::Scenario;
use sepcal::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_IO: u8 = 4;

/// Sensor network self-calibration from multi-object tracks.
#[derive(Parser)]
#[command(name = "sepcal", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scenario and save it as JSON.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// Scenario file to write.
        #[arg(long, default_value = "scenario.json")]
        out: PathBuf,
    },
    /// Run Monte Carlo calibration and write metrics CSVs.
    Calibrate {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of runs (seeds seed, seed + 1, ...).
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long, value_parser = ["quad", "dual"])]
        variant: Option<String>,
        /// Window length t.
        #[arg(short = 't', long)]
        window_len: Option<usize>,
        /// First filtered step.
        #[arg(long)]
        window_start: Option<usize>,
        /// Particles per belief (L).
        #[arg(short = 'L', long)]
        particles: Option<usize>,
        /// LBP iterations (S).
        #[arg(short = 'S', long)]
        iterations: Option<usize>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Also dump every particle cloud.
        #[arg(long)]
        write_beliefs: bool,
        /// Print the commented default configuration and exit.
        #[arg(long)]
        print_default_config: bool,
    },
    /// Check divergence bounds on random two-sensor instances.
    Diagnose {
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value = "kld_report.csv")]
        out: PathBuf,
    },
    /// Aggregate metrics tables into per-iteration quartiles.
    Summarize {
        /// `metrics.csv` files produced by `calibrate`.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "summary.csv")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct CommonArgs {
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    cols: Option<usize>,
}

impl CommonArgs {
    fn load(&self) -> sepcal::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.first_seed = s;
            cfg.seeds.clear();
        }
        if let Some(r) = self.rows {
            cfg.scenario.rows = r;
        }
        if let Some(c) = self.cols {
            cfg.scenario.cols = c;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> sepcal::Result<()> {
    match cli.command {
        Command::Simulate { common, out } => {
            let cfg = common.load()?;
            let scenario = Scenario::generate(&cfg.scenario_for(cfg.seed_list()[0]))?;
            scenario.save(&out)?;
            println!(
                "wrote {} ({} sensors, {} objects, {} steps)",
                out.display(),
                scenario.num_sensors(),
                scenario.num_objects(),
                scenario.num_steps()
            );
        }
        Command::Calibrate { common, runs, variant, window_len, window_start, particles, iterations, output_dir, write_beliefs, print_default_config } => {
            if print_default_config {
                print!("{DEFAULT_CONFIG_TOML}");
                return Ok(());
            }
            let mut cfg = common.load()?;
            if let Some(r) = runs {
                cfg.runs = r;
                cfg.seeds.clear();
            }
            if let Some(v) = variant {
                cfg.variant = v.parse::<LikelihoodVariant>()?;
            }
            cfg.window_len = window_len.unwrap_or(cfg.window_len);
            cfg.window_start = window_start.unwrap_or(cfg.window_start);
            cfg.particles = particles.unwrap_or(cfg.particles);
            cfg.iterations = iterations.unwrap_or(cfg.iterations);
            if let Some(d) = output_dir {
                cfg.output_dir = d;
            }
            cfg.write_beliefs |= write_beliefs;
            cfg.validate()?;
            let result = run_experiment(&cfg)?;
            write_outputs(&cfg.output_dir, &result, cfg.write_beliefs)?;
            let summary = summarize(&result.metrics)?;
            let last = summary.last().expect("at least one iteration");
            let n = result.timing.len() as f64;
            let quad = result.timing.iter().map(|t| t.quad_ms_per_eval).sum::<f64>() / n;
            let dual = result.timing.iter().map(|t| t.dual_ms_per_eval).sum::<f64>() / n;
            println!(
                "{} runs, iteration {}: median miss {:.3} m (q1 {:.3}, q3 {:.3}), mean MSE {:.3} m^2",
                last.runs, last.iteration, last.miss_median, last.miss_q1, last.miss_q3, last.mse_mean
            );
            println!("edge evaluation: quad {quad:.5} ms, dual {dual:.5} ms per particle pair");
            println!("outputs in {}", cfg.output_dir.display());
        }
        Command::Diagnose { first_seed, count, out } => {
            let rows = symmetric_sweep(first_seed, count)?;
            write_kld_csv(&out, &rows)?;
            let count_of = |f: fn(&sepcal::diagnostics::KldRow) -> bool| rows.iter().filter(|r| f(r)).count();
            println!("D(p||q) <= MI bound:           {}/{}", count_of(|r| r.pq_within_mi_bound), rows.len());
            println!("MI bound <= entropy bound:     {}/{}", count_of(|r| r.mi_within_entropy_bound), rows.len());
            println!("D(p||q) < D(p||u):             {}/{}", count_of(|r| r.quad_below_dual), rows.len());
            println!("quad entropy bound <= dual:    {}/{}", count_of(|r| r.quad_bound_below_dual_bound), rows.len());
            println!("wrote {}", out.display());
        }
        Command::Summarize { inputs, out } => {
            let mut rows = Vec::new();
            for p in &inputs {
                rows.extend(read_metrics_csv(p)?);
            }
            let summary = summarize(&rows)?;
            write_summary_csv(&out, &summary)?;
            println!("iteration  runs  median_miss_m  q1_m  q3_m  log10_mean_mse");
            for s in &summary {
                println!("{:>9}  {:>4}  {:>13.3}  {:.3}  {:.3}  {:.3}", s.iteration, s.runs, s.miss_median, s.miss_q1, s.miss_q3, s.log10_mse_mean);
            }
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        e if e.is_config() => EXIT_CONFIG,
        Error::Io(_) | Error::Csv(_) | Error::Json(_) => EXIT_IO,
        _ => EXIT_NUMERICAL,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
