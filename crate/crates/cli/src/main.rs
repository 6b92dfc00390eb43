use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use deepo::experiment::{
    cmd_compare, cmd_gen_data, cmd_run, cmd_verify_file, defaults_toml, Algorithm, ExperimentConfig, InitPolicy,
    SystemSource,
};
use deepo::Error;

#[derive(Parser)]
#[command(name = "deepo", version, about = "Data-enabled policy optimization for the LQR problem")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the default configuration as TOML.
    Defaults,
    /// Draw a Gaussian data batch and write it to a file.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output file [default: <output_dir>/data.txt].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one algorithm on a data file and write its trace and report.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum, default_value = "deepo")]
        algorithm: AlgorithmArg,
        /// Data file [default: <output_dir>/data.txt].
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Align the relative errors of finished runs and fit their rates.
    Compare {
        /// Trace files written by `run`.
        traces: Vec<PathBuf>,
        /// Write the table here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the certificate suite on a data file.
    Verify {
        #[command(flatten)]
        config: ConfigArgs,
        /// Data file [default: <output_dir>/data.txt].
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgorithmArg {
    Deepo,
    DeepoCe,
    DeepoRob,
}

impl From<AlgorithmArg> for Algorithm {
    fn from(a: AlgorithmArg) -> Self {
        match a {
            AlgorithmArg::Deepo => Algorithm::Deepo,
            AlgorithmArg::DeepoCe => Algorithm::DeepoCe,
            AlgorithmArg::DeepoRob => Algorithm::DeepoRob,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SystemArg {
    PaperExample,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Auto,
    ZeroGain,
    GivenGain,
    Perturbed,
}

/// Overrides applied on top of the config file (or the defaults).
#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed of the data batch and every derived random draw.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of samples T in the data batch.
    #[arg(long)]
    data_length: Option<usize>,
    /// Fixed stepsize.
    #[arg(long)]
    eta: Option<f64>,
    /// Iteration cap of a run.
    #[arg(long)]
    max_iter: Option<usize>,
    /// Stop once the projected gradient norm is below this.
    #[arg(long)]
    grad_tol: Option<f64>,
    /// Certainty-equivalence weight of deepo-ce.
    #[arg(long)]
    lambda_ce: Option<f64>,
    /// Robustness weight of deepo-rob.
    #[arg(long)]
    gamma_rob: Option<f64>,
    /// Iterates need a closed-loop spectral radius below 1 - margin.
    #[arg(long)]
    stability_margin: Option<f64>,
    /// Directory for data, traces and reports.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Built-in benchmark or a random system.
    #[arg(long, value_enum)]
    system: Option<SystemArg>,
    /// State dimension of a random system.
    #[arg(long, default_value_t = 4)]
    n: usize,
    /// Input dimension of a random system.
    #[arg(long, default_value_t = 2)]
    m: usize,
    /// Open-loop spectral radius of a random system.
    #[arg(long, default_value_t = 0.8)]
    target_rho: f64,
    /// Seed of a random system.
    #[arg(long, default_value_t = 0)]
    system_seed: u64,
    /// Initial policy rule.
    #[arg(long, value_enum)]
    init: Option<InitArg>,
    /// Entry variance of the perturbed initial policy.
    #[arg(long, default_value_t = 0.01)]
    init_variance: f64,
    /// Initial gain for `--init given-gain`, rows separated by ';', entries by ','.
    #[arg(long)]
    init_gain: Option<String>,
}

fn parse_gain(text: &str) -> Result<Vec<Vec<f64>>, Error> {
    text.split(';')
        .map(|row| {
            row.split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::InvalidConfig(format!("bad gain entry '{v}': {e}")))
                })
                .collect()
        })
        .collect()
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.data_length {
            c.data_length = v;
        }
        if let Some(v) = self.eta {
            c.eta = v;
        }
        if let Some(v) = self.max_iter {
            c.max_iter = v;
        }
        if let Some(v) = self.grad_tol {
            c.grad_tol = v;
        }
        if let Some(v) = self.lambda_ce {
            c.lambda_ce = v;
        }
        if let Some(v) = self.gamma_rob {
            c.gamma_rob = v;
        }
        if let Some(v) = self.stability_margin {
            c.stability_margin = v;
        }
        if let Some(v) = &self.output_dir {
            c.output_dir = v.clone();
        }
        match self.system {
            Some(SystemArg::PaperExample) => c.system = SystemSource::PaperExample,
            Some(SystemArg::Random) => {
                c.system = SystemSource::Random {
                    n: self.n,
                    m: self.m,
                    target_rho: self.target_rho,
                    seed: self.system_seed,
                }
            }
            None => {}
        }
        match self.init {
            Some(InitArg::Auto) => c.init = InitPolicy::Auto,
            Some(InitArg::ZeroGain) => c.init = InitPolicy::ZeroGain,
            Some(InitArg::Perturbed) => {
                c.init = InitPolicy::Perturbed {
                    variance: self.init_variance,
                }
            }
            Some(InitArg::GivenGain) => {
                let text = self
                    .init_gain
                    .as_deref()
                    .ok_or_else(|| Error::InvalidConfig("--init given-gain needs --init-gain".into()))?;
                c.init = InitPolicy::GivenGain { gain: parse_gain(text)? };
            }
            None => {}
        }
        c.validate()?;
        Ok(c)
    }
}

/// 2 for problems with the inputs, 1 for numerical failures.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidConfig(_)
        | Error::Parse { .. }
        | Error::Io(_)
        | Error::MissingTrace(_)
        | Error::DimensionMismatch(_)
        | Error::InsufficientData { .. }
        | Error::RankDeficient { .. }
        | Error::InvalidSystem(_)
        | Error::InfeasibleStart(_) => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Defaults => {
            print!("{}", defaults_toml());
        }
        Command::GenData { config, out } => {
            let cfg = config.resolve()?;
            let path = out.unwrap_or_else(|| cfg.data_path());
            let r = cmd_gen_data(&cfg, &path)?;
            println!("wrote {}", r.path.display());
            println!("seed {}", r.seed);
            println!("T {}", r.data_length);
            println!("rank(D_-) {}", r.rank);
            println!("sigma_min(D_-) {:.6e} (tolerance {:.3e})", r.sigma_min_d, r.rank_tolerance);
        }
        Command::Run { config, algorithm, data } => {
            let cfg = config.resolve()?;
            let path = data.unwrap_or_else(|| cfg.data_path());
            let algorithm = Algorithm::from(algorithm);
            let r = cmd_run(&cfg, algorithm, &path)?;
            println!("algorithm {algorithm}");
            println!("status {}", r.summary.status);
            println!("iterations {}", r.iterations);
            println!("final_rel_err {:.6e}", r.final_rel_err);
            println!("gain_error {:.6e}", r.gain_error);
            println!("j_star {:.12e}", r.j_star);
            println!("j_ref {:.12e}", r.j_ref);
            println!("monotone {}", r.summary.monotone);
            if let Some(f) = r.summary.tail_fit {
                println!("tail_slope {:.6e} (R^2 {:.6})", f.slope, f.r_squared);
            }
            println!("wall_time_s {:.4}", r.wall_time_s);
            println!("trace {}", r.trace_path.display());
            println!("report {}", cfg.report_path(algorithm).display());
        }
        Command::Compare { traces, out } => {
            let r = cmd_compare(&traces)?;
            match out {
                Some(path) => {
                    std::fs::write(&path, &r.table)?;
                    println!("wrote {}", path.display());
                    print!("{}", r.rate_text());
                }
                None => {
                    print!("{}", r.table);
                    eprint!("{}", r.rate_text());
                }
            }
        }
        Command::Verify { config, data, json } => {
            let cfg = config.resolve()?;
            let path = data.unwrap_or_else(|| cfg.data_path());
            let r = cmd_verify_file(&cfg, &path)?;
            print!("{}", r.to_text());
            if let Some(p) = json {
                std::fs::write(p, r.to_json()?)?;
            }
            if !r.passed() {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
