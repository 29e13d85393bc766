use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adaptive_duffing::ann::{forward_search, train, Grids, Hyper, TrainedEstimator};
use adaptive_duffing::continuation::{default_window, trace_branch, StepControls};
use adaptive_duffing::features::read_records;
use adaptive_duffing::mi::{Binning, MiConfig, MiRanking};
use adaptive_duffing::pipeline::{generate_dataset, rank_capped, run_scenario, ExperimentOptions, Scenario};
use adaptive_duffing::simulation::{
    fit_frequencies, graybox_fit, observe, omega_grid, sweep, Direction, GrayBoxConfig, SweepConfig, Target,
};
use adaptive_duffing::{Error, SystemParams};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "adaptive-duffing", version, about = "Coupled Duffing response features and parameter estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Copy)]
struct ParamArgs {
    #[arg(long, default_value_t = 1.0)]
    omega0: f64,
    #[arg(long, default_value_t = 1.0)]
    d: f64,
    #[arg(long, default_value_t = 40.0)]
    beta: f64,
    #[arg(long, default_value_t = 1.0)]
    delta: f64,
    #[arg(long, default_value_t = 1.0)]
    f: f64,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
}

impl ParamArgs {
    fn params(&self) -> Result<SystemParams, Error> {
        let p = SystemParams {
            omega0: self.omega0,
            d: self.d,
            beta: self.beta,
            delta: self.delta,
            f: self.f,
            epsilon: self.epsilon,
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    Delta,
    D,
}

impl From<TargetArg> for Target {
    fn from(t: TargetArg) -> Self {
        match t {
            TargetArg::Delta => Target::Delta,
            TargetArg::D => Target::D,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    Up,
    Down,
}

#[derive(Clone, Copy, ValueEnum)]
enum BinningArg {
    EqualWidth,
    EqualMass,
}

#[derive(Subcommand)]
enum Command {
    /// Trace the slow-flow frequency response by continuation.
    Respond {
        #[command(flatten)]
        params: ParamArgs,
        #[arg(long, allow_hyphen_values = true)]
        sigma1_min: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        sigma1_max: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        folds: Option<PathBuf>,
    },
    /// Stepped-sine sweep of the full equations.
    Sweep {
        #[command(flatten)]
        params: ParamArgs,
        #[arg(long)]
        omega_min: f64,
        #[arg(long)]
        omega_max: f64,
        #[arg(long, default_value_t = 101)]
        steps: usize,
        #[arg(long, value_enum, default_value = "up")]
        direction: DirectionArg,
        #[arg(long, default_value_t = 64)]
        steps_per_period: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate train and test feature tables for every scenario cell.
    Dataset {
        /// Built-in name (table1, table2, ideal) or a scenario JSON file.
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank the twenty features by mutual information with the target.
    Rank {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        target: TargetArg,
        #[arg(long, default_value_t = 16)]
        bins: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, value_enum, default_value = "equal-width")]
        binning: BinningArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Forward search over prefixes of a ranking.
    Search {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        rank: PathBuf,
        #[arg(long, value_enum)]
        target: TargetArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Restrict the hidden-width grid, e.g. `15` or `5,10`.
        #[arg(long, value_delimiter = ',')]
        hidden: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one network on a fixed feature set.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        features: Vec<String>,
        #[arg(long, value_enum, default_value = "delta")]
        target: TargetArg,
        #[arg(long, default_value_t = 15)]
        hidden: usize,
        #[arg(long, default_value_t = 0.0)]
        lambda: f64,
        #[arg(long, default_value_t = 1e-2)]
        learning_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict the target for every record of a feature table.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit one parameter to simulated time series of the given system.
    Graybox {
        /// JSON object with omega0, d, beta, delta, f, epsilon.
        #[arg(long)]
        params: PathBuf,
        #[arg(long, value_enum)]
        target: TargetArg,
        #[arg(long, default_value_t = 1.5)]
        init: f64,
        #[arg(long, default_value_t = 1.0)]
        lower: f64,
        #[arg(long, default_value_t = 2.0)]
        upper: f64,
        #[arg(long, default_value_t = 10)]
        freqs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a table experiment and write its report directory.
    Experiment {
        /// Built-in name (table1, table2, ideal) or a scenario JSON file.
        #[arg(long)]
        name: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        no_graybox: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

fn create(path: &Path) -> Result<BufWriter<File>, Error> {
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<File, Error> {
    File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn scenario(spec: &str, seed: Option<u64>) -> Result<Scenario, Error> {
    let mut s = Scenario::load(spec)?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    Ok(s)
}

fn run(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Respond {
            params,
            sigma1_min,
            sigma1_max,
            out,
            folds,
        } => {
            let p = params.params()?;
            let (lo, hi) = default_window(&p);
            let branch = trace_branch(&p, sigma1_min.unwrap_or(lo), sigma1_max.unwrap_or(hi), &StepControls::default())?;
            branch.write_csv(create(&out)?)?;
            if let Some(path) = folds {
                branch.write_folds_csv(create(&path)?)?;
            }
            log::info!("{} points, {} folds", branch.points.len(), branch.folds.len());
        }
        Command::Sweep {
            params,
            omega_min,
            omega_max,
            steps,
            direction,
            steps_per_period,
            out,
        } => {
            let p = params.params()?;
            let dir = match direction {
                DirectionArg::Up => Direction::Up,
                DirectionArg::Down => Direction::Down,
            };
            let cfg = SweepConfig {
                steps_per_period,
                ..SweepConfig::default()
            };
            sweep(&p, &omega_grid(omega_min, omega_max, steps, dir), dir, &cfg)?.write_csv(create(&out)?)?;
        }
        Command::Dataset { scenario: spec, seed, out } => generate_dataset(&scenario(&spec, seed)?, &out)?,
        Command::Rank {
            data,
            target,
            bins,
            classes,
            binning,
            out,
        } => {
            let records = read_records(open(&data)?)?;
            let cfg = MiConfig {
                bins_x: bins,
                classes,
                binning: match binning {
                    BinningArg::EqualWidth => Binning::EqualWidth,
                    BinningArg::EqualMass => Binning::EqualMass,
                },
            };
            rank_capped(&records, target.into(), &cfg)?.write_csv(create(&out)?)?;
        }
        Command::Search {
            data,
            rank,
            target,
            seed,
            hidden,
            out,
        } => {
            let records = read_records(open(&data)?)?;
            let ranking = MiRanking::read_csv(open(&rank)?)?;
            let mut grids = Grids::default();
            if let Some(h) = hidden {
                grids.hidden = h;
            }
            let report = forward_search(&records, &ranking, target.into(), &grids, &Hyper::default(), seed)?;
            report.write_csv(create(&out)?)?;
            log::info!("selected k = {}", report.selected_k);
        }
        Command::Train {
            data,
            features,
            target,
            hidden,
            lambda,
            learning_rate,
            seed,
            out,
        } => {
            let records = read_records(open(&data)?)?;
            let hyper = Hyper {
                hidden,
                lambda,
                learning_rate,
                ..Hyper::default()
            };
            let model = train(&records, &features, target.into(), &hyper, seed)?;
            log::info!("{:?}", model.metrics);
            model.write_json(create(&out)?)?;
        }
        Command::Predict { model, data, out } => {
            let model = TrainedEstimator::read_json(open(&model)?)?;
            let records = read_records(open(&data)?)?;
            let mut w = csv::Writer::from_writer(create(&out)?);
            w.write_record(["record_id", "truth", "predicted"])?;
            for r in &records {
                let pred = model.predict(&r.features)?;
                w.write_record([r.record_id.to_string(), model.target.get(&r.params).to_string(), pred.to_string()])?;
            }
            w.flush()?;
        }
        Command::Graybox {
            params,
            target,
            init,
            lower,
            upper,
            freqs,
            out,
        } => {
            let p: SystemParams = serde_json::from_reader(open(&params)?)?;
            p.validate()?;
            let target: Target = target.into();
            let cfg = GrayBoxConfig {
                init,
                bounds: (lower, upper),
                ..GrayBoxConfig::for_target(target)
            };
            let omegas = fit_frequencies(&target.set(&p, init), freqs);
            let est = graybox_fit(&observe(&p, &omegas, &cfg)?, target, &cfg)?;
            est.write_csv(create(&out)?)?;
            log::info!("estimate {} (true {})", est.estimate, target.get(&p));
        }
        Command::Experiment {
            name,
            seed,
            no_graybox,
            out,
        } => {
            let opts = ExperimentOptions {
                run_graybox: !no_graybox,
                ..ExperimentOptions::default()
            };
            let report = run_scenario(&scenario(&name, seed)?, &opts)?;
            report.write_dir(&out)?;
            if !report.complete() {
                log::warn!("report is incomplete; see the error column of report.csv");
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        2
    } else if matches!(e, Error::InvalidParams(_) | Error::StepTooCoarse { .. }) {
        1
    } else {
        3
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
