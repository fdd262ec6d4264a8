use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use subemb::complexity::{closed_form_complexity, estimate_complexity, estimate_width};
use subemb::experiments::{
    emit_report, run_experiment, thread_pool, threads_from_env, write_csv, write_json, ExperimentConfig,
    ReportFormat,
};
use subemb::oracles::{
    any_collision_probability, binom_central_moments, binom_sqrt_deviation, choose_n_for_lower_bound,
    chi_mean_closed_form, collision_probability, exact_sparse_count, quadrature, scalar_psi2_closed_form,
    QuadratureExpr, ScalarLaw,
};
use subemb::testsets::SetSpec;
use subemb::{isometry_trials, sample_matrix, EnsembleSpec, Error, SeedPath, TestSet, Variant};

#[derive(Parser)]
#[command(name = "subemb", version, about = "Sparse random embeddings: sampling, distortion, width")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a matrix and print its text dump.
    Generate {
        #[command(flatten)]
        ensemble: EnsembleArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        trial: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate the Gaussian width or complexity of a test set.
    Width {
        #[command(flatten)]
        set: SetArgs,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `width` for E sup <g,x>, `complexity` for E sup |<g,x>|.
        #[arg(long, value_enum, default_value_t = WidthMode::Complexity)]
        mode: WidthMode,
        /// Print the closed form instead, if one exists.
        #[arg(long)]
        exact: bool,
    },
    /// Distortion report for one ensemble and one set.
    Isometry {
        #[command(flatten)]
        ensemble: EnsembleArgs,
        #[command(flatten)]
        set: SetArgs,
        /// Defaults to the ensemble's natural scale.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        retain_trials: bool,
    },
    /// Run configured sweeps.
    Experiment {
        #[command(subcommand)]
        action: ExperimentAction,
    },
    /// Evaluate an exact oracle, e.g. `oracle binom_sqrt_deviation 50 5`.
    Oracle {
        name: String,
        params: Vec<String>,
    },
}

#[derive(Subcommand)]
enum ExperimentAction {
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Defaults to the output extension; stdout gets JSON.
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum WidthMode {
    Width,
    Complexity,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Json => ReportFormat::Json,
        }
    }
}

#[derive(Args)]
struct EnsembleArgs {
    /// JSON file holding a full ensemble spec; overrides the flags below.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value = "approx_sparse")]
    variant: String,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    s: Option<usize>,
    /// For column_normalized: the base variant.
    #[arg(long)]
    base: Option<String>,
    #[arg(long)]
    target_norm: Option<f64>,
    #[arg(long)]
    min_norm_fraction: Option<f64>,
}

#[derive(Args)]
struct SetArgs {
    /// Set as JSON, e.g. '{"kind":"pair_differences","n":10}'.
    #[arg(long, conflicts_with = "set_file")]
    set: Option<String>,
    /// Finite set as CSV with a `dim=<n>` header.
    #[arg(long)]
    set_file: Option<PathBuf>,
}

impl SetArgs {
    fn build(&self) -> Result<TestSet, Error> {
        match (&self.set, &self.set_file) {
            (Some(json), None) => {
                let spec: SetSpec = serde_json::from_str(json).map_err(|e| Error::Config(format!("--set: {e}")))?;
                TestSet::build(&spec)
            }
            (None, Some(path)) => TestSet::read_csv(fs::File::open(path)?),
            _ => Err(Error::Config("give one of --set or --set-file".into())),
        }
    }
}

fn plain_spec(variant: Variant, m: usize, n: usize, s: Option<usize>) -> Result<EnsembleSpec, Error> {
    let need_s = || s.ok_or_else(|| Error::Config(format!("{} needs --s", variant.name())));
    Ok(match variant {
        Variant::ApproxSparse => EnsembleSpec::approx_sparse(m, n, need_s()?),
        Variant::ExactSparse => EnsembleSpec::exact_sparse(m, n, need_s()?),
        Variant::DenseGaussian => EnsembleSpec::dense_gaussian(m, n),
        Variant::DenseRademacherScaled => EnsembleSpec::dense_rademacher(m, n),
        Variant::ColumnNormalized => {
            return Err(Error::Config("column_normalized cannot be its own base".into()));
        }
    })
}

impl EnsembleArgs {
    /// `n` falls back to the set dimension when known.
    fn build(&self, set_dim: Option<usize>) -> Result<EnsembleSpec, Error> {
        if let Some(path) = &self.spec {
            let text = fs::read_to_string(path)?;
            let spec: EnsembleSpec = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            spec.validate().map_err(|e| Error::Config(e.to_string()))?;
            return Ok(spec);
        }
        let m = self.m.ok_or_else(|| Error::Config("--m is required".into()))?;
        let n = self
            .n
            .or(set_dim)
            .ok_or_else(|| Error::Config("--n is required".into()))?;
        let variant: Variant = self.variant.parse()?;
        let mut spec = if variant == Variant::ColumnNormalized {
            let base: Variant = self
                .base
                .as_deref()
                .ok_or_else(|| Error::Config("column_normalized needs --base".into()))?
                .parse()?;
            let base = plain_spec(base, m, n, self.s)?;
            let target = self.target_norm.unwrap_or_else(|| base.default_lambda());
            EnsembleSpec::column_normalized(base, target)
        } else {
            plain_spec(variant, m, n, self.s)?
        };
        if let Some(theta) = self.min_norm_fraction {
            spec = spec.with_min_norm_fraction(theta);
        }
        spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(spec)
    }
}

fn parse_num<T: std::str::FromStr>(params: &[String], i: usize, what: &str) -> Result<T, Error> {
    params
        .get(i)
        .ok_or_else(|| Error::Config(format!("missing parameter `{what}`")))?
        .parse()
        .map_err(|_| Error::Config(format!("parameter `{what}` is not a number: {}", params[i])))
}

fn oracle(name: &str, params: &[String]) -> Result<serde_json::Value, Error> {
    use serde_json::json;
    let ms = || -> Result<(usize, usize), Error> { Ok((parse_num(params, 0, "m")?, parse_num(params, 1, "s")?)) };
    let value = match name.replace('-', "_").as_str() {
        "binom_sqrt_deviation" => {
            let (m, s) = ms()?;
            serde_json::to_value(binom_sqrt_deviation(m, s)?)?
        }
        "binom_central_moments" => {
            let (m, s) = ms()?;
            let (second, fourth) = binom_central_moments(m, s)?;
            json!({ "second": second, "fourth": fourth })
        }
        "collision_probability" => {
            let (m, s) = ms()?;
            serde_json::to_value(collision_probability(m, s)?)?
        }
        "any_collision_probability" => {
            let (m, s) = ms()?;
            let n: u64 = parse_num(params, 2, "n")?;
            json!({ "value": any_collision_probability(m, s, n)? })
        }
        "choose_n_for_lower_bound" | "choose_n" => {
            let (m, s) = ms()?;
            json!({ "value": choose_n_for_lower_bound(m, s)? })
        }
        "exact_sparse_count" => {
            let (m, s) = ms()?;
            json!({ "value": exact_sparse_count(m, s)? })
        }
        "scalar_psi2_closed_form" | "psi2" => {
            let law: ScalarLaw = params
                .first()
                .ok_or_else(|| Error::Config("missing scalar law".into()))?
                .parse()?;
            serde_json::to_value(scalar_psi2_closed_form(law)?)?
        }
        "quadrature" => {
            let expr = params
                .first()
                .ok_or_else(|| Error::Config("missing quadrature expression".into()))?;
            let rest = (1..params.len())
                .map(|i| parse_num::<f64>(params, i, "parameter"))
                .collect::<Result<Vec<_>, _>>()?;
            serde_json::to_value(quadrature(QuadratureExpr::by_name(expr, &rest)?))?
        }
        "chi_mean" => {
            let d: usize = parse_num(params, 0, "d")?;
            json!({ "value": chi_mean_closed_form(d) })
        }
        _ => return Err(Error::UnknownDescriptor(format!("oracle `{name}`"))),
    };
    Ok(value)
}

fn print_json(value: &impl serde::Serialize) -> Result<(), Error> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn write_text(out: Option<&Path>, text: &str) -> Result<(), Error> {
    match out {
        Some(path) => fs::write(path, text)?,
        None => io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate {
            ensemble,
            seed,
            trial,
            out,
        } => {
            let spec = ensemble.build(None)?;
            let a = sample_matrix(&spec, SeedPath::new(seed, trial, 0))?;
            write_text(out.as_deref(), &a.dump())
        }
        Command::Width {
            set,
            samples,
            seed,
            mode,
            exact,
        } => {
            let set = set.build()?;
            let est = if exact {
                closed_form_complexity(&set)
                    .ok_or_else(|| Error::Config(format!("no closed form registered for {}", set.id())))?
            } else {
                match mode {
                    WidthMode::Width => estimate_width(&set, samples, seed)?,
                    WidthMode::Complexity => estimate_complexity(&set, samples, seed)?,
                }
            };
            print_json(&est)
        }
        Command::Isometry {
            ensemble,
            set,
            lambda,
            trials,
            seed,
            retain_trials,
        } => {
            let set = set.build()?;
            let spec = ensemble.build(Some(set.dim()))?;
            let lambda = lambda.unwrap_or_else(|| spec.default_lambda());
            let report = isometry_trials(&spec, &set, lambda, trials, seed)?;
            print_json(&if retain_trials { report } else { report.without_trials() })
        }
        Command::Experiment {
            action: ExperimentAction::Run { config, out, format },
        } => {
            let text = fs::read_to_string(&config)?;
            let cfg = ExperimentConfig::from_json(&text)?;
            let report = run_experiment(&cfg)?;
            match out.or(cfg.output.clone()) {
                Some(path) => {
                    let fmt = format.map(Into::into).unwrap_or_else(|| ReportFormat::from_path(&path));
                    emit_report(&report, fmt, &path)
                }
                None => match format.map(Into::into) {
                    Some(ReportFormat::Csv) => write_csv(&report, io::stdout().lock()),
                    _ => {
                        write_json(&report, io::stdout().lock())?;
                        println!();
                        Ok(())
                    }
                },
            }
        }
        Command::Oracle { name, params } => print_json(&oracle(&name, &params)?),
    }
}

fn exit_code(err: &Error) -> u8 {
    match err.root() {
        Error::Budget(_) | Error::Overflow(_) | Error::ResampleExhausted { .. } => 3,
        Error::Io(_) | Error::Csv(_) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = match threads_from_env().and_then(thread_pool) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("subemb: {e}");
            return ExitCode::from(2);
        }
    };
    match pool.install(|| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("subemb: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
