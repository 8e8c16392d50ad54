//! `sts`: command-line front end for studentized time-series inference.
//!
//! Exit codes: 0 on success, 2 on validation errors (bad flags, config or
//! input), 3 on numeric failures.

use std::fs::{self, File};
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use studentized_ts::covariance::analytic_targets;
use studentized_ts::edgeworth::ExpansionSpec;
use studentized_ts::harness::{
    block_size_scan, fit_expansion, run_experiment, write_experiment_outputs, write_scan_outputs, EllRule,
    ExperimentConfig, ProcessConfig,
};
use studentized_ts::lrv::{studentizing_factor, Variant};
use studentized_ts::simulate::{gen_linear_process, SeedSpec};
use studentized_ts::studentize::{studentized_statistic, SmoothModel};
use studentized_ts::tapers::WeightScheme;
use studentized_ts::{Error, Result, Series};

#[derive(Parser, Debug)]
#[command(name = "sts", version, about = "Studentized inference for weakly dependent time series")]
struct Cli {
    /// Worker threads for replicate-level parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a linear process and emit it as CSV.
    Simulate(SimulateArgs),
    /// Estimate a squared studentizing factor from a CSV series.
    Lrv(EstimateArgs),
    /// Compute the studentized statistic of a CSV series.
    Studentize(StudentizeArgs),
    /// Fit the expansion coefficients over the configured grid.
    EeFit(ExperimentArgs),
    /// Run a full Monte Carlo experiment.
    Experiment(ExperimentArgs),
    /// Repeat an experiment over several block lengths.
    Scan(ScanArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// JSON file holding a process block, or an experiment config with one.
    #[arg(long)]
    config: Option<PathBuf>,
    /// AR(1) coefficient (used when no config is given).
    #[arg(long)]
    phi: Option<f64>,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    stream: u64,
    /// Output CSV path (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    /// CSV series, one observation per row.
    #[arg(long)]
    input: PathBuf,
    /// Taper name, `mbb`, or explicit weights.
    #[arg(long, default_value = "bartlett")]
    taper: String,
    #[arg(long)]
    ell: usize,
    #[arg(long, default_value = "v0")]
    variant: Variant,
    /// `identity`, `projection:<j>` or `ratio:<i>/<j>`.
    #[arg(long, default_value = "identity")]
    model: String,
    /// True mean, comma separated (needed by the known-mean variant).
    #[arg(long, value_delimiter = ',')]
    mu: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct StudentizeArgs {
    #[command(flatten)]
    estimate: EstimateArgs,
    /// True parameter; derived from `--mu` when absent.
    #[arg(long, allow_hyphen_values = true)]
    theta: Option<f64>,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    replicates: Option<usize>,
    /// Overrides the block rule with a fixed block length.
    #[arg(long)]
    ell: Option<usize>,
    #[arg(long)]
    taper: Option<String>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Output path prefix.
    #[arg(long)]
    outputs: Option<String>,
    /// Generic override `dotted.key=value`; value parsed as JSON, else string.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct ScanArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Block lengths to scan, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    ells: Vec<usize>,
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, key) in parts.iter().enumerate() {
        if key.is_empty() {
            return Err(Error::Config(format!("bad override key `{path}`")));
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override `{path}` descends into a non-object")))?;
        if i + 1 == parts.len() {
            obj.insert((*key).to_string(), value);
            return Ok(());
        }
        cur = obj.entry((*key).to_string()).or_insert_with(|| json!({}));
    }
    Ok(())
}

fn load_config(args: &ExperimentArgs) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(&args.config)?;
    let mut root: Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", args.config.display())))?;
    if !root.is_object() {
        return Err(Error::Config("config must be a JSON object".into()));
    }
    for item in &args.set {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{item}` is not KEY=VALUE")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(&mut root, key, value)?;
    }
    let flags: [(&str, Option<Value>); 8] = [
        ("master_seed", args.seed.map(Value::from)),
        ("n", args.n.map(Value::from)),
        ("replicates", args.replicates.map(Value::from)),
        ("ell_rule", args.ell.map(|l| json!({ "fixed": l }))),
        ("taper", args.taper.clone().map(Value::from)),
        ("variant", args.variant.clone().map(Value::from)),
        ("model", args.model.clone().map(Value::from)),
        ("outputs", args.outputs.clone().map(Value::from)),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            set_path(&mut root, key, v)?;
        }
    }
    serde_json::from_value(root).map_err(|e| Error::Config(format!("experiment config: {e}")))
}

fn read_series(path: &Path) -> Result<Series> {
    Series::read_csv(BufReader::new(File::open(path)?))
}

fn print_json(value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let process: ProcessConfig = match (&args.config, args.phi) {
        (Some(path), _) => {
            let root: Value = serde_json::from_str(&fs::read_to_string(path)?)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let block = root.get("process").cloned().unwrap_or(root);
            serde_json::from_value(block).map_err(|e| Error::Config(format!("process config: {e}")))?
        }
        (None, Some(phi)) => ProcessConfig::Ar1 {
            phi,
            innovation_sd: 1.0,
            truncation_tol: 1e-12,
            mean: 0.0,
        },
        (None, None) => return Err(Error::Config("give --config or --phi".into())),
    };
    if args.n == 0 {
        return Err(Error::Config("--n must be positive".into()));
    }
    let spec = process.build()?;
    let series = gen_linear_process(&spec, args.n, SeedSpec::new(args.seed, args.stream))?;
    match &args.out {
        Some(path) => series.write_csv(File::create(path)?),
        None => series.write_csv(io::stdout().lock()),
    }
}

fn model_for(args: &EstimateArgs, dim: usize) -> Result<SmoothModel> {
    let model = SmoothModel::parse(&args.model, dim)?;
    match &args.mu {
        Some(mu) => model.with_mu(mu.clone()),
        None => Ok(model),
    }
}

fn lrv(args: &EstimateArgs) -> Result<()> {
    let series = read_series(&args.input)?;
    let model = model_for(args, series.dim())?;
    let scheme = WeightScheme::parse(&args.taper, args.ell)?;
    let est = studentizing_factor(&series, &model, &scheme, args.variant)?;
    print_json(&serde_json::to_value(est)?)
}

fn studentize(args: &StudentizeArgs) -> Result<()> {
    let series = read_series(&args.estimate.input)?;
    let mut model = model_for(&args.estimate, series.dim())?;
    if let Some(theta) = args.theta {
        model = model.with_theta(theta)?;
    }
    let scheme = WeightScheme::parse(&args.estimate.taper, args.estimate.ell)?;
    let v = studentized_statistic(&series, &model, &scheme, args.estimate.variant)?;
    print_json(&serde_json::to_value(v)?)
}

fn ee_fit(args: &ExperimentArgs) -> Result<()> {
    let config = load_config(args)?;
    let grid = config
        .beta_fit_grid
        .clone()
        .ok_or_else(|| Error::Config("ee-fit needs beta_fit_grid".into()))?;
    let resolved = config.resolve()?;
    let fit = fit_expansion(&config, &resolved, &grid)?;
    let targets = analytic_targets(&resolved.spec, &resolved.model, config.n, &resolved.scheme)?;
    let spec = ExpansionSpec::new(fit.fit.betas, targets.e_n, targets.a_n_inv, config.n as u64, targets.b_n)?;
    let out = json!({ "spec": spec, "fit": fit, "targets": targets });
    if let Some(prefix) = &config.outputs {
        let path = PathBuf::from(format!("{prefix}_fit.json"));
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(&path, serde_json::to_string_pretty(&out)? + "\n")?;
    }
    print_json(&out)
}

fn experiment(args: &ExperimentArgs) -> Result<()> {
    let config = load_config(args)?;
    let result = run_experiment(&config)?;
    log::info!("experiment finished in {:.2}s", result.timing);
    let prefix = config.outputs.clone().unwrap_or_else(|| "experiment".into());
    let paths = write_experiment_outputs(&result, &prefix)?;
    let mut summary = serde_json::to_value(&result)?;
    if let Some(obj) = summary.as_object_mut() {
        obj.insert("files".into(), json!(paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>()));
    }
    print_json(&summary)
}

fn scan(args: &ScanArgs) -> Result<()> {
    let mut config = load_config(&args.experiment)?;
    if let Some(&first) = args.ells.first() {
        // The scan sets ℓ itself; keep the config's own rule out of validation.
        config.ell_rule = EllRule::Fixed(first);
    }
    let report = block_size_scan(&config, &args.ells)?;
    let prefix = config.outputs.clone().unwrap_or_else(|| "experiment".into());
    write_scan_outputs(&report, &prefix)?;
    print_json(&serde_json::to_value(&report)?)
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Lrv(a) => lrv(a),
        Command::Studentize(a) => studentize(a),
        Command::EeFit(a) => ee_fit(a),
        Command::Experiment(a) => experiment(a),
        Command::Scan(a) => scan(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
