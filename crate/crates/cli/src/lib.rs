//! Command implementations behind the `densefield` binary.

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Map, Value};

use densefield_core::field::DEFAULT_CLAMP_FLOOR;
use densefield_core::quantizer::{lloyd_max_for_distortion, scalar_delta};
use densefield_core::rates::{find_pmax, rate_curve, target_distortion_dsc, write_rate_csv, RateCurveOptions};
use densefield_core::sim::{
    append_csv_log, simulate_dsc_with, simulate_p2p_with, SimOptions, DEFAULT_GRID, DEFAULT_M, DEFAULT_M_PRIME,
};
use densefield_core::{
    covariance_matrix, make_correlation, optimize_k, sensor_positions, CorrelationKind, CorrelationModel,
    CorrelationTable, Error, RateReport, SampleCoder, Units, Verdict,
};

/// Largest quantizer searched when matching a distortion budget.
const MAX_LEVELS: usize = 512;

#[derive(Debug, Parser)]
#[command(name = "densefield", version, about = "Rate curves, quantizer design and Monte Carlo checks for dense sensor sampling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Largest admissible test-channel noise per N
    PmaxCurve(SweepArgs),
    /// Distributed and centralized sum rates per N
    Rates(SweepArgs),
    /// Optimal sub-interval count of the point-to-point scheme
    P2p(P2pArgs),
    /// Monte Carlo check of the integrated-MSE bounds
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitsArg {
    Nats,
    Bits,
}

impl From<UnitsArg> for Units {
    fn from(u: UnitsArg) -> Self {
        match u {
            UnitsArg::Nats => Units::Nats,
            UnitsArg::Bits => Units::Bits,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeArg {
    Dsc,
    P2p,
}

#[derive(Debug, Args)]
pub struct Common {
    /// sinc[:a], exp[:a] or table:<csv path>
    #[arg(long, default_value = "sinc")]
    pub model: String,
    /// Target integrated MSE, in (0, 1)
    #[arg(long = "dnet", default_value_t = 0.1)]
    pub d_net: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = UnitsArg::Nats)]
    pub units: UnitsArg,
    /// Output file; stdout when absent
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    /// Comma-separated sensor counts
    #[arg(long = "n", value_delimiter = ',')]
    pub n: Vec<usize>,
    /// start:end:step (inclusive), or start:end:*factor for a geometric sweep
    #[arg(long = "n-range")]
    pub n_range: Option<String>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct P2pArgs {
    #[command(flatten)]
    pub common: Common,
    /// Largest K scanned; defaults to 10 times the smallest feasible K
    #[arg(long = "k-max")]
    pub k_max: Option<usize>,
    /// Sensor count for the per-sensor rate
    #[arg(long = "n")]
    pub n: Option<usize>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum, default_value_t = SchemeArg::Dsc)]
    pub scheme: SchemeArg,
    #[arg(long = "n")]
    pub n: usize,
    /// Test-channel noise; defaults to p_max at the sensor target for N
    #[arg(long)]
    pub p: Option<f64>,
    /// Sub-interval count; defaults to the rate-optimal K
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long = "k-max")]
    pub k_max: Option<usize>,
    /// Quantizer levels; defaults to the smallest meeting the per-sensor budget
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_M)]
    pub m: usize,
    #[arg(long = "m-prime", default_value_t = DEFAULT_M_PRIME)]
    pub m_prime: usize,
    /// Quadrature points per sensor gap
    #[arg(long, default_value_t = DEFAULT_GRID)]
    pub grid: usize,
    /// Sample the field at every quadrature node (N <= 16)
    #[arg(long)]
    pub full_field: bool,
    /// Append a summary row to this CSV log
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

/// Failure classes, each with its own exit status.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Infeasible(String),
    BoundViolation(String),
    Other(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::BoundViolation(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Infeasible(m) => write!(f, "infeasible configuration: {m}"),
            CliError::BoundViolation(m) => write!(f, "bound violated: {m}"),
            CliError::Other(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if e.is_infeasible() {
            CliError::Infeasible(e.to_string())
        } else {
            match e {
                Error::InvalidParameter { .. } | Error::UnknownModel(_) | Error::InvalidTable(_) => {
                    CliError::Usage(e.to_string())
                }
                other => CliError::Other(other.into()),
            }
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Other(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Other(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parses `sinc`, `sinc:2`, `exp`, `exp-markov:0.5` or `table:<path>`.
pub fn parse_model(spec: &str) -> CliResult<CorrelationModel> {
    if let Some(path) = spec.strip_prefix("table:") {
        let table = CorrelationTable::from_csv_path(path).map_err(|e| match e {
            Error::Io(_) => CliError::Other(anyhow::anyhow!("reading table {path}: {e}")),
            other => usage(other.to_string()),
        })?;
        return Ok(CorrelationModel::from_table(table));
    }
    let (name, scale) = match spec.split_once(':') {
        Some((name, a)) => {
            let a: f64 = a.parse().map_err(|_| usage(format!("bad scale in model `{spec}`")))?;
            (name, Some(a))
        }
        None => (spec, None),
    };
    let kind: CorrelationKind = name.parse().map_err(|_| usage(format!("unknown model `{spec}`")))?;
    if kind == CorrelationKind::CustomTable {
        return Err(usage("custom tables are given as table:<path>"));
    }
    Ok(make_correlation(kind, scale.as_slice())?)
}

/// Expands `--n` and `--n-range` into one sorted list without duplicates.
pub fn resolve_ns(list: &[usize], range: Option<&str>) -> CliResult<Vec<usize>> {
    let mut ns = list.to_vec();
    if let Some(r) = range {
        let parts: Vec<&str> = r.split(':').collect();
        if parts.len() != 3 {
            return Err(usage(format!("--n-range expects start:end:step, got `{r}`")));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| usage(format!("bad number `{s}` in --n-range")));
        let (start, end) = (num(parts[0])?, num(parts[1])?);
        if start == 0 || end < start {
            return Err(usage(format!("--n-range needs 1 <= start <= end, got `{r}`")));
        }
        if let Some(f) = parts[2].strip_prefix('*') {
            let f = num(f)?;
            if f < 2 {
                return Err(usage("geometric --n-range factor must be at least 2"));
            }
            let mut n = start;
            while n <= end {
                ns.push(n);
                n *= f;
            }
        } else {
            let step = num(parts[2])?;
            if step == 0 {
                return Err(usage("--n-range step must be positive"));
            }
            ns.extend((start..=end).step_by(step));
        }
    }
    if ns.is_empty() {
        return Err(usage("no sensor counts given; use --n or --n-range"));
    }
    if ns.contains(&0) {
        return Err(usage("every N must be at least 1"));
    }
    ns.sort_unstable();
    ns.dedup();
    Ok(ns)
}

fn check_d_net(d_net: f64) -> CliResult<()> {
    if d_net > 0.0 && d_net < 1.0 {
        Ok(())
    } else {
        Err(usage(format!("--dnet must lie in (0, 1), got {d_net}")))
    }
}

/// Fully resolved inputs, embedded in every output.
#[derive(Debug, Serialize)]
pub struct RunConfig {
    pub command: &'static str,
    pub model: String,
    pub model_label: String,
    pub d_net: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub n: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scheme: Option<SchemeArg>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_max: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub levels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m_prime: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub full_field: Option<bool>,
    pub seed: u64,
    pub units: UnitsArg,
    pub format: Format,
    pub clamp_floor: f64,
    pub version: &'static str,
}

impl RunConfig {
    fn new(command: &'static str, common: &Common, model: &CorrelationModel, format: Format) -> Self {
        Self {
            command,
            model: common.model.clone(),
            model_label: model.label(),
            d_net: common.d_net,
            n: Vec::new(),
            scheme: None,
            k: None,
            k_max: None,
            p: None,
            levels: None,
            m: None,
            m_prime: None,
            grid: None,
            full_field: None,
            seed: common.seed,
            units: common.units,
            format,
            clamp_floor: DEFAULT_CLAMP_FLOOR,
            version: env!("CARGO_PKG_VERSION"),
        }
    }
}

fn open_out(common: &Common) -> CliResult<Box<dyn Write>> {
    Ok(match &common.out {
        Some(path) => Box::new(BufWriter::new(
            File::create(path).map_err(|e| CliError::Other(anyhow::anyhow!("creating {}: {e}", path.display())))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn write_config_comment(out: &mut dyn Write, cfg: &RunConfig) -> CliResult<()> {
    writeln!(out, "# config: {}", serde_json::to_string(cfg)?)?;
    Ok(())
}

fn write_json(out: &mut dyn Write, cfg: &RunConfig, result: Value) -> CliResult<()> {
    let doc = json!({ "config": cfg, "result": result });
    serde_json::to_writer_pretty(&mut *out, &doc)?;
    writeln!(out)?;
    Ok(())
}

fn num(v: f64) -> Value {
    serde_json::Number::from_f64(v).map(Value::Number).unwrap_or(Value::Null)
}

fn opt_num(v: Option<f64>) -> Value {
    v.map(num).unwrap_or(Value::Null)
}

fn sweep_reports(args: &SweepArgs, command: &'static str) -> CliResult<(RunConfig, Vec<RateReport>)> {
    check_d_net(args.common.d_net)?;
    let model = parse_model(&args.common.model)?;
    let ns = resolve_ns(&args.n, args.n_range.as_deref())?;
    let reports = rate_curve(&model, args.common.d_net, &ns, &RateCurveOptions::default())?;
    let mut cfg = RunConfig::new(command, &args.common, &model, args.format);
    cfg.n = ns;
    Ok((cfg, reports))
}

pub fn cmd_pmax_curve(args: &SweepArgs) -> CliResult<()> {
    let (cfg, reports) = sweep_reports(args, "pmax-curve")?;
    let mut out = open_out(&args.common)?;
    match args.format {
        Format::Csv => {
            write_config_comment(&mut out, &cfg)?;
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record(["N", "d_prime", "p_max", "p_max_over_n", "feasible"])
                .map_err(|e| CliError::Other(e.into()))?;
            for r in &reports {
                let cell = |v: Option<f64>| v.map(|x| format!("{x:.12e}")).unwrap_or_default();
                w.write_record([
                    r.n.to_string(),
                    cell(r.d_prime),
                    cell(r.p_max),
                    cell(r.p_max.map(|p| p / r.n as f64)),
                    r.feasible.to_string(),
                ])
                .map_err(|e| CliError::Other(e.into()))?;
            }
            w.flush()?;
        }
        Format::Json => {
            let rows: Vec<Value> = reports
                .iter()
                .map(|r| {
                    json!({
                        "N": r.n,
                        "d_prime": opt_num(r.d_prime),
                        "p_max": opt_num(r.p_max),
                        "p_max_over_n": opt_num(r.p_max.map(|p| p / r.n as f64)),
                        "feasible": r.feasible,
                    })
                })
                .collect();
            write_json(&mut out, &cfg, Value::Array(rows))?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn cmd_rates(args: &SweepArgs) -> CliResult<()> {
    let (cfg, reports) = sweep_reports(args, "rates")?;
    let units: Units = args.common.units.into();
    let mut out = open_out(&args.common)?;
    match args.format {
        Format::Csv => {
            write_config_comment(&mut out, &cfg)?;
            write_rate_csv(&mut out, &reports, units)?;
        }
        Format::Json => {
            let sfx = units.suffix();
            let rows: Vec<Value> = reports
                .iter()
                .map(|r| {
                    let mut row = Map::new();
                    row.insert("N".into(), json!(r.n));
                    row.insert("d_prime".into(), opt_num(r.d_prime));
                    row.insert("d_double_prime".into(), opt_num(r.d_double_prime));
                    row.insert("p_max".into(), opt_num(r.p_max));
                    row.insert(format!("dsc_rate_{sfx}"), opt_num(r.dsc_sum_rate_nats.map(|x| units.from_nats(x))));
                    row.insert(
                        format!("centralized_rate_{sfx}"),
                        opt_num(r.centralized_rate_nats.map(|x| units.from_nats(x))),
                    );
                    row.insert(format!("loss_bound_{sfx}"), num(units.from_nats(r.rate_loss_bound_nats)));
                    row.insert("theta".into(), num(r.theta));
                    row.insert("feasible".into(), json!(r.feasible));
                    row.insert("clamped_eigenvalues".into(), json!(r.clamped_eigenvalues));
                    Value::Object(row)
                })
                .collect();
            write_json(&mut out, &cfg, Value::Array(rows))?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn cmd_p2p(args: &P2pArgs) -> CliResult<()> {
    check_d_net(args.common.d_net)?;
    if args.format != Format::Json {
        return Err(usage("p2p writes JSON only"));
    }
    let model = parse_model(&args.common.model)?;
    let units: Units = args.common.units.into();
    let choice = optimize_k(&model, args.common.d_net, args.k_max)?;
    let quant = lloyd_max_for_distortion(choice.d_k, MAX_LEVELS)?;
    let delta = if quant.levels >= 2 { Some(scalar_delta(quant.levels)?) } else { None };
    let per_sensor = args.n.map(|n| {
        if n % choice.k == 0 {
            Some(units.from_nats(choice.rate_nats) / n as f64)
        } else {
            None
        }
    });

    let mut cfg = RunConfig::new("p2p", &args.common, &model, args.format);
    cfg.k_max = Some(choice.k_max);
    cfg.n = args.n.into_iter().collect();
    let sfx = units.suffix();
    let mut result = Map::new();
    result.insert("k_star".into(), json!(choice.k));
    result.insert("k_min_feasible".into(), json!(choice.k_min_feasible));
    result.insert("k_max".into(), json!(choice.k_max));
    result.insert("d_k".into(), num(choice.d_k));
    result.insert(format!("sum_rate_{sfx}"), num(units.from_nats(choice.rate_nats)));
    result.insert(format!("per_sensor_rate_{sfx}"), opt_num(per_sensor.flatten()));
    result.insert("levels".into(), json!(quant.levels));
    result.insert("quantizer_distortion".into(), num(quant.distortion));
    result.insert(
        format!("quantizer_sum_rate_{sfx}"),
        num(units.from_nats(choice.k as f64 * (quant.levels as f64).ln())),
    );
    result.insert("delta_bits".into(), opt_num(delta));
    let mut out = open_out(&args.common)?;
    write_json(&mut out, &cfg, Value::Object(result))?;
    out.flush()?;
    Ok(())
}

pub fn cmd_simulate(args: &SimulateArgs) -> CliResult<()> {
    check_d_net(args.common.d_net)?;
    if args.format != Format::Json {
        return Err(usage("simulate writes JSON only; use --log for a CSV summary"));
    }
    if args.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let model = parse_model(&args.common.model)?;
    let opts = SimOptions {
        full_field: args.full_field,
        clamp_floor: DEFAULT_CLAMP_FLOOR,
    };
    let mut cfg = RunConfig::new("simulate", &args.common, &model, args.format);
    cfg.n = vec![args.n];
    cfg.scheme = Some(args.scheme);
    cfg.grid = Some(args.grid);
    cfg.full_field = Some(args.full_field);

    let mut extra = Map::new();
    let report = match args.scheme {
        SchemeArg::Dsc => {
            let p = match args.p {
                Some(p) => p,
                None => {
                    let d_prime = target_distortion_dsc(args.common.d_net, args.n, &model)?;
                    let cov = covariance_matrix(&model, &sensor_positions(args.n)?, DEFAULT_CLAMP_FLOOR)?;
                    extra.insert("d_prime".into(), num(d_prime));
                    find_pmax(&cov, d_prime, densefield_core::rates::DEFAULT_PMAX_REL_TOL)?
                }
            };
            cfg.p = Some(p);
            cfg.m = Some(args.m);
            simulate_dsc_with(&model, args.n, p, args.m, args.grid, args.common.seed, &opts)?
        }
        SchemeArg::P2p => {
            let k = match args.k {
                Some(k) => k,
                None => optimize_k(&model, args.common.d_net, args.k_max)?.k,
            };
            let coder = match args.levels {
                Some(l) => SampleCoder::Quantizer(densefield_core::quantizer::lloyd_max_default(l)?),
                None => {
                    let d_k = densefield_core::quantizer::p2p_distortion_budget(&model, args.common.d_net, k)?;
                    if !(d_k > 0.0) {
                        return Err(CliError::Infeasible(format!("K = {k} leaves no distortion budget")));
                    }
                    extra.insert("d_k".into(), num(d_k));
                    SampleCoder::Quantizer(lloyd_max_for_distortion(d_k, MAX_LEVELS)?)
                }
            };
            cfg.k = Some(k);
            cfg.k_max = args.k_max;
            cfg.levels = coder.levels();
            cfg.m_prime = Some(args.m_prime);
            simulate_p2p_with(&model, args.n, k, &coder, args.m_prime, args.grid, args.common.seed, &opts)?
        }
    };

    let mut result = match serde_json::to_value(&report)? {
        Value::Object(map) => map,
        _ => unreachable!("reports serialize to objects"),
    };
    result.append(&mut extra);
    result.insert(
        "meets_d_net".into(),
        json!(report.j_mse <= args.common.d_net + densefield_core::sim::MARGIN_SIGMAS * report.stderr_jmse),
    );
    let mut out = open_out(&args.common)?;
    write_json(&mut out, &cfg, Value::Object(result))?;
    out.flush()?;
    if let Some(path) = &args.log {
        append_csv_log(path, std::slice::from_ref(&report))?;
    }
    match report.verdict {
        Verdict::Within => Ok(()),
        v => Err(CliError::BoundViolation(format!(
            "j_mse = {:.6} against [{:.6}, {:.6}] is {v}",
            report.j_mse, report.bound_low, report.bound_high
        ))),
    }
}

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::PmaxCurve(a) => cmd_pmax_curve(a),
        Command::Rates(a) => cmd_rates(a),
        Command::P2p(a) => cmd_p2p(a),
        Command::Simulate(a) => cmd_simulate(a),
    }
}
