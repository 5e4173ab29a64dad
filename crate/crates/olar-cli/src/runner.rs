//! Subcommand implementations.

use crate::report::{render_csv, CliError, SweepRow};
use crate::{GenArgs, RunArgs, SweepArgs};
use olar_core::io::{self, SyntheticSpec};
use olar_core::linalg::{DenseMatrix, DenseVector};
use olar_core::pipeline::{
    boost, budgeted_active, offline_active_reference, run_guarantee, uniform_baseline,
    PipelineConfig, RunOutput, ValidationSketch, WeightMode,
};
use olar_core::sketch::{DecisionRng, QueryLedger};
use olar_core::solver;
use rayon::prelude::*;
use serde::Serialize;
use std::path::Path;

/// OLAR_SEED overrides any --seed flag.
fn effective_seed(flag_seed: u64) -> Result<u64, CliError> {
    match std::env::var("OLAR_SEED") {
        Ok(v) => v
            .parse::<u64>()
            .map_err(|_| CliError::Usage(format!("OLAR_SEED='{v}' is not a u64"))),
        Err(_) => Ok(flag_seed),
    }
}

pub fn generate(args: GenArgs) -> Result<(), CliError> {
    if args.n <= args.d as u64 {
        return Err(CliError::Usage(format!("--n {} must exceed --d {}", args.n, args.d)));
    }
    if !(1.0..=2.0).contains(&args.p) {
        return Err(CliError::Usage(format!("--p {} outside [1,2]", args.p)));
    }
    let seed = effective_seed(args.seed)?;
    let mut spec = SyntheticSpec::new(args.n, args.d, args.p, seed);
    spec.noise_std = args.noise;
    if let Some(k) = args.inflate {
        spec.inflate_count = k;
    }
    let (manifest, _) = io::gen_synthetic(&spec, &args.out)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Data(e.to_string()))?
    );
    Ok(())
}

fn parse_weight_mode(s: &str) -> Result<WeightMode, CliError> {
    match s {
        "exact-oracle" => Ok(WeightMode::ExactOracle),
        "compression-tree" => Ok(WeightMode::CompressionTree),
        "leverage-fast" => Ok(WeightMode::LeverageFast),
        other => Err(CliError::Usage(format!(
            "unknown weight mode '{other}' (expected exact-oracle | compression-tree | leverage-fast)"
        ))),
    }
}

/// key=value configuration, one per line, '#' comments. Keys mirror the
/// pipeline configuration; explicit CLI flags override the file.
fn apply_config_file(cfg: &mut PipelineConfig, path: &Path) -> Result<(), CliError> {
    let content = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("config {}: {e}", path.display())))?;
    for (lineno, raw) in content.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: missing '='", lineno + 1)))?;
        let key = key.trim();
        let value = value.trim();
        let bad = |e: String| CliError::Usage(format!("config line {}: {e}", lineno + 1));
        match key {
            "p" => cfg.p = value.parse().map_err(|_| bad("bad p".into()))?,
            "epsilon" => cfg.epsilon = value.parse().map_err(|_| bad("bad epsilon".into()))?,
            "delta" => cfg.delta = value.parse().map_err(|_| bad("bad delta".into()))?,
            "seed" => cfg.seed = value.parse().map_err(|_| bad("bad seed".into()))?,
            "boost_runs" => {
                cfg.boost_runs = value.parse().map_err(|_| bad("bad boost_runs".into()))?
            }
            "budget" => cfg.budget = Some(value.parse().map_err(|_| bad("bad budget".into()))?),
            "weight_mode" => cfg.weight_mode = parse_weight_mode(value)?,
            "n_declared" => {
                cfg.n_declared = value.parse().map_err(|_| bad("bad n_declared".into()))?
            }
            "beta" => cfg.betas.beta = Some(value.parse().map_err(|_| bad("bad beta".into()))?),
            "beta1" => cfg.betas.beta1 = Some(value.parse().map_err(|_| bad("bad beta1".into()))?),
            "beta2" => cfg.betas.beta2 = Some(value.parse().map_err(|_| bad("bad beta2".into()))?),
            "beta3" => cfg.betas.beta3 = Some(value.parse().map_err(|_| bad("bad beta3".into()))?),
            "optimal_eps_schedule" => {
                cfg.optimal_eps_schedule =
                    value.parse().map_err(|_| bad("bad optimal_eps_schedule".into()))?
            }
            "weight_tol" => {
                cfg.weight_tol = value.parse().map_err(|_| bad("bad weight_tol".into()))?
            }
            "jl_m" => cfg.jl_m = Some(value.parse().map_err(|_| bad("bad jl_m".into()))?),
            "jl_s" => cfg.jl_s = Some(value.parse().map_err(|_| bad("bad jl_s".into()))?),
            "tree_q_cap" => {
                cfg.tree_q_cap = Some(value.parse().map_err(|_| bad("bad tree_q_cap".into()))?)
            }
            "tree_beta" => {
                cfg.tree_beta = Some(value.parse().map_err(|_| bad("bad tree_beta".into()))?)
            }
            other => return Err(bad(format!("unknown key '{other}'"))),
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct RunReport<'a> {
    config: &'a PipelineConfig,
    mode: &'a str,
    solution: Vec<f64>,
    objective: f64,
    queries_total: u64,
    queries_per_stage: Vec<(String, u64)>,
    sampled_rows_per_stage: Vec<(String, u64)>,
    boost_candidates: usize,
    wall_ms: u64,
}

pub fn run(args: RunArgs) -> Result<(), CliError> {
    let seed = effective_seed(args.seed)?;
    let (probe_stream, _) = io::read_stream(&args.data)?;
    let (n, _d) = {
        use olar_core::io::RowSource;
        probe_stream.dims()
    };

    let mut config = PipelineConfig::new(args.p, args.epsilon, n, seed);
    if let Some(path) = &args.config {
        apply_config_file(&mut config, path)?;
    }
    // explicit flags win over the config file
    config.p = args.p;
    config.epsilon = args.epsilon;
    config.delta = args.delta;
    config.seed = seed;
    config.boost_runs = args.boost;
    if let Some(wm) = &args.weight_mode {
        config.weight_mode = parse_weight_mode(wm)?;
    }
    if let Some(b) = args.budget {
        config.budget = Some(b);
    }

    let mode = args.mode.as_str();
    let output = match mode {
        "guarantee" => {
            if config.boost_runs > 1 {
                run_boosted(&args.data, &config)?
            } else {
                let (mut stream, mut oracle) = io::read_stream(&args.data)?;
                run_guarantee(&mut stream, &mut oracle, &config)?
            }
        }
        "budget" => {
            if config.budget.is_none() {
                return Err(CliError::Usage("--mode budget requires --budget".into()));
            }
            let (mut stream, mut oracle) = io::read_stream(&args.data)?;
            budgeted_active(&mut stream, &mut oracle, &config)?
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown mode '{other}' (expected guarantee | budget)"
            )))
        }
    };

    let report = RunReport {
        config: &config,
        mode,
        solution: output.x.as_slice().to_vec(),
        objective: output.objective,
        queries_total: output.ledger.total(),
        queries_per_stage: output
            .ledger
            .per_stage()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        sampled_rows_per_stage: output
            .stage_rows
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect(),
        boost_candidates: config.boost_runs,
        wall_ms: output.wall_ms,
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&report).map_err(|e| CliError::Data(e.to_string()))?
    );
    Ok(())
}

fn run_boosted(data: &Path, config: &PipelineConfig) -> Result<RunOutput, CliError> {
    let mut ledger = QueryLedger::new(None);
    let (mut vstream, mut voracle) = io::read_stream(data)?;
    let target = 8 * (config.n_declared as f64).ln().ceil() as u64;
    let validation = ValidationSketch::build(
        &mut vstream,
        &mut voracle,
        config.p,
        DecisionRng::derive_seed(config.seed, 0xa11d),
        target.max(16),
        &mut ledger,
    )?;
    let boosted = boost(
        config.boost_runs,
        config.seed,
        |seed| {
            let mut c = config.clone();
            c.seed = seed;
            let (mut stream, mut oracle) = io::read_stream(data)?;
            run_guarantee(&mut stream, &mut oracle, &c)
        },
        |x| validation.objective(x),
    )?;
    let mut chosen = boosted.chosen;
    // surface the aggregate cost: boosting queries add up across runs
    let _ = boosted.total_queries;
    chosen.ledger = {
        let mut merged = chosen.ledger.clone();
        for _ in 0..validation.queries {
            let _ = merged.charge(olar_core::sketch::StageId::Validation);
        }
        merged
    };
    Ok(chosen)
}

fn parse_budgets(spec: &str, n: u64) -> Result<Vec<u64>, CliError> {
    let mut budgets = Vec::new();
    for tok in spec.split(',') {
        let tok = tok.trim();
        if tok.is_empty() {
            continue;
        }
        let value = if let Some(pct) = tok.strip_suffix('%') {
            let f: f64 = pct
                .parse()
                .map_err(|_| CliError::Usage(format!("bad budget percentage '{tok}'")))?;
            ((f / 100.0) * n as f64).round() as u64
        } else {
            tok.parse::<u64>()
                .map_err(|_| CliError::Usage(format!("bad budget '{tok}'")))?
        };
        budgets.push(value);
    }
    if budgets.is_empty() {
        return Err(CliError::Usage("no budgets given".into()));
    }
    budgets.sort_unstable();
    Ok(budgets)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Method {
    ActiveOnline,
    Uniform,
    OfflineActiveLike,
}

impl Method {
    fn label(self) -> &'static str {
        match self {
            Method::ActiveOnline => "active-online",
            Method::Uniform => "uniform",
            Method::OfflineActiveLike => "offline-active-like",
        }
    }
}

fn parse_methods(spec: &str) -> Result<Vec<Method>, CliError> {
    let mut methods = Vec::new();
    for tok in spec.split(',') {
        let m = match tok.trim() {
            "" => continue,
            "active-online" => Method::ActiveOnline,
            "uniform" => Method::Uniform,
            "offline-active-like" => Method::OfflineActiveLike,
            other => {
                return Err(CliError::Usage(format!(
                    "unknown method '{other}' (expected active-online | uniform | offline-active-like)"
                )))
            }
        };
        if !methods.contains(&m) {
            methods.push(m);
        }
    }
    if methods.is_empty() {
        return Err(CliError::Usage("no methods given".into()));
    }
    Ok(methods)
}

pub fn sweep(args: SweepArgs) -> Result<(), CliError> {
    if args.trials < 1 {
        return Err(CliError::Usage("--trials must be at least 1".into()));
    }
    let seed = effective_seed(args.seed)?;
    let (full_a, full_b) = io::load_full(&args.data)?;
    let n = full_a.rows() as u64;
    let budgets = parse_budgets(&args.budgets, n)?;
    let methods = parse_methods(&args.methods)?;
    if budgets.iter().any(|&b| b > n) {
        return Err(CliError::Usage(format!("budgets exceed the stream length n={n}")));
    }

    let opt = solver::reference_solve(&full_a, &full_b, args.p)
        .map_err(|e| CliError::Numeric(e.to_string()))?
        .objective;
    let zero_opt = opt <= 1e-12 * full_b.norm_p(args.p);

    struct TrialSpec {
        method: Method,
        budget: u64,
        trial: u32,
        seed: u64,
    }
    let mut specs = Vec::new();
    for (mi, &method) in methods.iter().enumerate() {
        for &budget in &budgets {
            for trial in 0..args.trials {
                let key = (mi as u64) * 1_000_003 ^ budget.wrapping_mul(7919) ^ trial as u64;
                specs.push(TrialSpec {
                    method,
                    budget,
                    trial,
                    seed: DecisionRng::derive_seed(seed, key),
                });
            }
        }
    }

    let epsilon = args.epsilon;
    let p = args.p;
    let rows: Vec<SweepRow> = specs
        .par_iter()
        .map(|spec| {
            let outcome = run_sweep_trial(&full_a, &full_b, p, epsilon, spec.method, spec.budget, spec.seed);
            match outcome {
                Ok(out) => {
                    let (relative_error, status) = if zero_opt {
                        (None, "zero-optimum".to_string())
                    } else {
                        let err = solver::objective(&full_a, &full_b, &out.x, p)
                            .map(|e| ((e - opt) / opt).max(0.0));
                        match err {
                            Ok(e) => (Some(e), "ok".to_string()),
                            Err(e) => (None, format!("error:{e}")),
                        }
                    };
                    SweepRow {
                        method: spec.method.label().to_string(),
                        budget: spec.budget,
                        trial: spec.trial,
                        relative_error,
                        queries_used: out.ledger.total(),
                        seed: spec.seed,
                        status,
                    }
                }
                Err(e) => SweepRow {
                    method: spec.method.label().to_string(),
                    budget: spec.budget,
                    trial: spec.trial,
                    relative_error: None,
                    queries_used: 0,
                    seed: spec.seed,
                    status: format!("error:{e}"),
                },
            }
        })
        .collect();

    let csv = render_csv(&rows);
    std::fs::write(&args.out, csv.as_bytes())
        .map_err(|e| CliError::Data(format!("writing {}: {e}", args.out.display())))?;
    eprintln!("wrote {} rows to {}", rows.len(), args.out.display());
    Ok(())
}

fn run_sweep_trial(
    full_a: &DenseMatrix,
    full_b: &DenseVector,
    p: f64,
    epsilon: f64,
    method: Method,
    budget: u64,
    seed: u64,
) -> Result<RunOutput, CliError> {
    use olar_core::io::MatrixRowSource;
    let n = full_a.rows() as u64;
    match method {
        Method::Uniform => {
            let mut stream = MatrixRowSource::new(full_a.clone());
            let mut oracle = olar_core::io::LabelOracle::from_vec(full_b.as_slice().to_vec());
            Ok(uniform_baseline(&mut stream, &mut oracle, p, budget, seed)?)
        }
        Method::ActiveOnline => {
            let mut config = PipelineConfig::new(p, epsilon, n, seed);
            config.budget = Some(budget);
            let mut stream = MatrixRowSource::new(full_a.clone());
            let mut oracle = olar_core::io::LabelOracle::from_vec(full_b.as_slice().to_vec());
            Ok(budgeted_active(&mut stream, &mut oracle, &config)?)
        }
        Method::OfflineActiveLike => {
            Ok(offline_active_reference(full_a, full_b, p, budget, seed)?)
        }
    }
}

