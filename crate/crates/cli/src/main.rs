mod config;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use ccvsc_core::apce::{self, fit_apce, Truncation};
use ccvsc_core::ccopf::{empirical_violation, iterate, write_distribution_csv, SolveReport};
use ccvsc_core::netmodel::{validate_case, NetworkCase};
use ccvsc_core::powerflow::{Grid, OperatingPoint, PfOptions};
use ccvsc_core::scenarios::{build_vsi_dataset, lhs_sample, load_scenarios, ControlBounds, VsiDataset};
use ccvsc_core::surrogate::{train_surrogate, ReducedSurrogate};
use ccvsc_core::ErrorKind;
use clap::{Parser, Subcommand};
use nalgebra::DMatrix;
use serde::Serialize;

use config::{Needs, RunConfig};

#[derive(Parser)]
#[command(name = "ccvsc", version, about = "Chance-constrained, voltage-stability-constrained AC OPF")]
struct Cli {
    /// Worker threads for batch power flows (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory; overrides the config's `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and check a case file; writes it back as JSON.
    Parse { case: PathBuf },
    /// Base-case power flow.
    Pf {
        case: PathBuf,
        #[arg(long, default_value_t = 30)]
        max_iter: usize,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
    },
    /// Build the stability-index training set.
    Dataset { config: PathBuf },
    /// Build (or reuse) the training set and fit the surrogate.
    Train { config: PathBuf },
    /// Run the tightening loop.
    Solve {
        config: PathBuf,
        /// Drop the stability constraint.
        #[arg(long)]
        skip_stability: bool,
        /// Cap on tightening iterations; overrides the config.
        #[arg(long)]
        max_iter: Option<usize>,
    },
    /// Empirical violation probabilities of a solved operating point.
    Validate {
        report: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Scenario CSV to check against instead of the configured set.
        #[arg(long)]
        scenarios: Option<PathBuf>,
        /// Seed for a fresh synthetic set instead of the configured one.
        #[arg(long, conflicts_with = "scenarios")]
        seed: Option<u64>,
    },
    /// Standalone APCE fit and quantiles on a CSV dataset.
    Uq {
        /// Header row, then the inputs followed by the responses.
        data: PathBuf,
        /// Number of leading input columns.
        #[arg(long)]
        inputs: usize,
        #[arg(long, default_value_t = 2)]
        m: usize,
        #[arg(long)]
        s: Option<usize>,
        /// Quantile levels.
        #[arg(long, value_delimiter = ',', default_value = "0.001,0.01,0.03,0.97,0.99,0.999")]
        alpha: Vec<f64>,
    },
}

/// Power flow ran out of iterations; reported with exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("power flow did not converge in {0} iterations (residual {1:.3e})")]
struct PfNotConverged(usize, f64);

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<ccvsc_core::Error>() {
            return match e.kind() {
                ErrorKind::Input => 1,
                ErrorKind::Numerical => 2,
                ErrorKind::Infeasible => 3,
            };
        }
        if cause.is::<PfNotConverged>() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let out = cli.out;
    match cli.cmd {
        Command::Parse { case } => cmd_parse(&case, &out_dir(out, None)?),
        Command::Pf { case, max_iter, tol } => cmd_pf(&case, max_iter, tol, &out_dir(out, None)?),
        Command::Dataset { config } => {
            let cfg = load_config(&config, Needs::Inputs)?;
            let dir = out_dir(out, Some(&cfg))?;
            let case = cfg.load_case()?;
            let data = build_dataset(&cfg, &case)?;
            write_dataset(&data, &dataset_path(&cfg, &dir))
        }
        Command::Train { config } => {
            let cfg = load_config(&config, Needs::Inputs)?;
            cmd_train(&cfg, &out_dir(out, Some(&cfg))?)
        }
        Command::Solve {
            config,
            skip_stability,
            max_iter,
        } => {
            let needs = if skip_stability { Needs::Inputs } else { Needs::Model };
            let mut cfg = load_config(&config, needs)?;
            if let Some(k) = max_iter {
                cfg.solve.k_max = k;
            }
            cmd_solve(&cfg, !skip_stability, &out_dir(out, Some(&cfg))?)
        }
        Command::Validate {
            report,
            config,
            scenarios,
            seed,
        } => {
            let cfg = load_config(&config, Needs::Inputs)?;
            cmd_validate(&cfg, &report, scenarios.as_deref(), seed, &out_dir(out, Some(&cfg))?)
        }
        Command::Uq { data, inputs, m, s, alpha } => cmd_uq(&data, inputs, m, s, &alpha, &out_dir(out, None)?),
    }
}

fn load_config(path: &Path, needs: Needs) -> Result<RunConfig> {
    let cfg = RunConfig::load(path)?;
    cfg.check(needs).with_context(|| format!("config {}", path.display()))?;
    Ok(cfg)
}

fn out_dir(flag: Option<PathBuf>, cfg: Option<&RunConfig>) -> Result<PathBuf> {
    let dir = flag
        .or_else(|| cfg.map(|c| c.out.clone()))
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn cmd_parse(path: &Path, out: &Path) -> Result<()> {
    let case = NetworkCase::load(path).with_context(|| format!("case {}", path.display()))?;
    let diags = validate_case(&case);
    if !diags.is_empty() {
        return Err(ccvsc_core::Error::InvalidCase(diags).into());
    }
    let (pd, qd) = case.total_load();
    println!(
        "{} buses, {} branches, {} generators, load {:.2} MW / {:.2} MVAr",
        case.n_buses(),
        case.branches.len(),
        case.generators.len(),
        pd * case.base_mva,
        qd * case.base_mva
    );
    let dest = out.join("case.json");
    fs::write(&dest, case.to_json()?)?;
    println!("wrote {}", dest.display());
    Ok(())
}

fn cmd_pf(path: &Path, max_iter: usize, tol: f64, out: &Path) -> Result<()> {
    let case = NetworkCase::load(path).with_context(|| format!("case {}", path.display()))?;
    let grid = Grid::new(&case)?;
    let inj = grid.injections(&OperatingPoint::base_case(&case), &[], &[])?;
    let opts = PfOptions {
        tol,
        max_iter,
        ..PfOptions::default()
    };
    let sol = grid.solve(&inj, None, &opts)?;
    println!("iterations {}", sol.iterations);
    println!("residual {:.3e}", sol.residual);
    if !sol.converged {
        return Err(PfNotConverged(sol.iterations, sol.residual).into());
    }
    println!("sigma {:.6}", grid.vsi(&sol.v, &sol.theta));
    let dest = out.join("pf.csv");
    sol.write_csv(&case, create(&dest)?)?;
    println!("wrote {}", dest.display());
    Ok(())
}

fn dataset_path(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.dataset.path.clone().unwrap_or_else(|| out.join("dataset.csv"))
}

/// LHS operating points with the plants at their expected output.
fn build_dataset(cfg: &RunConfig, case: &NetworkCase) -> Result<VsiDataset> {
    let scenarios = cfg.load_scenarios(case, None)?;
    let bounds = ControlBounds::from_case(case)?;
    let base = OperatingPoint::base_case(case);
    let ops = lhs_sample(&bounds, cfg.dataset.samples, cfg.seeds.lhs)
        .iter()
        .map(|y| bounds.operating_point(y, &base))
        .collect::<ccvsc_core::Result<Vec<_>>>()?;
    let data = build_vsi_dataset(case, &ops, &scenarios.plant_buses, &scenarios.mean())?;
    println!("dataset: {} accepted, {} rejected", data.accepted, data.rejected);
    Ok(data)
}

fn write_dataset(data: &VsiDataset, dest: &Path) -> Result<()> {
    data.write_csv(create(dest)?)?;
    println!("wrote {}", dest.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    model: PathBuf,
    rows: usize,
    inputs: usize,
    pls_components: Option<usize>,
    stats: Option<ccvsc_core::surrogate::SurrogateErrorStats>,
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let case = cfg.load_case()?;
    let path = dataset_path(cfg, out);
    let data = if path.exists() {
        println!("reusing {}", path.display());
        VsiDataset::read_csv(File::open(&path)?).with_context(|| format!("dataset {}", path.display()))?
    } else {
        let data = build_dataset(cfg, &case)?;
        write_dataset(&data, &path)?;
        data
    };
    let model = train_surrogate(&data, &cfg.surrogate_config())?;
    if let Some(parent) = cfg.model.parent() {
        fs::create_dir_all(parent)?;
    }
    model.save(&cfg.model)?;
    let summary = TrainSummary {
        model: cfg.model.clone(),
        rows: data.len(),
        inputs: data.z.ncols(),
        pls_components: model.pls.as_ref().map(|p| p.n_components()),
        stats: model.stats,
    };
    if let Some(s) = &model.stats {
        println!("test MAE {:.3e}, max abs error {:.3e}", s.test_mae, s.max_abs_error);
    }
    if let Some(k) = summary.pls_components {
        println!("PLS components {k}");
    }
    write_json(&summary, &out.join("train_report.json"))?;
    println!("wrote {}", cfg.model.display());
    Ok(())
}

fn cmd_solve(cfg: &RunConfig, stability: bool, out: &Path) -> Result<()> {
    let case = cfg.load_case()?;
    let scenarios = cfg.load_scenarios(&case, None)?;
    let chance = cfg.chance.spec()?;
    let model = if stability {
        Some(ReducedSurrogate::load(&cfg.model).with_context(|| format!("model {}", cfg.model.display()))?)
    } else {
        None
    };
    let rho = model.as_ref().and_then(|m| m.stats).map_or(0.0, |s| s.max_abs_error);
    let opts = cfg.iterate_options(rho, stability)?;
    let report = iterate(&case, &scenarios, &chance, model.as_ref(), &opts, None)?;

    fs::write(out.join("report.json"), report.to_json()?)?;
    report.write_history_csv(create(&out.join("history.csv"))?)?;
    write_distribution_csv(&report.apce, &scenarios, create(&out.join("distribution.csv"))?)?;
    report.violations.write_csv(create(&out.join("violations.csv"))?)?;

    println!(
        "converged after {} tightening steps, cost {:.4} $/h",
        report.iterations, report.cost
    );
    println!(
        "stability constraint {}",
        if report.stability_enabled { "enforced" } else { "absent" }
    );
    println!(
        "P(sigma < {}) = {:.4} (APCE), {:.4} (power flow)",
        report.stability_risk.sigma_min, report.stability_risk.apce, report.stability_risk.exact
    );
    println!("max violation probability {:.4}", report.violations.max_probability);
    println!("wrote {}", out.join("report.json").display());
    Ok(())
}

fn cmd_validate(cfg: &RunConfig, report: &Path, scenarios: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let case = cfg.load_case()?;
    let text = fs::read_to_string(report).with_context(|| format!("reading {}", report.display()))?;
    let report = SolveReport::from_json(&text)?;
    if report.point.p_g.len() != case.generators.len() || report.point.v_set.len() != case.control_buses().len() {
        return Err(ccvsc_core::Error::InvalidArgument(format!(
            "report does not belong to {} ({} generators, {} regulated buses)",
            cfg.case.display(),
            case.generators.len(),
            case.control_buses().len()
        ))
        .into());
    }
    let set = match scenarios {
        Some(p) => load_scenarios(p, &case).with_context(|| format!("scenarios {}", p.display()))?,
        None => cfg.load_scenarios(&case, seed)?,
    };
    let table = empirical_violation(&case, &report.point, &set, &report.chance, report.stability_enabled)?;
    println!("{:<40} {:>6} {:>8} {:>10}", "constraint", "side", "epsilon", "violation");
    for row in &table.rows {
        let mark = if row.probability > row.epsilon { " *" } else { "" };
        println!(
            "{:<40} {:>6} {:>8.4} {:>10.4}{mark}",
            row.label,
            format!("{:?}", row.side).to_lowercase(),
            row.epsilon,
            row.probability
        );
    }
    println!(
        "{} scenarios, {} power flow failures, max violation probability {:.4}",
        table.n_scenarios, table.pf_failures, table.max_probability
    );
    let dest = out.join("validation.csv");
    table.write_csv(create(&dest)?)?;
    println!("wrote {}", dest.display());
    Ok(())
}

fn cmd_uq(path: &Path, inputs: usize, m: usize, s: Option<usize>, alpha: &[f64], out: &Path) -> Result<()> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    if inputs == 0 || inputs >= header.len() {
        bail!("--inputs must leave at least one response column ({} columns)", header.len());
    }
    let mut values = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            bail!("line {line}: expected {} values, found {}", header.len(), rec.len());
        }
        for f in rec.iter() {
            values.push(f.parse::<f64>().with_context(|| format!("line {line}: invalid number `{f}`"))?);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(ccvsc_core::Error::NoScenarios.into());
    }
    let data = DMatrix::from_row_slice(rows, header.len(), &values);
    let xi = data.columns(0, inputs).into_owned();
    let y = data.columns(inputs, header.len() - inputs).into_owned();
    let truncation = match s {
        Some(s) => Truncation::Reduced { s, m },
        None => Truncation::TotalDegree { m },
    };
    let model = fit_apce(truncation, &xi, &y, header[inputs..].to_vec())?;
    model.save(&out.join("apce.json"))?;

    let mut w = csv::Writer::from_writer(create(&out.join("quantiles.csv"))?);
    let mut head = vec!["response".to_string(), "mean".into(), "std".into()];
    head.extend(alpha.iter().map(|a| format!("q{a}")));
    w.write_record(&head)?;
    let quantiles = alpha
        .iter()
        .map(|&a| apce::quantile(&model, &xi, a))
        .collect::<ccvsc_core::Result<Vec<_>>>()?;
    let (mean, var) = (model.mean(), model.variance());
    for (i, label) in model.labels.iter().enumerate() {
        let mut rec = vec![label.clone(), format!("{:e}", mean[i]), format!("{:e}", var[i].sqrt())];
        rec.extend(quantiles.iter().map(|q| format!("{:e}", q[i])));
        w.write_record(&rec)?;
        println!("{label}: mean {:.6e}, std {:.6e}", mean[i], var[i].sqrt());
    }
    w.flush()?;
    println!(
        "{} basis functions, effective rank {}; wrote {}",
        model.basis.len(),
        model.effective_rank,
        out.join("quantiles.csv").display()
    );
    Ok(())
}
