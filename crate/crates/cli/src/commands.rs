use std::fmt::Write as _;
use std::path::Path;

use amoeg::analysis::{amo_violations, analyze, delta_at, price_regret_at};
use amoeg::auction::{
    is_bfpm, maximality_gap, monotonicity_campaign, paced_allocation, MaximalityVerdict,
};
use amoeg::bounds::certify;
use amoeg::deviation::{campaign, CampaignSpec};
use amoeg::market::{
    gen_low_rank, gen_replicator, nested_series, ranks_to_utilities, read_market, write_market,
    LowRankSpec, RankProfile, ReplicationMode,
};
use amoeg::solver::solve;
use amoeg::{Error, Market, Mode, Solution, SolverConfig};
use anyhow::Result;
use ndarray::Array1;

use crate::manifest::Run;
use crate::{
    AnalyzeArgs, AuctionArgs, CertifyArgs, Check, Cli, Command, DeviateArgs, Generate, ModeArg,
    SolveArgs, SolverArgs,
};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_INPUT: u8 = 3;
pub const EXIT_NOT_CONVERGED: u8 = 4;

/// An argument combination clap cannot express.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return EXIT_USAGE;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::BaselineNotConverged { .. }) => EXIT_NOT_CONVERGED,
        Some(_) => EXIT_INPUT,
        None => 1,
    }
}

pub fn run(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::Generate(g) => generate(g, &cli.out),
        Command::Solve(a) => cmd_solve(a, &cli.out),
        Command::Analyze(a) => cmd_analyze(a, &cli.out),
        Command::Certify(a) => cmd_certify(a, &cli.out),
        Command::Auction(a) => cmd_auction(a, &cli.out),
        Command::Deviate(a) => cmd_deviate(a, &cli.out),
    }
}

/// Aligned `key  value` lines.
struct Summary(Vec<(String, String)>);

impl Summary {
    fn new() -> Self {
        Summary(Vec::new())
    }

    fn row(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        self.0.push((key.to_string(), value.to_string()));
        self
    }

    fn print(&self) {
        let w = self.0.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        for (k, v) in &self.0 {
            println!("{k:<w$}  {v}");
        }
    }
}

fn load_market(run: &mut Run, path: &Path) -> Result<Market> {
    let market = read_market(path)?;
    run.input(path)?;
    Ok(market)
}

fn solver_config(run: &mut Run, args: &SolverArgs) -> Result<SolverConfig> {
    let mut cfg = match &args.config {
        Some(p) => {
            let cfg = SolverConfig::from_path(p)?;
            run.input(p)?;
            cfg
        }
        None => SolverConfig::default(),
    };
    if let Some(t) = args.tol {
        cfg.tol_kkt = t;
    }
    if let Some(n) = args.max_iters {
        cfg.max_iters = n;
    }
    cfg.validate()?;
    run.config(&cfg)?;
    Ok(cfg)
}

fn read_input(run: &mut Run, path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    run.input(path)?;
    Ok(text)
}

fn read_vector(run: &mut Run, path: &Path, len: usize, what: &str) -> Result<Array1<f64>> {
    let text = read_input(run, path)?;
    let v: Vec<f64> = serde_json::from_str(&text).map_err(Error::from)?;
    if v.len() != len {
        return Err(Error::InvalidArgument(format!(
            "{what} has length {}, expected {len}",
            v.len()
        ))
        .into());
    }
    Ok(Array1::from(v))
}

fn load_solution(run: &mut Run, path: &Path, market: &Market) -> Result<Solution> {
    let text = read_input(run, path)?;
    let sol = Solution::from_json_str(&text)?;
    if sol.x.dim() != market.valuations.dim() {
        return Err(Error::InvalidArgument(format!(
            "solution is {:?}, market is {:?}",
            sol.x.dim(),
            market.valuations.dim()
        ))
        .into());
    }
    Ok(sol)
}

/// Given solution, or a fresh AMO-EG solve.
fn solution_for(
    run: &mut Run,
    path: Option<&Path>,
    market: &Market,
    args: &SolverArgs,
) -> Result<Solution> {
    match path {
        Some(p) => load_solution(run, p, market),
        None => {
            let cfg = solver_config(run, args)?;
            Ok(run.time("solve", || solve(market, &cfg, Mode::Amo, None))?)
        }
    }
}

fn generate(g: &Generate, out: &Path) -> Result<u8> {
    let mut run = Run::new("generate", out)?;
    let mut summary = Summary::new();
    match g {
        Generate::LowRank {
            buyers,
            items,
            dim,
            supply_total,
            seed,
            format,
        } => {
            run.seed(*seed);
            let spec =
                LowRankSpec::unit_box(*buyers, *items, *dim, supply_total / *items as f64, *seed);
            let lr = run.time("generate", || gen_low_rank(&spec))?;
            let name = format!("market.{}", format.ext());
            write_market(&lr.market, run.path(&name))?;
            run.wrote(&name);
            summary
                .row("market", run.path(&name).display())
                .row("shape", format!("{buyers} x {items}"));
        }
        Generate::Replicator {
            base,
            k,
            block_diagonal,
            format,
        } => {
            let base = load_market(&mut run, base)?;
            let mode = if *block_diagonal {
                ReplicationMode::BlockDiagonal
            } else {
                ReplicationMode::Copy
            };
            let m = gen_replicator(&base, *k, mode)?;
            let name = format!("market.{}", format.ext());
            write_market(&m, run.path(&name))?;
            run.wrote(&name);
            summary
                .row("market", run.path(&name).display())
                .row("shape", format!("{} x {}", m.n_buyers(), m.n_items()));
        }
        Generate::Nested {
            pool,
            items,
            supply,
            format,
        } => {
            let pool = load_market(&mut run, pool)?;
            let series = nested_series(&pool, items, supply)?;
            let mut k = 0;
            for &m in items {
                for &s in supply {
                    let name = format!("market_m{m}_s{s}.{}", format.ext());
                    write_market(&series[k], run.path(&name))?;
                    run.wrote(&name);
                    summary.row("market", run.path(&name).display());
                    k += 1;
                }
            }
        }
        Generate::Ranks {
            buyers,
            items,
            ranked,
            max_rank,
            supply,
            seed,
            format,
        } => {
            run.seed(*seed);
            let profile = RankProfile::random(*buyers, *items, *ranked, *seed)?;
            let v = ranks_to_utilities(&profile, *max_rank)?;
            let m = Market::new(v, Array1::from_elem(*items, *supply))?;
            let name = format!("market.{}", format.ext());
            write_market(&m, run.path(&name))?;
            run.wrote(&name);
            summary
                .row("market", run.path(&name).display())
                .row("shape", format!("{buyers} x {items}"));
        }
    }
    run.finish(0)?;
    summary.print();
    Ok(0)
}

fn cmd_solve(a: &SolveArgs, out: &Path) -> Result<u8> {
    let mut run = Run::new("solve", out)?;
    let market = load_market(&mut run, &a.market)?;
    let cfg = solver_config(&mut run, &a.solver)?;
    let mode = match a.mode {
        ModeArg::Amo => Mode::Amo,
        ModeArg::Eg => Mode::Plain,
    };
    let sol = run.time("solve", || solve(&market, &cfg, mode, None))?;
    let violations = amo_violations(&sol.x, &market.groups);
    run.write("solution.json", sol.to_json_string()? + "\n")?;
    run.write_json(
        "solve_report.json",
        &serde_json::json!({
            "mode": sol.mode,
            "converged": sol.diagnostics.converged,
            "iterations": sol.diagnostics.iterations,
            "objective": sol.objective,
            "kkt": sol.diagnostics.residuals,
            "amo_violations": violations,
        }),
    )?;
    let code = if sol.diagnostics.converged {
        0
    } else {
        EXIT_NOT_CONVERGED
    };
    run.finish(code)?;
    let mut s = Summary::new();
    s.row("mode", format!("{:?}", sol.mode))
        .row("converged", sol.diagnostics.converged)
        .row("iterations", sol.diagnostics.iterations)
        .row("objective", format!("{:.10}", sol.objective))
        .row(
            "max kkt residual",
            format!("{:.3e}", sol.diagnostics.residuals.max()),
        )
        .row("amo violators", violations.violators)
        .row("solution", out.join("solution.json").display());
    s.print();
    if code != 0 {
        eprintln!(
            "solver did not converge within {} iterations",
            cfg.max_iters
        );
    }
    Ok(code)
}

fn cmd_analyze(a: &AnalyzeArgs, out: &Path) -> Result<u8> {
    let mut run = Run::new("analyze", out)?;
    if !a.series.is_empty() {
        let cfg = solver_config(&mut run, &a.solver)?;
        let mut csv = String::from(
            "market,buyers,items,total_supply,mean_envy,mean_regret,delta,converged\n",
        );
        let mut all_converged = true;
        let mut s = Summary::new();
        for path in &a.series {
            let m = load_market(&mut run, path)?;
            let sol = run.time("solve", || solve(&m, &cfg, Mode::Amo, None))?;
            all_converged &= sol.diagnostics.converged;
            let r = run.time("analyze", || analyze(&sol, &m));
            writeln!(
                csv,
                "{},{},{},{},{},{},{},{}",
                path.display(),
                m.n_buyers(),
                m.n_items(),
                m.supplies.sum(),
                r.mean_envy,
                r.mean_regret,
                r.delta_ceei,
                sol.diagnostics.converged
            )?;
            s.row(
                &path.display().to_string(),
                format!(
                    "items {} mean regret {:.3e} mean envy {:.3e}",
                    m.n_items(),
                    r.mean_regret,
                    r.mean_envy
                ),
            );
        }
        run.write("series.csv", csv)?;
        let code = if all_converged { 0 } else { EXIT_NOT_CONVERGED };
        run.finish(code)?;
        s.print();
        return Ok(code);
    }

    let market_path = a
        .market
        .as_ref()
        .ok_or_else(|| usage("--market is required"))?;
    let market = load_market(&mut run, market_path)?;
    let sol = solution_for(&mut run, a.solution.as_deref(), &market, &a.solver)?;
    let report = run.time("analyze", || analyze(&sol, &market));
    run.write_json("analysis.json", &report)?;
    run.write("analysis_buyers.csv", report.buyers_csv())?;
    run.write("purity.csv", report.histogram_csv())?;
    let mut s = Summary::new();
    s.row("mean envy", format!("{:.3e}", report.mean_envy))
        .row("mean price regret", format!("{:.3e}", report.mean_regret))
        .row("delta", format!("{:.3e}", report.delta_ceei))
        .row(
            "fractional share",
            format!("{:.3}", report.purity.fraction_fractional),
        )
        .row("amo violators", report.amo_violations.violators);
    if let Some(p) = &a.against {
        let prices = read_vector(&mut run, p, market.n_items(), "price vector")?;
        let regret = price_regret_at(prices.view(), &sol.x, &market, sol.mode);
        let delta = delta_at(prices.view(), &sol.x, &market, sol.mode);
        let mut csv = String::from("buyer,price_regret\n");
        for (i, r) in regret.iter().enumerate() {
            writeln!(csv, "{i},{}", r.map(|r| r.to_string()).unwrap_or_default())?;
        }
        run.write("against_regret.csv", csv)?;
        s.row("delta at given prices", format!("{delta:.3e}"));
    }
    let code = if sol.diagnostics.converged {
        0
    } else {
        EXIT_NOT_CONVERGED
    };
    run.finish(code)?;
    s.print();
    Ok(code)
}

fn cmd_certify(a: &CertifyArgs, out: &Path) -> Result<u8> {
    let mut run = Run::new("certify", out)?;
    let market = load_market(&mut run, &a.market)?;
    let sol = solution_for(&mut run, a.solution.as_deref(), &market, &a.solver)?;
    let cert = run.time("certify", || certify(&sol, &market, a.eps))?;
    run.write_json("certificate.json", &cert)?;
    run.write("certificate_buyers.csv", cert.buyers_csv())?;
    let mut s = Summary::new();
    s.row("eps", a.eps)
        .row("complete", cert.complete)
        .row(
            "delta bound",
            cert.delta
                .map(|d| format!("{d:.3e}"))
                .unwrap_or_else(|| "n/a".into()),
        )
        .row("measured delta", format!("{:.3e}", cert.measured_delta))
        .row(
            "inapplicable buyers",
            cert.buyers
                .iter()
                .filter(|b| b.inapplicable.is_some())
                .count(),
        );
    if !a.eps_sweep.is_empty() {
        let mut csv = String::from("eps,delta_bound,complete,covered_buyers,measured_delta\n");
        for &eps in &a.eps_sweep {
            let c = run.time("certify", || certify(&sol, &market, eps))?;
            let covered = c.buyers.iter().filter(|b| b.regret_bound.is_some()).count();
            writeln!(
                csv,
                "{eps},{},{},{covered},{}",
                c.delta.map(|d| d.to_string()).unwrap_or_default(),
                c.complete,
                c.measured_delta
            )?;
        }
        run.write("eps_sweep.csv", csv)?;
        s.row("sweep", out.join("eps_sweep.csv").display());
    }
    let code = if sol.diagnostics.converged {
        0
    } else {
        EXIT_NOT_CONVERGED
    };
    run.finish(code)?;
    s.print();
    Ok(code)
}

fn cmd_auction(a: &AuctionArgs, out: &Path) -> Result<u8> {
    let mut run = Run::new("auction", out)?;
    let mut s = Summary::new();
    match a.check {
        Some(Check::Monotonicity) => {
            run.seed(a.seed);
            let report = run.time("campaign", || {
                monotonicity_campaign(a.buyers, a.items, a.trials, a.seed)
            })?;
            run.write_json("monotonicity.json", &report)?;
            s.row("trials", report.trials)
                .row("passed", report.passed)
                .row("failures", format!("{:?}", report.failures));
        }
        Some(Check::Maximality) => {
            let path = a
                .market
                .as_ref()
                .ok_or_else(|| usage("--check maximality needs --market"))?;
            let market = load_market(&mut run, path)?;
            let sol = solution_for(&mut run, a.solution.as_deref(), &market, &a.solver)?;
            let entries = run.time("check", || maximality_gap(&sol, &market, a.step))?;
            let mut csv = String::from("buyer,spend,budget,verdict\n");
            for e in &entries {
                writeln!(csv, "{},{},{},{:?}", e.buyer, e.spend, e.budget, e.verdict)?;
            }
            run.write("maximality.csv", csv)?;
            let rejected = entries
                .iter()
                .filter(|e| e.verdict == MaximalityVerdict::Rejected)
                .count();
            s.row("step", a.step).row(
                "inflations rejected",
                format!("{rejected}/{}", entries.len()),
            );
        }
        None => {
            let (Some(path), Some(beta_path)) = (&a.market, &a.beta) else {
                return Err(usage("a single evaluation needs --market and --beta"));
            };
            let market = load_market(&mut run, path)?;
            let beta = read_vector(&mut run, beta_path, market.n_buyers(), "beta")?;
            let outcome = run.time("auction", || paced_allocation(&beta, &market))?;
            let bfpm = is_bfpm(&beta, &market)?;
            run.write_json(
                "paced.json",
                &serde_json::json!({ "outcome": outcome, "budget_feasible": bfpm.feasible }),
            )?;
            s.row("budget feasible", bfpm.feasible)
                .row("revenue", format!("{:.6}", outcome.spend.sum()));
        }
    }
    run.finish(0)?;
    s.print();
    Ok(0)
}

fn cmd_deviate(a: &DeviateArgs, out: &Path) -> Result<u8> {
    let mut run = Run::new("deviate", out)?;
    let market = load_market(&mut run, &a.market)?;
    let cfg = solver_config(&mut run, &a.solver)?;
    run.seed(a.seed);
    let spec = CampaignSpec {
        buyers: a.buyers,
        dim: a.dim,
        evals: a.evals,
        mechanism: a.mechanism,
        seed: a.seed,
    };
    let summary = run.time("campaign", || campaign(&market, &spec, &cfg))?;
    run.write_json("deviation.json", &summary)?;
    run.write("deviation_rows.csv", summary.rows_csv())?;
    run.finish(0)?;
    let mut s = Summary::new();
    s.row("mechanism", format!("{:?}", summary.mechanism))
        .row("buyers", summary.rows.len())
        .row("found rate", format!("{:.1}%", 100.0 * summary.found_rate))
        .row("mean gain % (se)", summary.table_cell())
        .row("factor error", format!("{:.3e}", summary.factor_error));
    s.print();
    Ok(0)
}
