use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use shaping_core::harness::{
    baseline, compare_uniform, demo_spec, fit_exponent, generate_scenario, run_criteria, scale_bench, solve_scenario,
    sweep_budget, write_csv, ExperimentRow, ScaleOptions, ScenarioSpec, Solved, TraceCsvRow, CRITERIA, DEMO_BUDGETS,
};
use shaping_core::incentives::{DiscountMode, Objective};

#[derive(Parser)]
#[command(name = "shaping", version, about = "Parking and charging discounts that shape city traffic")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML, or JSON with a .json extension). Defaults to the bundled demo.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 gives bit-for-bit reproducible output.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, global = true, value_enum)]
    objective: Option<ObjectiveArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Personalized,
    Uniform,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Ttt,
    Revenue,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize the discounts once; writes result.csv, trace.csv, discounts.csv and scenario.json.
    Solve,
    /// Solve a list of budgets in ascending order; writes sweep.csv.
    SweepBudget {
        /// Comma-separated budgets in dollars.
        #[arg(long, value_delimiter = ',')]
        budgets: Option<Vec<f64>>,
    },
    /// Solve with uniform and with personalized discounts; writes compare.csv.
    CompareUniform,
    /// Time inner iterations on synthetic networks; writes scale.csv.
    ScaleBench {
        /// Comma-separated node counts.
        #[arg(long, value_delimiter = ',', default_value = "25,50,100")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        inner_iterations: usize,
    },
    /// Run the acceptance checks; exits nonzero if any fails.
    Validate {
        /// Comma-separated criterion numbers; all when omitted.
        #[arg(long, value_delimiter = ',')]
        only: Vec<u8>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let common = &cli.common;
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    let spec = load_spec(common)?;
    std::fs::create_dir_all(&common.out_dir).with_context(|| format!("creating {}", common.out_dir.display()))?;
    let out = |name: &str| common.out_dir.join(name);

    match &cli.command {
        Command::Solve => {
            let scenario = generate_scenario(&spec, common.seed)?;
            let (_, base) = baseline(&scenario)?;
            let solved = solve_scenario(&scenario, &scenario.zero_discounts(), base)?;
            write_rows(&out("result.csv"), std::slice::from_ref(&solved.row))?;
            let trace: Vec<TraceCsvRow> = solved.report.rows.iter().map(TraceCsvRow::from).collect();
            write_rows(&out("trace.csv"), &trace)?;
            write_discounts(&out("discounts.csv"), &scenario.game, &solved)?;
            std::fs::write(out("scenario.json"), scenario.game.to_json()?)?;
            print_rows(&[solved.row]);
        }
        Command::SweepBudget { budgets } => {
            let scenario = generate_scenario(&spec, common.seed)?;
            let budgets = budgets.clone().unwrap_or_else(|| DEMO_BUDGETS.to_vec());
            let rows: Vec<ExperimentRow> = sweep_budget(&scenario, &budgets)?.into_iter().map(|s| s.row).collect();
            write_rows(&out("sweep.csv"), &rows)?;
            print_rows(&rows);
        }
        Command::CompareUniform => {
            let scenario = generate_scenario(&spec, common.seed)?;
            let (u, p) = compare_uniform(&scenario)?;
            let rows = vec![u.row, p.row];
            write_rows(&out("compare.csv"), &rows)?;
            print_rows(&rows);
        }
        Command::ScaleBench { sizes, inner_iterations } => {
            if sizes.is_empty() {
                bail!("no sizes given");
            }
            let options =
                ScaleOptions { sizes: sizes.clone(), inner_iterations: *inner_iterations, ..ScaleOptions::default() };
            let rows = scale_bench(&spec, &options, common.seed.unwrap_or(spec.seed))?;
            write_rows(&out("scale.csv"), &rows)?;
            println!("{:>6} {:>6} {:>8} {:>14} {:>14}", "n_v", "n_e", "dim", "inner_iter_s", "outer_step_s");
            for r in &rows {
                println!(
                    "{:>6} {:>6} {:>8} {:>14.3e} {:>14.3e}",
                    r.n_nodes, r.n_edges, r.agent_dim, r.inner_iteration_time, r.outer_step_time
                );
            }
            let x: Vec<f64> = rows.iter().map(|r| r.n_nodes as f64).collect();
            let y: Vec<f64> = rows.iter().map(|r| r.inner_iteration_time).collect();
            if let Some(e) = fit_exponent(&x, &y) {
                println!("inner iteration time ~ n_v^{e:.2}");
            }
        }
        Command::Validate { only } => {
            if let Some(id) = only.iter().find(|id| !CRITERIA.iter().any(|(c, _)| c == *id)) {
                bail!("unknown criterion {id}; valid ids are 1-{}", CRITERIA.len());
            }
            let outcomes = run_criteria(only);
            for o in &outcomes {
                println!("{o}");
            }
            if outcomes.iter().any(|o| !o.passed) {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn load_spec(common: &Common) -> Result<ScenarioSpec> {
    let mut spec = match &common.config {
        None => demo_spec(),
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            if path.extension().is_some_and(|e| e == "json") {
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            } else {
                ScenarioSpec::from_toml(&text).with_context(|| format!("parsing {}", path.display()))?
            }
        }
    };
    if let Some(m) = common.mode {
        spec.ta.mode = match m {
            ModeArg::Personalized => DiscountMode::Personalized,
            ModeArg::Uniform => DiscountMode::Uniform,
        };
    }
    if let Some(o) = common.objective {
        spec.ta.objective = match o {
            ObjectiveArg::Ttt => Objective::Ttt,
            ObjectiveArg::Revenue => Objective::Revenue,
        };
    }
    Ok(spec)
}

fn write_rows<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_csv(rows, file)?;
    Ok(())
}

#[derive(serde::Serialize)]
struct DiscountRow {
    agent: usize,
    facility: &'static str,
    node_id: u32,
    discount: f64,
}

fn write_discounts(path: &Path, game: &shaping_core::agents::Game, solved: &Solved) -> Result<()> {
    let layout = game.discount_layout();
    let net = game.network();
    let ids = net.node_ids();
    let mut rows = Vec::with_capacity(layout.dim());
    for i in 0..layout.n_agents {
        for (k, &v) in net.charge_nodes().iter().enumerate() {
            rows.push(DiscountRow {
                agent: i,
                facility: "charge",
                node_id: ids[v],
                discount: solved.discounts[layout.charge(i, k)],
            });
        }
        for (k, &v) in net.park_nodes().iter().enumerate() {
            rows.push(DiscountRow {
                agent: i,
                facility: "park",
                node_id: ids[v],
                discount: solved.discounts[layout.park(i, k)],
            });
        }
    }
    write_rows(path, &rows)
}

fn print_rows(rows: &[ExperimentRow]) {
    println!("{:>10} {:>13} {:>12} {:>12} {:>9} {:>10}", "budget", "mode", "ttt_base", "ttt_final", "red_%", "spend");
    for r in rows {
        let mode = match r.mode {
            DiscountMode::Personalized => "personalized",
            DiscountMode::Uniform => "uniform",
        };
        println!(
            "{:>10.2} {:>13} {:>12.4} {:>12.4} {:>9.3} {:>10.3}",
            r.budget, mode, r.ttt_baseline, r.ttt_final, r.reduction_pct, r.spend
        );
    }
}
