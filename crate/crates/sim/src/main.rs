use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use drift_core::analysis::{compute_metrics, DriftCriteria};
use drift_core::qp::{solve, QpStatus};
use drift_sim::output::{self, MetricsBody, MetricsDocument};
use drift_sim::{qpdump, run_scenario, RunOptions, Scenario};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "drift-sim", version, about = "Closed-loop drift control scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its time series, metrics and scenario echo.
    Run {
        scenario: PathBuf,
        /// Output directory (default: runs/<scenario name>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Disable the disturbance compensation in the predictor.
        #[arg(long)]
        no_compensation: bool,
        /// Include the yaw-rate term in the heading-error row of the model.
        #[arg(long = "corrected-A")]
        corrected_a: bool,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the QP of this control step (repeatable).
        #[arg(long = "dump-qp", value_name = "STEP")]
        dump_qp: Vec<usize>,
    },
    /// Check a scenario file and print its resolved form.
    Validate { scenario: PathBuf },
    /// Recompute metrics from a run directory's CSV and compare with the stored file.
    Metrics { run_dir: PathBuf },
    /// Solve a dumped QP and print the solution.
    SolveQp { dump: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn print_summary(doc: &MetricsDocument) {
    let m = &doc.metrics;
    let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!("scenario            {}", doc.scenario);
    println!("steps               {}", m.steps);
    println!("max |e_d|           {} m", opt(m.max_abs_lateral_error));
    println!("rms e_d             {} m", opt(m.rms_lateral_error));
    println!("steady |e_d|        {} m", opt(m.steady_abs_lateral_error));
    println!("drift onset         {} s", opt(m.drift_onset_time));
    println!("sustained drift     {}", m.sustained_drift);
    println!("steady sideslip     {} deg", opt(m.steady_sideslip_deg));
    println!("steady yaw rate     {} rad/s", opt(m.steady_yaw_rate));
    println!(
        "max utilization     {} front, {} rear",
        opt(m.max_front_utilization),
        opt(m.max_rear_utilization)
    );
    println!("qp fallbacks        {}", m.qp_fallbacks);
    println!(
        "steering            {} steps saturated, {} not converged",
        m.steering_saturated, m.steering_nonconverged
    );
    if let Some(a) = &doc.aborted {
        println!("ABORTED at step {} (t = {} s): {}", a.step, a.time, a.reason);
    }
}

fn execute(command: Command) -> Result<ExitCode> {
    match command {
        Command::Run {
            scenario,
            out,
            no_compensation,
            corrected_a,
            seed,
            dump_qp,
        } => {
            let loaded = Scenario::load(&scenario)?;
            let options = RunOptions {
                no_compensation,
                corrected_a,
                seed,
                dump_qp_steps: dump_qp,
            };
            let artifacts = run_scenario(&loaded, &options)?;
            let dir = out.unwrap_or_else(|| PathBuf::from("runs").join(&loaded.name));
            for path in output::emit(&artifacts, &dir)? {
                log::info!("wrote {}", path.display());
            }
            for step in &options.dump_qp_steps {
                if !artifacts.outcome.qp_problems.iter().any(|(k, _)| k == step) {
                    log::warn!("no QP recorded for step {step}");
                }
            }
            print_summary(&output::metrics_document(&artifacts));
            println!("output              {}", dir.display());
            Ok(if artifacts.outcome.aborted.is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            })
        }
        Command::Validate { scenario } => {
            let loaded = Scenario::load(&scenario)?;
            let steps = (loaded.duration / loaded.controller.sample_time).round();
            println!("{}: ok ({steps} control steps)", scenario.display());
            print!("{}", loaded.to_toml_string());
            Ok(ExitCode::SUCCESS)
        }
        Command::Metrics { run_dir } => {
            let stored = MetricsDocument::load(&run_dir.join(output::METRICS_FILE))?;
            let scenario = Scenario::load(&run_dir.join(output::SCENARIO_FILE))?;
            let samples = output::read_samples(&run_dir.join(output::TIMESERIES_FILE))?;
            let recomputed = compute_metrics(&samples, scenario.controller.sample_time, &DriftCriteria::default());
            let doc = MetricsDocument::new(&scenario, &recomputed, stored.aborted.clone());
            print_summary(&doc);
            if MetricsBody::from(&recomputed) != stored.metrics {
                bail!(
                    "recomputed metrics differ from {}",
                    run_dir.join(output::METRICS_FILE).display()
                );
            }
            println!("metrics match the stored summary");
            Ok(ExitCode::SUCCESS)
        }
        Command::SolveQp { dump } => {
            let problem = qpdump::load(&dump)?;
            let tol = 1e-8;
            let sol = solve(&problem, tol, 200).with_context(|| format!("solving {}", dump.display()))?;
            println!("status      {:?}", sol.status);
            println!("iterations  {}", sol.iterations);
            println!("objective   {:?}", sol.objective);
            println!("violation   {:e}", problem.max_violation(&sol.x));
            println!("active      {}", sol.active.len());
            let x: Vec<String> = sol.x.iter().map(|v| format!("{v:?}")).collect();
            println!("x           {}", x.join(" "));
            Ok(if sol.status == QpStatus::Optimal {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            })
        }
    }
}
