use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fdi_mdp::artifact::PolicyArtifact;
use fdi_mdp::commands::{cmd_estimate_b, cmd_evaluate, cmd_fpmd, cmd_solve, cmd_sweep_action, cmd_voltage};
use fdi_mdp::config::RunConfig;
use fdi_mdp::{Error, Result};

#[derive(Parser)]
#[command(
    name = "fdi-mdp",
    version,
    about = "Optimal FDI attacks against a chi-square detector with reactive mitigation"
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration: benchmark or voltage.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Overrides eval.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory (overrides paths.out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Policy artifact (overrides paths.policy).
    #[arg(long, global = true)]
    policy: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the attacker's MDP and write the policy artifact.
    Solve,
    /// Detection probability and expected impact over attack magnitudes.
    SweepAction,
    /// Cost curves for the MDP, constant, ramp and no-attack plans.
    Evaluate,
    /// False-positive and misdetection costs over thresholds and mitigation noise.
    Fpmd,
    /// Voltage curves and detection frequencies for the voltage loop.
    Voltage,
    /// Estimate the control matrix B from a trace CSV.
    EstimateB {
        /// Trace file (overrides paths.traces).
        #[arg(long)]
        traces: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, &cli.preset) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(name)) => RunConfig::preset(name)?,
        (None, None) => RunConfig::preset("benchmark")?,
    };
    if let Some(seed) = cli.seed {
        cfg.eval.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.paths.out = Some(out.clone());
    }
    if let Some(policy) = &cli.policy {
        cfg.paths.policy = Some(policy.clone());
    }
    Ok(cfg)
}

fn load_artifact(cfg: &RunConfig) -> Result<PolicyArtifact> {
    let path = cfg.policy_path();
    let art = PolicyArtifact::load(&path)?;
    art.check_digest(&cfg.solve_digest())?;
    Ok(art)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    let cfg = load_config(&cli)?;
    let out = cfg.out_dir();
    match cli.command {
        Command::Solve => {
            let path = cfg.policy_path();
            let (_, stats) = cmd_solve(&cfg, &path)?;
            println!(
                "states {}  actions {}  sweeps {}  time {:.2}s  -> {}",
                stats.states,
                stats.actions,
                stats.sweeps,
                stats.elapsed.as_secs_f64(),
                path.display()
            );
        }
        Command::SweepAction => {
            let rows = cmd_sweep_action(&cfg, &out)?;
            if let Some(best) = rows
                .iter()
                .max_by(|a, b| a.expected_reward.total_cmp(&b.expected_reward))
            {
                println!(
                    "max expected reward {:.4} at a = {} (detection probability {:.4})",
                    best.expected_reward, best.a, best.detection_prob
                );
            }
        }
        Command::Evaluate => {
            let art = load_artifact(&cfg)?;
            let res = cmd_evaluate(&cfg, &art, &out)?;
            for (label, rep) in res.labels.iter().zip(&res.comparison.reports) {
                println!(
                    "{label:>9}  Cost[T] = {:.4} ± {:.4}",
                    rep.final_cost(),
                    rep.final_std_err()
                );
            }
        }
        Command::Fpmd => {
            let art = load_artifact(&cfg)?;
            for r in cmd_fpmd(&cfg, &art, &out)? {
                println!(
                    "sigma_mit {:>6}  eta {:>5}  fp {:>10.4} ± {:.4}  md {:>10.4} ± {:.4}",
                    r.sigma_mit,
                    r.eta,
                    r.fp.final_mean(),
                    r.fp.final_std_err(),
                    r.md.final_mean(),
                    r.md.final_std_err()
                );
            }
        }
        Command::Voltage => {
            let art = load_artifact(&cfg)?;
            let res = cmd_voltage(&cfg, &art, &out)?;
            for (label, rep) in res.labels.iter().zip(&res.reports) {
                let last = rep.mean_x.last().map_or(f64::NAN, |x| x[0]);
                println!(
                    "{label:>9}  mean x[T] = {last:.4}  mean |x[T] - x0| = {:.4} ± {:.4}",
                    rep.terminal_deviation, rep.terminal_deviation_std_err
                );
            }
        }
        Command::EstimateB { traces } => {
            let path = traces
                .or_else(|| cfg.paths.traces.clone())
                .ok_or_else(|| Error::Config("no trace file given (--traces or paths.traces)".into()))?;
            let (est, fragment) = cmd_estimate_b(&path, &out)?;
            print_matrix("B", &est.b);
            print_matrix("residual covariance", &est.residual_cov);
            println!("config fragment -> {}", fragment.display());
        }
    }
    Ok(())
}

fn print_matrix(name: &str, m: &nalgebra::DMatrix<f64>) {
    println!("{name} =");
    for i in 0..m.nrows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:>14.6e}")).collect();
        println!("  {}", row.join(" "));
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
