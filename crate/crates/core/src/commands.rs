//! The command implementations behind the binary. Each command writes its
//! CSV or artifact outputs and returns the computed values.
//!
//! CSV files start with `# config_digest=<sha256>` and a header row;
//! reals use 17 significant digits.
//!
//! | file | columns |
//! |------|---------|
//! | `sweep_action.csv` | `a,detection_prob,expected_reward` |
//! | `cost_curves.csv` | `plan,t,cost,std_err` |
//! | `paired_final.csv` | `plan,reference,diff,std_err` |
//! | `fpmd.csv` | `sigma_mit,eta,fp_cost,fp_std_err,md_cost,md_std_err` |
//! | `voltage_curves.csv` | `plan,t,mean_x_1..,std_err_x_1..,mean_x_hat_1..` |
//! | `detection_frequency.csv` | `plan,t,detection_freq` |
//! | `voltage_summary.csv` | `plan,terminal_deviation,std_err,terminal_estimate_deviation,final_cost,final_cost_std_err` |
//! | `policy_table.csv` | `stage,state,e_1..,a_1..,value` |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::artifact::PolicyArtifact;
use crate::attack::AttackPlan;
use crate::config::RunConfig;
use crate::defense::{Detector, DetectorConfig, MitigationStrategy};
use crate::error::{Error, Result};
use crate::evaluation::{compare_attacks, fp_cost, md_cost, Comparison, LoopSetup, PairedDiff, RunSettings};
use crate::lti::derive_steady_state;
use crate::mdp::{
    action_grid, build_transition_model, value_iteration, value_iteration_refined, ErrorMdp, Grid, Refinement,
    SamplingOptions,
};
use crate::voltage::{estimate_b, load_traces, voltage_attack_experiment, BEstimate, VoltageReport};

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Accumulates one CSV file in memory; written in one go.
struct Csv {
    text: String,
}

impl Csv {
    fn new(digest: &str, header: &[String]) -> Self {
        let mut text = format!("# config_digest={digest}\n");
        text.push_str(&header.join(","));
        text.push('\n');
        Self { text }
    }

    fn row(&mut self, fields: &[String]) {
        let _ = writeln!(self.text, "{}", fields.join(","));
    }

    fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, &self.text)?;
        Ok(())
    }
}

fn header(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn settings(cfg: &RunConfig) -> RunSettings {
    RunSettings {
        horizon: cfg.eval.horizon,
        runs: cfg.eval.runs,
        seed: cfg.eval.seed,
    }
}

fn error_mdp(cfg: &RunConfig, eta: f64) -> Result<ErrorMdp> {
    let model = cfg.system_model()?;
    let ss = derive_steady_state(&model)?;
    let sampling = SamplingOptions {
        samples: cfg.mdp.samples,
        seed: cfg.mdp.sampling_seed,
    };
    Ok(ErrorMdp::new(model, ss, eta, cfg.mdp.delta)?.with_method(cfg.mdp.method, sampling))
}

fn mdp_grid(cfg: &RunConfig) -> Result<Grid> {
    let bounds: Vec<(f64, f64)> = cfg
        .mdp
        .lower
        .iter()
        .copied()
        .zip(cfg.mdp.upper.iter().copied())
        .collect();
    Grid::build(&bounds, &cfg.mdp.step)
}

fn action_step(cfg: &RunConfig) -> f64 {
    if cfg.mdp.actions > 1 {
        2.0 * cfg.attack.a_max / (cfg.mdp.actions - 1) as f64
    } else {
        cfg.attack.a_max
    }
}

/// Solve statistics reported by `solve`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveStats {
    pub states: usize,
    pub actions: usize,
    pub sweeps: usize,
    pub truncated_rows: usize,
    pub worst_row_mass: f64,
    #[serde(skip)]
    pub elapsed: Duration,
}

/// Builds the transition model and runs value iteration in memory.
pub fn solve_policy(cfg: &RunConfig) -> Result<(PolicyArtifact, SolveStats)> {
    let start = Instant::now();
    let mdp = error_mdp(cfg, cfg.detector.eta)?;
    let grid = mdp_grid(cfg)?;
    let actions = action_grid(mdp.model().m(), cfg.attack.a_max, cfg.mdp.actions)?;
    let tm = build_transition_model(&mdp, &grid, &actions)?;
    let policy = if cfg.mdp.refine {
        let opts = Refinement {
            rounds: cfg.mdp.refine_rounds,
            step: action_step(cfg),
            a_max: cfg.attack.a_max,
        };
        value_iteration_refined(&tm, &grid, cfg.mdp.horizon, cfg.mdp.gamma, &mdp, opts)?
    } else {
        value_iteration(&tm, &grid, cfg.mdp.horizon, cfg.mdp.gamma)?
    };
    let (truncated_rows, worst_row_mass) = tm.truncation_report();
    let stats = SolveStats {
        states: grid.len(),
        actions: actions.len(),
        sweeps: cfg.mdp.horizon,
        truncated_rows,
        worst_row_mass,
        elapsed: start.elapsed(),
    };
    let art = PolicyArtifact::new(
        cfg.solve_digest(),
        &grid,
        tm.actions.clone(),
        cfg.mdp.stage_convention,
        policy,
    );
    Ok((art, stats))
}

pub fn cmd_solve(cfg: &RunConfig, path: &Path) -> Result<(PolicyArtifact, SolveStats)> {
    let (art, stats) = solve_policy(cfg)?;
    art.save(path)?;
    Ok((art, stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub a: f64,
    pub detection_prob: f64,
    pub expected_reward: f64,
}

/// Detection probability and expected next-step `‖e‖²` at `e = 0` for
/// injections `0, h, 2h, .., a_max` on the action-grid spacing `h`.
pub fn cmd_sweep_action(cfg: &RunConfig, out_dir: &Path) -> Result<Vec<SweepRow>> {
    let mdp = error_mdp(cfg, cfg.detector.eta)?;
    if !mdp.model().is_scalar() {
        return Err(Error::Config("sweep-action needs a scalar model".into()));
    }
    let grid = mdp_grid(cfg)?;
    let norms = grid.squared_norms();
    let h = action_step(cfg);
    let count = (cfg.attack.a_max / h).round() as usize + 1;
    let e = DVector::zeros(1);
    let rows: Vec<Result<SweepRow>> = (0..count)
        .into_par_iter()
        .map(|k| {
            let a = (k as f64 * h).min(cfg.attack.a_max);
            let av = DVector::from_element(1, a);
            let stream = mdp.pair_stream(grid.nearest(&[0.0]), k, count);
            let row = mdp.transition_row(&grid, &e, &av, stream)?;
            let detection_prob = mdp.detection_prob(&e, &av, stream.lane(1))?;
            Ok(SweepRow {
                a,
                detection_prob,
                expected_reward: row.row.dot(&norms),
            })
        })
        .collect();
    let rows: Vec<SweepRow> = rows.into_iter().collect::<Result<_>>()?;
    let mut csv = Csv::new(&cfg.digest(), &header(&["a", "detection_prob", "expected_reward"]));
    for r in &rows {
        csv.row(&[num(r.a), num(r.detection_prob), num(r.expected_reward)]);
    }
    csv.save(&out_dir.join("sweep_action.csv"))?;
    Ok(rows)
}

/// The four plans compared by `evaluate` and `voltage`, in output order.
pub fn standard_plans(cfg: &RunConfig, artifact: &PolicyArtifact) -> Result<Vec<AttackPlan>> {
    let a_max = cfg.attack.a_max;
    let m = cfg.system_model()?.m();
    Ok(vec![
        AttackPlan::policy(artifact.handle()?, a_max)?,
        AttackPlan::constant(DVector::from_column_slice(&cfg.attack.constant), a_max)?,
        AttackPlan::ramp(DVector::from_column_slice(&cfg.attack.ramp_slope), a_max)?,
        AttackPlan::none(m),
    ])
}

fn loop_setup(cfg: &RunConfig) -> Result<LoopSetup> {
    let model = cfg.system_model()?;
    let ss = derive_steady_state(&model)?;
    let mut setup = LoopSetup::open_loop(model, ss);
    setup.x_hat0 = cfg.x_hat0();
    Ok(setup)
}

#[derive(Debug, Clone)]
pub struct EvaluateOutcome {
    pub labels: Vec<&'static str>,
    pub comparison: Comparison,
}

impl EvaluateOutcome {
    pub fn index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| *l == label)
    }
}

pub fn cmd_evaluate(cfg: &RunConfig, artifact: &PolicyArtifact, out_dir: &Path) -> Result<EvaluateOutcome> {
    artifact.check_digest(&cfg.solve_digest())?;
    let plans = standard_plans(cfg, artifact)?;
    let setup = loop_setup(cfg)?;
    let detector = Detector::ChiSquare(DetectorConfig::new(cfg.detector.eta)?);
    let strategy = cfg.mitigation.strategy()?;
    let mut comparison = compare_attacks(&setup, &plans, &detector, &strategy, &settings(cfg))?;
    let digest = cfg.digest();
    let labels: Vec<&'static str> = plans.iter().map(AttackPlan::label).collect();

    let mut curves = Csv::new(&digest, &header(&["plan", "t", "cost", "std_err"]));
    for (label, rep) in labels.iter().zip(comparison.reports.iter_mut()) {
        rep.digest = digest.clone();
        for (t, (c, s)) in rep.cost_per_t.iter().zip(&rep.std_err_per_t).enumerate() {
            curves.row(&[label.to_string(), (t + 1).to_string(), num(*c), num(*s)]);
        }
    }
    curves.save(&out_dir.join("cost_curves.csv"))?;

    let mut paired = Csv::new(&digest, &header(&["plan", "reference", "diff", "std_err"]));
    for j in 1..plans.len() {
        let d = comparison.paired(0, j)?;
        paired.row(&[
            labels[0].to_string(),
            labels[j].to_string(),
            num(d.final_mean()),
            num(d.final_std_err()),
        ]);
    }
    paired.save(&out_dir.join("paired_final.csv"))?;
    Ok(EvaluateOutcome { labels, comparison })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FpmdRow {
    pub sigma_mit: f64,
    pub eta: f64,
    pub fp: PairedDiff,
    pub md: PairedDiff,
}

fn strategy_for_sigma(sigma: f64) -> Result<MitigationStrategy> {
    if sigma == 0.0 {
        Ok(MitigationStrategy::Perfect)
    } else {
        MitigationStrategy::noisy(sigma)
    }
}

/// FP and MD costs over the configured threshold and mitigation-noise
/// grids. The attacker plays the artifact's policy throughout.
pub fn cmd_fpmd(cfg: &RunConfig, artifact: &PolicyArtifact, out_dir: &Path) -> Result<Vec<FpmdRow>> {
    artifact.check_digest(&cfg.solve_digest())?;
    let setup = loop_setup(cfg)?;
    let plan = AttackPlan::policy(artifact.handle()?, cfg.attack.a_max)?;
    let run = settings(cfg);
    let mut rows = Vec::new();
    for &sigma in &cfg.fpmd.sigmas {
        let strategy = strategy_for_sigma(sigma)?;
        for &eta in &cfg.fpmd.etas {
            let fp = fp_cost(&setup, eta, &strategy, &run)?;
            let md = md_cost(&setup, eta, &strategy, &plan, &run)?;
            rows.push(FpmdRow {
                sigma_mit: sigma,
                eta,
                fp,
                md,
            });
        }
    }
    let mut csv = Csv::new(
        &cfg.digest(),
        &header(&["sigma_mit", "eta", "fp_cost", "fp_std_err", "md_cost", "md_std_err"]),
    );
    for r in &rows {
        csv.row(&[
            num(r.sigma_mit),
            num(r.eta),
            num(r.fp.final_mean()),
            num(r.fp.final_std_err()),
            num(r.md.final_mean()),
            num(r.md.final_std_err()),
        ]);
    }
    csv.save(&out_dir.join("fpmd.csv"))?;
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct VoltageOutcome {
    pub labels: Vec<&'static str>,
    pub reports: Vec<VoltageReport>,
}

impl VoltageOutcome {
    pub fn report(&self, label: &str) -> Option<&VoltageReport> {
        self.labels.iter().position(|l| *l == label).map(|i| &self.reports[i])
    }
}

pub fn cmd_voltage(cfg: &RunConfig, artifact: &PolicyArtifact, out_dir: &Path) -> Result<VoltageOutcome> {
    artifact.check_digest(&cfg.solve_digest())?;
    let vcfg = cfg.voltage_config()?;
    let plans = standard_plans(cfg, artifact)?;
    let strategy = cfg.mitigation.strategy()?;
    let run = settings(cfg);
    let digest = cfg.digest();
    let labels: Vec<&'static str> = plans.iter().map(AttackPlan::label).collect();
    let mut reports = Vec::with_capacity(plans.len());
    for plan in &plans {
        let mut rep = voltage_attack_experiment(&vcfg, plan, cfg.detector.eta, &strategy, &run)?;
        rep.cost.digest = digest.clone();
        reports.push(rep);
    }
    let n = vcfg.x0.len();

    let mut cols = vec!["plan".to_string(), "t".to_string()];
    cols.extend((1..=n).map(|k| format!("mean_x_{k}")));
    cols.extend((1..=n).map(|k| format!("std_err_x_{k}")));
    cols.extend((1..=n).map(|k| format!("mean_x_hat_{k}")));
    let mut curves = Csv::new(&digest, &cols);
    let mut freq = Csv::new(&digest, &header(&["plan", "t", "detection_freq"]));
    let mut summary = Csv::new(
        &digest,
        &header(&[
            "plan",
            "terminal_deviation",
            "std_err",
            "terminal_estimate_deviation",
            "final_cost",
            "final_cost_std_err",
        ]),
    );
    for (label, rep) in labels.iter().zip(&reports) {
        for t in 0..rep.mean_x.len() {
            let mut row = vec![label.to_string(), t.to_string()];
            row.extend(rep.mean_x[t].iter().map(|v| num(*v)));
            row.extend(rep.mean_x_std_err[t].iter().map(|v| num(*v)));
            row.extend(rep.mean_x_hat[t].iter().map(|v| num(*v)));
            curves.row(&row);
        }
        for (t, f) in rep.detection_freq.iter().enumerate() {
            freq.row(&[label.to_string(), (t + 1).to_string(), num(*f)]);
        }
        summary.row(&[
            label.to_string(),
            num(rep.terminal_deviation),
            num(rep.terminal_deviation_std_err),
            num(rep.terminal_estimate_deviation),
            num(rep.cost.final_cost()),
            num(rep.cost.final_std_err()),
        ]);
    }
    curves.save(&out_dir.join("voltage_curves.csv"))?;
    freq.save(&out_dir.join("detection_frequency.csv"))?;
    summary.save(&out_dir.join("voltage_summary.csv"))?;
    write_policy_table(artifact, &digest, &out_dir.join("policy_table.csv"))?;
    Ok(VoltageOutcome { labels, reports })
}

fn write_policy_table(artifact: &PolicyArtifact, digest: &str, path: &Path) -> Result<()> {
    let grid = artifact.grid.build()?;
    let p = &artifact.policy;
    let mut cols = vec!["stage".to_string(), "state".to_string()];
    cols.extend((1..=grid.dim()).map(|k| format!("e_{k}")));
    cols.extend((1..=p.action_dim).map(|k| format!("a_{k}")));
    cols.push("value".into());
    let mut csv = Csv::new(digest, &cols);
    for s in 1..=p.horizon {
        for i in 0..p.states {
            let mut row = vec![s.to_string(), i.to_string()];
            row.extend(grid.point(i).iter().map(|v| num(*v)));
            row.extend(p.action(s, i).iter().map(|v| num(*v)));
            row.push(num(p.value(s, i)));
            csv.row(&row);
        }
    }
    csv.save(path)
}

#[derive(Serialize)]
struct ModelFragment {
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    #[serde(rename = "Q")]
    q: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct Fragment {
    model: ModelFragment,
}

fn rows_of(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Estimates `B` from a trace file and writes a `[model]` config fragment
/// with `B` and the residual covariance as `Q`.
pub fn cmd_estimate_b(traces: &Path, out_dir: &Path) -> Result<(BEstimate, PathBuf)> {
    let set = load_traces(traces)?;
    let est = estimate_b(&set)?;
    let fragment = Fragment {
        model: ModelFragment {
            b: rows_of(&est.b),
            q: rows_of(&est.residual_cov),
        },
    };
    let body = toml::to_string(&fragment).map_err(|e| Error::Config(e.to_string()))?;
    let text = format!(
        "# estimated from {} ({} transitions)\n{body}",
        traces.display(),
        est.samples
    );
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join("b_estimate.toml");
    std::fs::write(&path, text)?;
    Ok((est, path))
}
