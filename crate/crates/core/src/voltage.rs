//! Pilot-bus voltage regulation: `A = I`, `C = I`, setpoint control and
//! least-squares identification of the control matrix from traces.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::attack::AttackPlan;
use crate::defense::{Detector, DetectorConfig, MitigationStrategy};
use crate::error::{Error, Result};
use crate::evaluation::{cost_from_sums, detection_frequency, map_rollouts, CostReport, LoopSetup, RunSettings};
use crate::lti::{derive_steady_state, Controller, SystemModel};
use crate::numerics::gaussian::{standard_normals, GaussianSampler, GaussianSpec};
use crate::numerics::RngStream;

/// One sample of bus voltages `x[t]` and input increments `u[t]` (pu).
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub t: u64,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    pub records: Vec<TraceRecord>,
}

impl TraceSet {
    pub fn new(records: Vec<TraceRecord>) -> Result<Self> {
        let Some(first) = records.first() else {
            return Err(Error::Empty("trace records"));
        };
        let (n, p) = (first.x.len(), first.u.len());
        if n == 0 || p == 0 {
            return Err(Error::InvalidArgument(
                "traces need at least one state and one input column".into(),
            ));
        }
        for r in &records {
            if r.x.len() != n {
                return Err(Error::dim("trace state width", n, r.x.len()));
            }
            if r.u.len() != p {
                return Err(Error::dim("trace input width", p, r.u.len()));
            }
        }
        Ok(Self { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.records[0].x.len()
    }

    pub fn input_dim(&self) -> usize {
        self.records[0].u.len()
    }
}

fn parse_header(fields: &csv::StringRecord, path: &str) -> Result<(usize, usize)> {
    let bad = |message: String| Error::Parse {
        path: path.to_string(),
        line: 1,
        message,
    };
    let names: Vec<&str> = fields.iter().map(str::trim).collect();
    if names.first() != Some(&"t") {
        return Err(bad("first column must be `t`".into()));
    }
    let n = names[1..].iter().take_while(|c| c.starts_with("x_")).count();
    let p = names.len() - 1 - n;
    if n == 0 || p == 0 {
        return Err(bad("header must be t,x_1..x_n,u_1..u_p".into()));
    }
    for (k, name) in names[1..=n].iter().enumerate() {
        if *name != format!("x_{}", k + 1) {
            return Err(bad(format!("expected column x_{}, found `{name}`", k + 1)));
        }
    }
    for (k, name) in names[1 + n..].iter().enumerate() {
        if *name != format!("u_{}", k + 1) {
            return Err(bad(format!("expected column u_{}, found `{name}`", k + 1)));
        }
    }
    Ok((n, p))
}

/// Parses a trace CSV with header `t,x_1..x_n,u_1..u_p`.
pub fn read_traces<R: Read>(reader: R, path: &str) -> Result<TraceSet> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut rows = rdr.records();
    let header = match rows.next() {
        Some(h) => h?,
        None => {
            return Err(Error::Parse {
                path: path.to_string(),
                line: 1,
                message: "missing header".into(),
            })
        }
    };
    let (n, p) = parse_header(&header, path)?;
    let mut records = Vec::new();
    for row in rows {
        let row = row?;
        let line = row.position().map_or(0, |pos| pos.line());
        let err = |message: String| Error::Parse {
            path: path.to_string(),
            line,
            message,
        };
        if row.len() != 1 + n + p {
            return Err(err(format!("expected {} fields, found {}", 1 + n + p, row.len())));
        }
        let t: u64 = row[0]
            .trim()
            .parse()
            .map_err(|_| err(format!("bad time index `{}`", &row[0])))?;
        let mut vals = Vec::with_capacity(n + p);
        for (k, field) in row.iter().enumerate().skip(1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| err(format!("column {}: not a number `{field}`", k + 1)))?;
            if !v.is_finite() {
                return Err(err(format!("column {}: non-finite value", k + 1)));
            }
            vals.push(v);
        }
        records.push(TraceRecord {
            t,
            x: DVector::from_column_slice(&vals[..n]),
            u: DVector::from_column_slice(&vals[n..]),
        });
    }
    if records.is_empty() {
        return Err(Error::Empty("trace records"));
    }
    TraceSet::new(records)
}

pub fn load_traces(path: &Path) -> Result<TraceSet> {
    let file = std::fs::File::open(path)?;
    read_traces(std::io::BufReader::new(file), &path.display().to_string())
}

pub fn write_traces<W: Write>(traces: &TraceSet, mut out: W) -> Result<()> {
    let (n, p) = (traces.state_dim(), traces.input_dim());
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|k| format!("x_{k}")));
    header.extend((1..=p).map(|k| format!("u_{k}")));
    writeln!(out, "{}", header.join(","))?;
    for r in &traces.records {
        let mut fields = vec![r.t.to_string()];
        fields.extend(r.x.iter().chain(r.u.iter()).map(|v| format!("{v:e}")));
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

/// Traces from `x[t+1] = x[t] + B u[t] + w[t]` with white excitation
/// `u ~ N(0, u_std² I)` and `w ~ N(0, Q)`.
pub fn synthesize_traces(
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    u_std: f64,
    x_init: &DVector<f64>,
    samples: usize,
    stream: RngStream,
) -> Result<TraceSet> {
    let (n, p) = b.shape();
    if x_init.len() != n {
        return Err(Error::dim("initial voltage", n, x_init.len()));
    }
    if q.shape() != (n, n) {
        return Err(Error::dim(
            "trace noise covariance",
            format!("{n}x{n}"),
            format!("{}x{}", q.nrows(), q.ncols()),
        ));
    }
    let w = GaussianSampler::new(&GaussianSpec::zero_mean(q.clone())?);
    let mut rng = stream.rng();
    let mut x = x_init.clone();
    let mut records = Vec::with_capacity(samples);
    for t in 0..samples {
        let u = standard_normals(&mut rng, p) * u_std;
        let next = &x + b * &u + w.sample(&mut rng);
        records.push(TraceRecord { t: t as u64, x, u });
        x = next;
    }
    TraceSet::new(records)
}

/// Least-squares control matrix and the residual covariance, usable as
/// a process-noise estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct BEstimate {
    pub b: DMatrix<f64>,
    pub residual_cov: DMatrix<f64>,
    pub samples: usize,
}

/// Minimizes `Σ ‖(x[t+1] − x[t]) − B u[t]‖²`.
pub fn estimate_b(traces: &TraceSet) -> Result<BEstimate> {
    let (n, p) = (traces.state_dim(), traces.input_dim());
    let k = traces.len().saturating_sub(1);
    if k < p {
        return Err(Error::RankDeficient { rank: k, needed: p });
    }
    let mut u = DMatrix::zeros(k, p);
    let mut dx = DMatrix::zeros(k, n);
    for (i, pair) in traces.records.windows(2).enumerate() {
        u.row_mut(i).copy_from(&pair[0].u.transpose());
        dx.row_mut(i).copy_from(&(&pair[1].x - &pair[0].x).transpose());
    }
    let svd = u.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * 1e-10 * k.max(p) as f64;
    let rank = svd.singular_values.iter().filter(|s| **s > tol && **s > 0.0).count();
    if rank < p {
        return Err(Error::RankDeficient { rank, needed: p });
    }
    let bt = svd.solve(&dx, tol).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let resid = &dx - &u * &bt;
    let dof = (k - p).max(1) as f64;
    let residual_cov = resid.transpose() * &resid / dof;
    Ok(BEstimate {
        b: bt.transpose(),
        residual_cov,
        samples: k,
    })
}

/// Setpoint-regulated voltage loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltageConfig {
    pub x0: DVector<f64>,
    pub start: DVector<f64>,
    pub alpha: f64,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

pub fn build_voltage_model(cfg: &VoltageConfig) -> Result<(SystemModel, Controller)> {
    let n = cfg.x0.len();
    if cfg.start.len() != n {
        return Err(Error::dim("voltage start", n, cfg.start.len()));
    }
    let eye = DMatrix::identity(n, n);
    let model = SystemModel::new(
        eye.clone(),
        cfg.b.clone(),
        eye,
        cfg.q.clone(),
        cfg.r.clone(),
        DMatrix::zeros(n, n),
    )?;
    let controller = Controller::setpoint(&model, cfg.x0.clone(), cfg.alpha)?;
    Ok((model, controller))
}

/// The voltage loop starting with estimate `start`.
pub fn voltage_setup(cfg: &VoltageConfig) -> Result<LoopSetup> {
    let (model, controller) = build_voltage_model(cfg)?;
    let ss = derive_steady_state(&model)?;
    LoopSetup::new(model, ss, controller, cfg.start.clone())
}

/// Averages over runs of one attack plan on the voltage loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltageReport {
    pub cost: CostReport,
    /// Mean true voltage per bus for `t = 0..=T`.
    pub mean_x: Vec<Vec<f64>>,
    pub mean_x_std_err: Vec<Vec<f64>>,
    pub mean_x_hat: Vec<Vec<f64>>,
    /// Alarm fraction for `t = 1..=T`.
    pub detection_freq: Vec<f64>,
    /// Mean `‖x[T] − x0‖` and its standard error.
    pub terminal_deviation: f64,
    pub terminal_deviation_std_err: f64,
    /// Mean `‖x̂[T] − x0‖`.
    pub terminal_estimate_deviation: f64,
}

struct RunSummary {
    sums: Vec<f64>,
    x: Vec<DVector<f64>>,
    x_hat: Vec<DVector<f64>>,
    alarm: Vec<bool>,
}

pub fn voltage_attack_experiment(
    cfg: &VoltageConfig,
    plan: &AttackPlan,
    eta: f64,
    strategy: &MitigationStrategy,
    settings: &RunSettings,
) -> Result<VoltageReport> {
    let setup = voltage_setup(cfg)?;
    let detector = Detector::ChiSquare(DetectorConfig::new(eta)?);
    let runs = map_rollouts(&setup, plan, &detector, strategy, settings, |tr| RunSummary {
        sums: tr.cumulative_error(),
        x: tr.x.clone(),
        x_hat: tr.x_hat,
        alarm: tr.alarm,
    })?;
    let sums: Vec<Vec<f64>> = runs.iter().map(|r| r.sums.clone()).collect();
    let cost = cost_from_sums(&sums)?;
    let w = runs.len() as f64;
    let steps = settings.horizon + 1;
    let n = cfg.x0.len();
    let mut mean_x = vec![vec![0.0; n]; steps];
    let mut mean_x_hat = vec![vec![0.0; n]; steps];
    for r in &runs {
        for t in 0..steps {
            for k in 0..n {
                mean_x[t][k] += r.x[t][k] / w;
                mean_x_hat[t][k] += r.x_hat[t][k] / w;
            }
        }
    }
    let mut mean_x_std_err = vec![vec![0.0; n]; steps];
    if runs.len() > 1 {
        for t in 0..steps {
            for k in 0..n {
                let ss: f64 = runs.iter().map(|r| (r.x[t][k] - mean_x[t][k]).powi(2)).sum();
                mean_x_std_err[t][k] = (ss / (w - 1.0) / w).sqrt();
            }
        }
    }
    let last = settings.horizon;
    let devs: Vec<f64> = runs.iter().map(|r| (&r.x[last] - &cfg.x0).norm()).collect();
    let terminal_deviation = devs.iter().sum::<f64>() / w;
    let terminal_deviation_std_err = if runs.len() > 1 {
        (devs.iter().map(|d| (d - terminal_deviation).powi(2)).sum::<f64>() / (w - 1.0) / w).sqrt()
    } else {
        0.0
    };
    let terminal_estimate_deviation = runs.iter().map(|r| (&r.x_hat[last] - &cfg.x0).norm()).sum::<f64>() / w;
    let alarms: Vec<Vec<bool>> = runs.into_iter().map(|r| r.alarm).collect();
    Ok(VoltageReport {
        cost,
        mean_x,
        mean_x_std_err,
        mean_x_hat,
        detection_freq: detection_frequency(&alarms),
        terminal_deviation,
        terminal_deviation_std_err,
        terminal_estimate_deviation,
    })
}

/// Least-squares slope of `y` against its index.
pub fn trend_slope(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    if y.len() < 2 {
        return 0.0;
    }
    let mx = (n - 1.0) / 2.0;
    let my = y.iter().sum::<f64>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, v) in y.iter().enumerate() {
        let dx = i as f64 - mx;
        num += dx * (v - my);
        den += dx * dx;
    }
    num / den
}
