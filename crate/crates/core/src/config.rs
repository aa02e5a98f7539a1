//! Run configuration: a TOML file with one section per concern. Every
//! field has a default (the scalar benchmark) and unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::DEFAULT_A_MAX;
use crate::defense::MitigationStrategy;
use crate::error::{Error, Result};
use crate::lti::SystemModel;
use crate::mdp::{DeltaRule, ProbabilityMethod, StageConvention};
use crate::voltage::VoltageConfig;

pub const BENCHMARK_PRESET: &str = include_str!("../presets/benchmark.toml");
pub const VOLTAGE_PRESET: &str = include_str!("../presets/voltage.toml");

pub fn preset_names() -> &'static [&'static str] {
    &["benchmark", "voltage"]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    pub c: Vec<Vec<f64>>,
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    #[serde(rename = "R")]
    pub r: Vec<Vec<f64>>,
    #[serde(rename = "X0")]
    pub x0_cov: Vec<Vec<f64>>,
    /// Initial state estimate `x̂[0]`.
    pub x_hat0: Vec<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            a: vec![vec![1.0]],
            b: vec![vec![1.0]],
            c: vec![vec![1.0]],
            q: vec![vec![1.0]],
            r: vec![vec![10.0]],
            x0_cov: vec![vec![0.0]],
            x_hat0: vec![0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSection {
    pub eta: f64,
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self { eta: 10.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MitigationKind {
    Perfect,
    Noisy,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MitigationSection {
    pub kind: MitigationKind,
    pub sigma_mit: f64,
}

impl Default for MitigationSection {
    fn default() -> Self {
        Self {
            kind: MitigationKind::Perfect,
            sigma_mit: 15.0,
        }
    }
}

impl MitigationSection {
    pub fn strategy(&self) -> Result<MitigationStrategy> {
        match self.kind {
            MitigationKind::Perfect => Ok(MitigationStrategy::Perfect),
            MitigationKind::Noisy => MitigationStrategy::noisy(self.sigma_mit),
            MitigationKind::Off => Ok(MitigationStrategy::Off),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub a_max: f64,
    /// Injection of the constant baseline.
    pub constant: Vec<f64>,
    /// Slope of the ramp baseline.
    pub ramp_slope: Vec<f64>,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            a_max: DEFAULT_A_MAX,
            constant: vec![10.0],
            ramp_slope: vec![1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MdpSection {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub step: Vec<f64>,
    /// Action-grid points per channel (odd).
    pub actions: usize,
    pub refine: bool,
    pub refine_rounds: usize,
    pub horizon: usize,
    pub gamma: f64,
    pub stage_convention: StageConvention,
    /// Mitigation the attacker assumes while planning.
    pub delta: DeltaRule,
    pub method: ProbabilityMethod,
    pub samples: usize,
    pub sampling_seed: u64,
}

impl Default for MdpSection {
    fn default() -> Self {
        Self {
            lower: vec![-30.0],
            upper: vec![30.0],
            step: vec![0.25],
            actions: 81,
            refine: false,
            refine_rounds: 4,
            horizon: 10,
            gamma: 1.0,
            stage_convention: StageConvention::StagesToGo,
            delta: DeltaRule::Perfect,
            method: ProbabilityMethod::Auto,
            samples: 100_000,
            sampling_seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub runs: usize,
    pub seed: u64,
    pub horizon: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            runs: 10_000,
            seed: 1,
            horizon: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FpmdSection {
    pub etas: Vec<f64>,
    pub sigmas: Vec<f64>,
}

impl Default for FpmdSection {
    fn default() -> Self {
        Self {
            etas: vec![0.0, 1.0, 2.5, 5.0],
            sigmas: vec![0.0, 5.0, 10.0, 15.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VoltageSection {
    /// Setpoint per pilot bus (pu).
    pub x0: Vec<f64>,
    pub alpha: f64,
}

impl Default for VoltageSection {
    fn default() -> Self {
        Self {
            x0: vec![0.835],
            alpha: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub policy: Option<PathBuf>,
    pub traces: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub detector: DetectorSection,
    pub mitigation: MitigationSection,
    pub attack: AttackSection,
    pub mdp: MdpSection,
    pub eval: EvalSection,
    pub fpmd: FpmdSection,
    pub voltage: Option<VoltageSection>,
    pub paths: PathsSection,
}

/// The parts of the configuration a solved policy depends on.
#[derive(Serialize)]
struct SolveKey<'a> {
    model: &'a ModelSection,
    eta: f64,
    a_max: f64,
    mdp: &'a MdpSection,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn matrix(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 {
        return Err(Error::Config(format!("model.{name} must be a nonempty matrix")));
    }
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::Config(format!("model.{name} has ragged rows")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "benchmark" => Self::from_toml(BENCHMARK_PRESET),
            "voltage" => Self::from_toml(VOLTAGE_PRESET),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (available: {})",
                preset_names().join(", ")
            ))),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.system_model()?;
        if self.model.x_hat0.len() != model.n() {
            return Err(Error::Config(format!(
                "model.x_hat0 has {} entries, expected {}",
                self.model.x_hat0.len(),
                model.n()
            )));
        }
        if !(self.detector.eta >= 0.0) {
            return Err(Error::Config("detector.eta must be >= 0".into()));
        }
        self.mitigation.strategy()?;
        if !(self.attack.a_max > 0.0) {
            return Err(Error::Config("attack.a_max must be positive".into()));
        }
        for (name, v) in [
            ("attack.constant", &self.attack.constant),
            ("attack.ramp_slope", &self.attack.ramp_slope),
        ] {
            if v.len() != model.m() {
                return Err(Error::Config(format!(
                    "{name} has {} entries, expected {}",
                    v.len(),
                    model.m()
                )));
            }
        }
        let mdp = &self.mdp;
        let n = model.n();
        if mdp.lower.len() != n || mdp.upper.len() != n || mdp.step.len() != n {
            return Err(Error::Config(format!("mdp.lower/upper/step need {n} entries each")));
        }
        if mdp.actions == 0 || mdp.actions.is_multiple_of(2) {
            return Err(Error::Config("mdp.actions must be odd".into()));
        }
        if mdp.horizon == 0 || self.eval.horizon == 0 {
            return Err(Error::Config("horizons must be at least 1".into()));
        }
        if !(mdp.gamma > 0.0 && mdp.gamma <= 1.0) {
            return Err(Error::Config("mdp.gamma must lie in (0, 1]".into()));
        }
        if self.eval.runs == 0 {
            return Err(Error::Config("eval.runs must be at least 1".into()));
        }
        if self.fpmd.etas.iter().any(|e| !(*e >= 0.0)) || self.fpmd.sigmas.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Config("fpmd.etas and fpmd.sigmas must be >= 0".into()));
        }
        if let Some(v) = &self.voltage {
            self.voltage_config_for(v)?;
        }
        Ok(())
    }

    pub fn system_model(&self) -> Result<SystemModel> {
        let m = &self.model;
        SystemModel::new(
            matrix(&m.a, "A")?,
            matrix(&m.b, "B")?,
            matrix(&m.c, "C")?,
            matrix(&m.q, "Q")?,
            matrix(&m.r, "R")?,
            matrix(&m.x0_cov, "X0")?,
        )
    }

    pub fn x_hat0(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.model.x_hat0)
    }

    fn voltage_config_for(&self, v: &VoltageSection) -> Result<VoltageConfig> {
        let model = self.system_model()?;
        let n = model.n();
        let eye = DMatrix::<f64>::identity(n, n);
        if model.dynamics != eye || model.measurement != eye {
            return Err(Error::Config("voltage runs need A = I and C = I".into()));
        }
        if v.x0.len() != n {
            return Err(Error::Config(format!(
                "voltage.x0 has {} entries, expected {n}",
                v.x0.len()
            )));
        }
        Ok(VoltageConfig {
            x0: DVector::from_column_slice(&v.x0),
            start: self.x_hat0(),
            alpha: v.alpha,
            b: model.input,
            q: model.process_noise,
            r: model.measurement_noise,
        })
    }

    pub fn voltage_config(&self) -> Result<VoltageConfig> {
        let v = self
            .voltage
            .as_ref()
            .ok_or_else(|| Error::Config("missing [voltage] section".into()))?;
        self.voltage_config_for(v)
    }

    /// Digest of everything a solved policy depends on.
    pub fn solve_digest(&self) -> String {
        let key = SolveKey {
            model: &self.model,
            eta: self.detector.eta,
            a_max: self.attack.a_max,
            mdp: &self.mdp,
        };
        sha256_hex(&serde_json::to_vec(&key).expect("config serializes"))
    }

    /// Digest of the complete configuration.
    /// Hash of everything that affects results. Output and input paths
    /// are left out.
    pub fn digest(&self) -> String {
        let mut cfg = self.clone();
        cfg.paths = PathsSection::default();
        sha256_hex(&serde_json::to_vec(&cfg).expect("config serializes"))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.paths.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn policy_path(&self) -> PathBuf {
        self.paths
            .policy
            .clone()
            .unwrap_or_else(|| self.out_dir().join("policy.json"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse() {
        let b = RunConfig::preset("benchmark").unwrap();
        assert_eq!(b, RunConfig::default());
        let v = RunConfig::preset("voltage").unwrap();
        assert_eq!(v.detector.eta, 5.0);
        assert_eq!(v.mdp.horizon, 30);
        assert_eq!(v.voltage_config().unwrap().x0[0], 0.835);
        assert!(RunConfig::preset("nope").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[detector]\neta = 1.0\netta = 2.0\n").is_err());
        assert!(RunConfig::from_toml("[detektor]\neta = 1.0\n").is_err());
        assert_eq!(
            RunConfig::from_toml("[detector]\neta = 2.5\n").unwrap().detector.eta,
            2.5
        );
    }

    #[test]
    fn digests_track_solve_inputs() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.eval.runs = 5;
        assert_eq!(a.solve_digest(), b.solve_digest());
        assert_ne!(a.digest(), b.digest());
        b.detector.eta = 3.0;
        assert_ne!(a.solve_digest(), b.solve_digest());
        assert_eq!(a.solve_digest().len(), 64);

        let mut c = a.clone();
        c.paths.out = Some(PathBuf::from("elsewhere"));
        assert_eq!(a.digest(), c.digest());
    }

    #[test]
    fn round_trips_through_toml() {
        let v = RunConfig::preset("voltage").unwrap();
        assert_eq!(RunConfig::from_toml(&v.to_toml().unwrap()).unwrap(), v);
    }

    #[test]
    fn rejects_inconsistent_sections() {
        assert!(RunConfig::from_toml("[mdp]\nactions = 4\n").is_err());
        assert!(RunConfig::from_toml("[attack]\nconstant = [1.0, 2.0]\n").is_err());
        assert!(RunConfig::from_toml("[model]\nA = [[1.0, 0.0]]\n").is_err());
        assert!(RunConfig::from_toml("[voltage]\nx0 = [1.0]\n[model]\nA = [[0.5]]\n").is_err());
    }
}
