//! Versioned JSON container for a solved policy.
//!
//! ```text
//! {
//!   "magic": "fdi-mdp-policy",
//!   "format_version": 1,
//!   "config_digest": "<sha256 hex of the solve inputs>",
//!   "grid": { "lower": [..], "upper": [..], "step": [..] },
//!   "actions": [[..], ..],          // candidate action grid
//!   "stage_convention": "stages_to_go",
//!   "policy": { "horizon", "states", "action_dim", "gamma",
//!               "actions": [..],    // stage-major, stage 1 first
//!               "values": [..] }
//! }
//! ```

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attack::PolicyHandle;
use crate::error::{Error, Result};
use crate::mdp::{Grid, Policy, StageConvention};

pub const MAGIC: &str = "fdi-mdp-policy";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub step: Vec<f64>,
}

impl GridSpec {
    pub fn of(grid: &Grid) -> Self {
        let (lower, upper) = grid.bounds().into_iter().unzip();
        Self {
            lower,
            upper,
            step: grid.step().to_vec(),
        }
    }

    pub fn build(&self) -> Result<Grid> {
        let bounds: Vec<(f64, f64)> = self.lower.iter().copied().zip(self.upper.iter().copied()).collect();
        Grid::build(&bounds, &self.step)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyArtifact {
    pub magic: String,
    pub format_version: u32,
    pub config_digest: String,
    pub grid: GridSpec,
    pub actions: Vec<Vec<f64>>,
    pub stage_convention: StageConvention,
    pub policy: Policy,
}

impl PolicyArtifact {
    pub fn new(
        digest: String,
        grid: &Grid,
        actions: Vec<Vec<f64>>,
        convention: StageConvention,
        policy: Policy,
    ) -> Self {
        Self {
            magic: MAGIC.to_string(),
            format_version: FORMAT_VERSION,
            config_digest: digest,
            grid: GridSpec::of(grid),
            actions,
            stage_convention: convention,
            policy,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let bad = |message: String| Error::Artifact {
            path: path.to_path_buf(),
            message,
        };
        let art: PolicyArtifact = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        if art.magic != MAGIC {
            return Err(bad(format!("not a policy artifact (magic `{}`)", art.magic)));
        }
        if art.format_version != FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                art.format_version
            )));
        }
        let grid = art.grid.build()?;
        let p = &art.policy;
        if p.states != grid.len()
            || p.actions.len() != p.horizon * p.states * p.action_dim
            || p.values.len() != p.horizon * p.states
        {
            return Err(bad("policy tables do not match the grid".into()));
        }
        Ok(art)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Artifact {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_json(&text, path)
    }

    pub fn check_digest(&self, expected: &str) -> Result<()> {
        if self.config_digest != expected {
            return Err(Error::DigestMismatch {
                artifact: self.config_digest.clone(),
                config: expected.to_string(),
            });
        }
        Ok(())
    }

    pub fn handle(&self) -> Result<Arc<PolicyHandle>> {
        Ok(Arc::new(PolicyHandle {
            policy: self.policy.clone(),
            grid: self.grid.build()?,
            convention: self.stage_convention,
        }))
    }
}
