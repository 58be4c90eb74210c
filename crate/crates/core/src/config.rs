//! Benchmark configuration files (TOML, versioned, unknown keys rejected).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{AttackConfig, AttackLoss};
use crate::data::Split;
use crate::error::{ensure, Error, Result};
use crate::metrics::TieRule;
use crate::schedules::{parse_eps, EpsPhases, QSchedule};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRef {
    pub name: String,
    /// Directory holding `train/`, `val/` and `test/`.
    pub root: PathBuf,
    /// Use at most this many images per split.
    #[serde(default)]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VictimRef {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub name: String,
    pub loss: String,
    #[serde(default)]
    pub q_schedule: Option<String>,
}

impl AttackSpec {
    pub fn attack_loss(&self) -> Result<AttackLoss> {
        AttackLoss::from_parts(&self.loss, self.q_schedule.as_deref())
            .map_err(|e| Error::Config(format!("attack {:?}: {e}", self.name)))
    }
}

/// Attacks aggregated by per-image worst case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeaGroup {
    pub name: String,
    pub attacks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub schema_version: u32,
    pub dataset: DatasetRef,
    pub victims: Vec<VictimRef>,
    /// Radii as `N/255` or decimals.
    pub eps: Vec<String>,
    pub iters: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    /// `m@f,...`; defaults to the three-phase schedule.
    #[serde(default)]
    pub phases: Option<String>,
    #[serde(default)]
    pub tie_rule: TieRule,
    #[serde(default = "default_split")]
    pub split: Split,
    pub attacks: Vec<AttackSpec>,
    #[serde(default)]
    pub sea: Vec<SeaGroup>,
    /// Candidate q schedules for schedule selection.
    #[serde(default)]
    pub candidates: Vec<String>,
    pub output_dir: PathBuf,
}

fn default_restarts() -> usize {
    1
}

fn default_split() -> Split {
    Split::Test
}

impl BenchConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: BenchConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.dataset.root);
        resolve(&mut cfg.output_dir);
        for v in &mut cfg.victims {
            resolve(&mut v.path);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.schema_version == SCHEMA_VERSION,
            Config,
            "schema_version {} is not supported (expected {SCHEMA_VERSION})",
            self.schema_version
        );
        ensure!(!self.victims.is_empty(), Config, "no victims configured");
        ensure!(!self.eps.is_empty(), Config, "no eps values configured");
        ensure!(!self.attacks.is_empty(), Config, "no attacks configured");
        ensure!(self.iters >= 1, Config, "iters must be >= 1");
        ensure!(self.restarts >= 1, Config, "restarts must be >= 1");
        if let Some(l) = self.dataset.limit {
            ensure!(l >= 1, Config, "dataset.limit must be >= 1");
        }
        self.eps_values()?;
        self.eps_phases()?;
        unique("victim", self.victims.iter().map(|v| v.name.as_str()))?;
        unique("attack", self.attacks.iter().map(|a| a.name.as_str()))?;
        unique("sea group", self.sea.iter().map(|g| g.name.as_str()))?;
        for a in &self.attacks {
            a.attack_loss()?;
        }
        for g in &self.sea {
            ensure!(g.attacks.len() >= 2, Config, "sea group {:?} needs >= 2 attacks", g.name);
            for a in &g.attacks {
                ensure!(
                    self.attacks.iter().any(|x| &x.name == a),
                    Config,
                    "sea group {:?} names unknown attack {a:?}",
                    g.name
                );
            }
        }
        self.candidate_schedules()?;
        Ok(())
    }

    pub fn eps_values(&self) -> Result<Vec<f64>> {
        self.eps
            .iter()
            .map(|s| parse_eps(s).map_err(|e| Error::Config(format!("eps {s:?}: {e}"))))
            .collect()
    }

    pub fn eps_phases(&self) -> Result<EpsPhases> {
        match &self.phases {
            None => Ok(EpsPhases::default()),
            Some(s) => s.parse().map_err(|e| Error::Config(format!("phases {s:?}: {e}"))),
        }
    }

    pub fn candidate_schedules(&self) -> Result<Vec<QSchedule>> {
        self.candidates
            .iter()
            .map(|s| {
                s.parse::<QSchedule>()
                    .map_err(|e| Error::Config(format!("candidate {s:?}: {e}")))
            })
            .collect()
    }

    /// Attack configuration for one attack at radius `eps`.
    pub fn attack_config(&self, loss: AttackLoss, eps: f64) -> Result<AttackConfig> {
        Ok(AttackConfig {
            loss,
            eps,
            iters: self.iters,
            phases: self.eps_phases()?,
            seed: self.seed,
            restarts: self.restarts,
        })
    }
}

fn unique<'a>(what: &str, names: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = BTreeSet::new();
    for n in names {
        ensure!(!n.is_empty(), Config, "{what} name is empty");
        ensure!(seen.insert(n), Config, "duplicate {what} name {n:?}");
    }
    Ok(())
}
