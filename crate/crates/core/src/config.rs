//! Run configuration documents.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numfmt::read_json;
use crate::optim::ObjectiveConfig;
use crate::params::{ParameterBox, ParameterSet};
use crate::phantom::{PhantomConfig, TargetMode};

pub const CONFIG_VERSION: &str = "tumour-rom-run/1";

/// Environment variable read when neither the config nor the command line
/// sets a thread count.
pub const THREADS_ENV: &str = "TUMOUR_ROM_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Forward,
    PodReport,
    RomFidelity,
    SensitivityCheck,
    Optimize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseSource {
    Phantom(PhantomConfig),
    Path(PathBuf),
}

/// Thresholds for the check commands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckConfig {
    /// Relative FD step for sensitivities, times `P_m`.
    pub fd_step: f64,
    pub sensitivity_tol: f64,
    /// Largest admissible relative ROM error at the first threshold.
    pub fidelity_tol: f64,
    /// POD thresholds compared by `rom-fidelity`.
    pub fidelity_ic: [f64; 2],
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            fd_step: 1e-4,
            sensitivity_tol: 1e-2,
            fidelity_tol: 5e-2,
            fidelity_ic: [0.9999, 0.999],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: String,
    pub command: Command,
    pub case: CaseSource,
    /// Target for `optimize`; synthetic at the box's expected values when
    /// absent and the case carries none.
    pub target: Option<TargetMode>,
    /// Parameters of forward runs and the optimizer's starting point.
    pub p0: ParameterSet,
    #[serde(rename = "box")]
    pub p_box: ParameterBox,
    pub objective: ObjectiveConfig,
    pub checks: CheckConfig,
    pub output: PathBuf,
    /// Overrides the phantom's RNG seed.
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION.into(),
            command: Command::Optimize,
            case: CaseSource::Phantom(PhantomConfig::default()),
            target: None,
            p0: ParameterSet::initial_guess(),
            p_box: ParameterBox::biological(),
            objective: ObjectiveConfig::default(),
            checks: CheckConfig::default(),
            output: PathBuf::from("out"),
            seed: None,
            threads: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Schema(format!(
                "config version {:?}, expected {CONFIG_VERSION:?}",
                self.version
            )));
        }
        self.p0.validate()?;
        self.p_box.validate()?;
        self.objective.validate()?;
        let c = &self.checks;
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{name} = {v} must be positive")))
            }
        };
        positive("checks.fd_step", c.fd_step)?;
        positive("checks.sensitivity_tol", c.sensitivity_tol)?;
        positive("checks.fidelity_tol", c.fidelity_tol)?;
        for ic in c.fidelity_ic {
            if !(ic > 0.0 && ic <= 1.0) {
                return Err(Error::InvalidConfig(format!("fidelity ic {ic} outside (0, 1]")));
            }
        }
        if self.threads == Some(0) {
            return Err(Error::InvalidConfig("threads must be >= 1".into()));
        }
        Ok(())
    }

    /// Thread count: config, then environment, then rayon's default.
    pub fn thread_count(&self) -> Result<Option<usize>> {
        if let Some(n) = self.threads {
            return Ok(Some(n));
        }
        match std::env::var(THREADS_ENV) {
            Ok(v) => v
                .trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .map(Some)
                .ok_or_else(|| Error::InvalidConfig(format!("{THREADS_ENV}={v:?} is not a positive integer"))),
            Err(_) => Ok(None),
        }
    }
}
