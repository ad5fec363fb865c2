use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::controller::ControllerConfig;
use crate::fdka::FdkaConfig;
use crate::governance::GovernanceConfig;
use crate::planner::PlannerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Flags {
    pub fdka: bool,
    pub verify: bool,
    pub arbitration: bool,
    pub guardrails_value: bool,
    pub guardrails_causal: bool,
    pub canary: bool,
    pub rollback: bool,
    pub ledger: bool,
}

impl Default for Flags {
    fn default() -> Self {
        Self {
            fdka: true,
            verify: true,
            arbitration: true,
            guardrails_value: true,
            guardrails_causal: true,
            canary: true,
            rollback: true,
            ledger: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Baseline {
    #[default]
    Full,
    StaticNs,
    VerifyOnly,
    Retry,
    ReflectMemory,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProposerKind {
    #[default]
    Mock,
    Remote {
        endpoint: String,
        model: String,
        /// Environment variable holding the bearer token.
        #[serde(default)]
        api_key_env: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub name: String,
    pub flags: Flags,
    pub baseline: Baseline,
    pub proposer: ProposerKind,
    pub controller: ControllerConfig,
    pub fdka: FdkaConfig,
    pub governance: GovernanceConfig,
    pub planner: PlannerConfig,
    pub verify_horizon: usize,
    /// Re-grounding attempts per failed step (retry baselines).
    pub retry_limit: usize,
    /// Note capacity for the reflect-memory baseline.
    pub memory: usize,
    /// Simulated cost of one FDKA invocation, fed to the budget regulariser.
    pub fdka_cost: f64,
    pub max_iterations: usize,
    pub max_fdka_per_task: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            name: "full".into(),
            flags: Flags::default(),
            baseline: Baseline::Full,
            proposer: ProposerKind::Mock,
            controller: ControllerConfig::default(),
            fdka: FdkaConfig::default(),
            governance: GovernanceConfig::default(),
            planner: PlannerConfig::default(),
            verify_horizon: 3,
            retry_limit: 2,
            memory: 20,
            fdka_cost: 0.5,
            max_iterations: 64,
            max_fdka_per_task: 3,
        }
    }
}

pub const NAMED_CONFIGS: &[&str] = &[
    "full",
    "no-governance",
    "governance-off",
    "no-fdka",
    "no-verify",
    "no-arbitration",
    "static-ns",
    "verify-only",
    "retry",
    "reflect-memory",
];

impl AgentConfig {
    pub fn named(name: &str) -> Result<Self, HarnessError> {
        let mut c = Self {
            name: name.to_string(),
            ..Self::default()
        };
        let f = &mut c.flags;
        match name {
            "full" => {}
            // Main ablation: guardrails off, canary and rollback kept.
            "no-governance" => {
                f.guardrails_value = false;
                f.guardrails_causal = false;
            }
            "governance-off" => {
                f.guardrails_value = false;
                f.guardrails_causal = false;
                f.canary = false;
                f.rollback = false;
                f.ledger = false;
            }
            "no-fdka" => f.fdka = false,
            "no-verify" => f.verify = false,
            "no-arbitration" => f.arbitration = false,
            "static-ns" => {
                c.baseline = Baseline::StaticNs;
                *f = Flags {
                    fdka: false,
                    verify: false,
                    arbitration: false,
                    ..Flags::default()
                };
            }
            "verify-only" => {
                c.baseline = Baseline::VerifyOnly;
                *f = Flags {
                    fdka: false,
                    arbitration: false,
                    ..Flags::default()
                };
            }
            "retry" | "reflect-memory" => {
                c.baseline = if name == "retry" {
                    Baseline::Retry
                } else {
                    Baseline::ReflectMemory
                };
                *f = Flags {
                    fdka: false,
                    verify: false,
                    arbitration: false,
                    ..Flags::default()
                };
            }
            other => return Err(HarnessError::UnknownConfig(other.to_string())),
        }
        Ok(c)
    }

    /// A named config, or a JSON file with any subset of fields.
    pub fn resolve(spec: &str) -> Result<Self, HarnessError> {
        let p = std::path::Path::new(spec);
        if p.is_file() {
            let text =
                std::fs::read_to_string(p).map_err(|e| HarnessError::Io(format!("{spec}: {e}")))?;
            let c: Self = serde_json::from_str(&text)
                .map_err(|e| HarnessError::Config(format!("{spec}: {e}")))?;
            c.validate()?;
            Ok(c)
        } else {
            Self::named(spec)
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.controller.validate().map_err(HarnessError::Config)?;
        if self.verify_horizon == 0 {
            return Err(HarnessError::Config(
                "verify_horizon must be positive".into(),
            ));
        }
        if self.max_iterations == 0 {
            return Err(HarnessError::Config(
                "max_iterations must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn retries(&self) -> bool {
        matches!(self.baseline, Baseline::Retry | Baseline::ReflectMemory)
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Baseline::Full => "FULL",
            Baseline::StaticNs => "STATIC_NS",
            Baseline::VerifyOnly => "VERIFY_ONLY",
            Baseline::Retry => "RETRY",
            Baseline::ReflectMemory => "REFLECT_MEMORY",
        })
    }
}

impl FromStr for AgentConfig {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::resolve(s)
    }
}
