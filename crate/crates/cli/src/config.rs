//! Run configuration in TOML.
//!
//! Component seeds in the file are ignored: [`RunConfig::plan`] derives all
//! of them from the single top-level `seed`, and the snapshot written next to
//! every artifact is that effective plan.

use std::path::{Path, PathBuf};

use diffalign_core::alignment::AlignConfig;
use diffalign_core::critic::CriticConfig;
use diffalign_core::envs2d::Bandit2dSpec;
use diffalign_core::pretrain::TrainConfig;
use diffalign_core::sampler::SamplerConfig;
use diffalign_core::{DiffusionSchedule, Error, FieldConfig, Result};
use serde::{Deserialize, Serialize};

/// Environment variable that overrides `output_dir`.
pub const OUT_ENV: &str = "DIFFALIGN_OUT";
pub const SNAPSHOT: &str = "config.snapshot";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QSourceKind {
    /// The task's reconstructed Q-field.
    Analytic,
    /// An expectile critic fitted to noisy rewards.
    Expectile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotateConfig {
    /// Number of alignment records (states) to draw.
    pub records: usize,
    pub q_source: QSourceKind,
    pub tau: f64,
    /// Standard deviation of the reward noise seen by the critic.
    pub reward_noise: f64,
}

impl Default for AnnotateConfig {
    fn default() -> Self {
        Self {
            records: 10_000,
            q_source: QSourceKind::Analytic,
            tau: 0.7,
            reward_noise: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Behavior dataset CSV; generated from `task` when absent.
    pub dataset: Option<PathBuf>,
    pub task: Bandit2dSpec,
    pub schedule: DiffusionSchedule,
    pub field: FieldConfig,
    pub pretrain: TrainConfig,
    pub annotate: AnnotateConfig,
    pub critic: CriticConfig,
    pub align: AlignConfig,
    pub sampler: SamplerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            dataset: None,
            task: Bandit2dSpec::default(),
            schedule: DiffusionSchedule::default(),
            field: FieldConfig::default(),
            pretrain: TrainConfig::default(),
            annotate: AnnotateConfig::default(),
            critic: CriticConfig::default(),
            align: AlignConfig::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// The effective configuration: every component seed set from `seed`.
    pub fn plan(&self) -> Result<Self> {
        let mut p = self.clone();
        p.task.seed = self.seed;
        p.pretrain.seed = self.seed;
        p.critic.seed = self.seed;
        p.align.seed = self.seed;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.schedule.validate()?;
        self.pretrain.validate()?;
        self.critic.validate()?;
        self.align.validate()?;
        self.sampler.validate()?;
        if self.annotate.records == 0 {
            return Err(Error::Config("annotate.records must be >= 1".into()));
        }
        if !(self.annotate.tau > 0.0 && self.annotate.tau < 1.0) {
            return Err(Error::Config(format!("annotate.tau must lie in (0, 1), got {}", self.annotate.tau)));
        }
        if self.dataset.is_none() && (self.field.action_dim != 2 || self.field.state_dim != 0) {
            return Err(Error::Config(
                "generated 2D tasks need field.action_dim = 2 and field.state_dim = 0".into(),
            ));
        }
        Ok(())
    }

    /// `--out` beats the environment override, which beats the file.
    pub fn output_dir(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        match std::env::var_os(OUT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn snapshot_reloads_to_the_same_plan() {
        let cfg = RunConfig::from_toml(
            "seed = 9\n[task]\ndistribution = \"moons\"\nseed = 3\n[align]\nbeta = 0.5\n",
        )
        .unwrap();
        let plan = cfg.plan().unwrap();
        assert_eq!(plan.task.seed, 9);
        assert_eq!(plan.align.beta, 0.5);
        let again = RunConfig::from_toml(&plan.to_toml()).unwrap().plan().unwrap();
        assert_eq!(again, plan);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        assert!(matches!(RunConfig::from_toml("sed = 1"), Err(Error::Config(_))));
        let cfg = RunConfig::from_toml("[align]\nmode = \"dpo\"\nk = 16\n").unwrap();
        assert!(matches!(cfg.plan(), Err(Error::Config(_))));
    }

    #[test]
    fn q_field_is_configurable() {
        let cfg = RunConfig::from_toml("[task.q_field]\ntype = \"linear\"\nw = [0.0, 1.0]\n").unwrap();
        let q = cfg.task.q_field();
        assert_eq!(q.eval([2.0, 3.0]), 3.0);
    }
}
