use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use gazesynth::estimator::{ArchitectureSpec, FeatureMode};
use gazesynth::preprocess::PreprocessConfig;
use gazesynth::protocol::ExperimentConfig;
use gazesynth::scene::{ProfileConfig, ProfileId, SessionSchedule};
use serde::{Deserialize, Serialize};

use crate::error::{Classify, CliResult};

/// Everything a workbench invocation can be configured with.
///
/// Missing keys take the desk defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkbenchConfig {
    pub profile_u: ProfileConfig,
    pub profile_i: ProfileConfig,
    pub users_u: usize,
    pub users_i: usize,
    /// Seed of cohort generation.
    pub master_seed: u64,
    pub preprocess: PreprocessConfig,
    pub feature_mode: FeatureMode,
    pub experiment: ExperimentConfig,
    /// Training seeds used by `run` when `--seeds` is absent.
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for WorkbenchConfig {
    /// Desk cohort: 10 profile-U users over 5 poses and 6 profile-I users.
    fn default() -> Self {
        let mut profile_u = ProfileConfig::profile_u();
        profile_u.sessions = SessionSchedule::AllPoses { limit: Some(5) };
        Self {
            profile_u,
            profile_i: ProfileConfig::profile_i(),
            users_u: 10,
            users_i: 6,
            master_seed: 1,
            preprocess: PreprocessConfig::default(),
            feature_mode: FeatureMode::Image,
            experiment: ExperimentConfig::desk(),
            seeds: vec![1, 2, 3, 4, 5],
            output_dir: PathBuf::from("gazesynth-out"),
        }
    }
}

impl WorkbenchConfig {
    /// Reads and validates a config file; every failure is a usage error.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display())).usage_err()?;
        let config: Self =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display())).usage_err()?;
        config.validate().with_context(|| format!("invalid config {}", path.display())).usage_err()?;
        Ok(config)
    }

    pub fn profile(&self, id: ProfileId) -> &ProfileConfig {
        match id {
            ProfileId::U => &self.profile_u,
            ProfileId::I => &self.profile_i,
        }
    }

    pub fn users(&self, id: ProfileId) -> usize {
        match id {
            ProfileId::U => self.users_u,
            ProfileId::I => self.users_i,
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        for id in [ProfileId::U, ProfileId::I] {
            let profile = self.profile(id);
            ensure!(profile.id == id, "profile_{} block declares id {}", id.to_string().to_lowercase(), profile.id);
            profile.validate().with_context(|| format!("profile {id}"))?;
            ensure!(self.users(id) >= 2, "profile {id} needs at least 2 users for leave-one-out, got {}", self.users(id));
        }
        self.preprocess.validate()?;
        self.experiment.validate()?;
        let expected = ArchitectureSpec::for_mode(self.feature_mode).input;
        if self.experiment.architecture.input != expected {
            bail!(
                "architecture input {:?} does not match {:?} features {:?}",
                self.experiment.architecture.input,
                self.feature_mode,
                expected
            );
        }
        ensure!(!self.seeds.is_empty(), "seeds must not be empty");
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let c = WorkbenchConfig::default();
        c.validate().unwrap();
        let text = serde_json::to_string_pretty(&c).unwrap();
        let back: WorkbenchConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_configs_fill_defaults_and_unknown_keys_fail() {
        let c: WorkbenchConfig = serde_json::from_str(r#"{"users_i": 3, "seeds": [9]}"#).unwrap();
        assert_eq!((c.users_i, c.seeds.clone(), c.users_u), (3, vec![9], 10));
        assert!(serde_json::from_str::<WorkbenchConfig>(r#"{"user_i": 3}"#).is_err());
        assert!(serde_json::from_str::<WorkbenchConfig>(r#"{"preprocess": {"crop_factor": 1.5, "x": 1}}"#).is_err());
    }

    #[test]
    fn validation_catches_cross_module_errors() {
        let mut c = WorkbenchConfig { users_i: 1, ..WorkbenchConfig::default() };
        assert!(c.validate().is_err());
        c.users_i = 6;
        c.feature_mode = FeatureMode::Landmarks;
        assert!(c.validate().is_err());
        c.experiment.architecture = ArchitectureSpec::landmark_default();
        c.validate().unwrap();
        c.profile_u.id = ProfileId::I;
        assert!(c.validate().is_err());
    }
}
