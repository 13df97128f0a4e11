use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::{AgentConfig, AgentKind, ExplorationMode};
use crate::envs::EnvName;
use crate::error::{Error, Result};

/// Full description of one training run.
///
/// Stored as a flat TOML document; every key is optional and falls back to
/// the default below. See `configs/` at the repository root for examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env_name: EnvName,
    pub agent_name: AgentKind,
    pub exploration_mode: ExplorationMode,
    pub seed: u64,
    pub total_steps: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,

    pub gamma: f64,
    pub tau: f64,
    pub policy_delay: usize,
    pub batch_size: usize,
    pub beta: f64,
    pub gaussian_sigma: f64,
    pub ou_theta: f64,
    pub ou_sigma: f64,
    pub target_noise_sigma: f64,
    pub target_noise_clip: f64,
    pub warmup_steps: usize,
    pub learning_rate: f64,
    pub hidden_sizes: Vec<usize>,

    pub replay_capacity: usize,
    pub mc_capacity: usize,

    pub ensemble_size: usize,
    pub ensemble_hidden_sizes: Vec<usize>,
    pub ensemble_learning_rate: f64,
    /// `N`, the number of recent action gradients behind `ζ`.
    pub scaling_window: usize,
    pub epsilon_samples: usize,

    /// Q-value probe cadence in environment steps; 0 disables probing.
    pub q_probe_interval: usize,
    pub q_probe_batch: usize,
    /// Write one `(t, ζ, a_e)` row per guided step.
    pub trace_correction: bool,
    /// Record elapsed seconds in metric rows. Off by default so that metric
    /// files are byte-identical across reruns.
    pub log_wall_time: bool,
    pub save_snapshots: bool,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let agent = AgentConfig::default();
        Self {
            env_name: EnvName::PointMass,
            agent_name: AgentKind::Td3,
            exploration_mode: agent.exploration_mode,
            seed: 0,
            total_steps: 200_000,
            eval_interval: 2_000,
            eval_episodes: 10,
            gamma: agent.gamma,
            tau: agent.tau,
            policy_delay: agent.policy_delay,
            batch_size: agent.batch_size,
            beta: agent.beta,
            gaussian_sigma: agent.gaussian_sigma,
            ou_theta: agent.ou_theta,
            ou_sigma: agent.ou_sigma,
            target_noise_sigma: agent.target_noise_sigma,
            target_noise_clip: agent.target_noise_clip,
            warmup_steps: agent.warmup_steps,
            learning_rate: agent.learning_rate,
            hidden_sizes: agent.hidden_sizes,
            replay_capacity: 1_000_000,
            mc_capacity: 100_000,
            ensemble_size: 3,
            ensemble_hidden_sizes: vec![256, 256],
            ensemble_learning_rate: 3e-4,
            scaling_window: 1000,
            epsilon_samples: 1_000_000,
            q_probe_interval: 0,
            q_probe_batch: 256,
            trace_correction: false,
            log_wall_time: false,
            save_snapshots: true,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            gamma: self.gamma,
            tau: self.tau,
            policy_delay: self.policy_delay,
            batch_size: self.batch_size,
            beta: self.beta,
            exploration_mode: self.exploration_mode,
            gaussian_sigma: self.gaussian_sigma,
            ou_theta: self.ou_theta,
            ou_sigma: self.ou_sigma,
            target_noise_sigma: self.target_noise_sigma,
            target_noise_clip: self.target_noise_clip,
            warmup_steps: self.warmup_steps,
            learning_rate: self.learning_rate,
            hidden_sizes: self.hidden_sizes.clone(),
        }
    }

    /// MOCCO always carries the ensemble; TD3 only when exploring with it.
    pub fn needs_controller(&self) -> bool {
        self.agent_name == AgentKind::Mocco || self.exploration_mode == ExplorationMode::Guided
    }

    pub fn validate(&self) -> Result<()> {
        self.agent_config().validate()?;
        if self.eval_interval == 0 {
            return Err(Error::Config("eval_interval must be positive".into()));
        }
        if self.eval_episodes == 0 {
            return Err(Error::Config("eval_episodes must be positive".into()));
        }
        if self.replay_capacity == 0 || self.mc_capacity == 0 {
            return Err(Error::Config("buffer capacities must be positive".into()));
        }
        if self.needs_controller() {
            if self.ensemble_size < 2 {
                return Err(Error::Config(format!(
                    "ensemble_size must be at least 2, got {}",
                    self.ensemble_size
                )));
            }
            if self.ensemble_hidden_sizes.is_empty() || self.ensemble_hidden_sizes.contains(&0) {
                return Err(Error::Config(
                    "ensemble_hidden_sizes must be non-empty and positive".into(),
                ));
            }
            if !(self.ensemble_learning_rate > 0.0 && self.ensemble_learning_rate.is_finite()) {
                return Err(Error::Config("ensemble_learning_rate must be positive".into()));
            }
            if self.scaling_window == 0 {
                return Err(Error::Config("scaling_window must be positive".into()));
            }
        }
        if self.q_probe_interval > 0 && self.q_probe_batch == 0 {
            return Err(Error::Config("q_probe_batch must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    /// Override one key from a command-line string. Values are read as TOML
    /// (`0.1`, `true`, `[64, 64]`); bare words become strings and
    /// comma-separated lists become arrays.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut table = toml::Table::try_from(&*self).expect("run config always serializes");
        if !table.contains_key(key) {
            return Err(Error::Config(format!("unknown config key '{key}'")));
        }
        let raw = value.trim();
        let literal = if raw.contains(',') && !raw.starts_with('[') {
            format!("[{raw}]")
        } else {
            raw.to_string()
        };
        let parsed = toml::from_str::<toml::Table>(&format!("v = {literal}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        // integers typed where floats are expected
        let parsed = match (table.get(key), parsed) {
            (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (_, v) => v,
        };
        table.insert(key.to_string(), parsed);
        *self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("bad value for '{key}': {}", e.message())))?;
        Ok(())
    }

    /// Apply `key=value` pairs in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, pairs: &[S]) -> Result<()> {
        for pair in pairs {
            let pair = pair.as_ref();
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{pair}' is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
        assert_eq!(c.ensemble_size, 3);
        assert_eq!(c.mc_capacity, 100_000);
        assert_eq!(c.scaling_window, 1000);
        assert_eq!(c.beta, 0.1);
        assert_eq!(c.batch_size, 256);
        assert_eq!(c.eval_episodes, 10);
        assert_eq!(c.eval_interval, 2000);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let c =
            RunConfig::from_toml_str("env_name = \"pendulum_swingup\"\nagent_name = \"mocco\"\nbeta = 0.5\n").unwrap();
        assert_eq!(c.env_name, EnvName::PendulumSwingup);
        assert_eq!(c.agent_name, AgentKind::Mocco);
        assert_eq!(c.beta, 0.5);
        assert_eq!(c.gamma, 0.99);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml_str("learning_rat = 0.1").is_err());
        let mut c = RunConfig::default();
        assert!(c.set("nope", "1").is_err());
    }

    #[test]
    fn overrides() {
        let mut c = RunConfig::default();
        c.apply_overrides(&[
            "beta=0",
            "env_name=sparse_mountain_car",
            "hidden_sizes=64,64",
            "exploration_mode=guided",
            "trace_correction=true",
            "seed=12",
            "output_dir=/tmp/x",
        ])
        .unwrap();
        assert_eq!(c.beta, 0.0);
        assert_eq!(c.env_name, EnvName::SparseMountainCar);
        assert_eq!(c.hidden_sizes, vec![64, 64]);
        assert_eq!(c.exploration_mode, ExplorationMode::Guided);
        assert!(c.trace_correction);
        assert_eq!(c.seed, 12);
        assert_eq!(c.output_dir, PathBuf::from("/tmp/x"));
        assert!(c.set("beta", "abc").is_err());
        assert!(c.apply_overrides(&["beta"]).is_err());
    }

    #[test]
    fn invalid_values_fail_validation() {
        let c = RunConfig {
            eval_interval: 0,
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
        let c = RunConfig {
            exploration_mode: ExplorationMode::Guided,
            ensemble_size: 1,
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
