//! Flat key/value run configuration shared by every CLI subcommand.
//!
//! The file is TOML with top-level keys only. Unknown keys are rejected.
//! See `docs/config.md` for the key list.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{GainTimeBase, LoopConfig};
use crate::demo::DEFAULT_DENSITY;
use crate::diffusion::ScheduleKind;
use crate::policy::{sha256_hex, PerceptionConfig, PolicyConfig};
use crate::sim::operator::{Persona, PersonaParams};
use crate::sim::{Jitter, TaskId, TaskSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // perception
    pub point_budget: usize,
    pub points_per_m2: f64,
    pub fps_start: usize,
    // policy
    pub encoder_hidden: Vec<usize>,
    pub denoiser_hidden: Vec<usize>,
    pub time_embed_dim: usize,
    pub diffusion_steps: usize,
    pub schedule: ScheduleKind,
    pub inference_steps: usize,
    pub eta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_sample: bool,
    // control loop
    pub gain: f64,
    pub linear_cap: f64,
    pub angular_cap: f64,
    pub dt: f64,
    pub gain_time_base: GainTimeBase,
    // simulated operators and scenes
    pub operator_speed: f64,
    pub switch_ticks: u32,
    pub noise_bound: f64,
    pub jitter_position: f64,
    pub jitter_yaw: f64,
    pub trials: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PolicyConfig::default();
        let l = LoopConfig::default();
        Self {
            point_budget: p.point_budget,
            points_per_m2: DEFAULT_DENSITY,
            fps_start: 0,
            encoder_hidden: p.encoder_hidden,
            denoiser_hidden: p.denoiser_hidden,
            time_embed_dim: p.time_embed_dim,
            diffusion_steps: p.diffusion_steps,
            schedule: p.schedule,
            inference_steps: p.inference_steps,
            eta: p.eta,
            epochs: p.epochs,
            batch_size: p.batch_size,
            lr: p.lr,
            clip_sample: p.clip_sample,
            gain: l.gain,
            linear_cap: l.linear_cap,
            angular_cap: l.angular_cap,
            dt: l.dt,
            gain_time_base: l.gain_time_base,
            operator_speed: PersonaParams::default().speed,
            switch_ticks: 20,
            noise_bound: 0.0,
            jitter_position: 0.0,
            jitter_yaw: 0.0,
            trials: 10,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let c: RunConfig = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, ConfigError> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.policy_config(0).validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.loop_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.points_per_m2 > 0.0 && self.points_per_m2.is_finite()) {
            return Err(ConfigError::Invalid("points_per_m2 must be positive".into()));
        }
        if !(self.operator_speed > 0.0 && self.operator_speed.is_finite()) {
            return Err(ConfigError::Invalid("operator_speed must be positive".into()));
        }
        if !(self.noise_bound >= 0.0 && self.jitter_position >= 0.0 && self.jitter_yaw >= 0.0) {
            return Err(ConfigError::Invalid("noise and jitter bounds must be non-negative".into()));
        }
        if self.trials == 0 {
            return Err(ConfigError::Invalid("trials must be at least 1".into()));
        }
        Ok(())
    }

    pub fn policy_config(&self, seed: u64) -> PolicyConfig {
        PolicyConfig {
            point_budget: self.point_budget,
            encoder_hidden: self.encoder_hidden.clone(),
            denoiser_hidden: self.denoiser_hidden.clone(),
            time_embed_dim: self.time_embed_dim,
            diffusion_steps: self.diffusion_steps,
            schedule: self.schedule,
            inference_steps: self.inference_steps,
            eta: self.eta,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            horizon: 1,
            n_obs: 1,
            clip_sample: self.clip_sample,
            seed,
        }
    }

    pub fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            gain: self.gain,
            linear_cap: self.linear_cap,
            angular_cap: self.angular_cap,
            dt: self.dt,
            gain_time_base: self.gain_time_base,
        }
    }

    pub fn task_spec(&self, id: TaskId) -> TaskSpec {
        let mut t = TaskSpec::new(id);
        t.jitter = Jitter { position: self.jitter_position, yaw: self.jitter_yaw };
        t
    }

    pub fn perception(&self, task: &TaskSpec) -> PerceptionConfig {
        PerceptionConfig {
            crop_box: task.crop_box,
            point_budget: self.point_budget,
            fps_start: self.fps_start,
            points_per_m2: self.points_per_m2,
        }
    }

    pub fn persona_params(&self) -> PersonaParams {
        PersonaParams { speed: self.operator_speed, ..PersonaParams::default() }
    }

    pub fn persona(&self, name: &str) -> Result<Persona, ConfigError> {
        match name {
            "direct" => Ok(Persona::Direct),
            "noisy" => Ok(Persona::Noisy { bound: self.noise_bound }),
            "mode_switching" => Ok(Persona::ModeSwitching { switch_ticks: self.switch_ticks }),
            other => Err(ConfigError::Invalid(format!("unknown persona '{other}'"))),
        }
    }

    /// SHA-256 of the canonical JSON form. Embedded in every artifact.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.epochs = 12;
        c.gain_time_base = GainTimeBase::Second;
        c.schedule = ScheduleKind::Linear;
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(c.hash(), RunConfig::default().hash());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(RunConfig::from_toml("epoch = 3"), Err(ConfigError::Parse(_))));
        assert!(matches!(RunConfig::from_toml("gain = 0.0"), Err(ConfigError::Invalid(_))));
        assert!(matches!(RunConfig::from_toml("trials = 0"), Err(ConfigError::Invalid(_))));
        assert!(matches!(RunConfig::from_toml("[policy]\nepochs = 3"), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn flat_keys_reach_their_targets() {
        let c = RunConfig::from_toml("point_budget = 128\ngain = 0.1\nschedule = \"linear\"\nswitch_ticks = 5").unwrap();
        assert_eq!(c.policy_config(3).point_budget, 128);
        assert_eq!(c.policy_config(3).seed, 3);
        assert_eq!(c.loop_config().gain, 0.1);
        assert_eq!(c.persona("mode_switching").unwrap(), Persona::ModeSwitching { switch_ticks: 5 });
        assert!(c.persona("telepathic").is_err());
        let t = c.task_spec(TaskId::Unstack);
        assert_eq!(c.perception(&t).point_budget, 128);
    }
}
