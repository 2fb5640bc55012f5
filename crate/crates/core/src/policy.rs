//! Observation assembly, training and inference for the orientation policy.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::demo::DemoDataset;
use crate::diffusion::{
    make_schedule, standard_normal3, ActionSample, Denoiser, DiffusionError, NoiseSchedule, ScheduleKind, STATE_DIM,
};
use crate::geometry::{wrap_angle, EulerRPY, Vec3};
use crate::nn::{adam_step, mlp_specs, AdamConfig, AdamState, LayerSpec, Mlp, NnError, PointEncoder, POINT_INPUT_DIM};
use crate::pointcloud::{crop, farthest_point_sample, CloudError, ColoredPointCloud, CropBox};

/// Absolute end-effector orientation in the base frame.
pub type ActionOrientation = EulerRPY;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("perception produced an empty cloud after cropping")]
    EmptyPerception,
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error("invalid policy config: {0}")]
    InvalidConfig(String),
    #[error("dataset has no frames")]
    EmptyDataset,
    #[error("dataset point budget {dataset} does not match config budget {config}")]
    BudgetMismatch { dataset: usize, config: usize },
    #[error("observation has {got} points but the policy was trained with a budget of {budget}")]
    ObservationBudget { got: usize, budget: usize },
    #[error("training loss became non-finite at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RobotState {
    pub position: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub cloud: ColoredPointCloud,
    pub state: RobotState,
    pub point_budget: usize,
}

/// Everything that shapes what the policy sees. Its hash travels with every
/// checkpoint so mismatched perception settings are caught at load time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerceptionConfig {
    pub crop_box: CropBox,
    pub point_budget: usize,
    pub fps_start: usize,
    pub points_per_m2: f64,
}

impl PerceptionConfig {
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("perception config serializes"))
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub point_budget: usize,
    /// Hidden widths of the per-point encoder; the output is always 128.
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
    pub horizon: usize,
    pub n_obs: usize,
    /// Clamp the clean-sample estimate to [`X0_CLIP_BOUND`] at every DDIM
    /// step and the final sample to the normalized training range.
    pub clip_sample: bool,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            point_budget: 256,
            encoder_hidden: vec![64, 64],
            denoiser_hidden: vec![256, 256],
            time_embed_dim: 32,
            diffusion_steps: 100,
            schedule: ScheduleKind::Cosine,
            inference_steps: 10,
            eta: 0.0,
            epochs: 300,
            batch_size: 32,
            lr: 1e-3,
            horizon: 1,
            n_obs: 1,
            clip_sample: true,
            seed: 0,
        }
    }
}

impl PolicyConfig {
    /// The paper's settings: 2048 points and 3000 epochs.
    pub fn paper_scale() -> Self {
        Self { point_budget: 2048, epochs: 3000, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: &str| Err(PolicyError::InvalidConfig(m.to_string()));
        if self.horizon != 1 {
            return bad("horizon is fixed at 1");
        }
        if self.n_obs != 1 {
            return bad("n_obs is fixed at 1");
        }
        if self.point_budget == 0 || self.batch_size == 0 || self.epochs == 0 {
            return bad("point_budget, batch_size and epochs must be positive");
        }
        if self.diffusion_steps < 2 {
            return bad("diffusion_steps must be at least 2");
        }
        if self.inference_steps == 0 || self.inference_steps > self.diffusion_steps {
            return bad("inference_steps must be in 1..=diffusion_steps");
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return bad("time_embed_dim must be even and positive");
        }
        if self.encoder_hidden.iter().chain(&self.denoiser_hidden).any(|&w| w == 0) {
            return bad("layer widths must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad("lr must be positive and eta non-negative");
        }
        Ok(())
    }
}

/// Bound on the per-step clean-sample estimate, in normalized units. Wider
/// than the training range so modes that sit on its edge are not pulled
/// inward; the final sample is still clamped to +-1.
pub const X0_CLIP_BOUND: f64 = 1.5;

/// Per-component affine maps into `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub action_min: [f64; 3],
    pub action_max: [f64; 3],
    pub state_min: [f64; 3],
    pub state_max: [f64; 3],
    pub cloud_center: [f64; 3],
    pub cloud_half_extent: [f64; 3],
}

fn center_half(min: f64, max: f64) -> (f64, f64) {
    let half = 0.5 * (max - min);
    // a constant component maps to 0 with unit scale
    (0.5 * (max + min), if half > 1e-9 { half } else { 1.0 })
}

impl Normalization {
    pub fn fit(actions: &[[f64; 3]], states: &[[f64; 3]], crop_box: &CropBox) -> Self {
        let range = |rows: &[[f64; 3]]| {
            let mut lo = [f64::INFINITY; 3];
            let mut hi = [f64::NEG_INFINITY; 3];
            for r in rows {
                for i in 0..3 {
                    lo[i] = lo[i].min(r[i]);
                    hi[i] = hi[i].max(r[i]);
                }
            }
            (lo, hi)
        };
        let (action_min, action_max) = range(actions);
        let (state_min, state_max) = range(states);
        let half = crop_box.half_extent();
        Self {
            action_min,
            action_max,
            state_min,
            state_max,
            cloud_center: crop_box.center().to_array(),
            cloud_half_extent: [half.x, half.y, half.z].map(|h| if h > 1e-9 { h } else { 1.0 }),
        }
    }

    pub fn normalize_action(&self, a: &[f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| {
            let (c, h) = center_half(self.action_min[i], self.action_max[i]);
            (a[i] - c) / h
        })
    }

    pub fn denormalize_action(&self, a: &[f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| {
            let (c, h) = center_half(self.action_min[i], self.action_max[i]);
            c + h * a[i]
        })
    }

    pub fn normalize_state(&self, s: &[f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| {
            let (c, h) = center_half(self.state_min[i], self.state_max[i]);
            (s[i] - c) / h
        })
    }

    /// `n x 6` encoder input: positions relative to the crop box, colors in `[-1, 1]`.
    pub fn cloud_rows(&self, cloud: &ColoredPointCloud) -> Array2<f64> {
        Array2::from_shape_fn((cloud.len(), POINT_INPUT_DIM), |(i, j)| {
            let p = &cloud.points[i];
            if j < 3 {
                (p.position.to_array()[j] - self.cloud_center[j]) / self.cloud_half_extent[j]
            } else {
                2.0 * p.color[j - 3] - 1.0
            }
        })
    }
}

/// Crop, then farthest point sample, then attach the end-effector position.
pub fn assemble_observation(
    raw: &ColoredPointCloud,
    crop_box: &CropBox,
    budget: usize,
    start_index: usize,
    ee_position: Vec3,
) -> Result<Observation, PolicyError> {
    let cropped = crop(raw, crop_box)?;
    if cropped.is_empty() {
        return Err(PolicyError::EmptyPerception);
    }
    let start = start_index.min(cropped.len() - 1);
    let cloud = farthest_point_sample(&cropped, budget, start)?;
    Ok(Observation { cloud, state: RobotState { position: ee_position }, point_budget: budget })
}

pub fn observe(raw: &ColoredPointCloud, perception: &PerceptionConfig, ee_position: Vec3) -> Result<Observation, PolicyError> {
    assemble_observation(raw, &perception.crop_box, perception.point_budget, perception.fps_start, ee_position)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedPolicy {
    pub config: PolicyConfig,
    pub perception: PerceptionConfig,
    pub encoder: PointEncoder,
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
    pub normalization: Normalization,
    /// Mean training loss per epoch.
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NetworkRecord {
    specs: Vec<LayerSpec>,
    params: Vec<f64>,
}

impl NetworkRecord {
    fn of(mlp: &Mlp) -> Self {
        Self { specs: mlp.specs(), params: mlp.flatten() }
    }

    fn build(&self) -> Result<Mlp, NnError> {
        Mlp::from_flat(&self.specs, &self.params)
    }
}

const CHECKPOINT_FORMAT: &str = "hitld-policy";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    config_hash: String,
    perception_hash: String,
    config: PolicyConfig,
    perception: PerceptionConfig,
    normalization: Normalization,
    schedule_betas: Vec<f64>,
    encoder: NetworkRecord,
    denoiser: NetworkRecord,
    final_loss: f64,
    loss_history: Vec<f64>,
}

/// Hash of the training config together with the perception settings.
pub fn config_hash(config: &PolicyConfig, perception: &PerceptionConfig) -> String {
    sha256_hex(&serde_json::to_vec(&(config, perception)).expect("config serializes"))
}

impl TrainedPolicy {
    pub fn config_hash(&self) -> String {
        config_hash(&self.config, &self.perception)
    }

    pub fn perception_hash(&self) -> String {
        self.perception.hash()
    }

    pub fn final_loss(&self) -> f64 {
        self.loss_history.last().copied().unwrap_or(f64::NAN)
    }

    pub fn to_json(&self) -> String {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_hash: self.config_hash(),
            perception_hash: self.perception_hash(),
            config: self.config.clone(),
            perception: self.perception,
            normalization: self.normalization,
            schedule_betas: self.schedule.betas().to_vec(),
            encoder: NetworkRecord::of(&self.encoder.mlp),
            denoiser: NetworkRecord::of(&self.denoiser.mlp),
            final_loss: self.final_loss(),
            loss_history: self.loss_history.clone(),
        };
        serde_json::to_string_pretty(&ck).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PolicyError> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| PolicyError::Format(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(PolicyError::Format(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
        }
        ck.config.validate()?;
        if ck.config_hash != config_hash(&ck.config, &ck.perception) || ck.perception_hash != ck.perception.hash() {
            return Err(PolicyError::Format("stored hashes do not match stored configs".into()));
        }
        Ok(Self {
            encoder: PointEncoder::from_mlp(ck.encoder.build()?)?,
            denoiser: Denoiser::from_mlp(ck.denoiser.build()?, ck.config.time_embed_dim)?,
            schedule: NoiseSchedule::from_betas(&ck.schedule_betas)?,
            config: ck.config,
            perception: ck.perception,
            normalization: ck.normalization,
            loss_history: ck.loss_history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn check_observation(&self, obs: &Observation) -> Result<(), PolicyError> {
        let budget = self.config.point_budget;
        if obs.point_budget != budget || obs.cloud.len() > budget {
            return Err(PolicyError::ObservationBudget { got: obs.cloud.len(), budget });
        }
        if obs.cloud.is_empty() {
            return Err(PolicyError::EmptyPerception);
        }
        Ok(())
    }

    /// Normalized samples for several seeds sharing one encoded observation.
    pub fn sample_normalized(&self, obs: &Observation, seeds: &[u64]) -> Result<Vec<ActionSample>, PolicyError> {
        self.check_observation(obs)?;
        let rows = self.normalization.cloud_rows(&obs.cloud);
        let (feature, _) = self.encoder.forward(rows.view(), &[obs.cloud.len()])?;
        let v = feature.row(0).to_vec();
        let s = self.normalization.normalize_state(&obs.state.position.to_array());
        seeds
            .iter()
            .map(|&seed| {
                let a = crate::diffusion::sample_clipped(
                    &self.denoiser,
                    &v,
                    &s,
                    &self.schedule,
                    self.config.inference_steps,
                    self.config.eta,
                    seed,
                    self.config.clip_sample.then_some(X0_CLIP_BOUND),
                )?;
                Ok(if self.config.clip_sample { a.map(|x| x.clamp(-1.0, 1.0)) } else { a })
            })
            .collect()
    }

    pub fn predict_many(&self, obs: &Observation, seeds: &[u64]) -> Result<Vec<ActionOrientation>, PolicyError> {
        self.sample_normalized(obs, seeds)?
            .iter()
            .map(|a| {
                let d = self.normalization.denormalize_action(a);
                Ok(EulerRPY::from_array(d.map(wrap_angle)).map_err(|e| PolicyError::Format(e.to_string()))?)
            })
            .collect()
    }

    pub fn predict(&self, obs: &Observation, seed: u64) -> Result<ActionOrientation, PolicyError> {
        Ok(self.predict_many(obs, &[seed])?[0])
    }
}

/// Fit the encoder and denoiser jointly on the Eq. 2 objective.
pub fn train(dataset: &DemoDataset, config: &PolicyConfig) -> Result<TrainedPolicy, PolicyError> {
    train_with_progress(dataset, config, |_, _| {})
}

/// [`train`] with a callback receiving `(epoch, mean epoch loss)`.
pub fn train_with_progress(
    dataset: &DemoDataset,
    config: &PolicyConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainedPolicy, PolicyError> {
    config.validate()?;
    let frames: Vec<_> = dataset.frames().collect();
    if frames.is_empty() {
        return Err(PolicyError::EmptyDataset);
    }
    let meta = &dataset.metadata;
    if meta.perception.point_budget != config.point_budget {
        return Err(PolicyError::BudgetMismatch { dataset: meta.perception.point_budget, config: config.point_budget });
    }
    let actions: Vec<[f64; 3]> = frames.iter().map(|f| f.action.to_array()).collect();
    let states: Vec<[f64; 3]> = frames.iter().map(|f| f.observation.state.position.to_array()).collect();
    let norm = Normalization::fit(&actions, &states, &meta.perception.crop_box);

    let clouds: Vec<Array2<f64>> = frames
        .iter()
        .map(|f| {
            if f.observation.cloud.is_empty() {
                return Err(PolicyError::EmptyPerception);
            }
            if f.observation.cloud.len() > config.point_budget {
                return Err(PolicyError::ObservationBudget { got: f.observation.cloud.len(), budget: config.point_budget });
            }
            Ok(norm.cloud_rows(&f.observation.cloud))
        })
        .collect::<Result<_, _>>()?;
    let a0: Vec<ActionSample> = actions.iter().map(|a| norm.normalize_action(a)).collect();
    let s0: Vec<[f64; STATE_DIM]> = states.iter().map(|s| norm.normalize_state(s)).collect();

    let schedule = make_schedule(config.diffusion_steps, config.schedule)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut encoder = PointEncoder::new(&config.encoder_hidden, &mut rng)?;
    let mut denoiser = Denoiser::new(&config.denoiser_hidden, config.time_embed_dim, &mut rng)?;
    let adam = AdamConfig { lr: config.lr, ..AdamConfig::default() };
    let mut enc_opt = AdamState::new(&encoder.mlp, adam);
    let mut den_opt = AdamState::new(&denoiser.mlp, adam);

    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut loss_history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let segments: Vec<usize> = idx.iter().map(|&i| clouds[i].nrows()).collect();
            let mut points = Array2::zeros((segments.iter().sum(), POINT_INPUT_DIM));
            let mut row = 0;
            for &i in idx {
                let n = clouds[i].nrows();
                points.slice_mut(ndarray::s![row..row + n, ..]).assign(&clouds[i]);
                row += n;
            }
            let (features, cache) = encoder.forward(points.view(), &segments)?;
            let ks: Vec<usize> = idx.iter().map(|_| rng.random_range(1..=config.diffusion_steps)).collect();
            let eps: Vec<ActionSample> = idx.iter().map(|_| standard_normal3(&mut rng)).collect();
            let batch_a0: Vec<ActionSample> = idx.iter().map(|&i| a0[i]).collect();
            let batch_s0: Vec<[f64; STATE_DIM]> = idx.iter().map(|&i| s0[i]).collect();
            let out = denoiser.batch_loss(&batch_a0, features.view(), &batch_s0, &ks, &eps, &schedule)?;
            if !out.loss.is_finite() {
                return Err(PolicyError::NonFiniteLoss { epoch, batch });
            }
            let enc_grads = encoder.backward(&cache, out.feature_grad.view())?;
            adam_step(&mut denoiser.mlp, &out.grads, &mut den_opt)?;
            adam_step(&mut encoder.mlp, &enc_grads, &mut enc_opt)?;
            epoch_loss += out.loss;
            batches += 1;
        }
        let mean = epoch_loss / batches as f64;
        loss_history.push(mean);
        progress(epoch, mean);
    }

    Ok(TrainedPolicy {
        config: config.clone(),
        perception: meta.perception,
        encoder,
        denoiser,
        schedule,
        normalization: norm,
        loss_history,
    })
}

/// Anything that can supply a target orientation for the controller.
pub trait OrientationSource {
    fn perception(&self) -> &PerceptionConfig;
    fn orientation(&mut self, obs: &Observation, seed: u64) -> Result<ActionOrientation, PolicyError>;
}

impl OrientationSource for TrainedPolicy {
    fn perception(&self) -> &PerceptionConfig {
        &self.perception
    }

    fn orientation(&mut self, obs: &Observation, seed: u64) -> Result<ActionOrientation, PolicyError> {
        self.predict(obs, seed)
    }
}

impl<T: OrientationSource + ?Sized> OrientationSource for &mut T {
    fn perception(&self) -> &PerceptionConfig {
        (**self).perception()
    }

    fn orientation(&mut self, obs: &Observation, seed: u64) -> Result<ActionOrientation, PolicyError> {
        (**self).orientation(obs, seed)
    }
}

/// Uniformly random orientations. Used to show position never depends on the
/// orientation source.
#[derive(Debug, Clone)]
pub struct RandomOrientation {
    perception: PerceptionConfig,
    rng: ChaCha8Rng,
}

impl RandomOrientation {
    pub fn new(perception: PerceptionConfig, seed: u64) -> Self {
        Self { perception, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl OrientationSource for RandomOrientation {
    fn perception(&self) -> &PerceptionConfig {
        &self.perception
    }

    fn orientation(&mut self, _obs: &Observation, _seed: u64) -> Result<ActionOrientation, PolicyError> {
        let lim = std::f64::consts::PI - 0.3;
        let mut draw = || self.rng.random_range(-lim..lim);
        Ok(EulerRPY::new(draw(), draw(), draw()).expect("finite"))
    }
}

/// Untrained network of the given config. Used by gradient checks and tests.
pub fn init_networks(config: &PolicyConfig, seed: u64) -> Result<(PointEncoder, Denoiser), PolicyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = PointEncoder::new(&config.encoder_hidden, &mut rng)?;
    let denoiser = Denoiser::new(&config.denoiser_hidden, config.time_embed_dim, &mut rng)?;
    Ok((encoder, denoiser))
}

pub fn encoder_specs(config: &PolicyConfig) -> Vec<LayerSpec> {
    mlp_specs(POINT_INPUT_DIM, &config.encoder_hidden, crate::nn::CLOUD_FEATURE_DIM)
}
