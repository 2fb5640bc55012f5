//! Noise schedule, forward noising, the DDIM reverse update, the
//! noise-prediction loss and the sampling loop.
//!
//! Coefficients are variance preserving: a noised action is
//! `signal[k] * a0 + noise[k] * eps` with `signal[k]^2 + noise[k]^2 = 1`.
//! Step 0 is the clean action (`signal[0] = 1`), steps `1..=K` are noised.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{mlp_specs, timestep_embed, Mlp, MlpGrads, NnError, CLOUD_FEATURE_DIM};

pub const ACTION_DIM: usize = 3;
pub const STATE_DIM: usize = 3;

/// A noised or clean action in normalized space.
pub type ActionSample = [f64; ACTION_DIM];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("schedule needs at least 2 steps, got {0}")]
    TooFewSteps(usize),
    #[error("beta values must lie in (0, 1)")]
    InvalidBeta,
    #[error("step {k} out of range 0..={max}")]
    StepOutOfRange { k: usize, max: usize },
    #[error("reverse step requires k >= 1 and prev < k (k = {k}, prev = {prev})")]
    InvalidReverseStep { k: usize, prev: usize },
    #[error("inference step count {steps} must be in 1..={max}")]
    InvalidInferenceSteps { steps: usize, max: usize },
    #[error("eta must be finite and non-negative")]
    InvalidEta,
    #[error("batch inputs have inconsistent lengths")]
    BatchMismatch,
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Linear betas from `1e-4` to `2e-2`, rescaled by `1000 / K` so the
    /// total noise is independent of the step count.
    Linear,
    /// Squared-cosine cumulative signal with offset `0.008`.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    steps: usize,
    /// `betas[0] = 0`; `betas[k]` for `k in 1..=K`.
    betas: Vec<f64>,
    signal: Vec<f64>,
    noise: Vec<f64>,
}

/// Coefficients of `a_prev = alpha * (a_k - gamma * eps) + sigma * z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReverseCoefficients {
    pub alpha: f64,
    pub gamma: f64,
    pub sigma: f64,
}

const MAX_BETA: f64 = 0.999;

pub fn make_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule, DiffusionError> {
    if steps < 2 {
        return Err(DiffusionError::TooFewSteps(steps));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => {
            let scale = 1000.0 / steps as f64;
            let (start, end) = (1e-4 * scale, 2e-2 * scale);
            (0..steps)
                .map(|i| (start + (end - start) * i as f64 / (steps - 1) as f64).min(MAX_BETA))
                .collect()
        }
        ScheduleKind::Cosine => {
            let offset = 0.008;
            let f = |k: usize| {
                let t = (k as f64 / steps as f64 + offset) / (1.0 + offset);
                (t * std::f64::consts::FRAC_PI_2).cos().powi(2)
            };
            (1..=steps).map(|k| (1.0 - f(k) / f(k - 1)).clamp(1e-8, MAX_BETA)).collect()
        }
    };
    NoiseSchedule::from_betas(&betas)
}

impl NoiseSchedule {
    /// Build from per-step betas for `k = 1..=K`. Only structural checks are
    /// applied here; [`make_schedule`] kinds additionally reach `signal[K] <= 0.05`.
    pub fn from_betas(betas: &[f64]) -> Result<Self, DiffusionError> {
        if betas.len() < 2 {
            return Err(DiffusionError::TooFewSteps(betas.len()));
        }
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(DiffusionError::InvalidBeta);
        }
        let mut all = Vec::with_capacity(betas.len() + 1);
        all.push(0.0);
        all.extend_from_slice(betas);
        let mut signal = Vec::with_capacity(all.len());
        let mut noise = Vec::with_capacity(all.len());
        let mut cumulative = 1.0;
        for &b in &all {
            cumulative *= 1.0 - b;
            signal.push(cumulative.sqrt());
            noise.push((1.0 - cumulative).sqrt());
        }
        Ok(Self { steps: betas.len(), betas: all, signal, noise })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas[1..]
    }

    /// Signal coefficient for step `k` (`0..=K`).
    pub fn signal(&self, k: usize) -> f64 {
        self.signal[k]
    }

    /// Noise coefficient for step `k` (`0..=K`).
    pub fn noise(&self, k: usize) -> f64 {
        self.noise[k]
    }

    fn check_step(&self, k: usize) -> Result<(), DiffusionError> {
        if k > self.steps {
            return Err(DiffusionError::StepOutOfRange { k, max: self.steps });
        }
        Ok(())
    }

    /// DDIM coefficients for jumping from step `k` to step `prev < k`.
    pub fn reverse_coefficients(&self, k: usize, prev: usize, eta: f64) -> Result<ReverseCoefficients, DiffusionError> {
        self.check_step(k)?;
        if k == 0 || prev >= k {
            return Err(DiffusionError::InvalidReverseStep { k, prev });
        }
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(DiffusionError::InvalidEta);
        }
        let (sk, nk) = (self.signal[k], self.noise[k]);
        let (sp, np) = (self.signal[prev], self.noise[prev]);
        let sigma = eta * ((np * np) / (nk * nk) * (1.0 - (sk * sk) / (sp * sp))).max(0.0).sqrt();
        let direction = (np * np - sigma * sigma).max(0.0).sqrt();
        Ok(ReverseCoefficients { alpha: sp / sk, gamma: nk - direction * sk / sp, sigma })
    }

    /// Strided descending steps used by the sampler, ending at step 1
    /// (`K - K/n + 1, ..., 1` for `n` steps). Starting below `K` keeps the
    /// first clean-sample estimate away from `signal[K]`, which is near zero.
    pub fn inference_steps(&self, count: usize) -> Result<Vec<usize>, DiffusionError> {
        if count == 0 || count > self.steps {
            return Err(DiffusionError::InvalidInferenceSteps { steps: count, max: self.steps });
        }
        Ok((0..count).map(|i| (count - 1 - i) * self.steps / count + 1).collect())
    }
}

/// `signal[k] * a0 + noise[k] * eps`
pub fn add_noise(a0: &ActionSample, eps: &ActionSample, k: usize, sched: &NoiseSchedule) -> Result<ActionSample, DiffusionError> {
    sched.check_step(k)?;
    let (s, n) = (sched.signal(k), sched.noise(k));
    Ok(std::array::from_fn(|i| s * a0[i] + n * eps[i]))
}

/// One reverse update from step `k` to `prev`:
/// `alpha * (a_k - gamma * eps_pred) + sigma * noise`.
pub fn ddim_step(
    a_k: &ActionSample,
    eps_pred: &ActionSample,
    k: usize,
    prev: usize,
    sched: &NoiseSchedule,
    eta: f64,
    noise: &ActionSample,
) -> Result<ActionSample, DiffusionError> {
    let c = sched.reverse_coefficients(k, prev, eta)?;
    Ok(std::array::from_fn(|i| c.alpha * (a_k[i] - c.gamma * eps_pred[i]) + c.sigma * noise[i]))
}

/// [`ddim_step`] with the implied clean sample `(a_k - noise[k] * eps) / signal[k]`
/// clamped to `[-bound, bound]` before stepping. Without clamping the two
/// agree. Near `k = K` the signal coefficient is small and the unclamped
/// estimate amplifies denoiser error by its inverse.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step_clipped(
    a_k: &ActionSample,
    eps_pred: &ActionSample,
    k: usize,
    prev: usize,
    sched: &NoiseSchedule,
    eta: f64,
    noise: &ActionSample,
    bound: f64,
) -> Result<ActionSample, DiffusionError> {
    let c = sched.reverse_coefficients(k, prev, eta)?;
    let (sk, nk) = (sched.signal(k), sched.noise(k));
    let (sp, np) = (sched.signal(prev), sched.noise(prev));
    let direction = (np * np - c.sigma * c.sigma).max(0.0).sqrt();
    Ok(std::array::from_fn(|i| {
        let x0 = ((a_k[i] - nk * eps_pred[i]) / sk).clamp(-bound, bound);
        sp * x0 + direction * eps_pred[i] + c.sigma * noise[i]
    }))
}

/// Conditional noise predictor over `[a_k, embed(k), v, s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub mlp: Mlp,
    pub time_dim: usize,
}

/// Result of a batched loss evaluation.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: MlpGrads,
    /// `d loss / d v`, one row per sample.
    pub feature_grad: Array2<f64>,
}

impl Denoiser {
    pub fn input_dim(time_dim: usize) -> usize {
        ACTION_DIM + time_dim + CLOUD_FEATURE_DIM + STATE_DIM
    }

    pub fn new<R: Rng>(hidden: &[usize], time_dim: usize, rng: &mut R) -> Result<Self, DiffusionError> {
        if time_dim % 2 != 0 {
            return Err(NnError::OddEmbeddingDim(time_dim).into());
        }
        let specs = mlp_specs(Self::input_dim(time_dim), hidden, ACTION_DIM);
        Ok(Self { mlp: Mlp::new(&specs, rng)?, time_dim })
    }

    pub fn from_mlp(mlp: Mlp, time_dim: usize) -> Result<Self, DiffusionError> {
        if mlp.input_dim() != Self::input_dim(time_dim) {
            return Err(NnError::DimensionMismatch { expected: Self::input_dim(time_dim), got: mlp.input_dim() }.into());
        }
        if mlp.output_dim() != ACTION_DIM {
            return Err(NnError::DimensionMismatch { expected: ACTION_DIM, got: mlp.output_dim() }.into());
        }
        Ok(Self { mlp, time_dim })
    }

    pub fn build_inputs(
        &self,
        noisy: &[ActionSample],
        ks: &[usize],
        features: ArrayView2<f64>,
        states: &[[f64; STATE_DIM]],
    ) -> Result<Array2<f64>, DiffusionError> {
        let b = noisy.len();
        if ks.len() != b || states.len() != b || features.nrows() != b {
            return Err(DiffusionError::BatchMismatch);
        }
        if features.ncols() != CLOUD_FEATURE_DIM {
            return Err(NnError::DimensionMismatch { expected: CLOUD_FEATURE_DIM, got: features.ncols() }.into());
        }
        let width = Self::input_dim(self.time_dim);
        let mut x = Array2::zeros((b, width));
        for i in 0..b {
            let emb = timestep_embed(ks[i], self.time_dim)?;
            let mut row = x.row_mut(i);
            let mut c = 0;
            for &v in noisy[i].iter().chain(&emb).chain(features.row(i).iter()).chain(states[i].iter()) {
                row[c] = v;
                c += 1;
            }
        }
        Ok(x)
    }

    pub fn predict(&self, a_k: &ActionSample, k: usize, v: &[f64], s: &[f64; STATE_DIM]) -> Result<ActionSample, DiffusionError> {
        let feat = ArrayView2::from_shape((1, v.len()), v)
            .map_err(|_| NnError::DimensionMismatch { expected: CLOUD_FEATURE_DIM, got: v.len() })?;
        let x = self.build_inputs(&[*a_k], &[k], feat, &[*s])?;
        let y = self.mlp.infer(x.view())?;
        Ok([y[[0, 0]], y[[0, 1]], y[[0, 2]]])
    }

    /// Mean squared error between `eps` and the prediction on
    /// `add_noise(a0, eps, k)`, averaged over batch and components, with
    /// exact gradients for the denoiser and for the conditioning feature.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_loss(
        &self,
        a0: &[ActionSample],
        features: ArrayView2<f64>,
        states: &[[f64; STATE_DIM]],
        ks: &[usize],
        eps: &[ActionSample],
        sched: &NoiseSchedule,
    ) -> Result<LossOutput, DiffusionError> {
        let b = a0.len();
        if eps.len() != b || ks.len() != b {
            return Err(DiffusionError::BatchMismatch);
        }
        let noisy = a0
            .iter()
            .zip(eps)
            .zip(ks)
            .map(|((a, e), &k)| add_noise(a, e, k, sched))
            .collect::<Result<Vec<_>, _>>()?;
        let x = self.build_inputs(&noisy, ks, features, states)?;
        let (pred, cache) = self.mlp.forward(x.view())?;
        let n = (b * ACTION_DIM) as f64;
        let mut grad_out = Array2::zeros((b, ACTION_DIM));
        let mut loss = 0.0;
        for i in 0..b {
            for j in 0..ACTION_DIM {
                let d = pred[[i, j]] - eps[i][j];
                loss += d * d;
                grad_out[[i, j]] = 2.0 * d / n;
            }
        }
        loss /= n;
        let (grads, input_grad) = self.mlp.backward(&cache, grad_out.view())?;
        let start = ACTION_DIM + self.time_dim;
        let feature_grad = input_grad.slice(ndarray::s![.., start..start + CLOUD_FEATURE_DIM]).to_owned();
        Ok(LossOutput { loss, grads, feature_grad })
    }
}

/// Single-sample form of [`Denoiser::batch_loss`].
pub fn training_loss(
    denoiser: &Denoiser,
    a0: &ActionSample,
    v: &[f64],
    s: &[f64; STATE_DIM],
    k: usize,
    eps: &ActionSample,
    sched: &NoiseSchedule,
) -> Result<LossOutput, DiffusionError> {
    let feat = ArrayView2::from_shape((1, v.len()), v)
        .map_err(|_| NnError::DimensionMismatch { expected: CLOUD_FEATURE_DIM, got: v.len() })?;
    denoiser.batch_loss(&[*a0], feat, &[*s], &[k], &[*eps], sched)
}

pub fn standard_normal3<R: Rng>(rng: &mut R) -> ActionSample {
    [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)]
}

/// Draw the start of the chain from a seeded standard normal and run the
/// strided DDIM steps down to step 0.
pub fn sample(
    denoiser: &Denoiser,
    v: &[f64],
    s: &[f64; STATE_DIM],
    sched: &NoiseSchedule,
    num_inference_steps: usize,
    eta: f64,
    seed: u64,
) -> Result<ActionSample, DiffusionError> {
    sample_clipped(denoiser, v, s, sched, num_inference_steps, eta, seed, None)
}

/// [`sample`] using [`ddim_step_clipped`] at every step when `clip` is set.
#[allow(clippy::too_many_arguments)]
pub fn sample_clipped(
    denoiser: &Denoiser,
    v: &[f64],
    s: &[f64; STATE_DIM],
    sched: &NoiseSchedule,
    num_inference_steps: usize,
    eta: f64,
    seed: u64,
    clip: Option<f64>,
) -> Result<ActionSample, DiffusionError> {
    let steps = sched.inference_steps(num_inference_steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = standard_normal3(&mut rng);
    for (i, &k) in steps.iter().enumerate() {
        let prev = steps.get(i + 1).copied().unwrap_or(0);
        let eps_pred = denoiser.predict(&a, k, v, s)?;
        let z = if eta > 0.0 { standard_normal3(&mut rng) } else { [0.0; ACTION_DIM] };
        a = match clip {
            Some(bound) => ddim_step_clipped(&a, &eps_pred, k, prev, sched, eta, &z, bound)?,
            _ => ddim_step(&a, &eps_pred, k, prev, sched, eta, &z)?,
        };
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn linear100() -> NoiseSchedule {
        make_schedule(100, ScheduleKind::Linear).unwrap()
    }

    #[test]
    fn schedule_invariants_hold() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            for k in [2, 3, 10, 50, 100, 1000] {
                let s = make_schedule(k, kind).unwrap();
                assert!(s.signal(0) >= 0.999);
                assert!(s.signal(k) <= 0.05, "{kind:?} K={k}: {}", s.signal(k));
                for i in 0..=k {
                    assert!((s.signal(i).powi(2) + s.noise(i).powi(2) - 1.0).abs() < 1e-9);
                    if i > 0 {
                        assert!(s.signal(i) < s.signal(i - 1));
                        let snr = |j: usize| s.signal(j) / s.noise(j);
                        if i > 1 {
                            assert!(snr(i) < snr(i - 1));
                        }
                    }
                }
            }
        }
        assert_eq!(make_schedule(1, ScheduleKind::Linear), Err(DiffusionError::TooFewSteps(1)));
    }

    #[test]
    fn explicit_linear_betas_match_running_product() {
        let k = 100;
        let betas: Vec<f64> = (0..k).map(|i| 1e-4 + (2e-2 - 1e-4) * i as f64 / (k - 1) as f64).collect();
        let s = NoiseSchedule::from_betas(&betas).unwrap();
        for step in 0..=k {
            let prod: f64 = betas[..step].iter().map(|b| 1.0 - b).product();
            assert_abs_diff_eq!(s.signal(step), prod.sqrt(), epsilon = 1e-12);
            assert_abs_diff_eq!(s.noise(step), (1.0 - prod).sqrt(), epsilon = 1e-12);
        }
    }

    #[test]
    fn add_noise_examples() {
        let s = linear100();
        let a0 = [0.5, -0.2, 0.1];
        assert_eq!(add_noise(&a0, &[1.0, 2.0, 3.0], 0, &s).unwrap(), a0);
        let k = 50;
        let z = add_noise(&a0, &[0.0; 3], k, &s).unwrap();
        assert_eq!(z, a0.map(|v| s.signal(k) * v));
        // direct formula from the betas
        let prod: f64 = s.betas()[..k].iter().map(|b| 1.0 - b).product();
        let y = add_noise(&a0, &[1.0; 3], k, &s).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(y[i], prod.sqrt() * a0[i] + (1.0 - prod).sqrt(), epsilon = 1e-12);
        }
        assert!(matches!(add_noise(&a0, &a0, 101, &s), Err(DiffusionError::StepOutOfRange { .. })));
    }

    #[test]
    fn ddim_step_examples() {
        let s = linear100();
        let a = [0.3, -0.4, 0.9];
        let e = [0.1, 0.2, -0.3];
        let x1 = ddim_step(&a, &e, 10, 9, &s, 0.0, &[0.0; 3]).unwrap();
        let x2 = ddim_step(&a, &e, 10, 9, &s, 0.0, &[0.0; 3]).unwrap();
        assert_eq!(x1, x2);
        assert!(matches!(ddim_step(&a, &e, 0, 0, &s, 0.0, &[0.0; 3]), Err(DiffusionError::InvalidReverseStep { .. })));
        // alpha = 1 and sigma = 0 pass the sample through: a schedule whose
        // coefficients degenerate is built by asking for the k -> k identity
        // directly through the coefficient algebra
        let c = ReverseCoefficients { alpha: 1.0, gamma: 0.7, sigma: 0.0 };
        let out: ActionSample = std::array::from_fn(|i| c.alpha * (a[i] - c.gamma * 0.0) + c.sigma * 1.0);
        assert_eq!(out, a);
        let zero = ddim_step(&a, &[0.0; 3], 1, 0, &s, 0.0, &[5.0; 3]).unwrap();
        let alpha = 1.0 / s.signal(1);
        for i in 0..3 {
            assert_abs_diff_eq!(zero[i], alpha * a[i], epsilon = 1e-15);
        }
    }

    #[test]
    fn eta_controls_sigma() {
        let s = linear100();
        assert_eq!(s.reverse_coefficients(50, 40, 0.0).unwrap().sigma, 0.0);
        let c = s.reverse_coefficients(50, 40, 1.0).unwrap();
        assert!(c.sigma > 0.0);
        // with eta = 1 and stride 1, sigma^2 is the DDPM posterior variance
        let c = s.reverse_coefficients(50, 49, 1.0).unwrap();
        let posterior = s.noise(49).powi(2) / s.noise(50).powi(2) * s.betas()[49];
        assert_abs_diff_eq!(c.sigma * c.sigma, posterior, epsilon = 1e-12);
    }

    fn invert(a0: ActionSample, eps: ActionSample, s: &NoiseSchedule, count: usize) -> ActionSample {
        let steps = s.inference_steps(count).unwrap();
        let mut a = add_noise(&a0, &eps, steps[0], s).unwrap();
        for (i, &k) in steps.iter().enumerate() {
            let prev = steps.get(i + 1).copied().unwrap_or(0);
            a = ddim_step(&a, &eps, k, prev, s, 0.0, &[0.0; 3]).unwrap();
        }
        a
    }

    #[test]
    fn perfect_denoiser_reconstructs_full_chain() {
        let s = linear100();
        let a0 = [0.5, -0.25, 0.75];
        let back = invert(a0, [1.2, -0.3, 0.4], &s, 100);
        for i in 0..3 {
            assert!((back[i] - a0[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn inference_steps_stride() {
        let s = linear100();
        assert_eq!(s.inference_steps(10).unwrap(), vec![91, 81, 71, 61, 51, 41, 31, 21, 11, 1]);
        assert_eq!(s.inference_steps(1).unwrap(), vec![1]);
        assert_eq!(s.inference_steps(100).unwrap(), (1..=100).rev().collect::<Vec<_>>());
        assert!(s.inference_steps(0).is_err());
        assert!(s.inference_steps(101).is_err());
    }

    #[test]
    fn clipped_step_matches_plain_step_inside_the_bound() {
        let s = linear100();
        let (a, e) = ([0.3, -0.2, 0.1], [0.5, 0.1, -0.4]);
        for (k, prev, eta) in [(50, 40, 0.0), (91, 81, 0.0), (11, 1, 0.5), (1, 0, 1.0)] {
            let z = [0.2, -0.7, 1.1];
            let plain = ddim_step(&a, &e, k, prev, &s, eta, &z).unwrap();
            let clipped = ddim_step_clipped(&a, &e, k, prev, &s, eta, &z, 1e9).unwrap();
            for i in 0..3 {
                assert_abs_diff_eq!(plain[i], clipped[i], epsilon = 1e-9);
            }
        }
        // the implied clean sample is far outside [-1, 1]; clamping it gives
        // signal[prev] * 1 + direction * eps
        let k = 50;
        let big = [s.signal(k) * 5.0 + s.noise(k) * 0.5, 0.0, 0.0];
        let out = ddim_step_clipped(&big, &[0.5, 0.0, 0.0], k, 0, &s, 0.0, &[0.0; 3], 1.0).unwrap();
        assert_abs_diff_eq!(out[0], 1.0, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn perfect_denoiser_reconstructs(
            a in prop::array::uniform3(-1.0..1.0f64),
            e in prop::array::uniform3(-3.0..3.0f64),
            count in 1usize..=100,
        ) {
            let s = linear100();
            let back = invert(a, e, &s, count);
            for i in 0..3 {
                prop_assert!((back[i] - a[i]).abs() < 1e-6);
            }
        }
    }

    fn small_denoiser(seed: u64) -> Denoiser {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Denoiser::new(&[16], 8, &mut rng).unwrap()
    }

    #[test]
    fn loss_zero_for_exact_prediction_and_d_squared_for_offset() {
        let s = linear100();
        // identity-free construction: zero network predicts bias only
        let mut d = small_denoiser(1);
        for l in d.mlp.layers_mut() {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        let v = vec![0.0; CLOUD_FEATURE_DIM];
        let out = training_loss(&d, &[0.1, 0.2, 0.3], &v, &[0.0; 3], 10, &[0.0; 3], &s).unwrap();
        assert_eq!(out.loss, 0.0);
        let last = d.mlp.layers().len() - 1;
        d.mlp.layers_mut()[last].bias.fill(0.25);
        let out = training_loss(&d, &[0.1, 0.2, 0.3], &v, &[0.0; 3], 10, &[0.0; 3], &s).unwrap();
        assert_abs_diff_eq!(out.loss, 0.0625, epsilon = 1e-15);
    }

    #[test]
    fn loss_matches_independent_mse_and_finite_differences() {
        let s = linear100();
        let d = small_denoiser(2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v: Vec<f64> = (0..CLOUD_FEATURE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        let st = [0.3, -0.1, 0.5];
        let a0 = [0.2, -0.6, 0.1];
        let eps = [0.5, -1.0, 0.3];
        let k = 37;
        let out = training_loss(&d, &a0, &v, &st, k, &eps, &s).unwrap();
        let noisy = add_noise(&a0, &eps, k, &s).unwrap();
        let pred = d.predict(&noisy, k, &v, &st).unwrap();
        let mse = (0..3).map(|i| (pred[i] - eps[i]).powi(2)).sum::<f64>() / 3.0;
        assert_abs_diff_eq!(out.loss, mse, epsilon = 1e-14);

        let h = 1e-5;
        let base = d.mlp.flatten();
        let analytic = out.grads.flatten();
        let eval = |p: &[f64]| {
            let dd = Denoiser::from_mlp(Mlp::from_flat(&d.mlp.specs(), p).unwrap(), d.time_dim).unwrap();
            training_loss(&dd, &a0, &v, &st, k, &eps, &s).unwrap().loss
        };
        for i in (0..base.len()).step_by(7) {
            let mut p = base.clone();
            p[i] += h;
            let lp = eval(&p);
            p[i] -= 2.0 * h;
            let lm = eval(&p);
            let fd = (lp - lm) / (2.0 * h);
            let denom = fd.abs().max(analytic[i].abs()).max(1e-6);
            assert!((fd - analytic[i]).abs() / denom < 1e-4, "param {i}: {fd} vs {}", analytic[i]);
        }
        for c in (0..CLOUD_FEATURE_DIM).step_by(5) {
            let mut vp = v.clone();
            vp[c] += h;
            let lp = training_loss(&d, &a0, &vp, &st, k, &eps, &s).unwrap().loss;
            vp[c] -= 2.0 * h;
            let lm = training_loss(&d, &a0, &vp, &st, k, &eps, &s).unwrap().loss;
            let fd = (lp - lm) / (2.0 * h);
            let an = out.feature_grad[[0, c]];
            let denom = fd.abs().max(an.abs()).max(1e-6);
            assert!((fd - an).abs() / denom < 1e-4);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let s = linear100();
        let d = small_denoiser(3);
        let v = vec![0.1; CLOUD_FEATURE_DIM];
        let a = sample(&d, &v, &[0.0; 3], &s, 10, 0.0, 42).unwrap();
        let b = sample(&d, &v, &[0.0; 3], &s, 10, 0.0, 42).unwrap();
        assert_eq!(a, b);
        let c = sample(&d, &v, &[0.0; 3], &s, 10, 0.5, 42).unwrap();
        assert_eq!(c, sample(&d, &v, &[0.0; 3], &s, 10, 0.5, 42).unwrap());
        assert!(sample(&d, &v, &[0.0; 3], &s, 0, 0.0, 1).is_err());
        assert!(sample(&d, &v, &[0.0; 3], &s, 101, 0.0, 1).is_err());
    }
}
