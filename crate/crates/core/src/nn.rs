//! Dense network stack: MLP forward/backward, Adam, the max-pooled point
//! encoder and sinusoidal timestep embeddings.
//!
//! Layers store weights as `input_dim x output_dim` so a batch is a row-major
//! `batch x input_dim` matrix multiplied on the right.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pointcloud::ColoredPointCloud;

/// Width of the pooled point-cloud feature.
pub const CLOUD_FEATURE_DIM: usize = 128;
/// Per-point encoder input: position (3) and color (3).
pub const POINT_INPUT_DIM: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("layer dimensions must be at least 1")]
    EmptyLayer,
    #[error("layer chain is broken at layer {0}")]
    BrokenChain(usize),
    #[error("cache does not match this network")]
    CacheMismatch,
    #[error("gradient or optimizer state shape does not match parameters")]
    ShapeMismatch,
    #[error("embedding dimension must be even, got {0}")]
    OddEmbeddingDim(usize),
    #[error("point cloud is empty")]
    EmptyCloud,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(input_dim: usize, output_dim: usize, activation: Activation) -> Self {
        Self { input_dim, output_dim, activation }
    }
}

/// ReLU hidden layers of the given widths and an identity output layer.
pub fn mlp_specs(input_dim: usize, hidden: &[usize], output_dim: usize) -> Vec<LayerSpec> {
    let mut dims = vec![input_dim];
    dims.extend_from_slice(hidden);
    dims.push(output_dim);
    let last = dims.len() - 2;
    dims.windows(2)
        .enumerate()
        .map(|(i, w)| {
            let act = if i == last { Activation::Identity } else { Activation::Relu };
            LayerSpec::new(w[0], w[1], act)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Per-layer inputs and post-activation outputs from a forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    outputs: Vec<Array2<f64>>,
}

impl MlpCache {
    pub fn rows(&self) -> usize {
        self.inputs.first().map_or(0, |a| a.nrows())
    }

    /// Restrict the cache to a subset of batch rows. Rows are independent in
    /// the forward pass, so backward over the subset equals backward over the
    /// full batch when every other row has zero output gradient.
    pub fn select_rows(&self, rows: &[usize]) -> MlpCache {
        let pick = |a: &Array2<f64>| a.select(Axis(0), rows);
        MlpCache {
            inputs: self.inputs.iter().map(pick).collect(),
            outputs: self.outputs.iter().map(pick).collect(),
        }
    }
}

/// Gradients (or any per-parameter quantity) shaped like an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            layers: mlp
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.weight.raw_dim()), Array1::zeros(l.bias.raw_dim())))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            *w += ow;
            *b += ob;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (w, b) in &mut self.layers {
            w.mapv_inplace(|v| v * s);
            b.mapv_inplace(|v| v * s);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }

    fn matches(&self, mlp: &Mlp) -> bool {
        self.layers.len() == mlp.layers.len()
            && self
                .layers
                .iter()
                .zip(&mlp.layers)
                .all(|((w, b), l)| w.dim() == l.weight.dim() && b.dim() == l.bias.dim())
    }
}

impl Mlp {
    fn check_specs(specs: &[LayerSpec]) -> Result<(), NnError> {
        if specs.is_empty() {
            return Err(NnError::EmptyLayer);
        }
        for (i, s) in specs.iter().enumerate() {
            if s.input_dim == 0 || s.output_dim == 0 {
                return Err(NnError::EmptyLayer);
            }
            if i > 0 && specs[i - 1].output_dim != s.input_dim {
                return Err(NnError::BrokenChain(i));
            }
        }
        Ok(())
    }

    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn new<R: Rng>(specs: &[LayerSpec], rng: &mut R) -> Result<Self, NnError> {
        Self::check_specs(specs)?;
        let layers = specs
            .iter()
            .map(|&spec| {
                let bound = 1.0 / (spec.input_dim as f64).sqrt();
                let weight = Array2::from_shape_fn((spec.input_dim, spec.output_dim), |_| {
                    rng.random_range(-bound..=bound)
                });
                let bias = Array1::from_shape_fn(spec.output_dim, |_| rng.random_range(-bound..=bound));
                Layer { spec, weight, bias }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros(specs: &[LayerSpec]) -> Result<Self, NnError> {
        Self::check_specs(specs)?;
        Ok(Self {
            layers: specs
                .iter()
                .map(|&spec| Layer {
                    spec,
                    weight: Array2::zeros((spec.input_dim, spec.output_dim)),
                    bias: Array1::zeros(spec.output_dim),
                })
                .collect(),
        })
    }

    /// Rebuild from specs and a flat parameter vector (layout of [`Mlp::flatten`]).
    pub fn from_flat(specs: &[LayerSpec], params: &[f64]) -> Result<Self, NnError> {
        let mut mlp = Self::zeros(specs)?;
        mlp.set_flat(params)?;
        Ok(mlp)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].spec.output_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Weights row-major, then bias, layer by layer.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weight.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    pub fn set_flat(&mut self, params: &[f64]) -> Result<(), NnError> {
        if params.len() != self.param_count() {
            return Err(NnError::DimensionMismatch { expected: self.param_count(), got: params.len() });
        }
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            l.weight.iter_mut().for_each(|w| *w = it.next().unwrap());
            l.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
        }
        Ok(())
    }

    /// Batched forward pass; rows are samples.
    pub fn forward(&self, input: ArrayView2<f64>) -> Result<(Array2<f64>, MlpCache), NnError> {
        if input.ncols() != self.input_dim() {
            return Err(NnError::DimensionMismatch { expected: self.input_dim(), got: input.ncols() });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut x = input.to_owned();
        for l in &self.layers {
            let mut y = x.dot(&l.weight);
            y += &l.bias;
            if l.spec.activation == Activation::Relu {
                y.mapv_inplace(|v| v.max(0.0));
            }
            inputs.push(x);
            x = y.clone();
            outputs.push(y);
        }
        Ok((x, MlpCache { inputs, outputs }))
    }

    /// Forward pass without keeping a cache.
    pub fn infer(&self, input: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        if input.ncols() != self.input_dim() {
            return Err(NnError::DimensionMismatch { expected: self.input_dim(), got: input.ncols() });
        }
        let mut x = input.to_owned();
        for l in &self.layers {
            let mut y = x.dot(&l.weight);
            y += &l.bias;
            if l.spec.activation == Activation::Relu {
                y.mapv_inplace(|v| v.max(0.0));
            }
            x = y;
        }
        Ok(x)
    }

    pub fn forward_vec(&self, input: &[f64]) -> Result<(Vec<f64>, MlpCache), NnError> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|_| NnError::DimensionMismatch { expected: self.input_dim(), got: input.len() })?;
        let (y, cache) = self.forward(x)?;
        Ok((y.into_raw_vec_and_offset().0, cache))
    }

    /// Reverse-mode gradients of the forward map. `output_grad` is
    /// `d loss / d output` for the cached batch. Parameter gradients are
    /// summed over rows.
    pub fn backward(&self, cache: &MlpCache, output_grad: ArrayView2<f64>) -> Result<(MlpGrads, Array2<f64>), NnError> {
        if cache.inputs.len() != self.layers.len() || cache.outputs.len() != self.layers.len() {
            return Err(NnError::CacheMismatch);
        }
        for (l, (x, y)) in self.layers.iter().zip(cache.inputs.iter().zip(&cache.outputs)) {
            if x.ncols() != l.spec.input_dim || y.ncols() != l.spec.output_dim || x.nrows() != y.nrows() {
                return Err(NnError::CacheMismatch);
            }
        }
        if output_grad.dim() != cache.outputs[self.layers.len() - 1].dim() {
            return Err(NnError::CacheMismatch);
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = output_grad.to_owned();
        for (i, l) in self.layers.iter().enumerate().rev() {
            if l.spec.activation == Activation::Relu {
                ndarray::Zip::from(&mut g).and(&cache.outputs[i]).for_each(|gv, &out| {
                    if out <= 0.0 {
                        *gv = 0.0;
                    }
                });
            }
            let dw = cache.inputs[i].t().dot(&g);
            let db = g.sum_axis(Axis(0));
            let gin = g.dot(&l.weight.t());
            grads.push((dw, db));
            g = gin;
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, g))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: MlpGrads,
    second: MlpGrads,
}

impl AdamState {
    pub fn new(mlp: &Mlp, config: AdamConfig) -> Self {
        Self { config, step: 0, first: MlpGrads::zeros_like(mlp), second: MlpGrads::zeros_like(mlp) }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(mlp: &mut Mlp, grads: &MlpGrads, state: &mut AdamState) -> Result<(), NnError> {
    if !grads.matches(mlp) || !state.first.matches(mlp) {
        return Err(NnError::ShapeMismatch);
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    };
    for (i, layer) in mlp.layers.iter_mut().enumerate() {
        let (gw, gb) = &grads.layers[i];
        let (mw, mb) = &mut state.first.layers[i];
        let (vw, vb) = &mut state.second.layers[i];
        ndarray::Zip::from(&mut layer.weight).and(gw).and(mw).and(vw).for_each(|p, &g, m, v| update(p, g, m, v));
        ndarray::Zip::from(&mut layer.bias).and(gb).and(mb).and(vb).for_each(|p, &g, m, v| update(p, g, m, v));
    }
    Ok(())
}

/// Pooled 128-dimensional point-cloud descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudFeature(Vec<f64>);

impl CloudFeature {
    pub fn new(values: Vec<f64>) -> Result<Self, NnError> {
        if values.len() != CLOUD_FEATURE_DIM {
            return Err(NnError::DimensionMismatch { expected: CLOUD_FEATURE_DIM, got: values.len() });
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Shared per-point MLP followed by a componentwise max over points.
#[derive(Debug, Clone, PartialEq)]
pub struct PointEncoder {
    pub mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    mlp: MlpCache,
    /// For each cloud and feature component, the row that won the max.
    argmax: Array2<usize>,
}

impl PointEncoder {
    pub fn new<R: Rng>(hidden: &[usize], rng: &mut R) -> Result<Self, NnError> {
        let specs = mlp_specs(POINT_INPUT_DIM, hidden, CLOUD_FEATURE_DIM);
        Ok(Self { mlp: Mlp::new(&specs, rng)? })
    }

    pub fn from_mlp(mlp: Mlp) -> Result<Self, NnError> {
        if mlp.input_dim() != POINT_INPUT_DIM {
            return Err(NnError::DimensionMismatch { expected: POINT_INPUT_DIM, got: mlp.input_dim() });
        }
        if mlp.output_dim() != CLOUD_FEATURE_DIM {
            return Err(NnError::DimensionMismatch { expected: CLOUD_FEATURE_DIM, got: mlp.output_dim() });
        }
        Ok(Self { mlp })
    }

    /// Encode several clouds at once. `points` stacks every cloud's rows and
    /// `segments[i]` is the number of rows belonging to cloud `i`.
    pub fn forward(&self, points: ArrayView2<f64>, segments: &[usize]) -> Result<(Array2<f64>, EncoderCache), NnError> {
        let total: usize = segments.iter().sum();
        if total != points.nrows() {
            return Err(NnError::DimensionMismatch { expected: total, got: points.nrows() });
        }
        if segments.iter().any(|&n| n == 0) {
            return Err(NnError::EmptyCloud);
        }
        let (per_point, cache) = self.mlp.forward(points)?;
        let mut features = Array2::zeros((segments.len(), CLOUD_FEATURE_DIM));
        let mut argmax = Array2::zeros((segments.len(), CLOUD_FEATURE_DIM));
        let mut start = 0;
        for (b, &n) in segments.iter().enumerate() {
            let block = per_point.slice(s![start..start + n, ..]);
            for c in 0..CLOUD_FEATURE_DIM {
                let mut best = f64::NEG_INFINITY;
                let mut best_row = 0;
                for (r, &v) in block.column(c).iter().enumerate() {
                    if v > best {
                        best = v;
                        best_row = r;
                    }
                }
                features[[b, c]] = best;
                argmax[[b, c]] = start + best_row;
            }
            start += n;
        }
        Ok((features, EncoderCache { mlp: cache, argmax }))
    }

    /// Route feature gradients back to the winning points only.
    pub fn backward(&self, cache: &EncoderCache, feature_grad: ArrayView2<f64>) -> Result<MlpGrads, NnError> {
        if feature_grad.dim() != cache.argmax.dim() {
            return Err(NnError::CacheMismatch);
        }
        let mut active: Vec<usize> = cache.argmax.iter().copied().collect();
        active.sort_unstable();
        active.dedup();
        let mut local = Array2::zeros((active.len(), CLOUD_FEATURE_DIM));
        for ((b, c), &row) in cache.argmax.indexed_iter() {
            let pos = active.binary_search(&row).expect("active row");
            local[[pos, c]] += feature_grad[[b, c]];
        }
        let sub = cache.mlp.select_rows(&active);
        let (grads, _) = self.mlp.backward(&sub, local.view())?;
        Ok(grads)
    }

    /// Encode one cloud using raw `(position, color)` rows.
    pub fn encode_cloud(&self, cloud: &ColoredPointCloud) -> Result<CloudFeature, NnError> {
        if cloud.is_empty() {
            return Err(NnError::EmptyCloud);
        }
        let rows = raw_point_rows(cloud);
        let (f, _) = self.forward(rows.view(), &[cloud.len()])?;
        CloudFeature::new(f.row(0).to_vec())
    }
}

/// `n x 6` matrix of positions and colors.
pub fn raw_point_rows(cloud: &ColoredPointCloud) -> Array2<f64> {
    Array2::from_shape_fn((cloud.len(), POINT_INPUT_DIM), |(i, j)| {
        let p = &cloud.points[i];
        match j {
            0 => p.position.x,
            1 => p.position.y,
            2 => p.position.z,
            _ => p.color[j - 3],
        }
    })
}

/// Sinusoidal embedding: `[sin(k w_0) .. sin(k w_{h-1}), cos(k w_0) .. cos(k w_{h-1})]`
/// with `h = dim / 2` and `w_i = 10000^(-i / h)`.
pub fn timestep_embed(k: usize, dim: usize) -> Result<Vec<f64>, NnError> {
    if dim % 2 != 0 {
        return Err(NnError::OddEmbeddingDim(dim));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = k as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::geometry::Vec3;
    use crate::pointcloud::ColoredPoint;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mlp = Mlp::zeros(&mlp_specs(4, &[5, 6], 3)).unwrap();
        let (y, _) = mlp.forward_vec(&[1.0, -2.0, 3.0, 0.5]).unwrap();
        assert_eq!(y, vec![0.0; 3]);
    }

    #[test]
    fn identity_layer_passes_input() {
        let mut mlp = Mlp::zeros(&[LayerSpec::new(3, 3, Activation::Identity)]).unwrap();
        mlp.layers_mut()[0].weight = Array2::eye(3);
        let (y, cache) = mlp.forward_vec(&[0.3, -1.0, 2.0]).unwrap();
        assert_eq!(y, vec![0.3, -1.0, 2.0]);
        let g = array![[0.1, 0.2, -0.3]];
        let (_, gin) = mlp.backward(&cache, g.view()).unwrap();
        assert_eq!(gin, g);
    }

    #[test]
    fn two_layer_hand_computed() {
        // h = relu(W1^T x + b1), y = W2^T h + b2 with x = (1, 2)
        let mut mlp = Mlp::zeros(&mlp_specs(2, &[2], 2)).unwrap();
        mlp.layers_mut()[0].weight = array![[1.0, -1.0], [0.5, 2.0]];
        mlp.layers_mut()[0].bias = array![0.0, -10.0];
        mlp.layers_mut()[1].weight = array![[2.0, 1.0], [3.0, -1.0]];
        mlp.layers_mut()[1].bias = array![0.5, 0.25];
        // pre-activation: (1*1 + 2*0.5, 1*-1 + 2*2 - 10) = (2, -7) -> relu (2, 0)
        // output: (2*2 + 0*3 + 0.5, 2*1 + 0*-1 + 0.25) = (4.5, 2.25)
        let (y, _) = mlp.forward_vec(&[1.0, 2.0]).unwrap();
        assert_eq!(y, vec![4.5, 2.25]);
    }

    #[test]
    fn dimension_and_cache_errors() {
        let mlp = Mlp::new(&mlp_specs(3, &[4], 2), &mut rng(1)).unwrap();
        assert!(matches!(mlp.forward_vec(&[1.0]), Err(NnError::DimensionMismatch { .. })));
        let other = Mlp::new(&mlp_specs(3, &[5], 2), &mut rng(1)).unwrap();
        let (_, cache) = other.forward_vec(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(mlp.backward(&cache, array![[1.0, 1.0]].view()).unwrap_err(), NnError::CacheMismatch);
        assert!(matches!(Mlp::zeros(&[LayerSpec::new(2, 3, Activation::Relu), LayerSpec::new(4, 1, Activation::Identity)]), Err(NnError::BrokenChain(1))));
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let mlp = Mlp::new(&mlp_specs(3, &[4, 4], 2), &mut rng(2)).unwrap();
        let (_, cache) = mlp.forward_vec(&[0.2, -0.1, 0.7]).unwrap();
        let (g, gin) = mlp.backward(&cache, Array2::zeros((1, 2)).view()).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        assert!(gin.iter().all(|&v| v == 0.0));
    }

    fn loss_of(mlp: &Mlp, x: &Array2<f64>, target: &Array2<f64>) -> f64 {
        let y = mlp.infer(x.view()).unwrap();
        0.5 * (&y - target).mapv(|v| v * v).sum()
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut r = rng(7);
        for trial in 0..5 {
            let mlp = Mlp::new(&mlp_specs(3, &[6, 5], 2), &mut r).unwrap();
            let x = Array2::from_shape_fn((4, 3), |_| r.random_range(-1.0..1.0));
            let target = Array2::from_shape_fn((4, 2), |_| r.random_range(-1.0..1.0));
            let (y, cache) = mlp.forward(x.view()).unwrap();
            let (grads, _) = mlp.backward(&cache, (&y - &target).view()).unwrap();
            let analytic = grads.flatten();
            let base = mlp.flatten();
            let h = 1e-5;
            for i in 0..base.len() {
                let mut p = base.clone();
                p[i] += h;
                let lp = loss_of(&Mlp::from_flat(&mlp.specs(), &p).unwrap(), &x, &target);
                p[i] -= 2.0 * h;
                let lm = loss_of(&Mlp::from_flat(&mlp.specs(), &p).unwrap(), &x, &target);
                let fd = (lp - lm) / (2.0 * h);
                let denom = fd.abs().max(analytic[i].abs()).max(1e-6);
                assert!((fd - analytic[i]).abs() / denom < 1e-4, "trial {trial} param {i}: fd {fd} vs {}", analytic[i]);
            }
        }
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut mlp = Mlp::new(&mlp_specs(2, &[3], 1), &mut rng(3)).unwrap();
        let before = mlp.clone();
        let mut st = AdamState::new(&mlp, AdamConfig::default());
        let zero = MlpGrads::zeros_like(&mlp);
        adam_step(&mut mlp, &zero, &mut st).unwrap();
        assert_eq!(mlp, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_is_sign_step() {
        let mut mlp = Mlp::zeros(&[LayerSpec::new(1, 2, Activation::Identity)]).unwrap();
        let mut g = MlpGrads::zeros_like(&mlp);
        g.layers[0].0 = array![[0.5, -3.0]];
        g.layers[0].1 = array![1e-3, 0.0];
        let cfg = AdamConfig::default();
        let mut st = AdamState::new(&mlp, cfg);
        adam_step(&mut mlp, &g, &mut st).unwrap();
        let w = &mlp.layers()[0].weight;
        assert_abs_diff_eq!(w[[0, 0]], -cfg.lr * 0.5 / (0.5 + cfg.eps), epsilon = 1e-15);
        assert_abs_diff_eq!(w[[0, 1]], cfg.lr * 3.0 / (3.0 + cfg.eps), epsilon = 1e-15);
        assert_abs_diff_eq!(mlp.layers()[0].bias[0], -cfg.lr, epsilon = 1e-7);
    }

    #[test]
    fn adam_two_constant_steps_follow_recurrence() {
        let mut mlp = Mlp::zeros(&[LayerSpec::new(1, 1, Activation::Identity)]).unwrap();
        let mut g = MlpGrads::zeros_like(&mlp);
        g.layers[0].0 = array![[0.2]];
        let cfg = AdamConfig { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let mut st = AdamState::new(&mlp, cfg);
        adam_step(&mut mlp, &g, &mut st).unwrap();
        adam_step(&mut mlp, &g, &mut st).unwrap();
        // hand recurrence
        let gv: f64 = 0.2;
        let (mut m, mut v, mut p) = (0.0, 0.0, 0.0);
        for t in 1..=2 {
            m = 0.9 * m + 0.1 * gv;
            v = 0.999 * v + 0.001 * gv * gv;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            p -= 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        assert_abs_diff_eq!(mlp.layers()[0].weight[[0, 0]], p, epsilon = 1e-15);
        assert_abs_diff_eq!(p, -0.02, epsilon = 1e-7);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut a = Mlp::zeros(&mlp_specs(2, &[3], 1)).unwrap();
        let b = Mlp::zeros(&mlp_specs(2, &[4], 1)).unwrap();
        let mut st = AdamState::new(&a, AdamConfig::default());
        assert_eq!(adam_step(&mut a, &MlpGrads::zeros_like(&b), &mut st), Err(NnError::ShapeMismatch));
    }

    fn cp(x: f64, y: f64, z: f64, c: f64) -> ColoredPoint {
        ColoredPoint::new(Vec3::new(x, y, z), [c, 1.0 - c, 0.5])
    }

    #[test]
    fn encoder_repeated_point() {
        let enc = PointEncoder::new(&[16, 16], &mut rng(4)).unwrap();
        let p = cp(0.1, -0.2, 0.3, 0.7);
        let single = enc.encode_cloud(&ColoredPointCloud::new(vec![p])).unwrap();
        let many = enc.encode_cloud(&ColoredPointCloud::new(vec![p; 9])).unwrap();
        assert_eq!(single, many);
    }

    #[test]
    fn encoder_two_points_is_componentwise_max() {
        let enc = PointEncoder::new(&[16, 16], &mut rng(5)).unwrap();
        let (a, b) = (cp(0.1, -0.2, 0.3, 0.7), cp(-0.5, 0.4, 0.0, 0.1));
        let fa = enc.mlp.forward_vec(&raw_point_rows(&ColoredPointCloud::new(vec![a])).row(0).to_vec()).unwrap().0;
        let fb = enc.mlp.forward_vec(&raw_point_rows(&ColoredPointCloud::new(vec![b])).row(0).to_vec()).unwrap().0;
        let both = enc.encode_cloud(&ColoredPointCloud::new(vec![a, b])).unwrap();
        for c in 0..CLOUD_FEATURE_DIM {
            assert_eq!(both.as_slice()[c], fa[c].max(fb[c]));
        }
    }

    #[test]
    fn encoder_rejects_empty() {
        let enc = PointEncoder::new(&[8], &mut rng(6)).unwrap();
        assert_eq!(enc.encode_cloud(&ColoredPointCloud::default()), Err(NnError::EmptyCloud));
    }

    #[test]
    fn timestep_embedding() {
        let e0 = timestep_embed(0, 8).unwrap();
        assert_eq!(&e0[..4], &[0.0; 4]);
        assert_eq!(&e0[4..], &[1.0; 4]);
        assert_eq!(timestep_embed(3, 16).unwrap(), timestep_embed(3, 16).unwrap());
        let e5 = timestep_embed(5, 8).unwrap();
        let freqs: [f64; 4] = [1.0, 0.1, 0.01, 0.001]; // 10000^(-i/4)
        for i in 0..4 {
            assert_abs_diff_eq!(e5[i], (5.0 * freqs[i]).sin(), epsilon = 1e-12);
            assert_abs_diff_eq!(e5[4 + i], (5.0 * freqs[i]).cos(), epsilon = 1e-12);
        }
        assert_eq!(timestep_embed(1, 7), Err(NnError::OddEmbeddingDim(7)));
        let all: Vec<_> = (0..=100).map(|k| timestep_embed(k, 32).unwrap()).collect();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_ne!(all[i], all[j]);
            }
        }
    }
}
