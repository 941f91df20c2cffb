//! The full classifier: pooling tower(s) → ReLU hidden layer → sigmoid
//! outputs, with initialisation and parameter/size accounting.
//!
//! In `separate` mode each frame row is split into its video and audio
//! columns and each part gets its own pooling tower; the descriptors are
//! concatenated. In `concatenated` mode one tower pools the full row.

use std::borrow::Borrow;
use std::fmt;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::pooling::{
    fv_backward, fv_forward, vlad_backward, vlad_forward, FvCache, FvParams, VladCache, VladParams,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingKind {
    NetVlad,
    NetFv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityMode {
    Separate,
    Concatenated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub pooling_kind: PoolingKind,
    pub cluster_size: usize,
    pub audio_cluster_size: usize,
    pub hidden_size: usize,
    pub d_video: usize,
    pub d_audio: usize,
    pub vocab_size: usize,
    pub modality_mode: ModalityMode,
}

/// Column range and cluster count of one pooling tower.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TowerSpec {
    pub offset: usize,
    pub dim: usize,
    pub clusters: usize,
}

impl ModelConfig {
    /// Separate towers with `audio_cluster_size = max(1, K / 4)`.
    pub fn new(
        pooling_kind: PoolingKind,
        cluster_size: usize,
        hidden_size: usize,
        d_video: usize,
        d_audio: usize,
        vocab_size: usize,
    ) -> Self {
        Self {
            pooling_kind,
            cluster_size,
            audio_cluster_size: (cluster_size / 4).max(1),
            hidden_size,
            d_video,
            d_audio,
            vocab_size,
            modality_mode: ModalityMode::Separate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cluster_size == 0 || self.hidden_size == 0 {
            return Err(invalid("cluster_size and hidden_size must be at least 1"));
        }
        if self.d_video == 0 || self.vocab_size == 0 {
            return Err(invalid("d_video and vocab_size must be at least 1"));
        }
        if self.modality_mode == ModalityMode::Separate && self.d_audio > 0 && self.audio_cluster_size == 0 {
            return Err(invalid("audio_cluster_size must be at least 1 with separate audio pooling"));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.d_video + self.d_audio
    }

    pub fn towers(&self) -> Vec<TowerSpec> {
        match self.modality_mode {
            ModalityMode::Concatenated => vec![TowerSpec {
                offset: 0,
                dim: self.input_width(),
                clusters: self.cluster_size,
            }],
            ModalityMode::Separate => {
                let mut t = vec![TowerSpec { offset: 0, dim: self.d_video, clusters: self.cluster_size }];
                if self.d_audio > 0 {
                    t.push(TowerSpec {
                        offset: self.d_video,
                        dim: self.d_audio,
                        clusters: self.audio_cluster_size,
                    });
                }
                t
            }
        }
    }

    fn descriptor_factor(&self) -> usize {
        match self.pooling_kind {
            PoolingKind::NetVlad => 1,
            PoolingKind::NetFv => 2,
        }
    }

    /// Length of the concatenated pooled descriptor.
    pub fn pooled_dim(&self) -> usize {
        self.towers()
            .iter()
            .map(|t| self.descriptor_factor() * t.dim * t.clusters)
            .sum()
    }

    /// Every parameter array as `(name, shape)`, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, t) in self.towers().iter().enumerate() {
            out.push((format!("tower{i}.assign_weights"), vec![t.dim, t.clusters]));
            out.push((format!("tower{i}.assign_bias"), vec![t.clusters]));
            out.push((format!("tower{i}.centers"), vec![t.clusters, t.dim]));
            if self.pooling_kind == PoolingKind::NetFv {
                out.push((format!("tower{i}.spreads"), vec![t.clusters, t.dim]));
            }
        }
        let p = self.pooled_dim();
        out.push(("hidden.weights".into(), vec![p, self.hidden_size]));
        out.push(("hidden.bias".into(), vec![self.hidden_size]));
        out.push(("output.weights".into(), vec![self.hidden_size, self.vocab_size]));
        out.push(("output.bias".into(), vec![self.vocab_size]));
        out
    }
}

/// Closed-form number of trainable scalars.
pub fn parameter_count(config: &ModelConfig) -> u64 {
    let pooling: u64 = config
        .towers()
        .iter()
        .map(|t| {
            let (d, k) = (t.dim as u64, t.clusters as u64);
            match config.pooling_kind {
                PoolingKind::NetVlad => 2 * d * k + k,
                PoolingKind::NetFv => 3 * d * k + k,
            }
        })
        .sum();
    let p = config.pooled_dim() as u64;
    let h = config.hidden_size as u64;
    let l = config.vocab_size as u64;
    pooling + p * h + h + h * l + l
}

pub fn size_bytes(config: &ModelConfig, bytes_per_param: u64) -> u64 {
    parameter_count(config) * bytes_per_param
}

/// 1 GiB.
pub const SIZE_LIMIT_BYTES: u64 = 1 << 30;
pub const BYTES_PER_PARAM: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeReport {
    pub parameters: u64,
    pub bytes: u64,
    pub limit_bytes: u64,
    pub pass: bool,
}

impl fmt::Display for SizeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} parameters, {} bytes ({:.3} GB) against limit {} bytes: {}",
            self.parameters,
            self.bytes,
            self.bytes as f64 / 1e9,
            self.limit_bytes,
            if self.pass { "pass" } else { "FAIL" }
        )
    }
}

/// Fails iff the single-precision size reaches `limit_bytes`.
pub fn check_size_limit(config: &ModelConfig, limit_bytes: u64) -> SizeReport {
    let bytes = size_bytes(config, BYTES_PER_PARAM);
    SizeReport {
        parameters: parameter_count(config),
        bytes,
        limit_bytes,
        pass: bytes < limit_bytes,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PoolParams {
    Vlad(VladParams),
    Fv(FvParams),
}

/// Every trainable array of the model. Also used, shape for shape, for
/// gradients and optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub towers: Vec<PoolParams>,
    /// `pooled_dim x H`
    pub hidden_weights: Array2<f64>,
    pub hidden_bias: Array1<f64>,
    /// `H x L`
    pub output_weights: Array2<f64>,
    pub output_bias: Array1<f64>,
}

fn slice_of<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice().expect("parameter arrays are contiguous")
}

fn slice_of_mut<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut().expect("parameter arrays are contiguous")
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        let towers = config
            .towers()
            .iter()
            .map(|t| match config.pooling_kind {
                PoolingKind::NetVlad => PoolParams::Vlad(VladParams::zeros(t.dim, t.clusters)),
                PoolingKind::NetFv => PoolParams::Fv(FvParams::zeros(t.dim, t.clusters)),
            })
            .collect();
        let p = config.pooled_dim();
        Self {
            towers,
            hidden_weights: Array2::zeros((p, config.hidden_size)),
            hidden_bias: Array1::zeros(config.hidden_size),
            output_weights: Array2::zeros((config.hidden_size, config.vocab_size)),
            output_bias: Array1::zeros(config.vocab_size),
        }
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, a) in z.arrays_mut() {
            a.fill(0.0);
        }
        z
    }

    /// Named flat views, in the order of [`ModelConfig::param_shapes`].
    pub fn arrays(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (i, t) in self.towers.iter().enumerate() {
            match t {
                PoolParams::Vlad(p) => {
                    out.push((format!("tower{i}.assign_weights"), slice_of(&p.assign_weights)));
                    out.push((format!("tower{i}.assign_bias"), slice_of(&p.assign_bias)));
                    out.push((format!("tower{i}.centers"), slice_of(&p.centers)));
                }
                PoolParams::Fv(p) => {
                    out.push((format!("tower{i}.assign_weights"), slice_of(&p.assign_weights)));
                    out.push((format!("tower{i}.assign_bias"), slice_of(&p.assign_bias)));
                    out.push((format!("tower{i}.centers"), slice_of(&p.centers)));
                    out.push((format!("tower{i}.spreads"), slice_of(&p.spreads)));
                }
            }
        }
        out.push(("hidden.weights".into(), slice_of(&self.hidden_weights)));
        out.push(("hidden.bias".into(), slice_of(&self.hidden_bias)));
        out.push(("output.weights".into(), slice_of(&self.output_weights)));
        out.push(("output.bias".into(), slice_of(&self.output_bias)));
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (i, t) in self.towers.iter_mut().enumerate() {
            match t {
                PoolParams::Vlad(p) => {
                    out.push((format!("tower{i}.assign_weights"), slice_of_mut(&mut p.assign_weights)));
                    out.push((format!("tower{i}.assign_bias"), slice_of_mut(&mut p.assign_bias)));
                    out.push((format!("tower{i}.centers"), slice_of_mut(&mut p.centers)));
                }
                PoolParams::Fv(p) => {
                    out.push((format!("tower{i}.assign_weights"), slice_of_mut(&mut p.assign_weights)));
                    out.push((format!("tower{i}.assign_bias"), slice_of_mut(&mut p.assign_bias)));
                    out.push((format!("tower{i}.centers"), slice_of_mut(&mut p.centers)));
                    out.push((format!("tower{i}.spreads"), slice_of_mut(&mut p.spreads)));
                }
            }
        }
        out.push(("hidden.weights".into(), slice_of_mut(&mut self.hidden_weights)));
        out.push(("hidden.bias".into(), slice_of_mut(&mut self.hidden_bias)));
        out.push(("output.weights".into(), slice_of_mut(&mut self.output_weights)));
        out.push(("output.bias".into(), slice_of_mut(&mut self.output_bias)));
        out
    }

    /// Number of scalars, by enumeration of the allocated arrays.
    pub fn scalar_count(&self) -> usize {
        self.arrays().iter().map(|(_, a)| a.len()).sum()
    }

    pub fn project_spreads(&mut self) {
        for t in &mut self.towers {
            if let PoolParams::Fv(p) = t {
                p.project_spreads();
            }
        }
    }

    /// Shapes match `other` array for array.
    pub fn same_shape(&self, other: &ModelParams) -> bool {
        let a = self.arrays();
        let b = other.arrays();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.0 == y.0 && x.1.len() == y.1.len())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

/// Parameter gradients plus the gradient of every input frame matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGradients {
    pub params: ModelParams,
    pub inputs: Vec<Array2<f64>>,
}

#[derive(Clone, Debug)]
enum TowerCache {
    Vlad(VladCache),
    Fv(FvCache),
}

/// Intermediates of one [`Model::forward`] call.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    config: ModelConfig,
    towers: Vec<Vec<TowerCache>>,
    frame_counts: Vec<usize>,
    pooled: Array2<f64>,
    hidden_pre: Array2<f64>,
    hidden: Array2<f64>,
    probs: Array2<f64>,
}

impl ForwardCache {
    pub fn probabilities(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn hidden_preactivations(&self) -> &Array2<f64> {
        &self.hidden_pre
    }
}

fn normal_fill(rng: &mut ChaCha8Rng, a: &mut [f64], std: f64) {
    for v in a {
        let z: f64 = rng.sample(StandardNormal);
        *v = z * std;
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Deterministic initialisation: weights ~ N(0, 1/fan_in), centers ~
/// N(0, 1/D) (the per-coordinate scale of unit-norm features), spreads 1,
/// biases 0.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::zeros(config);
    for t in &mut params.towers {
        let (w, c, spreads) = match t {
            PoolParams::Vlad(p) => (&mut p.assign_weights, &mut p.centers, None),
            PoolParams::Fv(p) => (&mut p.assign_weights, &mut p.centers, Some(&mut p.spreads)),
        };
        let std = 1.0 / (w.nrows() as f64).sqrt();
        normal_fill(&mut rng, slice_of_mut(w), std);
        normal_fill(&mut rng, slice_of_mut(c), std);
        if let Some(s) = spreads {
            s.fill(1.0);
        }
    }
    let p = config.pooled_dim() as f64;
    let h = config.hidden_size as f64;
    normal_fill(&mut rng, slice_of_mut(&mut params.hidden_weights), 1.0 / p.sqrt());
    normal_fill(&mut rng, slice_of_mut(&mut params.output_weights), 1.0 / h.sqrt());
    Ok(Model { config: *config, params })
}

impl Model {
    pub fn zeros(config: &ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut params = ModelParams::zeros(config);
        for t in &mut params.towers {
            if let PoolParams::Fv(p) = t {
                p.spreads.fill(1.0);
            }
        }
        Ok(Model { config: *config, params })
    }

    /// Probabilities `B x L` for a batch of `T_b x (d_video + d_audio)` inputs.
    pub fn forward<A: Borrow<Array2<f64>>>(&self, batch: &[A]) -> Result<(Array2<f64>, ForwardCache)> {
        if batch.is_empty() {
            return Err(invalid("empty batch"));
        }
        let cfg = &self.config;
        let width = cfg.input_width();
        let specs = cfg.towers();
        let b = batch.len();
        let mut pooled = Array2::<f64>::zeros((b, cfg.pooled_dim()));
        let mut tower_caches = Vec::with_capacity(b);
        let mut frame_counts = Vec::with_capacity(b);

        for (i, x) in batch.iter().enumerate() {
            let x = x.borrow();
            if x.nrows() == 0 {
                return Err(invalid(format!("batch item {i} has no frames")));
            }
            if x.ncols() != width {
                return Err(shape(format!(
                    "batch item {i} has width {}, model expects {width}",
                    x.ncols()
                )));
            }
            frame_counts.push(x.nrows());
            let mut caches = Vec::with_capacity(specs.len());
            let mut at = 0;
            for (spec, tp) in specs.iter().zip(&self.params.towers) {
                let cols: ArrayView2<f64> = x.slice(s![.., spec.offset..spec.offset + spec.dim]);
                let (desc, cache) = match tp {
                    PoolParams::Vlad(p) => {
                        let (d, c) = vlad_forward(cols, p)?;
                        (d, TowerCache::Vlad(c))
                    }
                    PoolParams::Fv(p) => {
                        let (d, c) = fv_forward(cols, p)?;
                        (d, TowerCache::Fv(c))
                    }
                };
                pooled.slice_mut(s![i, at..at + desc.len()]).assign(&desc);
                at += desc.len();
                caches.push(cache);
            }
            tower_caches.push(caches);
        }

        let p = &self.params;
        let hidden_pre = pooled.dot(&p.hidden_weights) + &p.hidden_bias;
        let hidden = hidden_pre.mapv(|v| v.max(0.0));
        let logits = hidden.dot(&p.output_weights) + &p.output_bias;
        let probs = logits.mapv(sigmoid);

        let cache = ForwardCache {
            config: *cfg,
            towers: tower_caches,
            frame_counts,
            pooled,
            hidden_pre,
            hidden,
            probs: probs.clone(),
        };
        Ok((probs, cache))
    }

    /// Chain-rule gradients given `∂loss/∂probabilities`.
    pub fn backward(&self, grad_probs: &Array2<f64>, cache: &ForwardCache) -> Result<ModelGradients> {
        if cache.config != self.config {
            return Err(shape("forward cache was produced by a differently configured model"));
        }
        if grad_probs.dim() != cache.probs.dim() {
            return Err(shape(format!(
                "upstream gradient is {:?}, cached probabilities are {:?}",
                grad_probs.dim(),
                cache.probs.dim()
            )));
        }
        let p = &self.params;
        let probs = &cache.probs;
        let g_logits = grad_probs * &probs.mapv(|q| q * (1.0 - q));

        let mut grads = ModelParams::zeros(&self.config);
        grads.output_weights.assign(&cache.hidden.t().dot(&g_logits));
        grads.output_bias = g_logits.sum_axis(Axis(0));
        let g_hidden = g_logits.dot(&p.output_weights.t());
        let mut g_pre = g_hidden;
        ndarray::Zip::from(&mut g_pre)
            .and(&cache.hidden_pre)
            .for_each(|g, &z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            });
        grads.hidden_weights.assign(&cache.pooled.t().dot(&g_pre));
        grads.hidden_bias = g_pre.sum_axis(Axis(0));
        let g_pooled = g_pre.dot(&p.hidden_weights.t());

        let specs = self.config.towers();
        let mut inputs = Vec::with_capacity(cache.towers.len());
        for (i, caches) in cache.towers.iter().enumerate() {
            let mut g_in = Array2::<f64>::zeros((cache.frame_counts[i], self.config.input_width()));
            let mut at = 0;
            for ((spec, tc), gt) in specs.iter().zip(caches).zip(grads.towers.iter_mut()) {
                let cols = spec.offset..spec.offset + spec.dim;
                match (tc, gt) {
                    (TowerCache::Vlad(c), PoolParams::Vlad(acc)) => {
                        let len = spec.dim * spec.clusters;
                        let g = vlad_backward(g_pooled.slice(s![i, at..at + len]), c)?;
                        at += len;
                        acc.assign_weights += &g.params.assign_weights;
                        acc.assign_bias += &g.params.assign_bias;
                        acc.centers += &g.params.centers;
                        g_in.slice_mut(s![.., cols]).assign(&g.frames);
                    }
                    (TowerCache::Fv(c), PoolParams::Fv(acc)) => {
                        let len = 2 * spec.dim * spec.clusters;
                        let g = fv_backward(g_pooled.slice(s![i, at..at + len]), c)?;
                        at += len;
                        acc.assign_weights += &g.params.assign_weights;
                        acc.assign_bias += &g.params.assign_bias;
                        acc.centers += &g.params.centers;
                        acc.spreads += &g.params.spreads;
                        g_in.slice_mut(s![.., cols]).assign(&g.frames);
                    }
                    _ => return Err(shape("pooling kind of cache and model differ")),
                }
            }
            inputs.push(g_in);
        }
        Ok(ModelGradients { params: grads, inputs })
    }
}
