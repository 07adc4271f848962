//! The two architecture families.
//!
//! Both run three `conv 5×5 → ReLU → pool` blocks and one fully connected layer.
//! A DCNN sees one 60×60 image; the eccentricity model sees 11 crops that flow
//! through the same (shared) filters as a batch of scales, which scale pooling
//! merges according to the schedule.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::pyramid::{contrast_normalize, extract_stack, Interpolation, NUM_SCALES};
use crate::stimulus::{downsample_input, Canvas, INPUT_SIZE};
use crate::tensor::gradcheck::{max_relative_error, GradCheckReport, FD_STEP};
use crate::tensor::{
    checkpoint, conv2d_valid_backward, conv2d_valid_supported, global_spatial_maxpool, linear,
    linear_backward, maxpool2d_supported, maxpool_backward, relu_backward_inplace, relu_inplace, scale_maxpool,
    scale_maxpool_backward, softmax_cross_entropy, Element, PoolRoute, ScaleGroups, ScaleRoute,
    Support,
    Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Dcnn,
    Eccentricity,
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dcnn" => Ok(Family::Dcnn),
            "eccentricity" | "ecc" => Ok(Family::Eccentricity),
            other => Err(Error::Config(format!("unknown model family '{other}'"))),
        }
    }
}

/// Where a DCNN collapses spatial resolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialPooling {
    /// Stride-1 pools only: 60-54-48-42.
    NoTotal,
    /// Stride-2 pools, global pool last: 60-27-11-1.
    Progressive,
    /// Stride-1 pools, global pool last: 60-54-48-1.
    #[default]
    AtEnd,
}

impl SpatialPooling {
    pub const ALL: [SpatialPooling; 3] = [
        SpatialPooling::NoTotal,
        SpatialPooling::Progressive,
        SpatialPooling::AtEnd,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SpatialPooling::NoTotal => "no_total",
            SpatialPooling::Progressive => "progressive",
            SpatialPooling::AtEnd => "at_end",
        }
    }
}

impl FromStr for SpatialPooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "no_total" => Ok(SpatialPooling::NoTotal),
            "progressive" => Ok(SpatialPooling::Progressive),
            "at_end" => Ok(SpatialPooling::AtEnd),
            _ => Err(Error::Config(format!("unknown spatial pooling '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

/// Parses `11-7-5-3-1`.
pub fn parse_schedule(s: &str) -> Result<Vec<usize>> {
    s.split('-')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad scale schedule '{s}'")))
        })
        .collect()
}

pub fn schedule_name(s: &[usize]) -> String {
    s.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("-")
}

fn default_schedule() -> Vec<usize> {
    vec![11, 11, 11, 11, 1]
}
fn default_channels() -> usize {
    32
}
fn default_filter() -> usize {
    5
}
fn default_classes() -> usize {
    NUM_CLASSES
}
fn default_input() -> usize {
    INPUT_SIZE
}

/// Architecture and its hyperparameters. Serialized as TOML; [`ModelConfig::hash`]
/// identifies trained artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    #[serde(default)]
    pub spatial_pooling: SpatialPooling,
    /// Scales remaining at input, after blocks 1–3, and before the classifier.
    #[serde(default = "default_schedule")]
    pub scale_schedule: Vec<usize>,
    #[serde(default)]
    pub contrast_norm: bool,
    #[serde(default)]
    pub interpolation: Interpolation,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_filter")]
    pub filter: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_input")]
    pub input_size: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub seed: u64,
    /// Learning rate; the family default when absent.
    #[serde(default)]
    pub lr: Option<f64>,
}

impl ModelConfig {
    pub fn dcnn(pooling: SpatialPooling) -> Self {
        ModelConfig {
            family: Family::Dcnn,
            spatial_pooling: pooling,
            scale_schedule: default_schedule(),
            contrast_norm: false,
            interpolation: Interpolation::Exponential,
            channels: default_channels(),
            filter: default_filter(),
            classes: default_classes(),
            input_size: default_input(),
            activation: Activation::Relu,
            seed: 0,
            lr: None,
        }
    }

    pub fn eccentricity(schedule: &[usize], contrast_norm: bool) -> Self {
        ModelConfig {
            family: Family::Eccentricity,
            scale_schedule: schedule.to_vec(),
            contrast_norm,
            ..ModelConfig::dcnn(SpatialPooling::AtEnd)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr.unwrap_or(match self.family {
            Family::Dcnn => 0.1,
            Family::Eccentricity => 0.01,
        })
    }

    /// Number of input scales the model consumes.
    pub fn input_scales(&self) -> usize {
        match self.family {
            Family::Dcnn => 1,
            Family::Eccentricity => self.scale_schedule[0],
        }
    }

    /// Short human-readable label, e.g. `dcnn-at_end` or `ecc-11-1-1-1-1-cn`.
    pub fn label(&self) -> String {
        match self.family {
            Family::Dcnn => format!("dcnn-{}", self.spatial_pooling.name()),
            Family::Eccentricity => format!(
                "ecc-{}{}{}",
                schedule_name(&self.scale_schedule),
                if self.contrast_norm { "-cn" } else { "" },
                if self.interpolation == Interpolation::Linear {
                    "-linear"
                } else {
                    ""
                }
            ),
        }
    }

    /// Copy with fields the family ignores reset to their defaults and the
    /// learning rate resolved, so equivalent configs hash alike.
    pub fn canonical(&self) -> ModelConfig {
        let mut c = self.clone();
        c.lr = Some(self.learning_rate());
        match c.family {
            Family::Dcnn => {
                c.scale_schedule = default_schedule();
                c.contrast_norm = false;
                c.interpolation = Interpolation::Exponential;
            }
            Family::Eccentricity => c.spatial_pooling = SpatialPooling::AtEnd,
        }
        c
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let c: ModelConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// SHA-256 of the canonical TOML, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.filter == 0 || self.classes < 2 {
            return Err(Error::Config(
                "channels and filter must be positive and classes at least 2".into(),
            ));
        }
        if let Some(lr) = self.lr {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("lr {lr} must be finite and >= 0")));
            }
        }
        if self.family == Family::Eccentricity {
            let s = &self.scale_schedule;
            if s.len() != 5 {
                return Err(Error::Config(format!(
                    "scale_schedule needs 5 entries, got {}",
                    schedule_name(s)
                )));
            }
            if s[0] != NUM_SCALES || s[4] != 1 {
                return Err(Error::Config(format!(
                    "scale_schedule must start at {NUM_SCALES} and end at 1, got {}",
                    schedule_name(s)
                )));
            }
            if s.windows(2).any(|w| w[1] > w[0] || w[1] == 0) {
                return Err(Error::Config(format!(
                    "scale_schedule must be non-increasing and positive, got {}",
                    schedule_name(s)
                )));
            }
        }
        Plan::new(self).map(|_| ())
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Pool {
    Window(usize),
    Global,
}

#[derive(Clone, Debug)]
struct BlockPlan {
    /// Applied in order right after the ReLU.
    scale_pools: Vec<ScaleGroups>,
    pool: Pool,
}

/// Static layer layout derived from a config.
#[derive(Clone, Debug)]
struct Plan {
    blocks: Vec<BlockPlan>,
    /// Spatial extent after each block's pool.
    pooled: Vec<usize>,
    fc_in: usize,
}

impl Plan {
    fn new(c: &ModelConfig) -> Result<Plan> {
        let pooling = match c.family {
            Family::Dcnn => c.spatial_pooling,
            Family::Eccentricity => SpatialPooling::AtEnd,
        };
        let pools = match pooling {
            SpatialPooling::NoTotal => [Pool::Window(1), Pool::Window(1), Pool::Window(1)],
            SpatialPooling::Progressive => [Pool::Window(2), Pool::Window(2), Pool::Global],
            SpatialPooling::AtEnd => [Pool::Window(1), Pool::Window(1), Pool::Global],
        };
        let sched: Vec<usize> = match c.family {
            Family::Dcnn => vec![1; 5],
            Family::Eccentricity => c.scale_schedule.clone(),
        };
        let reduce = |from: usize, to: usize| -> Result<Vec<ScaleGroups>> {
            Ok(if to < from {
                vec![ScaleGroups::contiguous(from, to)?]
            } else {
                vec![]
            })
        };
        let mut blocks = Vec::new();
        let mut pooled = Vec::new();
        let mut extent = c.input_size;
        for (k, pool) in pools.into_iter().enumerate() {
            let mut scale_pools = reduce(sched[k], sched[k + 1])?;
            if k == 2 {
                scale_pools.extend(reduce(sched[3], sched[4])?);
            }
            if extent < c.filter {
                return Err(Error::Config(format!(
                    "input of {} px is too small for three {}×{} blocks",
                    c.input_size, c.filter, c.filter
                )));
            }
            extent = extent - c.filter + 1;
            extent = match pool {
                Pool::Window(stride) => {
                    if extent < 3 {
                        return Err(Error::Config(format!(
                            "input of {} px is too small for the pooling schedule",
                            c.input_size
                        )));
                    }
                    (extent - 3) / stride + 1
                }
                Pool::Global => 1,
            };
            pooled.push(extent);
            blocks.push(BlockPlan { scale_pools, pool });
        }
        Ok(Plan {
            blocks,
            fc_in: c.channels * extent * extent,
            pooled,
        })
    }
}

pub const PARAM_NAMES: [&str; 8] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "conv3.weight",
    "conv3.bias",
    "fc.weight",
    "fc.bias",
];

/// What a forward pass kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T: Element = f32> {
    /// `(layer, output shape)` in execution order.
    pub shapes: Vec<(String, Vec<usize>)>,
    blocks: Vec<BlockTrace<T>>,
    fc_input: Tensor<T>,
}

#[derive(Clone, Debug)]
struct BlockTrace<T: Element> {
    input: Tensor<T>,
    relu_out: Tensor<T>,
    scale_routes: Vec<ScaleRoute>,
    pool_route: PoolRoute,
}

impl<T: Element> ForwardTrace<T> {
    /// Spatial extent after each block's pool.
    pub fn pooled_sizes(&self) -> Vec<usize> {
        self.shapes
            .iter()
            .filter(|(n, _)| n.starts_with("pool"))
            .map(|(_, s)| s[3])
            .collect()
    }

    /// Hash of every ReLU mask and pooling decision; equal signatures mean the
    /// network is the same piecewise-linear function around both inputs.
    pub fn signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for b in &self.blocks {
            for v in b.relu_out.data() {
                (*v > T::zero()).hash(&mut h);
            }
            for r in &b.scale_routes {
                r.winners().hash(&mut h);
            }
            b.pool_route.winners().hash(&mut h);
        }
        h.finish()
    }
}

fn split_scales<T: Element>(x: &Tensor<T>) -> Vec<Tensor<T>> {
    (0..x.shape()[0]).map(|i| x.slice_outer(i)).collect()
}

fn join_scales<T: Element>(xs: &[Tensor<T>]) -> Result<Tensor<T>> {
    let (_, c, h, w) = xs[0].dims4()?;
    let data: Vec<T> = xs.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(vec![xs.len(), c, h, w], data)
}

/// Gradient buffers, one per parameter tensor.
pub type Grads<T> = Vec<Vec<T>>;

#[derive(Clone, Debug)]
pub struct Model<T: Element = f32> {
    pub config: ModelConfig,
    pub params: Vec<Tensor<T>>,
    plan: Plan,
}

impl<T: Element> Model<T> {
    /// Glorot-uniform weights from `config.seed`, zero biases.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let plan = Plan::new(config)?;
        let (c, k) = (config.channels, config.filter);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut glorot = |shape: &[usize], fan_in: usize, fan_out: usize| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let n: usize = shape.iter().product();
            let v = (0..n).map(|_| T::from_f64(rng.gen_range(-a..=a))).collect();
            Tensor::new(shape.to_vec(), v).unwrap()
        };
        let params = vec![
            glorot(&[c, 1, k, k], k * k, c * k * k),
            Tensor::zeros(&[c]),
            glorot(&[c, c, k, k], c * k * k, c * k * k),
            Tensor::zeros(&[c]),
            glorot(&[c, c, k, k], c * k * k, c * k * k),
            Tensor::zeros(&[c]),
            glorot(&[config.classes, plan.fc_in], plan.fc_in, config.classes),
            Tensor::zeros(&[config.classes]),
        ];
        Ok(Model {
            config: config.clone(),
            params,
            plan,
        })
    }

    /// Spatial extent after each block's pool, from the static layout.
    pub fn pooled_sizes(&self) -> &[usize] {
        &self.plan.pooled
    }

    pub fn count_params(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    /// Parameters of the three convolutions (weights and biases).
    pub fn count_conv_params(&self) -> usize {
        self.params[..6].iter().map(|p| p.numel()).sum()
    }

    pub fn zero_grads(&self) -> Grads<T> {
        self.params.iter().map(|p| vec![T::zero(); p.numel()]).collect()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let want = [
            self.config.input_scales(),
            1,
            self.config.input_size,
            self.config.input_size,
        ];
        if x.shape() != want {
            return Err(Error::Data(format!(
                "{} expects input {want:?}, got {:?}",
                self.config.label(),
                x.shape()
            )));
        }
        Ok(())
    }

    /// Logits `[1, classes]` for one input `[S, 1, H, W]` (S = 1 for a DCNN).
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ForwardTrace<T>)> {
        self.check_input(x)?;
        let mut shapes = Vec::new();
        let mut blocks = Vec::with_capacity(3);
        let mut h = x.clone();
        // Stimuli are mostly blank: track where each scale can differ from a
        // per-channel constant and only compute there.
        let mut supports = Support::of_tensor(x);
        for (k, bp) in self.plan.blocks.iter().enumerate() {
            let (conv, conv_support) =
                conv2d_valid_supported(&h, &supports, &self.params[2 * k], &self.params[2 * k + 1])?;
            supports = conv_support;
            shapes.push((format!("conv{}", k + 1), conv.shape().to_vec()));
            let mut relu_out = conv;
            relu_inplace(&mut relu_out);
            let mut merged: Option<Tensor<T>> = None;
            let mut scale_routes = Vec::new();
            for groups in &bp.scale_pools {
                let src = merged.as_ref().unwrap_or(&relu_out);
                let (ys, route) = scale_maxpool(&split_scales(src), groups)?;
                supports = groups
                    .groups()
                    .iter()
                    .map(|g| g.iter().fold(Support::empty(), |acc, &m| acc.union(&supports[m])))
                    .collect();
                let joined = join_scales(&ys)?;
                shapes.push((format!("scale_pool{}", k + 1), joined.shape().to_vec()));
                merged = Some(joined);
                scale_routes.push(route);
            }
            let cur = merged.as_ref().unwrap_or(&relu_out);
            let (pooled, pool_route) = match bp.pool {
                Pool::Window(stride) => {
                    let (p, r, s) = maxpool2d_supported(cur, &supports, 3, stride)?;
                    supports = s;
                    (p, r)
                }
                Pool::Global => global_spatial_maxpool(cur)?,
            };
            shapes.push((format!("pool{}", k + 1), pooled.shape().to_vec()));
            blocks.push(BlockTrace {
                input: std::mem::replace(&mut h, pooled),
                relu_out,
                scale_routes,
                pool_route,
            });
        }
        let logits = linear(&h, &self.params[6], &self.params[7])?;
        shapes.push(("fc".to_string(), logits.shape().to_vec()));
        Ok((
            logits,
            ForwardTrace {
                shapes,
                blocks,
                fc_input: h,
            },
        ))
    }

    /// Adds parameter gradients for upstream `dlogits` into `grads`.
    pub fn backward(&self, trace: &ForwardTrace<T>, dlogits: &Tensor<T>, grads: &mut Grads<T>) -> Result<()> {
        let (gw, rest) = grads.split_at_mut(7);
        let mut d = linear_backward(
            &trace.fc_input,
            &self.params[6],
            dlogits,
            &mut gw[6],
            &mut rest[0],
            true,
        )?
        .expect("dx requested");
        for k in (0..3).rev() {
            let bt = &trace.blocks[k];
            d = maxpool_backward(&bt.pool_route, &d)?;
            for route in bt.scale_routes.iter().rev() {
                d = join_scales(&scale_maxpool_backward(route, &split_scales(&d))?)?;
            }
            relu_backward_inplace(&bt.relu_out, &mut d)?;
            let (lo, hi) = grads.split_at_mut(2 * k + 1);
            let dx = conv2d_valid_backward(
                &bt.input,
                &self.params[2 * k],
                &d,
                &mut lo[2 * k],
                &mut hi[0],
                k > 0,
            )?;
            if let Some(dx) = dx {
                d = dx;
            }
        }
        Ok(())
    }

    /// Cross-entropy of one labelled input; adds its gradient into `grads`.
    /// Returns `(loss, predicted class)`.
    pub fn loss_and_grad(&self, x: &Tensor<T>, label: usize, grads: &mut Grads<T>) -> Result<(f64, usize)> {
        let (logits, trace) = self.forward(x)?;
        let (loss, dl) = softmax_cross_entropy(&logits, &[label])?;
        self.backward(&trace, &dl, grads)?;
        Ok((loss, logits.argmax_rows()[0]))
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<usize> {
        Ok(self.forward(x)?.0.argmax_rows()[0])
    }

    /// Plain SGD on the gradient sum divided by `count`.
    pub fn apply_grads(&mut self, grads: &Grads<T>, lr: f64, count: usize) -> Result<()> {
        let scale = T::from_f64(1.0 / count.max(1) as f64);
        for (p, g) in self.params.iter_mut().zip(grads) {
            p.set_grad(g.iter().map(|v| *v * scale).collect())?;
        }
        crate::tensor::sgd_step(&mut self.params, lr)
    }
}

/// Model input for one canvas: `[1, 1, 60, 60]` for a DCNN, `[11, 1, 60, 60]`
/// crops (contrast-normalized if configured) for the eccentricity model.
pub fn input_from_canvas(config: &ModelConfig, canvas: &Canvas) -> Result<Tensor<f32>> {
    match config.family {
        Family::Dcnn => {
            let img = downsample_input(canvas);
            let n = img.width();
            Tensor::new(vec![1, 1, n, n], img.into_pixels())
        }
        Family::Eccentricity => {
            let mut stack = extract_stack(canvas, config.interpolation)?;
            if config.contrast_norm {
                stack = contrast_normalize(&stack);
            }
            Tensor::new(vec![stack.len(), 1, INPUT_SIZE, INPUT_SIZE], stack.flat())
        }
    }
}

const HASH_TAG: &str = "#config_hash=";

/// Sidecar path holding the TOML config of a checkpoint.
pub fn config_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("toml")
}

impl Model<f32> {
    /// Writes the parameters (with the config hash embedded as an empty tensor
    /// name) and a TOML sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut named: Vec<checkpoint::NamedTensor> = PARAM_NAMES
            .iter()
            .zip(&self.params)
            .map(|(n, p)| (n.to_string(), Tensor::new(p.shape().to_vec(), p.data().to_vec()).unwrap()))
            .collect();
        named.push((
            format!("{HASH_TAG}{}", self.config.hash()),
            Tensor::new(vec![0], vec![])?,
        ));
        checkpoint::save(path, &named)?;
        let cp = config_path(path);
        fs::write(&cp, self.config.to_toml()).map_err(|e| Error::io(&cp, e))
    }

    /// Loads a checkpoint and its sidecar config, verifying hash, names and shapes.
    pub fn load(path: &Path) -> Result<Self> {
        let cp = config_path(path);
        let text = fs::read_to_string(&cp).map_err(|e| Error::io(&cp, e))?;
        let config = ModelConfig::from_toml(&text)?;
        let mut model = Model::build(&config)?;
        let named = checkpoint::load(path)?;
        let mut found_hash = None;
        let mut params = Vec::new();
        for (name, t) in named {
            if let Some(h) = name.strip_prefix(HASH_TAG) {
                found_hash = Some(h.to_string());
            } else {
                params.push((name, t));
            }
        }
        if let Some(h) = &found_hash {
            if *h != config.hash() {
                return Err(Error::format(path, "config hash does not match the sidecar config"));
            }
        }
        if params.len() != PARAM_NAMES.len() {
            return Err(Error::format(path, format!("expected {} tensors, found {}", PARAM_NAMES.len(), params.len())));
        }
        for ((name, t), (want, slot)) in params.into_iter().zip(PARAM_NAMES.iter().zip(&mut model.params)) {
            if name != *want || t.shape() != slot.shape() {
                return Err(Error::format(
                    path,
                    format!("tensor {name} {:?} where {want} {:?} was expected", t.shape(), slot.shape()),
                ));
            }
            *slot = t;
        }
        Ok(model)
    }
}

/// Finite-difference check of whole-model parameter gradients, in `f64`.
///
/// Samples `per_param` entries of every parameter tensor. A sample whose ±h
/// perturbation flips a ReLU or a pooling decision sits on a kink where the
/// loss is not differentiable; it is skipped and counted separately.
pub fn model_gradcheck(config: &ModelConfig, per_param: usize, seed: u64) -> Result<(GradCheckReport, usize)> {
    let model = Model::<f64>::build(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let s = config.input_scales();
    let n = config.input_size;
    // Even scales are blank outside a central square, like stimuli, so both the
    // sparse and the dense paths are exercised.
    let mut x = Tensor::<f64>::uniform(&[s, 1, n, n], 1.0, &mut rng);
    let (lo, hi) = (n * 3 / 8, n - n * 3 / 8);
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        let (scale, y, xx) = (i / (n * n), i / n % n, i % n);
        if scale % 2 == 0 && !((lo..hi).contains(&y) && (lo..hi).contains(&xx)) {
            *v = 0.0;
        }
    }
    let label = rng.gen_range(0..config.classes);
    let mut grads = model.zero_grads();
    let (_, trace) = model.forward(&x)?;
    let base_sig = trace.signature();
    model.loss_and_grad(&x, label, &mut grads)?;
    let loss_at = |m: &Model<f64>| -> Result<(f64, u64)> {
        let (logits, tr) = m.forward(&x)?;
        Ok((softmax_cross_entropy(&logits, &[label])?.0, tr.signature()))
    };
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut skipped = 0;
    let mut probe = model.clone();
    for p in 0..model.params.len() {
        let len = model.params[p].numel();
        for _ in 0..per_param.min(len) {
            let i = rng.gen_range(0..len);
            let orig = model.params[p].data()[i];
            probe.params[p].data_mut()[i] = orig + FD_STEP;
            let (up, su) = loss_at(&probe)?;
            probe.params[p].data_mut()[i] = orig - FD_STEP;
            let (down, sd) = loss_at(&probe)?;
            probe.params[p].data_mut()[i] = orig;
            if su != base_sig || sd != base_sig {
                skipped += 1;
                continue;
            }
            analytic.push(grads[p][i]);
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    Ok((
        GradCheckReport {
            layer: format!("model {}", config.label()),
            max_rel_error: max_relative_error(&analytic, &numeric),
            checked: analytic.len(),
        },
        skipped,
    ))
}
