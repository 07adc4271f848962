//! Minibatch SGD on freshly composed stimuli.
//!
//! Every sample is a pure function of `(seed, epoch, position)`, so a stream can
//! be replayed exactly and gradient sums are taken in a fixed order no matter
//! how many worker threads compose and differentiate the batch.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::GlyphSet;
use crate::error::{Error, Result};
use crate::models::{input_from_canvas, Grads, Model, ModelConfig};
use crate::stimulus::{render, Condition, GlyphChoice, Sources, StimulusSpec, ECC_GRID};
use crate::tensor::{softmax_cross_entropy, Tensor};

/// Target–flanker distance of the cluttered training regime.
pub const TRAIN_FLANKER_SPACING: i64 = 120;

/// Samples per gradient chunk. Chunk sums are added in order, which keeps the
/// result independent of the thread count.
const CHUNK: usize = 16;

/// Mixes several integers into one seed (splitmix64 finalizer).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// The target alone.
    #[default]
    Isolated,
    /// Two identical odd-digit flankers 120 px either side of the target.
    WithFlankersXax120,
}

impl Regime {
    pub fn name(&self) -> &'static str {
        match self {
            Regime::Isolated => "isolated",
            Regime::WithFlankersXax120 => "with_flankers_xax120",
        }
    }

    pub fn condition(&self) -> Condition {
        match self {
            Regime::Isolated => Condition::A,
            Regime::WithFlankersXax120 => Condition::Xax,
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "isolated" => Ok(Regime::Isolated),
            "with_flankers_xax120" | "flankers" | "xax120" => Ok(Regime::WithFlankersXax120),
            _ => Err(Error::Config(format!(
                "unknown regime '{s}' (expected isolated or with_flankers_xax120)"
            ))),
        }
    }
}

/// Where training targets are placed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EccSampling {
    /// Any integer eccentricity in `[lo, hi]`.
    Uniform([i64; 2]),
    /// One of the listed eccentricities.
    Grid(Vec<i64>),
}

impl Default for EccSampling {
    fn default() -> Self {
        EccSampling::Uniform([ECC_GRID[0], *ECC_GRID.last().unwrap()])
    }
}

impl EccSampling {
    pub fn draw<R: Rng>(&self, rng: &mut R) -> i64 {
        match self {
            EccSampling::Uniform([lo, hi]) => rng.gen_range(*lo..=*hi),
            EccSampling::Grid(g) => g[rng.gen_range(0..g.len())],
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            EccSampling::Uniform([lo, hi]) if lo > hi => Err(Error::Config(format!(
                "ecc_sampling range [{lo}, {hi}] is empty"
            ))),
            EccSampling::Grid(g) if g.is_empty() => {
                Err(Error::Config("ecc_sampling grid is empty".into()))
            }
            _ => Ok(()),
        }
    }
}

fn default_epochs() -> usize {
    20
}
fn default_minibatch() -> usize {
    128
}
fn default_holdout() -> usize {
    5000
}
fn default_holdout_eval() -> usize {
    1000
}
fn default_patience() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub regime: Regime,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Overrides the model family's default learning rate.
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default = "default_minibatch")]
    pub minibatch: usize,
    #[serde(default)]
    pub ecc_sampling: EccSampling,
    #[serde(default)]
    pub seed: u64,
    /// Items carved off the end of the train split for model selection.
    #[serde(default = "default_holdout")]
    pub holdout: usize,
    /// Holdout items scored after each epoch.
    #[serde(default = "default_holdout_eval")]
    pub holdout_eval: usize,
    /// Uses only the first N training glyphs, if set.
    #[serde(default)]
    pub max_train_items: Option<usize>,
    /// Epochs without holdout improvement before stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
}

impl TrainConfig {
    pub fn new(model: ModelConfig, regime: Regime) -> Self {
        TrainConfig {
            model,
            regime,
            epochs: default_epochs(),
            lr: None,
            minibatch: default_minibatch(),
            ecc_sampling: EccSampling::default(),
            seed: 0,
            holdout: default_holdout(),
            holdout_eval: default_holdout_eval(),
            max_train_items: None,
            patience: default_patience(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr.unwrap_or_else(|| self.model.learning_rate())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.ecc_sampling.validate()?;
        if self.minibatch == 0 {
            return Err(Error::Config("minibatch must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        let lr = self.learning_rate();
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {lr} must be finite and >= 0")));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        let mut c = self.clone();
        c.model = c.model.canonical();
        c.lr = Some(self.learning_rate());
        toml::to_string(&c).expect("train config serializes")
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// SHA-256 of the canonical TOML.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// File stem for the checkpoint and log of this run.
    pub fn run_name(&self) -> String {
        format!("{}-{}-{}", self.model.label(), self.regime, &self.hash()[..12])
    }
}

/// Glyph pools used for training.
#[derive(Clone, Copy)]
pub struct TrainSets<'a> {
    /// Even-digit train split, minus the holdout.
    pub train: &'a GlyphSet,
    pub holdout: &'a GlyphSet,
    /// Odd-digit train split; required by the cluttered regime.
    pub flankers: Option<&'a GlyphSet>,
}

/// One composed training example.
#[derive(Clone, Debug)]
pub struct Sample {
    pub spec: StimulusSpec,
    pub label: usize,
    pub input: Tensor<f32>,
}

/// Reproducible sample source for one [`TrainConfig`].
pub struct TrainingStream<'a> {
    cfg: &'a TrainConfig,
    targets: &'a GlyphSet,
    flankers: Option<&'a GlyphSet>,
    items: usize,
}

impl<'a> TrainingStream<'a> {
    pub fn new(cfg: &'a TrainConfig, targets: &'a GlyphSet, flankers: Option<&'a GlyphSet>) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::Config(format!("target set {} is empty", targets.name)));
        }
        let flankers = match cfg.regime {
            Regime::Isolated => None,
            Regime::WithFlankersXax120 => match flankers {
                Some(f) if !f.is_empty() => Some(f),
                _ => {
                    return Err(Error::Config(
                        "regime with_flankers_xax120 needs a non-empty flanker set".into(),
                    ))
                }
            },
        };
        let items = cfg
            .max_train_items
            .map_or(targets.len(), |m| m.min(targets.len()));
        Ok(TrainingStream {
            cfg,
            targets,
            flankers,
            items,
        })
    }

    /// Training glyphs visited per epoch.
    pub fn len(&self) -> usize {
        self.items
    }

    pub fn is_empty(&self) -> bool {
        self.items == 0
    }

    /// Visiting order of the training glyphs in `epoch`.
    pub fn permutation(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.items).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.cfg.seed, epoch as u64, 0x7065_726d]));
        order.shuffle(&mut rng);
        order
    }

    /// Sample at `position` of `epoch`, given that epoch's permutation.
    pub fn sample(&self, order: &[usize], epoch: usize, position: usize) -> Result<Sample> {
        let target = order[position];
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
            self.cfg.seed,
            epoch as u64,
            position as u64,
        ]));
        let ecc = self.cfg.ecc_sampling.draw(&mut rng);
        let flanker = self.flankers.map_or(0, |f| rng.gen_range(0..f.len()));
        let spec = StimulusSpec::new(ecc, self.cfg.regime.condition(), TRAIN_FLANKER_SPACING)
            .with_seed(mix_seed(&[self.cfg.seed, epoch as u64, position as u64, 1]));
        let choice = GlyphChoice {
            target,
            flanker,
            background: 0,
        };
        let sources = Sources {
            targets: self.targets,
            flankers: self.flankers,
            backgrounds: None,
        };
        let canvas = render(&spec, sources, choice)?;
        Ok(Sample {
            label: self.targets.items[target].label,
            input: input_from_canvas(&self.cfg.model, &canvas)?,
            spec,
        })
    }

    /// Minibatch `index` of `epoch` (the last one may be short).
    pub fn batch(&self, order: &[usize], epoch: usize, index: usize) -> Result<Vec<Sample>> {
        let start = index * self.cfg.minibatch;
        let end = (start + self.cfg.minibatch).min(self.items);
        (start..end)
            .into_par_iter()
            .map(|p| self.sample(order, epoch, p))
            .collect()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.items.div_ceil(self.cfg.minibatch)
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub holdout_acc: f64,
    pub wall_seconds: f64,
}

pub struct TrainOutcome {
    /// Parameters of the epoch with the best holdout accuracy.
    pub model: Model<f32>,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

/// Summed loss and gradient of a batch, added in fixed chunk order.
fn batch_gradient(model: &Model<f32>, batch: &[Sample]) -> Result<(f64, Grads<f32>)> {
    let partials: Vec<Result<(f64, Grads<f32>)>> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = model.zero_grads();
            let mut loss = 0.0;
            for s in chunk {
                loss += model.loss_and_grad(&s.input, s.label, &mut g)?.0;
            }
            Ok((loss, g))
        })
        .collect();
    let mut total = model.zero_grads();
    let mut loss = 0.0;
    for p in partials {
        let (l, g) = p?;
        loss += l;
        for (t, c) in total.iter_mut().zip(&g) {
            for (a, b) in t.iter_mut().zip(c) {
                *a += *b;
            }
        }
    }
    Ok((loss, total))
}

/// Fixed holdout stimuli, drawn like training samples but from the holdout
/// glyphs and independent of the epoch.
pub fn holdout_samples(cfg: &TrainConfig, sets: &TrainSets<'_>) -> Result<Vec<Sample>> {
    let mut hcfg = cfg.clone();
    hcfg.seed = mix_seed(&[cfg.seed, 0x686f_6c64]);
    hcfg.max_train_items = Some(cfg.holdout_eval);
    let stream = TrainingStream::new(&hcfg, sets.holdout, sets.flankers)?;
    let order: Vec<usize> = (0..stream.len()).collect();
    (0..stream.len())
        .into_par_iter()
        .map(|p| stream.sample(&order, 0, p))
        .collect()
}

/// Fraction of `samples` classified correctly.
pub fn accuracy(model: &Model<f32>, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let correct: Result<Vec<bool>> = samples
        .par_iter()
        .map(|s| Ok(model.predict(&s.input)? == s.label))
        .collect();
    Ok(correct?.iter().filter(|c| **c).count() as f64 / samples.len() as f64)
}

/// Mean loss of the untrained model on the first minibatch.
pub fn initial_loss(cfg: &TrainConfig, sets: &TrainSets<'_>) -> Result<f64> {
    let model = Model::<f32>::build(&cfg.model)?;
    let stream = TrainingStream::new(cfg, sets.train, sets.flankers)?;
    let order = stream.permutation(0);
    let batch = stream.batch(&order, 0, 0)?;
    let mut total = 0.0;
    for s in &batch {
        let (logits, _) = model.forward(&s.input)?;
        total += softmax_cross_entropy(&logits, &[s.label])?.0;
    }
    Ok(total / batch.len() as f64)
}

/// Trains from scratch and returns the best-holdout parameters.
pub fn train(cfg: &TrainConfig, sets: &TrainSets<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let stream = TrainingStream::new(cfg, sets.train, sets.flankers)?;
    let holdout = holdout_samples(cfg, sets)?;
    let lr = cfg.learning_rate();
    let mut model = Model::<f32>::build(&cfg.model)?;
    let mut best = (f64::NEG_INFINITY, 0usize, model.params.clone());
    let mut log = Vec::new();
    let start = Instant::now();
    for epoch in 0..cfg.epochs {
        let order = stream.permutation(epoch);
        let mut loss_sum = 0.0;
        for b in 0..stream.batches_per_epoch() {
            let batch = stream.batch(&order, epoch, b)?;
            let (loss, grads) = batch_gradient(&model, &batch)?;
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Divergence(format!(
                    "{}: non-finite loss in epoch {epoch}, batch {b} at lr {lr}; try a smaller learning rate",
                    cfg.model.label()
                )));
            }
            loss_sum += loss;
            model.apply_grads(&grads, lr, batch.len())?;
        }
        let holdout_acc = accuracy(&model, &holdout)?;
        let row = EpochLog {
            epoch,
            mean_loss: loss_sum / stream.len() as f64,
            holdout_acc,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "{} epoch {epoch}: loss {:.4}, holdout {:.4}, {:.0}s",
            cfg.model.label(),
            row.mean_loss,
            row.holdout_acc,
            row.wall_seconds
        );
        log.push(row);
        if holdout_acc > best.0 {
            best = (holdout_acc, epoch, model.params.clone());
        } else if epoch - best.1 >= cfg.patience {
            log::info!("no holdout improvement for {} epochs; stopping", cfg.patience);
            break;
        }
    }
    model.params = best.2;
    Ok(TrainOutcome {
        model,
        log,
        best_epoch: best.1,
    })
}

/// Writes the training log as CSV.
pub fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serde(e.to_string()))?;
    for row in log {
        w.serialize(row).map_err(|e| Error::Serde(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Paths of a finished run inside `dir`.
#[derive(Clone, Debug, Serialize)]
pub struct RunFiles {
    pub checkpoint: PathBuf,
    pub config: PathBuf,
    pub log: PathBuf,
}

impl RunFiles {
    pub fn new(dir: &Path, cfg: &TrainConfig) -> Self {
        let stem = cfg.run_name();
        RunFiles {
            checkpoint: dir.join(format!("{stem}.ckpt")),
            config: dir.join(format!("{stem}.train.toml")),
            log: dir.join(format!("{stem}.log.csv")),
        }
    }

    pub fn exist(&self) -> bool {
        self.checkpoint.is_file() && self.config.is_file()
    }
}

/// Trains and writes checkpoint, config and log into `dir`.
pub fn train_to_dir(cfg: &TrainConfig, sets: &TrainSets<'_>, dir: &Path) -> Result<(TrainOutcome, RunFiles)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let out = train(cfg, sets)?;
    let files = RunFiles::new(dir, cfg);
    out.model.save(&files.checkpoint)?;
    fs::write(&files.config, cfg.to_toml()).map_err(|e| Error::io(&files.config, e))?;
    write_log(&files.log, &out.log)?;
    Ok((out, files))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{Glyph, Split};
    use crate::image::Image;
    use crate::models::SpatialPooling;

    fn blob_set(name: &str, n: usize, labels: usize) -> GlyphSet {
        let items = (0..n)
            .map(|i| {
                let mut img = Image::zeros(28, 28);
                let l = i % labels;
                for y in 4 + l * 4..8 + l * 4 {
                    for x in 6..22 {
                        img.set(x, y, 1.0);
                    }
                }
                Glyph {
                    id: format!("{name}{i}"),
                    label: l,
                    image: img,
                }
            })
            .collect();
        GlyphSet::new(name, Split::Train, items)
    }

    fn cfg(regime: Regime) -> TrainConfig {
        let mut c = TrainConfig::new(ModelConfig::dcnn(SpatialPooling::AtEnd), regime);
        c.minibatch = 4;
        c.seed = 9;
        c
    }

    #[test]
    fn isolated_regime_emits_only_targets() {
        let t = blob_set("t", 20, 5);
        let c = cfg(Regime::Isolated);
        let s = TrainingStream::new(&c, &t, None).unwrap();
        let order = s.permutation(0);
        for p in 0..8 {
            let smp = s.sample(&order, 0, p).unwrap();
            assert_eq!(smp.spec.condition, Condition::A);
            assert!((0..=720).contains(&smp.spec.target_ecc));
        }
    }

    #[test]
    fn flanker_regime_places_flankers_at_120() {
        let t = blob_set("t", 20, 5);
        let f = blob_set("f", 7, 3);
        let c = cfg(Regime::WithFlankersXax120);
        let s = TrainingStream::new(&c, &t, Some(&f)).unwrap();
        let order = s.permutation(1);
        for p in 0..6 {
            let smp = s.sample(&order, 1, p).unwrap();
            assert_eq!(smp.spec.condition, Condition::Xax);
            let tc = smp.spec.target_box().center_x2().0;
            let mut d: Vec<i64> = smp
                .spec
                .flanker_boxes()
                .iter()
                .map(|b| (b.center_x2().0 - tc) / 2)
                .collect();
            d.sort();
            assert_eq!(d, vec![-120, 120]);
        }
        assert!(TrainingStream::new(&c, &t, None).is_err());
    }

    #[test]
    fn same_seed_same_first_batches() {
        let t = blob_set("t", 40, 5);
        let c = cfg(Regime::Isolated);
        let a = TrainingStream::new(&c, &t, None).unwrap();
        let b = TrainingStream::new(&c, &t, None).unwrap();
        let (oa, ob) = (a.permutation(0), b.permutation(0));
        for i in 0..5 {
            let (x, y) = (a.batch(&oa, 0, i).unwrap(), b.batch(&ob, 0, i).unwrap());
            assert_eq!(x.len(), 4);
            for (p, q) in x.iter().zip(&y) {
                assert_eq!(p.label, q.label);
                assert_eq!(p.spec, q.spec);
                assert_eq!(p.input.data(), q.input.data());
            }
        }
        let mut c2 = c.clone();
        c2.seed = 10;
        let d = TrainingStream::new(&c2, &t, None).unwrap();
        assert_ne!(d.permutation(0), oa);
    }

    #[test]
    fn epoch_visits_every_glyph_once() {
        let t = blob_set("t", 33, 5);
        let c = cfg(Regime::Isolated);
        let s = TrainingStream::new(&c, &t, None).unwrap();
        let mut p = s.permutation(3);
        assert_ne!(p, s.permutation(4));
        p.sort();
        assert_eq!(p, (0..33).collect::<Vec<_>>());
        assert_eq!(s.batches_per_epoch(), 9);
    }

    #[test]
    fn empty_target_set_is_config_error() {
        let t = GlyphSet::new("t", Split::Train, vec![]);
        let c = cfg(Regime::Isolated);
        assert!(matches!(TrainingStream::new(&c, &t, None), Err(Error::Config(_))));
    }

    #[test]
    fn config_toml_roundtrip_and_hash() {
        let mut c = cfg(Regime::WithFlankersXax120);
        c.ecc_sampling = EccSampling::Grid(vec![0, 360]);
        let back = TrainConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back.hash(), c.hash());
        assert_eq!(back.lr, Some(0.1));
        let mut d = c.clone();
        d.epochs = 3;
        assert_ne!(d.hash(), c.hash());
        assert!(TrainConfig::from_toml("epochs = 3").is_err());
    }

    #[test]
    fn seeds_mix_apart() {
        assert_ne!(mix_seed(&[1, 2]), mix_seed(&[2, 1]));
        assert_ne!(mix_seed(&[0]), mix_seed(&[0, 0]));
    }
}
