//! The prepared data root, a directory of trained runs, and the experiment
//! grids evaluated against them.
//!
//! Trained checkpoints are cached under a key derived from the training
//! config and the data manifest, so a grid that needs an already-trained model
//! loads it instead of training again.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::layout::DataLayout;
use crate::datasets::{sha256_file, BackgroundSet, GlyphSet, Parity, Split, INK_THRESHOLD};
use crate::error::{Error, Result};
use crate::experiments::{
    evaluate_curve, intensity_histogram, write_histogram_csv, write_results_csv, EvalSets,
    ExperimentResult, IntensityHistogram, SweepKind,
};
use crate::models::{Family, Model, ModelConfig, SpatialPooling};
use crate::plot::{curve_grid, histogram, Panel};
use crate::pyramid::{extract_stack, Interpolation};
use crate::stimulus::{generate, Condition, Sources, StimulusSpec, CANVAS_SIZE};
use crate::trainer::{train_to_dir, Regime, RunFiles, TrainConfig, TrainSets};

/// Training budget used by the experiment grids and the acceptance suite.
///
/// The pooled DCNNs keep the full minibatch of 128 and the family learning
/// rate, with fewer epochs; smaller batches at that rate made the holdout
/// accuracy swing by several points between epochs. The no-total DCNN trains
/// at its own lower rate, where minibatches of 32 buy four times as many
/// updates. The eccentricity model runs eleven towers per sample, so it trains
/// on a subset, and only gets anywhere in that many updates with minibatches
/// of 32 and the larger learning rate.
pub fn desk_config(model: ModelConfig, regime: Regime) -> TrainConfig {
    let mut c = TrainConfig::new(model, regime);
    match c.model.family {
        Family::Dcnn => {
            c.epochs = 12;
            c.patience = 4;
            if c.model.spatial_pooling == SpatialPooling::NoTotal {
                c.epochs = 8;
                c.patience = 3;
                c.minibatch = 32;
                c.lr = Some(0.01);
            }
        }
        Family::Eccentricity => {
            c.epochs = 5;
            c.patience = 2;
            c.minibatch = 32;
            c.max_train_items = Some(12_000);
            c.holdout_eval = 500;
            c.lr = Some(0.1);
        }
    }
    c
}

/// One panel of an evaluation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanelSpec {
    pub title: String,
    pub train: TrainConfig,
    pub sweep: SweepKind,
    /// Flanker set name, or none for target-only stimuli.
    #[serde(default)]
    pub flankers: Option<String>,
    /// Embed every stimulus into a natural scene.
    #[serde(default)]
    pub backgrounds: bool,
    /// Restricts the conditions evaluated.
    #[serde(default)]
    pub conditions: Option<Vec<Condition>>,
}

fn default_n() -> usize {
    crate::experiments::DEFAULT_SAMPLES
}
fn default_cols() -> usize {
    3
}

/// A grid of panels rendered into one CSV and one SVG.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub name: String,
    pub title: String,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_cols")]
    pub cols: usize,
    pub panels: Vec<PanelSpec>,
}

impl EvalConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let c: EvalConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("eval config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("n must be at least 1".into()));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("'{}' is not a usable name", self.name)));
        }
        for p in &self.panels {
            p.train.validate()?;
            if let Some(f) = &p.flankers {
                if !crate::datasets::layout::FLANKER_SETS.contains(&f.as_str()) {
                    return Err(Error::Config(format!("panel '{}': unknown flanker set '{f}'", p.title)));
                }
            }
        }
        Ok(())
    }
}

/// What [`Lab::run_eval`] produced.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub results: Vec<ExperimentResult>,
    /// Panels that could not be evaluated, with the reason.
    pub missing: Vec<(String, String)>,
    pub csv: PathBuf,
    pub svg: PathBuf,
}

type Shared<T> = OnceLock<Arc<T>>;

/// Data root plus trained-run cache.
pub struct Lab {
    pub layout: DataLayout,
    pub runs_dir: PathBuf,
    /// Train models that are not cached yet instead of failing.
    pub train_missing: bool,
    /// Store evaluated curves next to the runs and reuse them.
    pub cache_evals: bool,
    data_digest: String,
    even_train: Shared<GlyphSet>,
    odd_train: Shared<GlyphSet>,
    even_test: Shared<GlyphSet>,
    backgrounds: Shared<BackgroundSet>,
    flankers: Mutex<BTreeMap<String, Arc<GlyphSet>>>,
    models: Mutex<BTreeMap<String, Arc<Model<f32>>>>,
}

fn shared<T>(cell: &Shared<T>, load: impl FnOnce() -> Result<T>) -> Result<Arc<T>> {
    if let Some(v) = cell.get() {
        return Ok(v.clone());
    }
    let v = Arc::new(load()?);
    Ok(cell.get_or_init(|| v).clone())
}

impl Lab {
    /// Opens a prepared data root; fails if it has no manifest.
    pub fn open(layout: DataLayout, runs_dir: impl Into<PathBuf>) -> Result<Self> {
        let manifest = layout.manifest_path();
        let bytes = fs::read(&manifest).map_err(|_| {
            Error::Config(format!(
                "data root {} is not prepared (no {}); run `crowd data` first",
                layout.root.display(),
                manifest.display()
            ))
        })?;
        Ok(Lab {
            layout,
            runs_dir: runs_dir.into(),
            train_missing: true,
            cache_evals: true,
            data_digest: hex::encode(Sha256::digest(&bytes)),
            even_train: OnceLock::new(),
            odd_train: OnceLock::new(),
            even_test: OnceLock::new(),
            backgrounds: OnceLock::new(),
            flankers: Mutex::new(BTreeMap::new()),
            models: Mutex::new(BTreeMap::new()),
        })
    }

    /// SHA-256 of the data manifest.
    pub fn data_digest(&self) -> &str {
        &self.data_digest
    }

    pub fn even_test(&self) -> Result<Arc<GlyphSet>> {
        shared(&self.even_test, || self.layout.targets(Split::Test))
    }

    pub fn backgrounds(&self) -> Result<Arc<BackgroundSet>> {
        shared(&self.backgrounds, || self.layout.backgrounds(CANVAS_SIZE))
    }

    /// Test-time flanker pool by name.
    pub fn test_flankers(&self, name: &str) -> Result<Arc<GlyphSet>> {
        let mut cache = self.flankers.lock().expect("flanker cache");
        if let Some(s) = cache.get(name) {
            return Ok(s.clone());
        }
        let set = Arc::new(self.layout.flankers(name, Split::Test)?);
        cache.insert(name.to_string(), set.clone());
        Ok(set)
    }

    /// Directory holding the runs trained on this data root.
    pub fn data_runs_dir(&self) -> PathBuf {
        self.runs_dir.join(format!("data-{}", &self.data_digest[..12]))
    }

    pub fn run_files(&self, cfg: &TrainConfig) -> RunFiles {
        RunFiles::new(&self.data_runs_dir(), cfg)
    }

    /// Trains `cfg` into the run cache.
    pub fn train(&self, cfg: &TrainConfig) -> Result<(Model<f32>, RunFiles)> {
        let even = shared(&self.even_train, || self.layout.targets(Split::Train))?;
        let (train, holdout) = (*even).clone().split_off_tail(cfg.holdout);
        if train.is_empty() || holdout.is_empty() {
            return Err(Error::Config(format!(
                "holdout of {} leaves no training or holdout glyphs out of {}",
                cfg.holdout,
                even.len()
            )));
        }
        let odd = match cfg.regime {
            Regime::Isolated => None,
            Regime::WithFlankersXax120 => Some(shared(&self.odd_train, || {
                self.layout.mnist(Parity::Odd, Split::Train)
            })?),
        };
        let sets = TrainSets {
            train: &train,
            holdout: &holdout,
            flankers: odd.as_deref(),
        };
        log::info!("training {} ({} regime)", cfg.model.label(), cfg.regime);
        let (out, files) = train_to_dir(cfg, &sets, &self.data_runs_dir())?;
        Ok((out.model, files))
    }

    /// The trained model of `cfg`, from the cache or freshly trained.
    pub fn model(&self, cfg: &TrainConfig) -> Result<Arc<Model<f32>>> {
        let key = cfg.hash();
        if let Some(m) = self.models.lock().expect("model cache").get(&key) {
            return Ok(m.clone());
        }
        let files = self.run_files(cfg);
        let model = if files.exist() {
            let stored = fs::read_to_string(&files.config).map_err(|e| Error::io(&files.config, e))?;
            if stored != cfg.to_toml() {
                return Err(Error::Config(format!(
                    "{} does not hold the expected training config",
                    files.config.display()
                )));
            }
            Model::load(&files.checkpoint)?
        } else if self.train_missing {
            self.train(cfg)?.0
        } else {
            return Err(Error::Config(format!(
                "no trained run for {} at {}",
                cfg.model.label(),
                files.checkpoint.display()
            )));
        };
        let model = Arc::new(model);
        self.models
            .lock()
            .expect("model cache")
            .insert(key, model.clone());
        Ok(model)
    }

    /// Curves of one panel, reusing a stored result when the checkpoint, test
    /// sets and evaluation settings are all unchanged.
    pub fn panel(&self, panel: &PanelSpec, n: usize, seed: u64) -> Result<ExperimentResult> {
        let model = self.model(&panel.train)?;
        let targets = self.even_test()?;
        let flankers = match &panel.flankers {
            Some(name) => Some((name.as_str(), self.test_flankers(name)?)),
            None => None,
        };
        let backgrounds = if panel.backgrounds {
            Some(self.backgrounds()?)
        } else {
            None
        };
        let sets = EvalSets {
            targets: &targets,
            flankers: flankers.as_ref().map(|(n, s)| (*n, &**s)),
            backgrounds: backgrounds.as_deref(),
        };
        if !self.cache_evals {
            return evaluate_curve(&model, panel.sweep, panel.conditions.as_deref(), sets, n, seed);
        }
        let key = serde_json::json!({
            "checkpoint": sha256_file(&self.run_files(&panel.train).checkpoint)?,
            "data": self.data_digest,
            "sweep": panel.sweep,
            "flankers": panel.flankers,
            "backgrounds": panel.backgrounds,
            "conditions": panel.conditions,
            "n": n,
            "seed": seed,
        });
        let digest = hex::encode(Sha256::digest(key.to_string().as_bytes()));
        let dir = self.data_runs_dir().join("evals");
        let path = dir.join(format!("{}.json", &digest[..24]));
        if let Ok(text) = fs::read_to_string(&path) {
            if let Ok(r) = serde_json::from_str::<ExperimentResult>(&text) {
                return Ok(r);
            }
        }
        let r = evaluate_curve(&model, panel.sweep, panel.conditions.as_deref(), sets, n, seed)?;
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let text = serde_json::to_string(&r).map_err(|e| Error::Serde(e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(r)
    }

    /// Evaluates every panel and writes `{name}.csv`, `{name}.svg` and the
    /// config as `{name}.toml` into `out_dir`. Panels that fail are reported
    /// and left empty in the figure.
    pub fn run_eval(&self, cfg: &EvalConfig, out_dir: &Path) -> Result<EvalReport> {
        cfg.validate()?;
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let mut results = Vec::new();
        let mut slots = Vec::new();
        let mut missing = Vec::new();
        for p in &cfg.panels {
            match self.panel(p, cfg.n, cfg.seed) {
                Ok(r) => {
                    slots.push(Some(results.len()));
                    results.push(r);
                }
                Err(e @ (Error::Divergence(_) | Error::Config(_) | Error::Io { .. })) => {
                    log::warn!("panel '{}' skipped: {e}", p.title);
                    missing.push((p.title.clone(), e.to_string()));
                    slots.push(None);
                }
                Err(e) => return Err(e),
            }
        }
        let csv = out_dir.join(format!("{}.csv", cfg.name));
        let svg = out_dir.join(format!("{}.svg", cfg.name));
        write_results_csv(&csv, &results)?;
        let panels: Vec<Panel<'_>> = cfg
            .panels
            .iter()
            .zip(&slots)
            .map(|(p, s)| Panel {
                title: p.title.clone(),
                result: s.map(|i| &results[i]),
            })
            .collect();
        curve_grid(&svg, &cfg.title, &panels, cfg.cols)?;
        let toml_path = out_dir.join(format!("{}.toml", cfg.name));
        fs::write(&toml_path, cfg.to_toml()).map_err(|e| Error::io(&toml_path, e))?;
        Ok(EvalReport {
            results,
            missing,
            csv,
            svg,
        })
    }
}

/// Example stimuli: every condition at 360 px with 120 px spacing for each
/// flanker set, plus one scene-embedded target, each with its scale strip.
pub fn stimulus_examples(lab: &Lab, out_dir: &Path, seed: u64) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let targets = lab.even_test()?;
    let mut out = Vec::new();
    let mut emit = |canvas: &crate::stimulus::Canvas, stem: String| -> Result<()> {
        let png = out_dir.join(format!("{stem}.png"));
        canvas.to_image().save_png(&png)?;
        let strip = out_dir.join(format!("{stem}.scales.png"));
        extract_stack(canvas, Interpolation::Exponential)?.save_strip(&strip)?;
        out.push(png);
        out.push(strip);
        Ok(())
    };
    for name in crate::datasets::layout::FLANKER_SETS {
        let flankers = lab.test_flankers(name)?;
        for c in Condition::ALL {
            let spec = StimulusSpec::new(360, c, 120).with_seed(seed);
            let canvas = generate(
                &spec,
                Sources {
                    targets: &targets,
                    flankers: Some(&flankers),
                    backgrounds: None,
                },
            )?;
            emit(&canvas, format!("{name}_{}", spec.file_stem()))?;
        }
    }
    let backgrounds = lab.backgrounds()?;
    let mut spec = StimulusSpec::new(0, Condition::A, 0).with_seed(seed);
    spec.background = Some("backgrounds".into());
    let canvas = generate(
        &spec,
        Sources {
            targets: &targets,
            flankers: None,
            backgrounds: Some(&backgrounds),
        },
    )?;
    emit(&canvas, format!("background_{}", spec.file_stem()))?;
    Ok(out)
}

/// White-pixel-fraction histograms of the target and flanker test sets,
/// written as `intensity_histogram.{csv,svg}`.
pub fn intensity_figure(lab: &Lab, out_dir: &Path, seed: u64) -> Result<(Vec<IntensityHistogram>, Vec<PathBuf>)> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut sets = Vec::new();
    for name in crate::datasets::layout::FLANKER_SETS {
        sets.push(lab.test_flankers(name)?);
    }
    let refs: Vec<&GlyphSet> = sets.iter().map(|s| &**s).collect();
    let hist = intensity_histogram(&refs, INK_THRESHOLD, seed);
    let csv = out_dir.join("intensity_histogram.csv");
    let svg = out_dir.join("intensity_histogram.svg");
    write_histogram_csv(&csv, &hist)?;
    histogram(&svg, "Per-image fraction of white pixels", &hist)?;
    Ok((hist, vec![csv, svg]))
}

fn panel(title: &str, train: TrainConfig, sweep: SweepKind, flankers: Option<&str>) -> PanelSpec {
    PanelSpec {
        title: title.to_string(),
        train,
        sweep,
        flankers: flankers.map(str::to_string),
        backgrounds: false,
        conditions: None,
    }
}

fn dcnn(p: SpatialPooling, regime: Regime) -> TrainConfig {
    desk_config(ModelConfig::dcnn(p), regime)
}

fn ecc(schedule: &[usize], cn: bool, regime: Regime) -> TrainConfig {
    desk_config(ModelConfig::eccentricity(schedule, cn), regime)
}

const POOLINGS: [(SpatialPooling, &str); 3] = [
    (SpatialPooling::NoTotal, "no total pooling"),
    (SpatialPooling::Progressive, "progressive"),
    (SpatialPooling::AtEnd, "at end"),
];

const SCHEDULES: [[usize; 5]; 3] = [[11, 1, 1, 1, 1], [11, 7, 5, 3, 1], [11, 11, 11, 11, 1]];

const DATASETS: [(&str, &str); 3] = [
    ("mnist", "odd MNIST"),
    ("notmnist", "notMNIST"),
    ("omniglot", "Omniglot"),
];

/// Every evaluation grid of the figure set, with `n` stimuli per point.
pub fn figure_grids(n: usize, seed: u64) -> Vec<EvalConfig> {
    let grid = |name: &str, title: &str, cols: usize, panels: Vec<PanelSpec>| EvalConfig {
        name: name.to_string(),
        title: title.to_string(),
        n,
        seed,
        cols,
        panels,
    };
    let iso = Regime::Isolated;
    let cs120 = SweepKind::ConstantSpacing(120);
    let mut out = Vec::new();

    let mut p = Vec::new();
    for spacing in [120, 240] {
        for (label, cfg) in [
            ("DCNN", dcnn(SpatialPooling::AtEnd, Regime::WithFlankersXax120)),
            ("ecc. model", ecc(&[11, 11, 11, 11, 1], true, Regime::WithFlankersXax120)),
        ] {
            for (set, set_label) in DATASETS {
                p.push(panel(
                    &format!("{label}, {spacing} px, {set_label}"),
                    cfg.clone(),
                    SweepKind::ConstantSpacing(spacing),
                    Some(set),
                ));
            }
        }
    }
    out.push(grid(
        "trained_with_flankers",
        "Trained with xax flankers at 120 px",
        3,
        p,
    ));

    let mut p = Vec::new();
    for (sweep, what) in [(cs120, "spacing 120 px"), (SweepKind::ConstantTargetEcc(0), "target at 0 px")] {
        for (pool, name) in POOLINGS {
            p.push(panel(&format!("{name}, {what}"), dcnn(pool, iso), sweep, Some("mnist")));
        }
    }
    out.push(grid("dcnn_pooling", "DCNN spatial pooling, odd MNIST flankers", 3, p));

    let p = DATASETS
        .iter()
        .map(|(set, label)| panel(label, dcnn(SpatialPooling::AtEnd, iso), cs120, Some(set)))
        .collect();
    out.push(grid("flanker_datasets", "DCNN at end, flanker datasets", 3, p));

    let mut p = Vec::new();
    for cn in [false, true] {
        for s in SCHEDULES {
            let title = format!(
                "{}, {}",
                crate::models::schedule_name(&s),
                if cn { "contrast norm." } else { "no contrast norm." }
            );
            p.push(panel(&title, ecc(&s, cn, iso), cs120, Some("mnist")));
        }
    }
    out.push(grid("ecc_scale_pooling", "Eccentricity model scale pooling, odd MNIST flankers", 3, p));

    let mut p = Vec::new();
    for (label, cfg) in [
        ("DCNN at end", dcnn(SpatialPooling::AtEnd, iso)),
        ("ecc. model, no contrast norm.", ecc(&[11, 11, 11, 11, 1], false, iso)),
        ("ecc. model, contrast norm.", ecc(&[11, 11, 11, 11, 1], true, iso)),
    ] {
        let mut q = panel(label, cfg, cs120, None);
        q.backgrounds = true;
        q.conditions = Some(vec![Condition::A]);
        p.push(q);
    }
    out.push(grid("complex_clutter", "Targets embedded in natural scenes", 3, p));

    let p = POOLINGS
        .iter()
        .map(|(pool, name)| {
            panel(
                &format!("{name}, target at 720 px"),
                dcnn(*pool, iso),
                SweepKind::ConstantTargetEcc(720),
                Some("mnist"),
            )
        })
        .collect();
    out.push(grid("dcnn_target_at_720", "DCNN, target at 720 px", 3, p));

    let mut p = Vec::new();
    for (set, label) in &DATASETS[1..] {
        for (pool, name) in POOLINGS {
            p.push(panel(&format!("{name}, {label}"), dcnn(pool, iso), cs120, Some(set)));
        }
    }
    out.push(grid("dcnn_other_flankers", "DCNN spatial pooling, other flanker sets", 3, p));

    let mut p = Vec::new();
    for (set, label) in &DATASETS[1..] {
        for cn in [false, true] {
            for s in SCHEDULES {
                let title = format!(
                    "{}, {}, {label}",
                    crate::models::schedule_name(&s),
                    if cn { "CN" } else { "no CN" }
                );
                p.push(panel(&title, ecc(&s, cn, iso), cs120, Some(set)));
            }
        }
    }
    out.push(grid("ecc_other_flankers", "Eccentricity model, other flanker sets", 3, p));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn figure_grids_are_valid_and_roundtrip() {
        let grids = figure_grids(10, 0);
        assert_eq!(grids.len(), 8);
        for g in &grids {
            g.validate().unwrap();
            assert_eq!(EvalConfig::from_toml(&g.to_toml()).unwrap(), *g);
        }
        let names: Vec<&str> = grids.iter().map(|g| g.name.as_str()).collect();
        assert!(names.contains(&"dcnn_pooling"));
        assert_eq!(grids[0].panels.len(), 12);
    }

    #[test]
    fn desk_budgets_follow_family() {
        let d = desk_config(ModelConfig::dcnn(SpatialPooling::AtEnd), Regime::Isolated);
        assert_eq!(d.learning_rate(), 0.1);
        assert_eq!(d.minibatch, 128);
        let n = desk_config(ModelConfig::dcnn(SpatialPooling::NoTotal), Regime::Isolated);
        assert_eq!(n.learning_rate(), 0.01);
        assert_eq!(n.minibatch, 32);
        let e = desk_config(ModelConfig::eccentricity(&[11, 11, 11, 11, 1], true), Regime::Isolated);
        assert_eq!(e.learning_rate(), 0.1);
        assert_eq!(e.minibatch, 32);
        assert!(e.max_train_items.is_some());
    }

    #[test]
    fn unprepared_root_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            Lab::open(DataLayout::new(dir.path()), dir.path().join("runs")),
            Err(Error::Config(_))
        ));
    }
}
