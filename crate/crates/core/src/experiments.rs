//! Accuracy curves over eccentricity or spacing, the experiment grids built
//! from them, and the flanker intensity statistics.
//!
//! Curves use common random numbers: sample `k` of every point and condition
//! draws the same target (and flanker, and background) glyph, so differences
//! between curves are not drowned in glyph-sampling noise.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{per_image_white_fractions, BackgroundSet, GlyphSet, INTENSITY_SAMPLE};
use crate::error::{Error, Result};
use crate::models::{input_from_canvas, Model};
use crate::stimulus::{
    render, sweep, Condition, GlyphChoice, Sources, StimulusSpec, SweepMode, ECC_GRID,
    SPACING_GRID,
};
use crate::trainer::mix_seed;

/// Default number of stimuli per curve point.
pub const DEFAULT_SAMPLES: usize = 1000;

/// Which axis a curve runs along.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    /// Fixed target–flanker spacing; x is the target eccentricity.
    ConstantSpacing(i64),
    /// Fixed target eccentricity; x is the spacing.
    ConstantTargetEcc(i64),
}

impl SweepKind {
    pub fn name(&self) -> String {
        match self {
            SweepKind::ConstantSpacing(s) => format!("constant_spacing_{s}"),
            SweepKind::ConstantTargetEcc(e) => format!("constant_target_ecc_{e}"),
        }
    }

    pub fn x_label(&self) -> &'static str {
        match self {
            SweepKind::ConstantSpacing(_) => "target eccentricity (px)",
            SweepKind::ConstantTargetEcc(_) => "target-flanker spacing (px)",
        }
    }

    /// Feasible stimuli of the sweep for all four conditions.
    pub fn specs(&self) -> Result<Vec<StimulusSpec>> {
        let s = match *self {
            SweepKind::ConstantSpacing(spacing) => sweep(
                &StimulusSpec::new(0, Condition::A, spacing),
                SweepMode::ConstantSpacing,
                &ECC_GRID,
            )?,
            SweepKind::ConstantTargetEcc(ecc) => sweep(
                &StimulusSpec::new(ecc, Condition::A, SPACING_GRID[0]),
                SweepMode::ConstantTargetEcc,
                &SPACING_GRID,
            )?,
        };
        Ok(s.specs)
    }

    fn x_of(&self, spec: &StimulusSpec) -> i64 {
        match self {
            SweepKind::ConstantSpacing(_) => spec.target_ecc,
            SweepKind::ConstantTargetEcc(_) => spec.spacing,
        }
    }
}

impl fmt::Display for SweepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Accuracy at one point of one condition's curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub condition: Condition,
    pub x_px: i64,
    pub correct: usize,
    pub n: usize,
}

impl CurvePoint {
    pub fn accuracy(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.correct as f64 / self.n as f64
        }
    }

    /// Binomial standard error of the accuracy.
    pub fn stderr(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        let p = self.accuracy();
        (p * (1.0 - p) / self.n as f64).sqrt()
    }
}

/// All curves of one model under one sweep and flanker set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub model_hash: String,
    pub model_label: String,
    pub sweep: SweepKind,
    pub dataset: String,
    pub points: Vec<CurvePoint>,
}

/// One line of the results CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub model_hash: String,
    pub sweep: String,
    pub dataset: String,
    pub condition: Condition,
    pub x_px: i64,
    pub accuracy: f64,
    pub n: usize,
    pub stderr: f64,
}

impl ExperimentResult {
    pub fn get(&self, condition: Condition, x_px: i64) -> Option<&CurvePoint> {
        self.points
            .iter()
            .find(|p| p.condition == condition && p.x_px == x_px)
    }

    pub fn accuracy(&self, condition: Condition, x_px: i64) -> Option<f64> {
        self.get(condition, x_px).map(CurvePoint::accuracy)
    }

    /// `(x, accuracy)` of one condition, by increasing x.
    pub fn curve(&self, condition: Condition) -> Vec<(i64, f64)> {
        let mut c: Vec<(i64, f64)> = self
            .points
            .iter()
            .filter(|p| p.condition == condition)
            .map(|p| (p.x_px, p.accuracy()))
            .collect();
        c.sort_by_key(|p| p.0);
        c
    }

    pub fn conditions(&self) -> Vec<Condition> {
        let mut c: Vec<Condition> = self.points.iter().map(|p| p.condition).collect();
        c.sort();
        c.dedup();
        c
    }

    pub fn rows(&self) -> Vec<ResultRow> {
        let mut pts: Vec<&CurvePoint> = self.points.iter().collect();
        pts.sort_by_key(|p| (p.condition, p.x_px));
        pts.into_iter()
            .map(|p| ResultRow {
                model_hash: self.model_hash.clone(),
                sweep: self.sweep.name(),
                dataset: self.dataset.clone(),
                condition: p.condition,
                x_px: p.x_px,
                accuracy: p.accuracy(),
                n: p.n,
                stderr: p.stderr(),
            })
            .collect()
    }
}

/// Test-time glyph sources.
#[derive(Clone, Copy)]
pub struct EvalSets<'a> {
    /// Even-digit test split.
    pub targets: &'a GlyphSet,
    /// Flanker pool and the name it is reported under.
    pub flankers: Option<(&'a str, &'a GlyphSet)>,
    /// Scenes to embed every stimulus into.
    pub backgrounds: Option<&'a BackgroundSet>,
}

impl EvalSets<'_> {
    fn dataset_name(&self) -> String {
        let mut name = self.flankers.map_or("none", |f| f.0).to_string();
        if self.backgrounds.is_some() {
            name.push_str("+backgrounds");
        }
        name
    }
}

/// Accuracy of `model` on `n` stimuli per point and condition of `kind`,
/// restricted to `conditions` if given. Deterministic in `seed`.
pub fn evaluate_curve(
    model: &Model<f32>,
    kind: SweepKind,
    conditions: Option<&[Condition]>,
    sets: EvalSets<'_>,
    n: usize,
    seed: u64,
) -> Result<ExperimentResult> {
    if sets.targets.is_empty() {
        return Err(Error::Config(format!("target set {} is empty", sets.targets.name)));
    }
    if let Some(b) = sets.backgrounds {
        if b.is_empty() {
            return Err(Error::Config("background set is empty".into()));
        }
    }
    let specs: Vec<StimulusSpec> = kind
        .specs()?
        .into_iter()
        .filter(|s| conditions.map_or(true, |c| c.contains(&s.condition)))
        .filter(|s| s.condition == Condition::A || sets.flankers.is_some())
        .map(|mut s| {
            s.flanker_source = sets.flankers.map(|f| f.0.to_string());
            s.background = sets.backgrounds.map(|_| "backgrounds".to_string());
            s
        })
        .collect();
    let sources = Sources {
        targets: sets.targets,
        flankers: sets.flankers.map(|f| f.1),
        backgrounds: sets.backgrounds,
    };
    let counts = (
        sets.targets.len(),
        sources.flankers.map_or(0, |f| f.len()),
        sets.backgrounds.map_or(0, |b| b.len()),
    );
    let jobs: Vec<(usize, usize)> = (0..specs.len())
        .flat_map(|i| (0..n).map(move |k| (i, k)))
        .collect();
    let hits: Result<Vec<bool>> = jobs
        .par_iter()
        .map(|&(i, k)| {
            let sample_seed = mix_seed(&[seed, k as u64]);
            let choice = GlyphChoice::from_seed(sample_seed, counts.0, counts.1, counts.2);
            let spec = specs[i].clone().with_seed(sample_seed);
            let canvas = render(&spec, sources, choice)?;
            let x = input_from_canvas(&model.config, &canvas)?;
            Ok(model.predict(&x)? == sets.targets.items[choice.target].label)
        })
        .collect();
    let hits = hits?;
    let points = specs
        .iter()
        .enumerate()
        .map(|(i, s)| CurvePoint {
            condition: s.condition,
            x_px: kind.x_of(s),
            correct: hits[i * n..(i + 1) * n].iter().filter(|h| **h).count(),
            n,
        })
        .collect();
    Ok(ExperimentResult {
        model_hash: model.config.hash(),
        model_label: model.config.label(),
        sweep: kind,
        dataset: sets.dataset_name(),
        points,
    })
}

/// Models trained with `xax` clutter, tested at 120 and 240 px spacing against
/// every flanker set.
pub fn run_section41(
    models: &[&Model<f32>],
    targets: &GlyphSet,
    flanker_sets: &[(&str, &GlyphSet)],
    n: usize,
    seed: u64,
) -> Result<Vec<ExperimentResult>> {
    let mut out = Vec::new();
    for model in models {
        for spacing in [120, 240] {
            for &(name, set) in flanker_sets {
                let sets = EvalSets {
                    targets,
                    flankers: Some((name, set)),
                    backgrounds: None,
                };
                out.push(evaluate_curve(
                    model,
                    SweepKind::ConstantSpacing(spacing),
                    None,
                    sets,
                    n,
                    seed,
                )?);
            }
        }
    }
    Ok(out)
}

/// Isolated targets embedded into natural scenes, across eccentricities.
pub fn run_complex_clutter(
    models: &[&Model<f32>],
    targets: &GlyphSet,
    backgrounds: &BackgroundSet,
    n: usize,
    seed: u64,
) -> Result<Vec<ExperimentResult>> {
    if backgrounds.is_empty() {
        return Err(Error::Config("complex clutter needs at least one background".into()));
    }
    models
        .iter()
        .map(|m| {
            evaluate_curve(
                m,
                SweepKind::ConstantSpacing(120),
                Some(&[Condition::A]),
                EvalSets {
                    targets,
                    flankers: None,
                    backgrounds: Some(backgrounds),
                },
                n,
                seed,
            )
        })
        .collect()
}

/// Histogram of per-image white-pixel fractions of one glyph set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityHistogram {
    pub dataset: String,
    pub images: usize,
    pub mean: f64,
    /// Counts over equal-width bins of `[0, 1]`; 1.0 falls in the last bin.
    pub counts: Vec<usize>,
}

pub const HISTOGRAM_BINS: usize = 20;

pub fn intensity_histogram(
    sets: &[&GlyphSet],
    threshold: f32,
    seed: u64,
) -> Vec<IntensityHistogram> {
    sets.iter()
        .map(|set| {
            let f = per_image_white_fractions(set, threshold, INTENSITY_SAMPLE, seed);
            let mut counts = vec![0; HISTOGRAM_BINS];
            for v in &f {
                let b = ((v * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
                counts[b] += 1;
            }
            IntensityHistogram {
                dataset: set.name.clone(),
                images: f.len(),
                mean: if f.is_empty() {
                    0.0
                } else {
                    f.iter().sum::<f64>() / f.len() as f64
                },
                counts,
            }
        })
        .collect()
}

/// Writes the results CSV, rows sorted by model, sweep, dataset, condition and x.
pub fn write_results_csv(path: &Path, results: &[ExperimentResult]) -> Result<()> {
    let mut rows: Vec<ResultRow> = results.iter().flat_map(ExperimentResult::rows).collect();
    rows.sort_by(|a, b| {
        (&a.model_hash, &a.sweep, &a.dataset, a.condition, a.x_px)
            .cmp(&(&b.model_hash, &b.sweep, &b.dataset, b.condition, b.x_px))
    });
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serde(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Serde(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes one row per dataset: name, images, mean, then the bin counts.
pub fn write_histogram_csv(path: &Path, hist: &[IntensityHistogram]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serde(e.to_string()))?;
    let mut header = vec!["dataset".to_string(), "images".into(), "mean".into()];
    header.extend((0..HISTOGRAM_BINS).map(|b| format!("bin{b:02}")));
    w.write_record(&header).map_err(|e| Error::Serde(e.to_string()))?;
    for h in hist {
        let mut rec = vec![h.dataset.clone(), h.images.to_string(), format!("{:.6}", h.mean)];
        rec.extend(h.counts.iter().map(|c| c.to_string()));
        w.write_record(&rec).map_err(|e| Error::Serde(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Groups results by `(model_label, sweep, dataset)` for lookups.
pub fn index(results: &[ExperimentResult]) -> BTreeMap<(String, SweepKind, String), &ExperimentResult> {
    results
        .iter()
        .map(|r| ((r.model_label.clone(), r.sweep, r.dataset.clone()), r))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{Glyph, Split};
    use crate::image::Image;
    use crate::models::{ModelConfig, SpatialPooling};

    fn set(name: &str, n: usize, value: f32) -> GlyphSet {
        let items = (0..n)
            .map(|i| {
                let mut img = Image::zeros(28, 28);
                for y in 8..20 {
                    for x in 4 + i % 5..14 + i % 5 {
                        img.set(x, y, value);
                    }
                }
                Glyph {
                    id: format!("{name}{i}"),
                    label: i % 5,
                    image: img,
                }
            })
            .collect();
        GlyphSet::new(name, Split::Test, items)
    }

    #[test]
    fn curve_covers_feasible_grid_and_is_deterministic() {
        let m = Model::<f32>::build(&ModelConfig::dcnn(SpatialPooling::Progressive)).unwrap();
        let t = set("t", 10, 1.0);
        let f = set("f", 4, 0.8);
        let sets = EvalSets {
            targets: &t,
            flankers: Some(("f", &f)),
            backgrounds: None,
        };
        let r = evaluate_curve(&m, SweepKind::ConstantSpacing(120), None, sets, 3, 1).unwrap();
        assert_eq!(r.conditions(), Condition::ALL.to_vec());
        assert_eq!(r.curve(Condition::A).len(), ECC_GRID.len());
        // xa needs ecc >= spacing
        assert_eq!(r.curve(Condition::Xa)[0].0, 120);
        assert!(r.points.iter().all(|p| p.n == 3));
        let again = evaluate_curve(&m, SweepKind::ConstantSpacing(120), None, sets, 3, 1).unwrap();
        assert_eq!(r, again);

        let only = evaluate_curve(
            &m,
            SweepKind::ConstantTargetEcc(0),
            Some(&[Condition::Xax]),
            sets,
            2,
            1,
        )
        .unwrap();
        assert_eq!(only.conditions(), vec![Condition::Xax]);
        assert_eq!(only.curve(Condition::Xax).len(), SPACING_GRID.len());
    }

    #[test]
    fn untrained_model_is_near_chance() {
        // zero weights: all logits tie and class 0 always wins
        let mut m = Model::<f32>::build(&ModelConfig::dcnn(SpatialPooling::AtEnd)).unwrap();
        for p in &mut m.params {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let t = set("t", 50, 1.0);
        let sets = EvalSets {
            targets: &t,
            flankers: None,
            backgrounds: None,
        };
        let r = evaluate_curve(&m, SweepKind::ConstantSpacing(120), None, sets, 200, 3).unwrap();
        for (_, acc) in r.curve(Condition::A) {
            assert!((acc - 0.2).abs() < 0.1, "{acc}");
        }
    }

    #[test]
    fn stderr_is_binomial() {
        let p = CurvePoint {
            condition: Condition::A,
            x_px: 0,
            correct: 250,
            n: 1000,
        };
        assert_eq!(p.accuracy(), 0.25);
        assert!((p.stderr() - (0.25f64 * 0.75 / 1000.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn histogram_of_white_set_is_all_ones() {
        let mut white = set("white", 30, 1.0);
        for g in &mut white.items {
            g.image = Image::filled(28, 28, 1.0);
        }
        let h = intensity_histogram(&[&white], 0.5, 0);
        assert_eq!(h[0].mean, 1.0);
        assert_eq!(h[0].counts[HISTOGRAM_BINS - 1], 30);
        assert_eq!(h[0].counts.iter().sum::<usize>(), 30);
    }

    #[test]
    fn empty_backgrounds_rejected() {
        let m = Model::<f32>::build(&ModelConfig::dcnn(SpatialPooling::Progressive)).unwrap();
        let t = set("t", 5, 1.0);
        let bg = BackgroundSet {
            images: vec![],
            ids: vec![],
            canvas: 1920,
        };
        assert!(run_complex_clutter(&[&m], &t, &bg, 2, 0).is_err());
    }

    #[test]
    fn csv_rows_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let r = ExperimentResult {
            model_hash: "h".into(),
            model_label: "m".into(),
            sweep: SweepKind::ConstantSpacing(120),
            dataset: "mnist".into(),
            points: vec![
                CurvePoint {
                    condition: Condition::Xax,
                    x_px: 0,
                    correct: 1,
                    n: 2,
                },
                CurvePoint {
                    condition: Condition::A,
                    x_px: 120,
                    correct: 2,
                    n: 2,
                },
            ],
        };
        let p = dir.path().join("r.csv");
        write_results_csv(&p, &[r]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "model_hash,sweep,dataset,condition,x_px,accuracy,n,stderr");
        assert!(lines[1].starts_with("h,constant_spacing_120,mnist,a,120,1.0,2,"));
        assert!(lines[2].contains(",xax,0,0.5,2,"));
    }
}
