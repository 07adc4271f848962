//! Crowding stimuli: a target glyph at some horizontal eccentricity on a large
//! black canvas, optionally with flankers and a natural-scene background.
//!
//! Canvases are mostly empty, so a [`Canvas`] only stores the window that
//! holds ink (the whole canvas once a background is embedded). Everything
//! outside the window is zero.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{BackgroundSet, GlyphSet};
use crate::error::{Error, Result};
use crate::image::{area_resample_window, Image, Rect};

pub const CANVAS_SIZE: usize = 1920;
pub const GLYPH_SIZE: usize = 120;
pub const INPUT_SIZE: usize = 60;

/// Target eccentricities used by every sweep (pixels).
pub const ECC_GRID: [i64; 7] = [0, 120, 240, 360, 480, 600, 720];
/// Target-flanker spacings for constant-target-eccentricity sweeps (pixels).
pub const SPACING_GRID: [i64; 5] = [120, 240, 360, 480, 600];

/// Target/flanker configuration. `a` is the target, `x` a flanker; the left
/// side is toward the fixation point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    A,
    Ax,
    Xa,
    Xax,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::A, Condition::Ax, Condition::Xa, Condition::Xax];

    pub fn name(&self) -> &'static str {
        match self {
            Condition::A => "a",
            Condition::Ax => "ax",
            Condition::Xa => "xa",
            Condition::Xax => "xax",
        }
    }

    /// Flanker center offsets from the target center.
    pub fn flanker_offsets(&self, spacing: i64) -> Vec<i64> {
        match self {
            Condition::A => vec![],
            Condition::Ax => vec![spacing],
            Condition::Xa => vec![-spacing],
            Condition::Xax => vec![-spacing, spacing],
        }
    }

    pub fn flanker_count(&self) -> usize {
        self.flanker_offsets(0).len()
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(Condition::A),
            "ax" => Ok(Condition::Ax),
            "xa" => Ok(Condition::Xa),
            "xax" => Ok(Condition::Xax),
            other => Err(Error::Config(format!("unknown condition '{other}'"))),
        }
    }
}

fn default_glyph_size() -> usize {
    GLYPH_SIZE
}

fn default_canvas() -> usize {
    CANVAS_SIZE
}

/// Everything needed to build one stimulus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StimulusSpec {
    /// Horizontal offset of the target center from the canvas center.
    pub target_ecc: i64,
    pub condition: Condition,
    /// Center-to-center target-flanker distance; unused for `a`.
    #[serde(default)]
    pub spacing: i64,
    #[serde(default)]
    pub flanker_source: Option<String>,
    #[serde(default)]
    pub background: Option<String>,
    #[serde(default = "default_glyph_size")]
    pub target_size: usize,
    #[serde(default = "default_canvas")]
    pub canvas: usize,
    #[serde(default)]
    pub seed: u64,
}

impl StimulusSpec {
    pub fn new(target_ecc: i64, condition: Condition, spacing: i64) -> Self {
        StimulusSpec {
            target_ecc,
            condition,
            spacing,
            flanker_source: None,
            background: None,
            target_size: GLYPH_SIZE,
            canvas: CANVAS_SIZE,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn center(&self) -> i64 {
        (self.canvas / 2) as i64
    }

    pub fn target_box(&self) -> Rect {
        Rect::centered(self.center() + self.target_ecc, self.center(), self.target_size)
    }

    /// Flanker boxes in offset order (central first for `xax`).
    pub fn flanker_boxes(&self) -> Vec<Rect> {
        let tx = self.center() + self.target_ecc;
        self.condition
            .flanker_offsets(self.spacing)
            .into_iter()
            .map(|off| Rect::centered(tx + off, self.center(), self.target_size))
            .collect()
    }

    /// Why this spec cannot be drawn inside its canvas, if it cannot.
    pub fn out_of_bounds(&self) -> Option<String> {
        let canvas = Rect::new(0, 0, self.canvas, self.canvas);
        if !canvas.contains_rect(&self.target_box()) {
            return Some(format!("target at {} px leaves the canvas", self.target_ecc));
        }
        for b in self.flanker_boxes() {
            if !canvas.contains_rect(&b) {
                return Some(format!(
                    "{} flanker at {} px leaves the canvas",
                    self.condition,
                    (2 * b.x + b.w as i64) / 2 - self.center()
                ));
            }
        }
        None
    }

    /// Sweep feasibility: inside the canvas, and a lone central flanker must not
    /// cross to negative eccentricity.
    pub fn infeasibility(&self) -> Option<String> {
        if self.condition == Condition::Xa && self.target_ecc < self.spacing {
            return Some(format!(
                "xa flanker would sit at {} px, more central than fixation",
                self.target_ecc - self.spacing
            ));
        }
        self.out_of_bounds()
    }

    /// `{condition}_{ecc}_{spacing}_{seed}`.
    pub fn file_stem(&self) -> String {
        format!(
            "{}_{}_{}_{}",
            self.condition, self.target_ecc, self.spacing, self.seed
        )
    }
}

/// Which glyphs went into a canvas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub spec: StimulusSpec,
    pub target_id: String,
    pub target_label: usize,
    pub flanker_ids: Vec<String>,
    pub background_id: Option<String>,
}

/// A square intensity canvas, stored as its non-zero window.
#[derive(Clone, Debug)]
pub struct Canvas {
    size: usize,
    window: Rect,
    content: Image,
    pub provenance: Option<Provenance>,
}

impl Canvas {
    pub fn blank(size: usize) -> Self {
        Canvas {
            size,
            window: Rect::new(0, 0, 0, 0),
            content: Image::zeros(0, 0),
            provenance: None,
        }
    }

    pub fn from_image(img: Image) -> Result<Self> {
        if img.width() != img.height() {
            return Err(Error::Data(format!(
                "canvas must be square, got {}x{}",
                img.width(),
                img.height()
            )));
        }
        let size = img.width();
        Ok(Canvas {
            size,
            window: Rect::new(0, 0, size, size),
            content: img,
            provenance: None,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn window(&self) -> Rect {
        self.window
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        let (x, y) = (x as i64, y as i64);
        if x >= self.window.x
            && x < self.window.right()
            && y >= self.window.y
            && y < self.window.bottom()
        {
            self.content
                .get((x - self.window.x) as usize, (y - self.window.y) as usize)
        } else {
            0.0
        }
    }

    /// The full dense canvas.
    pub fn to_image(&self) -> Image {
        let mut img = Image::zeros(self.size, self.size);
        if self.window.w > 0 {
            img.max_paste(&self.content, self.window.x as usize, self.window.y as usize);
        }
        img
    }

    /// Area-averages a square region of the canvas to `out × out`.
    pub fn resample(&self, region: Rect, out: usize) -> Image {
        if self.window.w == 0 {
            return Image::zeros(out, out);
        }
        area_resample_window(&self.content, self.window.x, self.window.y, region, out, out)
    }

    /// Mean intensity of the whole canvas.
    pub fn mean(&self) -> f64 {
        self.content.mean() * (self.window.w * self.window.h) as f64
            / (self.size * self.size) as f64
    }
}

/// Pastes target and flankers (already chosen) with elementwise max.
///
/// Glyphs are bilinearly resized to `spec.target_size`. `flankers` must hold
/// one glyph per flanker of the condition (both `xax` flankers may be the
/// same image).
pub fn compose(spec: &StimulusSpec, target: &Image, flankers: &[&Image]) -> Result<Canvas> {
    let need = spec.condition.flanker_count();
    if flankers.len() != need {
        return Err(Error::Config(format!(
            "condition {} needs {need} flanker glyphs, got {}",
            spec.condition,
            flankers.len()
        )));
    }
    if let Some(why) = spec.out_of_bounds() {
        return Err(Error::Placement(why));
    }
    let target_box = spec.target_box();
    let flanker_boxes = spec.flanker_boxes();
    let window = flanker_boxes
        .iter()
        .fold(target_box, |acc, b| acc.union(b));
    let mut content = Image::zeros(window.w, window.h);
    let size = spec.target_size;
    let place = |content: &mut Image, glyph: &Image, b: &Rect| {
        let g = glyph.resize_bilinear(size, size);
        content.max_paste(&g, (b.x - window.x) as usize, (b.y - window.y) as usize);
    };
    place(&mut content, target, &target_box);
    for (g, b) in flankers.iter().zip(&flanker_boxes) {
        place(&mut content, g, b);
    }
    Ok(Canvas {
        size: spec.canvas,
        window,
        content,
        provenance: None,
    })
}

/// `max(background, canvas)` over the whole canvas.
pub fn embed_background(canvas: &Canvas, background: &Image) -> Result<Canvas> {
    if background.width() != canvas.size || background.height() != canvas.size {
        return Err(Error::Data(format!(
            "background is {}x{}, canvas is {}",
            background.width(),
            background.height(),
            canvas.size
        )));
    }
    let mut dense = background.clone();
    if canvas.window.w > 0 {
        dense.max_paste(
            &canvas.content,
            canvas.window.x as usize,
            canvas.window.y as usize,
        );
    }
    let mut out = Canvas::from_image(dense)?;
    out.provenance = canvas.provenance.clone();
    Ok(out)
}

/// The DCNN input: the whole canvas box-averaged to 60×60.
pub fn downsample_input(canvas: &Canvas) -> Image {
    canvas.resample(Rect::new(0, 0, canvas.size, canvas.size), INPUT_SIZE)
}

/// Which glyphs (and background) a stimulus uses, drawn from `rng`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GlyphChoice {
    pub target: usize,
    pub flanker: usize,
    pub background: usize,
}

impl GlyphChoice {
    /// Draws all three indices, so the choice of target does not depend on
    /// whether the condition actually uses flankers.
    pub fn draw<R: Rng>(
        rng: &mut R,
        targets: usize,
        flankers: usize,
        backgrounds: usize,
    ) -> Self {
        GlyphChoice {
            target: rng.gen_range(0..targets.max(1)),
            flanker: rng.gen_range(0..flankers.max(1)),
            background: rng.gen_range(0..backgrounds.max(1)),
        }
    }

    pub fn from_seed(seed: u64, targets: usize, flankers: usize, backgrounds: usize) -> Self {
        GlyphChoice::draw(
            &mut ChaCha8Rng::seed_from_u64(seed),
            targets,
            flankers,
            backgrounds,
        )
    }
}

/// Glyph sources for [`render`].
#[derive(Clone, Copy)]
pub struct Sources<'a> {
    pub targets: &'a GlyphSet,
    pub flankers: Option<&'a GlyphSet>,
    pub backgrounds: Option<&'a BackgroundSet>,
}

/// Builds the canvas for `spec` with an explicit glyph choice. Both flankers
/// of `xax` are the same glyph.
pub fn render(spec: &StimulusSpec, sources: Sources<'_>, choice: GlyphChoice) -> Result<Canvas> {
    let target = sources.targets.items.get(choice.target).ok_or_else(|| {
        Error::Config(format!("target set {} is empty", sources.targets.name))
    })?;
    let mut flanker_ids = Vec::new();
    let flanker_img;
    let flankers: Vec<&Image> = if spec.condition.flanker_count() > 0 {
        let set = sources
            .flankers
            .ok_or_else(|| Error::Config("condition needs a flanker set".into()))?;
        let g = set
            .items
            .get(choice.flanker)
            .ok_or_else(|| Error::Config(format!("flanker set {} is empty", set.name)))?;
        flanker_img = &g.image;
        for _ in 0..spec.condition.flanker_count() {
            flanker_ids.push(g.id.clone());
        }
        vec![flanker_img; spec.condition.flanker_count()]
    } else {
        vec![]
    };
    let mut canvas = compose(spec, &target.image, &flankers)?;
    let mut background_id = None;
    if spec.background.is_some() {
        let bgs = sources
            .backgrounds
            .filter(|b| !b.is_empty())
            .ok_or_else(|| Error::Config("spec asks for a background but none are loaded".into()))?;
        let i = choice.background % bgs.len();
        canvas = embed_background(&canvas, &bgs.images[i])?;
        background_id = Some(bgs.ids[i].clone());
    }
    canvas.provenance = Some(Provenance {
        spec: spec.clone(),
        target_id: target.id.clone(),
        target_label: target.label,
        flanker_ids,
        background_id,
    });
    Ok(canvas)
}

/// Builds the canvas for `spec`, drawing glyphs from `spec.seed`.
pub fn generate(spec: &StimulusSpec, sources: Sources<'_>) -> Result<Canvas> {
    let choice = GlyphChoice::from_seed(
        spec.seed,
        sources.targets.len(),
        sources.flankers.map_or(0, |f| f.len()),
        sources.backgrounds.map_or(0, |b| b.len()),
    );
    render(spec, sources, choice)
}

/// Writes `{stem}.png` and `{stem}.json` into `dir`.
pub fn export(canvas: &Canvas, dir: &Path) -> Result<PathBuf> {
    let prov = canvas
        .provenance
        .as_ref()
        .ok_or_else(|| Error::Config("canvas has no provenance to export".into()))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem = prov.spec.file_stem();
    let png = dir.join(format!("{stem}.png"));
    canvas.to_image().save_png(&png)?;
    let json = serde_json::to_string_pretty(prov).map_err(|e| Error::Serde(e.to_string()))?;
    let jp = dir.join(format!("{stem}.json"));
    fs::write(&jp, json).map_err(|e| Error::io(&jp, e))?;
    Ok(png)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    /// Fixed spacing, varying target eccentricity.
    ConstantSpacing,
    /// Fixed target eccentricity, varying spacing.
    ConstantTargetEcc,
}

impl FromStr for SweepMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant_spacing" | "constant-spacing" => Ok(SweepMode::ConstantSpacing),
            "constant_target_ecc" | "constant-target-ecc" => Ok(SweepMode::ConstantTargetEcc),
            other => Err(Error::Config(format!("unknown sweep mode '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Sweep {
    pub specs: Vec<StimulusSpec>,
    pub dropped: Vec<(StimulusSpec, String)>,
}

impl Sweep {
    pub fn conditions(&self) -> BTreeSet<Condition> {
        self.specs.iter().map(|s| s.condition).collect()
    }
}

/// Expands a template over `values` for all four conditions.
///
/// In constant-spacing mode infeasible points are dropped one by one. In
/// constant-target-eccentricity mode a condition is kept only if it is
/// feasible at every spacing, so each curve is complete.
pub fn sweep(template: &StimulusSpec, mode: SweepMode, values: &[i64]) -> Result<Sweep> {
    if values.iter().any(|v| *v < 0) || values.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config(
            "sweep values must be non-negative and sorted".into(),
        ));
    }
    let mut out = Sweep::default();
    for cond in Condition::ALL {
        let specs: Vec<StimulusSpec> = values
            .iter()
            .map(|&v| {
                let mut s = template.clone();
                s.condition = cond;
                match mode {
                    SweepMode::ConstantSpacing => s.target_ecc = v,
                    SweepMode::ConstantTargetEcc => s.spacing = v,
                }
                s
            })
            .collect();
        match mode {
            SweepMode::ConstantSpacing => {
                for s in specs {
                    match s.infeasibility() {
                        Some(why) => out.dropped.push((s, why)),
                        None => out.specs.push(s),
                    }
                }
            }
            SweepMode::ConstantTargetEcc => {
                let reason = specs.iter().find_map(|s| s.infeasibility());
                match reason {
                    Some(why) if cond != Condition::A => {
                        out.dropped.extend(specs.into_iter().map(|s| (s, why.clone())))
                    }
                    _ => out.specs.extend(specs),
                }
            }
        }
    }
    for (s, why) in &out.dropped {
        log::debug!("dropping {}: {why}", s.file_stem());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{Glyph, Split};

    fn square(value: f32) -> Image {
        Image::filled(28, 28, value)
    }

    /// Horizontal pixel extent of ink in row `y` of the dense canvas.
    fn ink_centers(img: &Image, y: usize) -> Vec<(usize, usize)> {
        let mut runs = Vec::new();
        let mut start = None;
        for x in 0..img.width() {
            let on = img.get(x, y) > 0.0;
            match (on, start) {
                (true, None) => start = Some(x),
                (false, Some(s)) => {
                    runs.push((s, x));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            runs.push((s, img.width()));
        }
        runs
    }

    #[test]
    fn isolated_target_is_centered_at_eccentricity() {
        let spec = StimulusSpec::new(240, Condition::A, 0);
        let c = compose(&spec, &square(1.0), &[]).unwrap();
        let img = c.to_image();
        assert_eq!(ink_centers(&img, 960), vec![(1140, 1260)]);
        assert_eq!(img.get(1200, 900), 1.0);
        assert_eq!(img.get(1200, 899), 0.0);
        assert_eq!(img.get(1200, 1019), 1.0);
        assert_eq!(img.get(1200, 1020), 0.0);
    }

    #[test]
    fn xax_at_fixation_straddles_center() {
        let spec = StimulusSpec::new(0, Condition::Xax, 120);
        let f = square(0.5);
        let c = compose(&spec, &square(1.0), &[&f, &f]).unwrap();
        let boxes = spec.flanker_boxes();
        assert_eq!(boxes[0].center_x2().0 / 2 - 960, -120);
        assert_eq!(boxes[1].center_x2().0 / 2 - 960, 120);
        // touching boxes merge into one run of ink
        assert_eq!(ink_centers(&c.to_image(), 960), vec![(780, 1140)]);
    }

    #[test]
    fn peripheral_flanker_at_840() {
        let spec = StimulusSpec::new(720, Condition::Ax, 120);
        let b = spec.flanker_boxes();
        assert_eq!(b[0].center_x2().0 / 2, 960 + 840);
        let f = square(0.5);
        assert!(compose(&spec, &square(1.0), &[&f]).is_ok());
    }

    #[test]
    fn out_of_canvas_is_placement_error() {
        let spec = StimulusSpec::new(720, Condition::Ax, 240);
        let f = square(0.5);
        assert!(matches!(
            compose(&spec, &square(1.0), &[&f]),
            Err(Error::Placement(_))
        ));
        assert!(compose(&spec, &square(1.0), &[]).is_err());
    }

    #[test]
    fn xax_is_max_of_ax_and_xa() {
        let t = Image::new(28, 28, (0..784).map(|i| (i % 17) as f32 / 16.0).collect()).unwrap();
        let f = Image::new(28, 28, (0..784).map(|i| (i % 5) as f32 / 4.0).collect()).unwrap();
        for spacing in [60, 120, 200] {
            let mk = |c| StimulusSpec::new(300, c, spacing);
            let xax = compose(&mk(Condition::Xax), &t, &[&f, &f]).unwrap().to_image();
            let ax = compose(&mk(Condition::Ax), &t, &[&f]).unwrap().to_image();
            let xa = compose(&mk(Condition::Xa), &t, &[&f]).unwrap().to_image();
            assert_eq!(xax, ax.max_with(&xa).unwrap());
        }
    }

    #[test]
    fn background_embedding() {
        let spec = StimulusSpec::new(0, Condition::A, 0);
        let c = compose(&spec, &square(0.8), &[]).unwrap();
        let black = embed_background(&c, &Image::zeros(1920, 1920)).unwrap();
        assert_eq!(black.to_image(), c.to_image());
        let white = embed_background(&c, &Image::filled(1920, 1920, 1.0)).unwrap();
        assert!(white.to_image().pixels().iter().all(|v| *v == 1.0));
        assert!(matches!(
            embed_background(&c, &Image::zeros(10, 10)),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn downsample_constant_and_mean() {
        let c = Canvas::from_image(Image::filled(1920, 1920, 0.4)).unwrap();
        let d = downsample_input(&c);
        assert_eq!((d.width(), d.height()), (60, 60));
        assert!(d.pixels().iter().all(|v| (v - 0.4).abs() < 1e-6));

        let spec = StimulusSpec::new(360, Condition::Xax, 120);
        let t = Image::new(28, 28, (0..784).map(|i| (i % 13) as f32 / 12.0).collect()).unwrap();
        let c = compose(&spec, &t, &[&t, &t]).unwrap();
        let d = downsample_input(&c);
        assert!((d.mean() - c.to_image().mean()).abs() < 1e-6);
        assert!((c.mean() - c.to_image().mean()).abs() < 1e-9);
    }

    #[test]
    fn aligned_block_gives_one_input_pixel() {
        let mut img = Image::zeros(1920, 1920);
        for y in 64..96 {
            for x in 320..352 {
                img.set(x, y, 1.0);
            }
        }
        let d = downsample_input(&Canvas::from_image(img).unwrap());
        assert_eq!(d.pixels().iter().filter(|v| **v > 0.0).count(), 1);
        assert_eq!(d.get(10, 2), 1.0);
    }

    #[test]
    fn constant_spacing_sweep_drops_infeasible_points() {
        let t = StimulusSpec::new(0, Condition::A, 120);
        let s = sweep(&t, SweepMode::ConstantSpacing, &ECC_GRID).unwrap();
        let ecc_of = |c| {
            s.specs
                .iter()
                .filter(|x| x.condition == c)
                .map(|x| x.target_ecc)
                .collect::<Vec<_>>()
        };
        assert_eq!(ecc_of(Condition::A), ECC_GRID.to_vec());
        assert_eq!(ecc_of(Condition::Xa), ECC_GRID[1..].to_vec());
        assert_eq!(ecc_of(Condition::Ax), ECC_GRID.to_vec());
        assert_eq!(ecc_of(Condition::Xax), ECC_GRID.to_vec());
        assert_eq!(s.dropped.len(), 1);

        let t = StimulusSpec::new(0, Condition::A, 240);
        let s = sweep(&t, SweepMode::ConstantSpacing, &ECC_GRID).unwrap();
        // xa needs ecc >= 240; ax and xax lose ecc 720
        assert_eq!(s.specs.len(), 7 + 5 + 6 + 6);
    }

    #[test]
    fn constant_target_ecc_sweep_conditions() {
        let at0 = sweep(
            &StimulusSpec::new(0, Condition::A, 0),
            SweepMode::ConstantTargetEcc,
            &SPACING_GRID,
        )
        .unwrap();
        assert_eq!(
            at0.conditions().into_iter().collect::<Vec<_>>(),
            vec![Condition::A, Condition::Ax, Condition::Xax]
        );
        let at720 = sweep(
            &StimulusSpec::new(720, Condition::A, 0),
            SweepMode::ConstantTargetEcc,
            &SPACING_GRID,
        )
        .unwrap();
        assert_eq!(
            at720.conditions().into_iter().collect::<Vec<_>>(),
            vec![Condition::A, Condition::Xa]
        );
        assert!(sweep(
            &StimulusSpec::new(0, Condition::A, 0),
            SweepMode::ConstantTargetEcc,
            &[240, 120]
        )
        .is_err());
    }

    fn glyphs(n: usize, scale: f32) -> GlyphSet {
        GlyphSet::new(
            "g",
            Split::Test,
            (0..n)
                .map(|i| Glyph {
                    id: format!("g{i}"),
                    label: i % 5,
                    image: Image::filled(28, 28, scale * (i + 1) as f32 / n as f32),
                })
                .collect(),
        )
    }

    #[test]
    fn generation_is_deterministic() {
        let t = glyphs(10, 1.0);
        let f = glyphs(7, 0.5);
        let src = Sources {
            targets: &t,
            flankers: Some(&f),
            backgrounds: None,
        };
        let spec = StimulusSpec::new(480, Condition::Xax, 120).with_seed(42);
        let a = generate(&spec, src).unwrap();
        let b = generate(&spec, src).unwrap();
        assert_eq!(a.to_image().png_bytes(), b.to_image().png_bytes());
        let p = a.provenance.unwrap();
        assert_eq!(p.flanker_ids.len(), 2);
        assert_eq!(p.flanker_ids[0], p.flanker_ids[1]);
    }

    #[test]
    fn export_writes_png_and_json() {
        let dir = tempfile::tempdir().unwrap();
        let t = glyphs(3, 1.0);
        let spec = StimulusSpec::new(120, Condition::A, 0).with_seed(9);
        let c = generate(
            &spec,
            Sources {
                targets: &t,
                flankers: None,
                backgrounds: None,
            },
        )
        .unwrap();
        let png = export(&c, dir.path()).unwrap();
        assert_eq!(png.file_name().unwrap(), "a_120_0_9.png");
        let json = fs::read_to_string(dir.path().join("a_120_0_9.json")).unwrap();
        let back: Provenance = serde_json::from_str(&json).unwrap();
        assert_eq!(back.spec, spec);
    }
}
