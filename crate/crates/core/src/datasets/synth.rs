//! Stand-in glyph generators for flanker sets that are not available locally.
//!
//! * [`font_letters`] renders the letters A–J from TrueType fonts, scaled so
//!   the longer side fills a 28×28 frame, the way notMNIST is built.
//! * [`stroke_characters`] draws random pen-stroke characters on a 28×28
//!   frame, a procedural substitute for Omniglot's handwritten alphabets.

use std::fs;
use std::path::{Path, PathBuf};

use ab_glyph::{Font, FontVec, PxScale};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{Image, Rect};

pub const FRAME: usize = 28;
const LETTERS: [char; 10] = ['A', 'B', 'C', 'D', 'E', 'F', 'G', 'H', 'I', 'J'];
const SUPERSAMPLE: usize = 8;

/// How a rendered letter is mapped onto the frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fit {
    /// Longest side spans the frame, aspect kept, centered.
    Aspect,
    /// Both sides span the frame.
    Stretch,
}

/// Renders `ch` at high resolution and maps its ink bounding box onto the frame.
pub fn render_letter(font: &FontVec, ch: char, fit: Fit) -> Option<Image> {
    let id = font.glyph_id(ch);
    if id.0 == 0 {
        return None;
    }
    let glyph = id.with_scale(PxScale::from((FRAME * SUPERSAMPLE * 2) as f32));
    let outlined = font.outline_glyph(glyph)?;
    let bounds = outlined.px_bounds();
    let (w, h) = (bounds.width().ceil() as usize, bounds.height().ceil() as usize);
    if w < 2 || h < 2 {
        return None;
    }
    let mut hi = Image::zeros(w, h);
    outlined.draw(|x, y, c| {
        if (x as usize) < w && (y as usize) < h {
            hi.set(x as usize, y as usize, c.clamp(0.0, 1.0));
        }
    });
    let frame = match fit {
        Fit::Stretch => hi.area_resample(Rect::new(0, 0, w, h), FRAME, FRAME),
        Fit::Aspect => {
            let side = w.max(h);
            let region = Rect::new(
                -(((side - w) / 2) as i64),
                -(((side - h) / 2) as i64),
                side,
                side,
            );
            hi.area_resample(region, FRAME, FRAME)
        }
    };
    Some(frame)
}

/// Writes A–J from every font in `fonts` to `out_dir` as `{letter}/{font}.png`,
/// aspect kept. Returns the number of images written.
pub fn font_letters(fonts: &[PathBuf], out_dir: &Path) -> Result<usize> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = 0;
    for path in fonts {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let Ok(font) = FontVec::try_from_vec(bytes) else {
            log::warn!("not a usable font: {}", path.display());
            continue;
        };
        let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
        for &ch in &LETTERS {
            if let Some(img) = render_letter(&font, ch, Fit::Aspect) {
                img.save_png(&out_dir.join(format!("{ch}/{stem}.png")))?;
                written += 1;
            }
        }
    }
    Ok(written)
}

fn catmull_rom(p: &[(f64, f64)], t: f64) -> (f64, f64) {
    // p has four control points; t in [0, 1] spans p[1]..p[2]
    let t2 = t * t;
    let t3 = t2 * t;
    let f = |a: f64, b: f64, c: f64, d: f64| {
        0.5 * (2.0 * b + (c - a) * t + (2.0 * a - 5.0 * b + 4.0 * c - d) * t2
            + (3.0 * b - a - 3.0 * c + d) * t3)
    };
    (
        f(p[0].0, p[1].0, p[2].0, p[3].0),
        f(p[0].1, p[1].1, p[2].1, p[3].1),
    )
}

fn stamp(canvas: &mut Image, cx: f64, cy: f64, radius: f64) {
    let (w, h) = (canvas.width() as i64, canvas.height() as i64);
    let r = radius.ceil() as i64;
    for y in (cy as i64 - r).max(0)..=(cy as i64 + r).min(h - 1) {
        for x in (cx as i64 - r).max(0)..=(cx as i64 + r).min(w - 1) {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            if dx * dx + dy * dy <= radius * radius {
                canvas.set(x as usize, y as usize, 1.0);
            }
        }
    }
}

/// Pen radius in frame pixels, close to MNIST's stroke width.
pub const PEN_RADIUS: f64 = 1.25;

/// One random character of 1–3 smooth strokes inside the central 20×20 box.
pub fn stroke_character<R: Rng>(rng: &mut R) -> Image {
    let side = FRAME * SUPERSAMPLE;
    let s = SUPERSAMPLE as f64;
    let mut hi = Image::zeros(side, side);
    let strokes = rng.gen_range(1..=3);
    for _ in 0..strokes {
        let n = rng.gen_range(2..=5);
        let pts: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.gen_range(4.0..24.0) * s, rng.gen_range(4.0..24.0) * s))
            .collect();
        let mut ctrl = Vec::with_capacity(n + 2);
        ctrl.push(pts[0]);
        ctrl.extend_from_slice(&pts);
        ctrl.push(pts[n - 1]);
        for seg in ctrl.windows(4) {
            let len = ((seg[2].0 - seg[1].0).powi(2) + (seg[2].1 - seg[1].1).powi(2)).sqrt();
            let steps = (len / 2.0).ceil().max(1.0) as usize;
            for k in 0..=steps {
                let (x, y) = catmull_rom(seg, k as f64 / steps as f64);
                stamp(&mut hi, x, y, PEN_RADIUS * s);
            }
        }
    }
    hi.area_resample(Rect::new(0, 0, side, side), FRAME, FRAME)
}

/// Writes `count` stroke characters to `out_dir` as `stroke_NNNNN.png`.
pub fn stroke_characters(count: usize, seed: u64, out_dir: &Path) -> Result<usize> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..count {
        stroke_character(&mut rng).save_png(&out_dir.join(format!("stroke_{i:05}.png")))?;
    }
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stroke_characters_are_deterministic_and_sparse() {
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        let ga = stroke_character(&mut a);
        assert_eq!(ga, stroke_character(&mut b));
        assert_eq!((ga.width(), ga.height()), (FRAME, FRAME));
        let f = ga.fraction_above(0.5);
        assert!(f > 0.0 && f < 0.6, "white fraction {f}");
        // nothing in the outer 2-pixel margin
        assert!((0..FRAME).all(|i| ga.get(i, 0) == 0.0 && ga.get(0, i) == 0.0));
    }

    #[test]
    fn catmull_rom_interpolates_endpoints() {
        let p = [(0.0, 0.0), (1.0, 2.0), (3.0, 4.0), (5.0, 5.0)];
        assert_eq!(catmull_rom(&p, 0.0), (1.0, 2.0));
        let e = catmull_rom(&p, 1.0);
        assert!((e.0 - 3.0).abs() < 1e-12 && (e.1 - 4.0).abs() < 1e-12);
    }
}
