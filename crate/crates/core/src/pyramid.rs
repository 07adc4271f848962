//! Input of the eccentricity-dependent model: concentric crops of the canvas,
//! smallest first, each box-resampled to 60×60.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Rect};
use crate::stimulus::{Canvas, INPUT_SIZE};

pub const NUM_SCALES: usize = 11;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    /// Sizes grow by √2 per scale.
    #[default]
    Exponential,
    /// Sizes grow by a constant step.
    Linear,
}

impl fmt::Display for Interpolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Interpolation::Exponential => "exponential",
            Interpolation::Linear => "linear",
        })
    }
}

impl FromStr for Interpolation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exponential" => Ok(Interpolation::Exponential),
            "linear" => Ok(Interpolation::Linear),
            other => Err(Error::Config(format!("unknown interpolation '{other}'"))),
        }
    }
}

fn round_half_up(v: f64) -> usize {
    (v + 0.5).floor() as usize
}

/// Side lengths of the `n` crops, smallest first; the last is always `canvas`.
pub fn crop_sizes(n: usize, smallest: usize, canvas: usize, interpolation: Interpolation) -> Result<Vec<usize>> {
    if n < 2 || smallest == 0 || smallest > canvas {
        return Err(Error::Config(format!(
            "need n >= 2 and 0 < smallest <= canvas, got n={n}, smallest={smallest}, canvas={canvas}"
        )));
    }
    let mut sizes: Vec<usize> = (0..n)
        .map(|i| match interpolation {
            Interpolation::Exponential => round_half_up(smallest as f64 * 2f64.sqrt().powi(i as i32)),
            Interpolation::Linear => round_half_up(
                smallest as f64 + i as f64 * (canvas - smallest) as f64 / (n - 1) as f64,
            ),
        })
        .map(|s| s.min(canvas))
        .collect();
    sizes[0] = smallest;
    sizes[n - 1] = canvas;
    Ok(sizes)
}

/// Multiplier applied to scale `i` (0-based) under contrast normalization:
/// `(√2)^(i+1−n)`, so the smallest of 11 crops is divided by 32.
pub fn contrast_factor(i: usize, n: usize) -> f64 {
    2f64.sqrt().powi(i as i32 + 1 - n as i32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleStack {
    pub scales: Vec<Image>,
    pub interpolation: Interpolation,
    pub normalized: bool,
}

impl ScaleStack {
    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }

    /// Pixels of all scales concatenated, smallest crop first.
    pub fn flat(&self) -> Vec<f32> {
        self.scales.iter().flat_map(|s| s.pixels().iter().copied()).collect()
    }

    /// All scales side by side in one grayscale strip.
    pub fn strip(&self) -> Image {
        let (w, h) = (INPUT_SIZE, INPUT_SIZE);
        let mut out = Image::zeros(w * self.len(), h);
        for (i, s) in self.scales.iter().enumerate() {
            out.max_paste(s, i * w, 0);
        }
        out
    }

    /// Writes [`ScaleStack::strip`] as PNG. Normalized stacks are stretched
    /// per scale so the dim large-crop frames stay visible.
    pub fn save_strip(&self, path: &Path) -> Result<()> {
        let strip = if self.normalized {
            let n = self.len();
            ScaleStack {
                scales: self
                    .scales
                    .iter()
                    .enumerate()
                    .map(|(i, s)| s.scale((1.0 / contrast_factor(i, n)) as f32))
                    .collect(),
                interpolation: self.interpolation,
                normalized: false,
            }
            .strip()
        } else {
            self.strip()
        };
        strip.save_png(path)
    }
}

/// Crops concentric with the canvas center, each box-resampled to 60×60.
pub fn extract_stack(canvas: &Canvas, interpolation: Interpolation) -> Result<ScaleStack> {
    let size = canvas.size();
    let sizes = crop_sizes(NUM_SCALES, INPUT_SIZE, size, interpolation)?;
    let c = (size / 2) as i64;
    let scales = sizes
        .iter()
        .map(|&s| canvas.resample(Rect::centered(c, c, s), INPUT_SIZE))
        .collect();
    Ok(ScaleStack {
        scales,
        interpolation,
        normalized: false,
    })
}

/// Multiplies scale `i` by [`contrast_factor`].
pub fn contrast_normalize(stack: &ScaleStack) -> ScaleStack {
    let n = stack.len();
    ScaleStack {
        scales: stack
            .scales
            .iter()
            .enumerate()
            .map(|(i, s)| s.scale(contrast_factor(i, n) as f32))
            .collect(),
        interpolation: stack.interpolation,
        normalized: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stimulus::{compose, downsample_input, Condition, StimulusSpec};
    use proptest::prelude::*;

    #[test]
    fn exponential_sizes() {
        let s = crop_sizes(11, 60, 1920, Interpolation::Exponential).unwrap();
        // independent oracle: 60·2^(i/2), rounding half up
        let oracle: Vec<usize> = (0..11)
            .map(|i| {
                let v = 60.0 * 2f64.powf(i as f64 / 2.0);
                (v + 0.5).floor() as usize
            })
            .collect();
        assert_eq!(s, oracle);
        assert_eq!(s, vec![60, 85, 120, 170, 240, 339, 480, 679, 960, 1358, 1920]);
    }

    #[test]
    fn linear_sizes() {
        let s = crop_sizes(11, 60, 1920, Interpolation::Linear).unwrap();
        let oracle: Vec<usize> = (0..11).map(|i| 60 + 186 * i).collect();
        assert_eq!(s, oracle);
    }

    #[test]
    fn bad_crop_request() {
        assert!(crop_sizes(11, 2000, 1920, Interpolation::Linear).is_err());
        assert!(crop_sizes(1, 60, 1920, Interpolation::Linear).is_err());
    }

    #[test]
    fn contrast_divisors() {
        assert!((1.0 / contrast_factor(0, 11) - 32.0).abs() < 1e-12);
        assert_eq!(contrast_factor(10, 11), 1.0);
        let ones = ScaleStack {
            scales: vec![Image::filled(60, 60, 1.0); 11],
            interpolation: Interpolation::Exponential,
            normalized: false,
        };
        let n = contrast_normalize(&ones);
        for (i, s) in n.scales.iter().enumerate() {
            let divisor = 2f64.sqrt().powi(10 - i as i32);
            assert!((s.get(7, 7) as f64 - 1.0 / divisor).abs() < 1e-7);
        }
        assert!((n.scales[1].get(0, 0) as f64 - 1.0 / 22.627).abs() < 1e-4);
    }

    fn target_canvas(ecc: i64) -> Canvas {
        let glyph = Image::new(28, 28, (0..784).map(|i| ((i * 7) % 11) as f32 / 10.0).collect()).unwrap();
        compose(&StimulusSpec::new(ecc, Condition::A, 0), &glyph, &[]).unwrap()
    }

    #[test]
    fn largest_scale_is_dcnn_input_and_smallest_is_raw() {
        let c = target_canvas(0);
        let st = extract_stack(&c, Interpolation::Exponential).unwrap();
        assert_eq!(st.len(), 11);
        assert_eq!(st.scales[10], downsample_input(&c));
        let dense = c.to_image();
        for y in 0..60 {
            for x in 0..60 {
                assert_eq!(st.scales[0].get(x, y), dense.get(930 + x, 930 + y));
            }
        }
    }

    #[test]
    fn glyph_fraction_per_scale() {
        let mut white = Image::zeros(28, 28);
        white.pixels_mut().fill(1.0);
        let c = compose(&StimulusSpec::new(0, Condition::A, 0), &white, &[]).unwrap();
        let st = extract_stack(&c, Interpolation::Exponential).unwrap();
        // 120 px glyph in a 120 px crop covers it; in the 1920 crop, 1/16 of the width
        let ink_cols = |img: &Image| (0..60).filter(|x| img.get(*x, 30) > 0.0).count();
        assert_eq!(ink_cols(&st.scales[2]), 60);
        assert_eq!(ink_cols(&st.scales[10]), 60 / 16 + 1);
        assert!((st.scales[10].mean() - 1.0 / 256.0).abs() < 1e-6);
    }

    #[test]
    fn self_similarity_under_central_upsampling() {
        // canvas B is the central 960 of canvas A, upsampled 2x (pixel replication);
        // with √2 steps a factor of 2 is two scale indices
        let a = target_canvas(120).to_image();
        let mut b = Image::zeros(1920, 1920);
        for y in 0..1920 {
            for x in 0..1920 {
                b.set(x, y, a.get(480 + x / 2, 480 + y / 2));
            }
        }
        let sa = extract_stack(&Canvas::from_image(a).unwrap(), Interpolation::Exponential).unwrap();
        let sb = extract_stack(&Canvas::from_image(b).unwrap(), Interpolation::Exponential).unwrap();
        for i in 2..11 {
            let mad: f64 = sa.scales[i - 2]
                .pixels()
                .iter()
                .zip(sb.scales[i].pixels())
                .map(|(p, q)| (p - q).abs() as f64)
                .sum::<f64>()
                / 3600.0;
            assert!(mad <= 2.0 / 255.0, "scale {i}: {mad}");
        }
    }

    #[test]
    fn strip_layout() {
        let st = extract_stack(&target_canvas(0), Interpolation::Linear).unwrap();
        let s = st.strip();
        assert_eq!((s.width(), s.height()), (660, 60));
        let dir = tempfile::tempdir().unwrap();
        contrast_normalize(&st).save_strip(&dir.path().join("s.png")).unwrap();
    }

    proptest! {
        #[test]
        fn normalization_keeps_argmax(vals in proptest::collection::vec(0.0f32..1.0, 3600)) {
            let img = Image::new(60, 60, vals).unwrap();
            let st = ScaleStack { scales: vec![img; 11], interpolation: Interpolation::Exponential, normalized: false };
            let n = contrast_normalize(&st);
            let argmax = |i: &Image| i.pixels().iter().enumerate()
                .fold((0, f32::MIN), |b, (k, v)| if *v > b.1 { (k, *v) } else { b }).0;
            for (a, b) in st.scales.iter().zip(&n.scales) {
                prop_assert_eq!(argmax(a), argmax(b));
            }
        }

        #[test]
        fn sizes_strictly_increase(smallest in 1usize..200, extra in 200usize..4000) {
            for interp in [Interpolation::Exponential, Interpolation::Linear] {
                let canvas = smallest + extra;
                let s = crop_sizes(11, smallest, canvas, interp).unwrap();
                prop_assert_eq!(s[0], smallest);
                prop_assert_eq!(s[10], canvas);
                if interp == Interpolation::Linear {
                    prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
                }
            }
        }
    }
}
