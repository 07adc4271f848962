//! Grayscale intensity images and the two resamplers used by the pipeline:
//! bilinear upscaling for glyphs and area (box) averaging for downsampling.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, Luma};

use crate::error::{Error, Result};

/// Axis-aligned pixel rectangle. The origin may be negative for boxes being
/// checked against a canvas.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Rect {
    pub x: i64,
    pub y: i64,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn new(x: i64, y: i64, w: usize, h: usize) -> Self {
        Rect { x, y, w, h }
    }

    /// A `size × size` box whose center is `(cx, cy)`; odd sizes put the extra
    /// pixel on the right/bottom.
    pub fn centered(cx: i64, cy: i64, size: usize) -> Self {
        let half = (size / 2) as i64;
        Rect::new(cx - half, cy - half, size, size)
    }

    pub fn right(&self) -> i64 {
        self.x + self.w as i64
    }

    pub fn bottom(&self) -> i64 {
        self.y + self.h as i64
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.right() <= self.right()
            && other.bottom() <= self.bottom()
    }

    pub fn union(&self, other: &Rect) -> Rect {
        let x = self.x.min(other.x);
        let y = self.y.min(other.y);
        let r = self.right().max(other.right());
        let b = self.bottom().max(other.bottom());
        Rect::new(x, y, (r - x) as usize, (b - y) as usize)
    }

    /// Center in continuous pixel coordinates (doubled, to stay integral).
    pub fn center_x2(&self) -> (i64, i64) {
        (2 * self.x + self.w as i64, 2 * self.y + self.h as i64)
    }
}

/// Row-major grayscale image with intensities nominally in `[0, 1]`.
#[derive(Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl std::fmt::Debug for Image {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Image({}x{})", self.width, self.height)
    }
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Data(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Image {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Image {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Image::filled(width, height, 0.0)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn row(&self, y: usize) -> &[f32] {
        &self.pixels[y * self.width..(y + 1) * self.width]
    }

    pub fn mean(&self) -> f64 {
        if self.pixels.is_empty() {
            return 0.0;
        }
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len() as f64
    }

    /// Fraction of pixels strictly above `threshold`.
    pub fn fraction_above(&self, threshold: f32) -> f64 {
        if self.pixels.is_empty() {
            return 0.0;
        }
        self.pixels.iter().filter(|&&v| v > threshold).count() as f64 / self.pixels.len() as f64
    }

    /// Bilinear resize with half-pixel centers and clamped borders.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let taps = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f32)> {
            let scale = n_in as f64 / n_out as f64;
            (0..n_out)
                .map(|o| {
                    let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                    let i0 = s.floor() as usize;
                    let i1 = (i0 + 1).min(n_in - 1);
                    (i0, i1, (s - i0 as f64) as f32)
                })
                .collect()
        };
        let xs = taps(width, self.width);
        let ys = taps(height, self.height);
        let mut out = Vec::with_capacity(width * height);
        for &(y0, y1, fy) in &ys {
            let (r0, r1) = (self.row(y0), self.row(y1));
            for &(x0, x1, fx) in &xs {
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                out.push(top + (bot - top) * fy);
            }
        }
        Image {
            width,
            height,
            pixels: out,
        }
    }

    /// Area-averages `region` (in this image's coordinates) down or up to
    /// `out_w × out_h`. Pixels of `region` outside the image count as zero.
    pub fn area_resample(&self, region: Rect, out_w: usize, out_h: usize) -> Image {
        area_resample_window(self, 0, 0, region, out_w, out_h)
    }

    /// Writes `max(self, glyph)` with the glyph's top-left corner at `(x0, y0)`.
    /// The glyph must lie inside the image.
    pub fn max_paste(&mut self, glyph: &Image, x0: usize, y0: usize) {
        assert!(x0 + glyph.width <= self.width && y0 + glyph.height <= self.height);
        for gy in 0..glyph.height {
            let dst = &mut self.pixels[(y0 + gy) * self.width + x0..][..glyph.width];
            for (d, s) in dst.iter_mut().zip(glyph.row(gy)) {
                *d = d.max(*s);
            }
        }
    }

    /// Elementwise maximum with an equally sized image.
    pub fn max_with(&self, other: &Image) -> Result<Image> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::Data(format!(
                "size mismatch: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        let pixels = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| a.max(*b))
            .collect();
        Ok(Image {
            width: self.width,
            height: self.height,
            pixels,
        })
    }

    pub fn scale(&self, factor: f32) -> Image {
        Image {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn from_gray(img: &GrayImage) -> Image {
        Image {
            width: img.width() as usize,
            height: img.height() as usize,
            pixels: img.pixels().map(|p| p.0[0] as f32 / 255.0).collect(),
        }
    }

    /// 8-bit quantization, clamping to `[0, 1]`.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = self.get(x as usize, y as usize).clamp(0.0, 1.0);
            Luma([(v * 255.0).round() as u8])
        })
    }

    /// Loads any raster format the `image` crate understands, converted to grayscale.
    pub fn load(path: &Path) -> Result<Image> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?;
        Ok(Image::from_gray(&img.to_luma8()))
    }

    pub fn png_bytes(&self) -> Vec<u8> {
        let mut buf = Cursor::new(Vec::new());
        self.to_gray()
            .write_to(&mut buf, ImageFormat::Png)
            .expect("in-memory png encoding");
        buf.into_inner()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.png_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Per-output list of `(source index, weight)` for area averaging the source
/// interval `[start, start + len)` onto `n` equal bins.
fn area_taps(start: i64, len: usize, n: usize) -> Vec<Vec<(i64, f64)>> {
    let bin = len as f64 / n as f64;
    (0..n)
        .map(|o| {
            let lo = start as f64 + o as f64 * bin;
            let hi = lo + bin;
            let mut taps = Vec::new();
            let mut p = lo.floor() as i64;
            while (p as f64) < hi {
                let overlap = (hi.min(p as f64 + 1.0) - lo.max(p as f64)).max(0.0);
                if overlap > 0.0 {
                    taps.push((p, overlap / bin));
                }
                p += 1;
            }
            taps
        })
        .collect()
}

/// Area resampling of `region` from a plane that is zero everywhere except for
/// `window`, whose top-left corner sits at `(wx, wy)`.
pub(crate) fn area_resample_window(
    window: &Image,
    wx: i64,
    wy: i64,
    region: Rect,
    out_w: usize,
    out_h: usize,
) -> Image {
    let xt = area_taps(region.x - wx, region.w, out_w);
    let yt = area_taps(region.y - wy, region.h, out_h);
    let (ww, wh) = (window.width as i64, window.height as i64);
    // horizontal pass, only over window rows the region touches
    let row_lo = (region.y - wy).max(0);
    let row_hi = (region.bottom() - wy).min(wh);
    let mut tmp = vec![0.0f64; ((row_hi - row_lo).max(0) as usize) * out_w];
    for r in row_lo..row_hi {
        let src = window.row(r as usize);
        let dst = &mut tmp[(r - row_lo) as usize * out_w..][..out_w];
        for (d, taps) in dst.iter_mut().zip(&xt) {
            *d = taps
                .iter()
                .filter(|(p, _)| *p >= 0 && *p < ww)
                .map(|(p, w)| src[*p as usize] as f64 * w)
                .sum();
        }
    }
    let mut out = Vec::with_capacity(out_w * out_h);
    let mut acc = vec![0.0f64; out_w];
    for taps in &yt {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for &(p, w) in taps {
            if p < row_lo || p >= row_hi {
                continue;
            }
            let src = &tmp[(p - row_lo) as usize * out_w..][..out_w];
            for (a, s) in acc.iter_mut().zip(src) {
                *a += s * w;
            }
        }
        out.extend(acc.iter().map(|&v| v as f32));
    }
    Image {
        width: out_w,
        height: out_h,
        pixels: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_image_stays_constant() {
        let img = Image::filled(64, 64, 0.3);
        let small = img.area_resample(Rect::new(0, 0, 64, 64), 2, 2);
        assert!(small.pixels().iter().all(|v| (v - 0.3).abs() < 1e-6));
        let big = img.resize_bilinear(120, 120);
        assert!(big.pixels().iter().all(|v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn aligned_block_maps_to_one_pixel() {
        let mut img = Image::zeros(128, 128);
        for y in 32..64 {
            for x in 64..96 {
                img.set(x, y, 1.0);
            }
        }
        let small = img.area_resample(Rect::new(0, 0, 128, 128), 4, 4);
        for y in 0..4 {
            for x in 0..4 {
                let expect = if (x, y) == (2, 1) { 1.0 } else { 0.0 };
                assert_eq!(small.get(x, y), expect);
            }
        }
    }

    #[test]
    fn fractional_bins_weight_partial_pixels() {
        // 3 source pixels onto 2 bins of width 1.5
        let img = Image::new(3, 1, vec![1.0, 0.0, 0.0]).unwrap();
        let out = img.area_resample(Rect::new(0, 0, 3, 1), 2, 1);
        assert!((out.get(0, 0) - 1.0 / 1.5).abs() < 1e-6);
        assert_eq!(out.get(1, 0), 0.0);
    }

    #[test]
    fn window_matches_dense() {
        let mut dense = Image::zeros(100, 90);
        let mut window = Image::zeros(20, 10);
        for y in 0..10 {
            for x in 0..20 {
                let v = ((x * 7 + y * 3) % 11) as f32 / 10.0;
                window.set(x, y, v);
                dense.set(x + 37, y + 41, v);
            }
        }
        let region = Rect::new(5, 3, 85, 85);
        let a = dense.area_resample(region, 17, 17);
        let b = area_resample_window(&window, 37, 41, region, 17, 17);
        for (x, y) in a.pixels().iter().zip(b.pixels()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn centered_rect_bias() {
        let r = Rect::centered(960, 960, 85);
        assert_eq!((r.x, r.right()), (918, 1003));
        assert_eq!(Rect::centered(960, 960, 120).center_x2(), (1920, 1920));
    }

    #[test]
    fn png_quantizes_and_clamps() {
        let img = Image::new(3, 1, vec![-0.5, 0.5, 2.0]).unwrap();
        let g = img.to_gray();
        assert_eq!(g.as_raw(), &vec![0u8, 128, 255]);
    }

    proptest! {
        #[test]
        fn area_resample_preserves_mean(vals in prop::collection::vec(0.0f32..1.0, 64 * 64), n in 1usize..9) {
            let img = Image::new(64, 64, vals).unwrap();
            let side = 8 * n;
            let out = img.area_resample(Rect::new(0, 0, 64, 64), side, side);
            prop_assert!((out.mean() - img.mean()).abs() < 1e-5);
            prop_assert!(out.pixels().iter().all(|v| *v >= 0.0 && *v <= 1.0 + 1e-6));
        }
    }
}
