//! Target, flanker and background image sources.
//!
//! MNIST comes from the IDX files of the official distribution; notMNIST,
//! Omniglot and scene backgrounds are read from plain image directories.

pub mod layout;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{Image, Rect};

/// Target classes: the even digits, in class-index order.
pub const EVEN_DIGITS: [u8; 5] = [0, 2, 4, 6, 8];
pub const NUM_CLASSES: usize = EVEN_DIGITS.len();

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parity {
    Even,
    Odd,
}

/// One glyph with its label. Even MNIST digits carry class indices `0..5`;
/// every other set keeps its source label, which is never classified.
#[derive(Clone, Debug)]
pub struct Glyph {
    pub id: String,
    pub label: usize,
    pub image: Image,
}

#[derive(Clone, Debug)]
pub struct GlyphSet {
    pub name: String,
    pub split: Split,
    pub items: Vec<Glyph>,
    /// Files that could not be decoded while loading.
    pub skipped: usize,
}

impl GlyphSet {
    pub fn new(name: impl Into<String>, split: Split, items: Vec<Glyph>) -> Self {
        GlyphSet {
            name: name.into(),
            split,
            items,
            skipped: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> &Glyph {
        &self.items[i]
    }

    /// Splits off the last `n` items (e.g. a holdout carved from a train split).
    pub fn split_off_tail(mut self, n: usize) -> (GlyphSet, GlyphSet) {
        let keep = self.items.len().saturating_sub(n);
        let tail = self.items.split_off(keep);
        let rest = GlyphSet {
            name: format!("{}-holdout", self.name),
            split: self.split,
            items: tail,
            skipped: 0,
        };
        (self, rest)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(path, "truncated IDX header"))
}

/// Raw IDX image file: `(count, rows, cols, pixel bytes)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            path,
            format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(Error::format(
            path,
            format!(
                "expected {} pixel bytes for {n} images of {rows}x{cols}, found {}",
                n * rows * cols,
                body.len()
            ),
        ));
    }
    Ok((n, rows, cols, body.to_vec()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            path,
            format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::format(
            path,
            format!("expected {n} labels, found {}", body.len()),
        ));
    }
    Ok(body.to_vec())
}

/// Loads MNIST from IDX files, keeping only even or only odd digits.
///
/// Even digits are remapped to class indices `{0:0, 2:1, 4:2, 6:3, 8:4}`; odd
/// digits keep their digit value as label.
pub fn load_mnist(images: &Path, labels: &Path, parity: Parity, split: Split) -> Result<GlyphSet> {
    let (n, rows, cols, pixels) = read_idx_images(images)?;
    let lab = read_idx_labels(labels)?;
    if lab.len() != n {
        return Err(Error::Data(format!(
            "{} has {n} images but {} has {} labels",
            images.display(),
            labels.display(),
            lab.len()
        )));
    }
    let prefix = match split {
        Split::Train => "mnist-train",
        Split::Test => "mnist-test",
    };
    let plane = rows * cols;
    let items = lab
        .iter()
        .enumerate()
        .filter(|(_, &d)| match parity {
            Parity::Even => d % 2 == 0,
            Parity::Odd => d % 2 == 1,
        })
        .map(|(i, &d)| {
            let px = pixels[i * plane..(i + 1) * plane]
                .iter()
                .map(|&b| b as f32 / 255.0)
                .collect();
            Glyph {
                id: format!("{prefix}-{i}"),
                label: if parity == Parity::Even {
                    d as usize / 2
                } else {
                    d as usize
                },
                image: Image::new(cols, rows, px).expect("idx plane"),
            }
        })
        .collect();
    let name = match parity {
        Parity::Even => "mnist-even",
        Parity::Odd => "mnist",
    };
    Ok(GlyphSet::new(name, split, items))
}

/// Standard IDX file names inside a directory.
pub fn mnist_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

const RASTER_EXTENSIONS: [&str; 7] = ["png", "jpg", "jpeg", "bmp", "gif", "tif", "tiff"];

/// All raster files below `dir`, sorted by path.
pub fn raster_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let path = entry.map_err(|e| Error::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| RASTER_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Mean intensity of the one-pixel image border.
fn border_mean(img: &Image) -> f64 {
    let (w, h) = (img.width(), img.height());
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if x == 0 || y == 0 || x + 1 == w || y + 1 == h {
                sum += img.get(x, y) as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Loads every raster image below `dir` as a glyph, in sorted path order.
///
/// Glyphs drawn dark-on-light (bright border) are inverted so that every glyph
/// is bright on black. Native sizes are kept. Undecodable files are skipped
/// with a warning and counted in [`GlyphSet::skipped`].
pub fn load_glyph_dir(dir: &Path, name: &str, split: Split) -> Result<GlyphSet> {
    let files = raster_files(dir)?;
    let mut items = Vec::with_capacity(files.len());
    let mut skipped = 0;
    for (i, path) in files.iter().enumerate() {
        match Image::load(path) {
            Ok(img) => {
                let img = if border_mean(&img) > 0.5 {
                    Image::new(
                        img.width(),
                        img.height(),
                        img.pixels().iter().map(|v| 1.0 - v).collect(),
                    )?
                } else {
                    img
                };
                let id = path
                    .strip_prefix(dir)
                    .unwrap_or(path)
                    .to_string_lossy()
                    .into_owned();
                items.push(Glyph {
                    id,
                    label: i,
                    image: img,
                });
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                skipped += 1;
            }
        }
    }
    if items.is_empty() {
        log::warn!("no readable glyphs in {}", dir.display());
    }
    let mut set = GlyphSet::new(name, split, items);
    set.skipped = skipped;
    Ok(set)
}

/// A pixel counts as white when it holds any 8-bit ink at all.
pub const INK_THRESHOLD: f32 = 0.5 / 255.0;

/// Default number of images sampled for intensity statistics.
pub const INTENSITY_SAMPLE: usize = 10_000;

/// Per-image fraction of pixels above `threshold` for up to `max_images`
/// images drawn without replacement (all of them if the set is smaller).
pub fn per_image_white_fractions(
    set: &GlyphSet,
    threshold: f32,
    max_images: usize,
    seed: u64,
) -> Vec<f64> {
    if set.len() <= max_images {
        return set
            .items
            .iter()
            .map(|g| g.image.fraction_above(threshold))
            .collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, set.len(), max_images).into_vec();
    idx.sort_unstable();
    idx.iter()
        .map(|&i| set.items[i].image.fraction_above(threshold))
        .collect()
}

/// Mean white-pixel fraction over (a sample of) the set.
pub fn white_pixel_fraction(set: &GlyphSet, threshold: f32, seed: u64) -> f64 {
    let f = per_image_white_fractions(set, threshold, INTENSITY_SAMPLE, seed);
    if f.is_empty() {
        0.0
    } else {
        f.iter().sum::<f64>() / f.len() as f64
    }
}

/// Natural-scene backgrounds, each center-cropped to a square and resampled to
/// the canvas size.
#[derive(Clone, Debug)]
pub struct BackgroundSet {
    pub images: Vec<Image>,
    pub ids: Vec<String>,
    pub canvas: usize,
}

impl BackgroundSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Square center crop resampled to `canvas × canvas`.
pub fn fit_to_canvas(img: &Image, canvas: usize) -> Image {
    let side = img.width().min(img.height());
    let x0 = ((img.width() - side) / 2) as i64;
    let y0 = ((img.height() - side) / 2) as i64;
    let region = Rect::new(x0, y0, side, side);
    if side >= canvas {
        img.area_resample(region, canvas, canvas)
    } else {
        img.area_resample(region, side, side)
            .resize_bilinear(canvas, canvas)
    }
}

pub fn load_backgrounds(dir: &Path, canvas: usize) -> Result<BackgroundSet> {
    let mut images = Vec::new();
    let mut ids = Vec::new();
    for path in raster_files(dir)? {
        match Image::load(&path) {
            Ok(img) => {
                images.push(fit_to_canvas(&img, canvas));
                ids.push(path.file_name().unwrap().to_string_lossy().into_owned());
            }
            Err(e) => log::warn!("skipping background {}: {e}", path.display()),
        }
    }
    Ok(BackgroundSet {
        images,
        ids,
        canvas,
    })
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Line-delimited manifest: `relative/path<TAB>sha256<TAB>bytes` for every
/// file below `dir`, sorted by path.
pub fn manifest(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let path = entry.map_err(|e| Error::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n != "MANIFEST.txt") {
                files.push(path);
            }
        }
    }
    files.sort();
    let mut out = String::new();
    for f in files {
        let len = fs::metadata(&f).map_err(|e| Error::io(&f, e))?.len();
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            f.strip_prefix(dir).unwrap_or(&f).display(),
            sha256_file(&f)?,
            len
        ));
    }
    Ok(out)
}


#[cfg(test)]
mod tests {
    use super::*;
    use tests_support::write_idx;

    #[test]
    fn parity_partitions_and_remaps() {
        let dir = tempfile::tempdir().unwrap();
        let labels = [0u8, 1, 2, 3, 4, 5, 6, 7, 8, 9, 8, 3];
        let (i, l) = write_idx(dir.path(), &labels);
        let even = load_mnist(&i, &l, Parity::Even, Split::Train).unwrap();
        let odd = load_mnist(&i, &l, Parity::Odd, Split::Train).unwrap();
        assert_eq!(even.len() + odd.len(), labels.len());
        let even_ids: Vec<_> = even.items.iter().map(|g| g.id.clone()).collect();
        assert!(odd.items.iter().all(|g| !even_ids.contains(&g.id)));
        assert_eq!(
            even.items.iter().map(|g| g.label).collect::<Vec<_>>(),
            vec![0, 1, 2, 3, 4, 4]
        );
        assert!(odd.items.iter().all(|g| g.label % 2 == 1));
        assert_eq!(even.items[0].image.get(1, 0), 1.0);
    }

    #[test]
    fn truncated_and_mismatched_files() {
        let dir = tempfile::tempdir().unwrap();
        let (i, l) = write_idx(dir.path(), &[0, 1, 2]);
        let bytes = fs::read(&i).unwrap();
        fs::write(&i, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(
            load_mnist(&i, &l, Parity::Even, Split::Test),
            Err(Error::Format { .. })
        ));
        // labels file passed as images: magic mismatch
        assert!(matches!(
            load_mnist(&l, &l, Parity::Even, Split::Test),
            Err(Error::Format { .. })
        ));
        let (i, _) = write_idx(dir.path(), &[0, 1, 2]);
        let (_, l2) = {
            let sub = dir.path().join("b");
            fs::create_dir(&sub).unwrap();
            write_idx(&sub, &[0, 1])
        };
        assert!(matches!(
            load_mnist(&i, &l2, Parity::Even, Split::Test),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn glyph_dir_sorted_with_skips() {
        let dir = tempfile::tempdir().unwrap();
        for (name, size) in [("b.png", 10usize), ("a.png", 28), ("c.png", 105)] {
            Image::filled(size, size, 0.0).save_png(&dir.path().join(name)).unwrap();
        }
        fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
        fs::write(dir.path().join("notes.txt"), b"ignored").unwrap();
        let set = load_glyph_dir(dir.path(), "x", Split::Test).unwrap();
        assert_eq!(
            set.items.iter().map(|g| g.id.as_str()).collect::<Vec<_>>(),
            vec!["a.png", "b.png", "c.png"]
        );
        assert_eq!(set.items[2].image.width(), 105);
        assert_eq!(set.skipped, 1);
    }

    #[test]
    fn empty_dir_gives_empty_set() {
        let dir = tempfile::tempdir().unwrap();
        let set = load_glyph_dir(dir.path(), "x", Split::Test).unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn dark_on_light_glyphs_are_inverted() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::filled(5, 5, 1.0);
        img.set(2, 2, 0.0);
        img.save_png(&dir.path().join("g.png")).unwrap();
        let set = load_glyph_dir(dir.path(), "x", Split::Test).unwrap();
        assert_eq!(set.items[0].image.get(2, 2), 1.0);
        assert_eq!(set.items[0].image.get(0, 0), 0.0);
    }

    #[test]
    fn white_fraction_of_black_and_white_sets() {
        let black = GlyphSet::new(
            "b",
            Split::Test,
            (0..3)
                .map(|i| Glyph {
                    id: i.to_string(),
                    label: 0,
                    image: Image::zeros(4, 4),
                })
                .collect(),
        );
        assert_eq!(white_pixel_fraction(&black, 0.5, 0), 0.0);
        let white = GlyphSet::new(
            "w",
            Split::Test,
            vec![Glyph {
                id: "w".into(),
                label: 0,
                image: Image::filled(4, 4, 1.0),
            }],
        );
        assert_eq!(white_pixel_fraction(&white, 0.5, 0), 1.0);
    }

    #[test]
    fn backgrounds_fill_canvas() {
        let img = Image::filled(300, 200, 0.25);
        let fit = fit_to_canvas(&img, 480);
        assert_eq!((fit.width(), fit.height()), (480, 480));
        assert!((fit.mean() - 0.25).abs() < 1e-5);
        let fit = fit_to_canvas(&img, 100);
        assert_eq!((fit.width(), fit.height()), (100, 100));
    }
}
