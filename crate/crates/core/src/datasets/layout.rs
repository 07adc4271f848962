//! On-disk layout of the data root and its preparation.
//!
//! ```text
//! <root>/mnist/        {train,t10k}-{images-idx3,labels-idx1}-ubyte
//! <root>/notmnist/     letter images, any raster format
//! <root>/omniglot/     character images, any raster format
//! <root>/backgrounds/  natural scenes
//! <root>/MANIFEST.txt
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use super::synth;
use super::*;

/// Environment variable naming the data root.
pub const DATA_DIR_ENV: &str = "CROWD_DATA_DIR";

/// Flanker sources by name.
pub const FLANKER_SETS: [&str; 3] = ["mnist", "notmnist", "omniglot"];

#[derive(Clone, Debug)]
pub struct DataLayout {
    pub root: PathBuf,
}

impl DataLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DataLayout { root: root.into() }
    }

    /// `$CROWD_DATA_DIR`, else `fallback`.
    pub fn from_env_or(fallback: impl Into<PathBuf>) -> Self {
        match std::env::var_os(DATA_DIR_ENV) {
            Some(v) if !v.is_empty() => DataLayout::new(PathBuf::from(v)),
            _ => DataLayout::new(fallback),
        }
    }

    pub fn mnist_dir(&self) -> PathBuf {
        self.root.join("mnist")
    }

    pub fn glyph_dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn backgrounds_dir(&self) -> PathBuf {
        self.root.join("backgrounds")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("MANIFEST.txt")
    }

    pub fn mnist(&self, parity: Parity, split: Split) -> Result<GlyphSet> {
        let (i, l) = mnist_paths(&self.mnist_dir(), split);
        load_mnist(&i, &l, parity, split)
    }

    /// Even-digit targets.
    pub fn targets(&self, split: Split) -> Result<GlyphSet> {
        self.mnist(Parity::Even, split)
    }

    /// A flanker set by name: odd MNIST digits of `split`, or a whole glyph
    /// directory (those sets have no split).
    pub fn flankers(&self, name: &str, split: Split) -> Result<GlyphSet> {
        match name {
            "mnist" => self.mnist(Parity::Odd, split),
            "notmnist" | "omniglot" => {
                let dir = self.glyph_dir(name);
                if !dir.is_dir() {
                    return Err(Error::Config(format!(
                        "flanker set '{name}' not found at {}",
                        dir.display()
                    )));
                }
                load_glyph_dir(&dir, name, split)
            }
            other => Err(Error::Config(format!(
                "unknown flanker set '{other}' (expected one of {})",
                FLANKER_SETS.join(", ")
            ))),
        }
    }

    pub fn backgrounds(&self, canvas: usize) -> Result<BackgroundSet> {
        let dir = self.backgrounds_dir();
        if !dir.is_dir() {
            return Err(Error::Config(format!(
                "no background directory at {}",
                dir.display()
            )));
        }
        load_backgrounds(&dir, canvas)
    }
}

/// Raw inputs for [`prepare`]. Empty fields leave that part of the layout
/// untouched.
#[derive(Clone, Debug, Default)]
pub struct PrepareSources {
    /// Directory holding the four MNIST IDX files.
    pub mnist: Option<PathBuf>,
    /// TrueType/OpenType fonts for the letter set.
    pub fonts: Vec<PathBuf>,
    /// Number of procedural stroke characters to draw.
    pub strokes: usize,
    /// Scene images copied as backgrounds.
    pub backgrounds: Vec<PathBuf>,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct PrepareReport {
    pub mnist_files: usize,
    pub letters: usize,
    pub strokes: usize,
    pub backgrounds: usize,
    pub manifest_lines: usize,
}

fn copy_into(src: &Path, dir: &Path) -> Result<()> {
    let name = src
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} has no file name", src.display())))?;
    let dst = dir.join(name);
    fs::copy(src, &dst).map_err(|e| Error::io(src, e))?;
    Ok(())
}

/// Populates the layout from `sources` and rewrites the manifest.
pub fn prepare(layout: &DataLayout, sources: &PrepareSources) -> Result<PrepareReport> {
    let mut report = PrepareReport::default();
    fs::create_dir_all(&layout.root).map_err(|e| Error::io(&layout.root, e))?;
    if let Some(src) = &sources.mnist {
        let dst = layout.mnist_dir();
        fs::create_dir_all(&dst).map_err(|e| Error::io(&dst, e))?;
        for split in [Split::Train, Split::Test] {
            let (i, l) = mnist_paths(src, split);
            for f in [i, l] {
                copy_into(&f, &dst)?;
                report.mnist_files += 1;
            }
            // validate now rather than at first use
            let (i, l) = mnist_paths(&dst, split);
            load_mnist(&i, &l, Parity::Even, split)?;
        }
    }
    if !sources.fonts.is_empty() {
        report.letters = synth::font_letters(&sources.fonts, &layout.glyph_dir("notmnist"))?;
    }
    if sources.strokes > 0 {
        report.strokes =
            synth::stroke_characters(sources.strokes, sources.seed, &layout.glyph_dir("omniglot"))?;
    }
    if !sources.backgrounds.is_empty() {
        let dst = layout.backgrounds_dir();
        fs::create_dir_all(&dst).map_err(|e| Error::io(&dst, e))?;
        for b in &sources.backgrounds {
            Image::load(b)?;
            copy_into(b, &dst)?;
            report.backgrounds += 1;
        }
    }
    let m = manifest(&layout.root)?;
    report.manifest_lines = m.lines().count();
    let mp = layout.manifest_path();
    fs::write(&mp, m).map_err(|e| Error::io(&mp, e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prepare_copies_validates_and_lists() {
        let src = tempfile::tempdir().unwrap();
        let root = tempfile::tempdir().unwrap();
        for split in [Split::Train, Split::Test] {
            let (i, l) = tests_support::write_idx(src.path(), &[0, 1, 2, 3]);
            let (di, dl) = mnist_paths(src.path(), split);
            fs::rename(i, di).unwrap();
            fs::rename(l, dl).unwrap();
        }
        let bg = src.path().join("scene.png");
        Image::filled(40, 30, 0.5).save_png(&bg).unwrap();
        let layout = DataLayout::new(root.path());
        let report = prepare(
            &layout,
            &PrepareSources {
                mnist: Some(src.path().to_path_buf()),
                strokes: 3,
                backgrounds: vec![bg],
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(report.mnist_files, 4);
        assert_eq!(report.strokes, 3);
        assert_eq!(report.manifest_lines, 4 + 3 + 1);
        assert_eq!(layout.targets(Split::Test).unwrap().len(), 2);
        assert_eq!(layout.flankers("mnist", Split::Train).unwrap().len(), 2);
        assert_eq!(layout.flankers("omniglot", Split::Test).unwrap().len(), 3);
        assert!(matches!(layout.flankers("notmnist", Split::Test), Err(Error::Config(_))));
        assert!(matches!(layout.flankers("kanji", Split::Test), Err(Error::Config(_))));
        let bgs = layout.backgrounds(64).unwrap();
        assert_eq!((bgs.len(), bgs.images[0].width()), (1, 64));
    }

    #[test]
    fn bad_mnist_source_fails() {
        let src = tempfile::tempdir().unwrap();
        let root = tempfile::tempdir().unwrap();
        let r = prepare(
            &DataLayout::new(root.path()),
            &PrepareSources {
                mnist: Some(src.path().to_path_buf()),
                ..Default::default()
            },
        );
        assert!(r.is_err());
    }
}
