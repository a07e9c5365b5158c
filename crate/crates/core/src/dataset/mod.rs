//! On-disk dataset layout: one directory holding per-sample PPM/PGM files,
//! a `palette.txt` sidecar, and `manifest.jsonl` with one JSON record per
//! sample in generation order.

mod montage;
mod pnm;

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::change::{
    derive_change_mask, ChangeError, ChangeEvent, ChangeMask, Palette, SemanticMask,
};
use crate::generator::{PairMetadata, SamplePair};
use crate::grid::LatentGrid;

pub use montage::{render_montage, GUTTER_RGB, MONTAGE_GUTTER};
pub use pnm::{PnmImage, PnmKind};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const PALETTE_FILE: &str = "palette.txt";

#[derive(Debug, Error, PartialEq)]
pub enum DatasetError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("missing file {0}")]
    MissingFile(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),
    #[error("sample `{0}`: change mask is not the XOR of its semantic masks")]
    XorInconsistency(String),
    #[error("sample `{id}`: config hash {found} differs from dataset hash {expected}")]
    ConfigHashMismatch {
        id: String,
        expected: String,
        found: String,
    },
    #[error("palette has {palette} colours but the mask uses class {class}")]
    PaletteTooShort { palette: usize, class: u8 },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error(transparent)]
    Change(#[from] ChangeError),
}

fn io_err(path: &Path, e: std::io::Error) -> DatasetError {
    if e.kind() == std::io::ErrorKind::NotFound {
        DatasetError::MissingFile(path.display().to_string())
    } else {
        DatasetError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }
}

/// Linear map between real pixel values in `[lo, hi]` and bytes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub lo: f64,
    pub hi: f64,
}

impl AffineMap {
    pub fn new(lo: f64, hi: f64) -> Result<Self, DatasetError> {
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(DatasetError::Format(format!(
                "invalid byte range [{lo}, {hi}]"
            )));
        }
        Ok(Self { lo, hi })
    }

    /// Global min/max over a calibration batch, widened if degenerate.
    pub fn calibrate<'a>(images: impl IntoIterator<Item = &'a LatentGrid>) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for img in images {
            for &v in img.values() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if !(lo.is_finite() && hi.is_finite()) {
            return Self { lo: -1.0, hi: 1.0 };
        }
        if hi - lo < 1e-9 {
            return Self {
                lo: lo - 0.5,
                hi: hi + 0.5,
            };
        }
        Self { lo, hi }
    }

    fn step(&self) -> f64 {
        (self.hi - self.lo) / 255.0
    }

    /// Largest round-trip error for values inside the range.
    pub fn half_step(&self) -> f64 {
        self.step() / 2.0
    }

    /// Returns the byte and whether the value had to be clamped.
    pub fn to_byte(&self, v: f64) -> (u8, bool) {
        let q = ((v - self.lo) / self.step()).round();
        if q < 0.0 {
            (0, true)
        } else if q > 255.0 {
            (255, true)
        } else {
            (q as u8, false)
        }
    }

    pub fn to_real(&self, b: u8) -> f64 {
        self.lo + b as f64 * self.step()
    }
}

/// Quantizes a 1- or 3-channel image; also returns the clamped-value count.
pub fn image_to_pnm(img: &LatentGrid, map: &AffineMap) -> Result<(PnmImage, usize), DatasetError> {
    let kind = match img.channels() {
        1 => PnmKind::Pgm,
        3 => PnmKind::Ppm,
        c => {
            return Err(DatasetError::Format(format!(
                "cannot store {c}-channel image"
            )))
        }
    };
    let (c, h, w) = img.shape();
    let mut data = Vec::with_capacity(c * h * w);
    let mut clamped = 0;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let (b, clip) = map.to_byte(img.get(ch, y, x));
                clamped += clip as usize;
                data.push(b);
            }
        }
    }
    Ok((PnmImage::new(kind, w, h, data)?, clamped))
}

pub fn pnm_to_image(pnm: &PnmImage, map: &AffineMap) -> LatentGrid {
    let c = pnm.kind.channels();
    let mut img = LatentGrid::zeros(c, pnm.height, pnm.width);
    for y in 0..pnm.height {
        for x in 0..pnm.width {
            for ch in 0..c {
                img.set(
                    ch,
                    y,
                    x,
                    map.to_real(pnm.data[(y * pnm.width + x) * c + ch]),
                );
            }
        }
    }
    img
}

pub fn mask_to_pgm(mask: &SemanticMask) -> PnmImage {
    PnmImage::new(
        PnmKind::Pgm,
        mask.width(),
        mask.height(),
        mask.class_ids().to_vec(),
    )
    .expect("mask dimensions are valid")
}

/// Change masks are stored as 0 / 255 so they are visible in viewers.
pub fn change_to_pgm(change: &ChangeMask) -> PnmImage {
    let data = change.values().iter().map(|&v| v * 255).collect();
    PnmImage::new(PnmKind::Pgm, change.width(), change.height(), data)
        .expect("mask dimensions are valid")
}

fn read_pnm(path: &Path, kind: PnmKind) -> Result<PnmImage, DatasetError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let img = PnmImage::read_from(BufReader::new(file))
        .map_err(|e| DatasetError::Format(format!("{}: {e}", path.display())))?;
    if img.kind != kind {
        return Err(DatasetError::Format(format!(
            "{}: expected {:?}, found {:?}",
            path.display(),
            kind,
            img.kind
        )));
    }
    Ok(img)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFiles {
    pub t1: String,
    pub t2: String,
    pub y1: String,
    pub y2: String,
    pub change: String,
}

/// One manifest line. File paths are relative to the manifest directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub index: usize,
    pub files: SampleFiles,
    pub event_kind: Option<String>,
    pub seed: u64,
    pub config_hash: String,
    pub affine: AffineMap,
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    /// Pixel values that fell outside the affine range and were clamped.
    pub clamped: usize,
    pub event: Option<ChangeEvent>,
    pub metadata: Option<PairMetadata>,
}

/// Appends samples to a dataset directory.
pub struct DatasetWriter {
    dir: PathBuf,
    manifest: BufWriter<File>,
    ids: HashSet<String>,
    affine: AffineMap,
    config_hash: String,
}

impl DatasetWriter {
    /// Creates `dir` if needed and starts a fresh manifest there.
    pub fn create(
        dir: &Path,
        affine: AffineMap,
        config_hash: &str,
        palette: &Palette,
    ) -> Result<Self, DatasetError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let pal_path = dir.join(PALETTE_FILE);
        fs::write(&pal_path, palette.to_text()).map_err(|e| io_err(&pal_path, e))?;
        let man_path = dir.join(MANIFEST_FILE);
        let manifest = File::create(&man_path).map_err(|e| io_err(&man_path, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: BufWriter::new(manifest),
            ids: HashSet::new(),
            affine,
            config_hash: config_hash.to_string(),
        })
    }

    fn put(&self, name: &str, img: &PnmImage) -> Result<(), DatasetError> {
        let path = self.dir.join(name);
        fs::write(&path, img.to_bytes()).map_err(|e| io_err(&path, e))
    }

    pub fn write_sample(&mut self, pair: &SamplePair) -> Result<ManifestRecord, DatasetError> {
        if !self.ids.insert(pair.id.clone()) {
            return Err(DatasetError::DuplicateId(pair.id.clone()));
        }
        let ext = if pair.x_t1.channels() == 1 {
            "pgm"
        } else {
            "ppm"
        };
        let files = SampleFiles {
            t1: format!("{}_t1.{ext}", pair.id),
            t2: format!("{}_t2.{ext}", pair.id),
            y1: format!("{}_y1.pgm", pair.id),
            y2: format!("{}_y2.pgm", pair.id),
            change: format!("{}_change.pgm", pair.id),
        };
        let (t1, c1) = image_to_pnm(&pair.x_t1, &self.affine)?;
        let (t2, c2) = image_to_pnm(&pair.x_t2, &self.affine)?;
        if c1 + c2 > 0 {
            warn!(
                "sample {}: {} values clamped to the byte range",
                pair.id,
                c1 + c2
            );
        }
        self.put(&files.t1, &t1)?;
        self.put(&files.t2, &t2)?;
        self.put(&files.y1, &mask_to_pgm(&pair.y1))?;
        self.put(&files.y2, &mask_to_pgm(&pair.y2))?;
        self.put(&files.change, &change_to_pgm(&pair.change))?;
        let record = ManifestRecord {
            id: pair.id.clone(),
            index: pair.index,
            files,
            event_kind: pair.event.as_ref().map(|e| e.kind.as_str().to_string()),
            seed: pair.seed,
            config_hash: self.config_hash.clone(),
            affine: self.affine,
            width: pair.y1.width(),
            height: pair.y1.height(),
            num_classes: pair.y1.num_classes(),
            clamped: c1 + c2,
            event: pair.event.clone(),
            metadata: pair.metadata.clone(),
        };
        let line =
            serde_json::to_string(&record).map_err(|e| DatasetError::Format(e.to_string()))?;
        let man_path = self.dir.join(MANIFEST_FILE);
        writeln!(self.manifest, "{line}").map_err(|e| io_err(&man_path, e))?;
        Ok(record)
    }

    pub fn finish(mut self) -> Result<(), DatasetError> {
        let man_path = self.dir.join(MANIFEST_FILE);
        self.manifest.flush().map_err(|e| io_err(&man_path, e))
    }
}

/// Lazily reads the samples listed in a manifest. Every yielded pair has
/// been checked for change-mask consistency and a shared config hash.
pub struct DatasetReader {
    dir: PathBuf,
    lines: std::io::Lines<BufReader<File>>,
    line_no: usize,
    palette: Option<Palette>,
    config_hash: Option<String>,
}

pub fn read_dataset(manifest: &Path) -> Result<DatasetReader, DatasetError> {
    let file = File::open(manifest).map_err(|e| io_err(manifest, e))?;
    let dir = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let pal_path = dir.join(PALETTE_FILE);
    let palette = match fs::read_to_string(&pal_path) {
        Ok(text) => Some(Palette::from_text(&text)?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(io_err(&pal_path, e)),
    };
    Ok(DatasetReader {
        dir,
        lines: BufReader::new(file).lines(),
        line_no: 0,
        palette,
        config_hash: None,
    })
}

impl DatasetReader {
    fn load(&mut self, record: ManifestRecord) -> Result<SamplePair, DatasetError> {
        match &self.config_hash {
            None => self.config_hash = Some(record.config_hash.clone()),
            Some(h) if *h != record.config_hash => {
                return Err(DatasetError::ConfigHashMismatch {
                    id: record.id,
                    expected: h.clone(),
                    found: record.config_hash,
                })
            }
            _ => {}
        }
        let kind = if record.files.t1.ends_with(".pgm") {
            PnmKind::Pgm
        } else {
            PnmKind::Ppm
        };
        let palette = match &self.palette {
            Some(p) if p.len() == record.num_classes => p.clone(),
            _ => Palette::land_cover(record.num_classes),
        };
        let mask = |name: &str| -> Result<SemanticMask, DatasetError> {
            let img = read_pnm(&self.dir.join(name), PnmKind::Pgm)?;
            Ok(SemanticMask::new(
                img.width,
                img.height,
                record.num_classes,
                img.data,
                palette.clone(),
            )?)
        };
        let y1 = mask(&record.files.y1)?;
        let y2 = mask(&record.files.y2)?;
        let cimg = read_pnm(&self.dir.join(&record.files.change), PnmKind::Pgm)?;
        if cimg.data.iter().any(|&v| v != 0 && v != 255) {
            return Err(DatasetError::Format(format!(
                "{}: change mask values must be 0 or 255",
                record.files.change
            )));
        }
        let change = ChangeMask::new(
            cimg.width,
            cimg.height,
            cimg.data.iter().map(|&v| u8::from(v == 255)).collect(),
        )?;
        let consistent = derive_change_mask(&y1, &y2).map(|c| c == change);
        if !matches!(consistent, Ok(true)) {
            return Err(DatasetError::XorInconsistency(record.id));
        }
        let x_t1 = pnm_to_image(
            &read_pnm(&self.dir.join(&record.files.t1), kind)?,
            &record.affine,
        );
        let x_t2 = pnm_to_image(
            &read_pnm(&self.dir.join(&record.files.t2), kind)?,
            &record.affine,
        );
        Ok(SamplePair {
            id: record.id,
            index: record.index,
            seed: record.seed,
            x_t1,
            x_t2,
            y1,
            y2,
            change,
            event: record.event,
            metadata: record.metadata,
        })
    }
}

impl Iterator for DatasetReader {
    type Item = Result<SamplePair, DatasetError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = self.lines.next()?;
            self.line_no += 1;
            let line = match line {
                Ok(l) => l,
                Err(e) => {
                    return Some(Err(DatasetError::Manifest {
                        line: self.line_no,
                        message: e.to_string(),
                    }))
                }
            };
            if line.trim().is_empty() {
                continue;
            }
            let record: ManifestRecord = match serde_json::from_str(&line) {
                Ok(r) => r,
                Err(e) => {
                    return Some(Err(DatasetError::Manifest {
                        line: self.line_no,
                        message: e.to_string(),
                    }))
                }
            };
            return Some(self.load(record));
        }
    }
}

/// Reads a whole dataset, failing on the first bad record.
pub fn read_all(manifest: &Path) -> Result<Vec<SamplePair>, DatasetError> {
    read_dataset(manifest)?.collect()
}
