//! Raster image I/O (binary PPM), JSON-lines manifests and the on-disk
//! directory layout.
//!
//! Layout under a dataset root: `images/`, `manifests/`, `crops/`,
//! `checkpoints/`, `reports/`. Paths inside manifests are relative to the
//! directory holding the manifest file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::netcore::{Scalar, Tensor};

pub const IMAGES_DIR: &str = "images";
pub const MANIFESTS_DIR: &str = "manifests";
pub const CROPS_DIR: &str = "crops";
pub const CHECKPOINTS_DIR: &str = "checkpoints";
pub const REPORTS_DIR: &str = "reports";

/// 8-bit interleaved RGB image.
#[derive(Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for RasterImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "RasterImage({}x{})", self.width, self.height)
    }
}

impl RasterImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::invalid(format!(
                "image {width}x{height} needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn bounds(&self) -> BBox {
        BBox {
            x1: 0.0,
            y1: 0.0,
            x2: self.width as f64,
            y2: self.height as f64,
        }
    }

    /// `[height, width, 3]` tensor with samples scaled to `[0, 1]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::of(f64::from(v) / 255.0)).collect();
        Tensor::from_vec(&[self.height, self.width, 3], data).expect("buffer matches dims")
    }

    /// Inverse of [`RasterImage::to_tensor`], rounding and clamping.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let (h, w, c) = t.hwc("from_tensor")?;
        if c != 3 {
            return Err(Error::invalid(format!("expected 3 channels, got {c}")));
        }
        let data = t.data().iter().map(|v| (v.f64() * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        Self::new(w, h, data)
    }

    /// Binary PPM (`P6`, maxval 255).
    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode_ppm(bytes: &[u8]) -> Result<Self> {
        let mut p = PpmParser { bytes, pos: 0 };
        if bytes.len() < 2 || &bytes[..2] != b"P6" {
            return Err(Error::Parse {
                offset: 0,
                message: "bad magic, expected P6".into(),
            });
        }
        p.pos = 2;
        let width = p.header_uint("width")?;
        let height = p.header_uint("height")?;
        let maxval = p.header_uint("maxval")?;
        if maxval != 255 {
            return Err(Error::Parse {
                offset: p.pos,
                message: format!("unsupported maxval {maxval}, only 255"),
            });
        }
        // exactly one whitespace byte separates the header from the raster
        match bytes.get(p.pos) {
            Some(b) if b.is_ascii_whitespace() => p.pos += 1,
            _ => {
                return Err(Error::Parse {
                    offset: p.pos,
                    message: "missing whitespace after maxval".into(),
                })
            }
        }
        let need = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(3))
            .ok_or_else(|| Error::Parse {
                offset: p.pos,
                message: "image dimensions overflow".into(),
            })?;
        let raster = &bytes[p.pos..];
        if raster.len() < need {
            return Err(Error::Parse {
                offset: bytes.len(),
                message: format!("raster truncated: need {need} bytes, have {}", raster.len()),
            });
        }
        Self::new(width, height, raster[..need].to_vec()).map_err(|e| Error::Parse {
            offset: p.pos,
            message: e.to_string(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_ppm(&bytes).map_err(|e| match e {
            Error::Parse { offset, message } => Error::Parse {
                offset,
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode_ppm())
    }
}

struct PpmParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl PpmParser<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn header_uint(&mut self, what: &str) -> Result<usize> {
        let before = self.pos;
        self.skip_space_and_comments();
        if self.pos == before {
            return Err(Error::Parse {
                offset: self.pos,
                message: format!("expected whitespace before {what}"),
            });
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::Parse {
                offset: start,
                message: format!("expected positive integer {what}"),
            })
    }
}

/// Writes `bytes` to `<path>.partial` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let partial = partial_path(path);
    let mut f = fs::File::create(&partial).map_err(|e| Error::io(&partial, e))?;
    f.write_all(bytes)
        .and_then(|_| f.sync_all())
        .map_err(|e| Error::io(&partial, e))?;
    fs::rename(&partial, path).map_err(|e| Error::io(path, e))
}

pub fn partial_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    path.with_file_name(name)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLabel {
    FalseSmut,
    NeckBlast,
    Healthy,
    /// Rejection class for crops without an object; only ever assigned
    /// to derived crops, never to source annotations.
    NoGrain,
}

impl ClassLabel {
    pub const ANNOTATED: [ClassLabel; 3] = [ClassLabel::FalseSmut, ClassLabel::NeckBlast, ClassLabel::Healthy];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        [Self::FalseSmut, Self::NeckBlast, Self::Healthy, Self::NoGrain].get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::FalseSmut => "false_smut",
            Self::NeckBlast => "neck_blast",
            Self::Healthy => "healthy",
            Self::NoGrain => "no_grain",
        }
    }
}

impl std::fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class: ClassLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub annotations: Vec<Annotation>,
}

impl ImageRecord {
    pub fn boxes(&self) -> Vec<BBox> {
        self.annotations.iter().map(|a| a.bbox).collect()
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.width == 0 || self.height == 0 {
            return Err(format!("image {} has zero size", self.image));
        }
        let bounds = BBox {
            x1: 0.0,
            y1: 0.0,
            x2: self.width as f64,
            y2: self.height as f64,
        };
        for a in &self.annotations {
            if !bounds.contains(&a.bbox) {
                return Err(format!("box {:?} outside {}x{} image", a.bbox, self.width, self.height));
            }
            if a.class == ClassLabel::NoGrain {
                return Err("class no_grain is not a valid annotation".into());
            }
        }
        Ok(())
    }
}

/// Directory relative record paths resolve against: the manifest's own
/// directory, or its parent when the manifest sits in `manifests/`.
pub fn dataset_root(manifest_path: &Path) -> PathBuf {
    let dir = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    if dir.file_name().is_some_and(|n| n == MANIFESTS_DIR) {
        dir.parent().map(Path::to_path_buf).unwrap_or_default()
    } else {
        dir
    }
}

/// Image records with annotations; `root` is where relative paths resolve.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ImageRecord>,
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(records: Vec<ImageRecord>, root: impl Into<PathBuf>) -> Self {
        Self {
            records,
            root: root.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_path(&self, record: &ImageRecord) -> PathBuf {
        self.root.join(&record.image)
    }

    pub fn load_image(&self, index: usize) -> Result<RasterImage> {
        RasterImage::read(&self.image_path(&self.records[index]))
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            root: self.root.clone(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let numbered: Vec<(usize, ImageRecord)> = load_jsonl_numbered(path)?;
        let mut seen = std::collections::HashSet::new();
        for (line, r) in &numbered {
            let fail = |message: String| Error::Record {
                path: path.display().to_string(),
                line: *line,
                message,
            };
            r.validate().map_err(fail)?;
            if !seen.insert(r.image.clone()) {
                return Err(fail(format!("duplicate image path {}", r.image)));
            }
        }
        Ok(Self {
            records: numbered.into_iter().map(|(_, r)| r).collect(),
            root: dataset_root(path),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_jsonl(path, &self.records)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropRecord {
    pub crop_path: String,
    pub source_image: String,
    pub source_box: BBox,
    pub class_label: ClassLabel,
    pub confidence: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CropManifest {
    pub records: Vec<CropRecord>,
    pub root: PathBuf,
}

impl CropManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let numbered: Vec<(usize, CropRecord)> = load_jsonl_numbered(path)?;
        for (line, r) in &numbered {
            if !(0.0..=1.0).contains(&r.confidence) {
                return Err(Error::Record {
                    path: path.display().to_string(),
                    line: *line,
                    message: format!("confidence {} outside [0, 1]", r.confidence),
                });
            }
        }
        Ok(Self {
            records: numbered.into_iter().map(|(_, r)| r).collect(),
            root: dataset_root(path),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_jsonl(path, &self.records)
    }

    pub fn crop_path(&self, record: &CropRecord) -> PathBuf {
        self.root.join(&record.crop_path)
    }
}

/// One JSON value per line; blank lines are skipped, anything else that
/// fails to parse is an error carrying its line number.
pub fn load_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text, &path.display().to_string())
}

fn load_jsonl_numbered<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl_numbered(&text, &path.display().to_string())
}

pub fn parse_jsonl<T: serde::de::DeserializeOwned>(text: &str, origin: &str) -> Result<Vec<T>> {
    Ok(parse_jsonl_numbered(text, origin)?.into_iter().map(|(_, r)| r).collect())
}

/// Like [`parse_jsonl`], paired with each record's 1-based line number.
pub fn parse_jsonl_numbered<T: serde::de::DeserializeOwned>(text: &str, origin: &str) -> Result<Vec<(usize, T)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map(|r| (i + 1, r))
                .map_err(|e| Error::Record {
                    path: origin.to_string(),
                    line: i + 1,
                    message: e.to_string(),
                })
        })
        .collect()
}

pub fn save_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    write_atomic(path, &out)
}
