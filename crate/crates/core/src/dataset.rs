//! Domain types and on-disk ingestion for the labeled source domain and the
//! unlabeled, gaze-annotated target domain.
//!
//! Layout on disk:
//!
//! ```text
//! root/images/<stem>.png   grayscale, 8 or 16 bit
//! root/masks/<stem>.png    source: required; target: evaluation only
//! root/gaze/<stem>.csv     target: `t_ms,x,y`
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MIN_IMAGE_SIDE: usize = 16;

/// Grayscale frame with intensities in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    height: usize,
    width: usize,
    pixels: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(height: usize, width: usize, pixels: Vec<T>) -> Result<Self> {
        if height < MIN_IMAGE_SIDE || width < MIN_IMAGE_SIDE {
            return Err(Error::ShapeMismatch(format!(
                "image must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, got {height}x{width}"
            )));
        }
        if pixels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} pixels for a {height}x{width} image",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels
            .iter()
            .find(|p| !(**p >= T::zero() && **p <= T::one()))
        {
            return Err(Error::BadImageRange(format!("pixel value {bad} outside [0,1]")));
        }
        Ok(Image {
            height,
            width,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[T] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> T {
        self.pixels[y * self.width + x]
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            height: self.height,
            width: self.width,
            pixels: self
                .pixels
                .iter()
                .map(|p| U::lit(p.as_f64()).max(U::zero()).min(U::one()))
                .collect(),
        }
    }
}

/// Scale raw nonnegative intensities into `[0, 1]` by the per-image maximum.
///
/// An all-zero input stays all-zero.
pub fn normalize_image<T: Scalar>(height: usize, width: usize, raw: &[f64]) -> Result<Image<T>> {
    if raw.len() != height * width {
        return Err(Error::ShapeMismatch(format!(
            "{} values for a {height}x{width} image",
            raw.len()
        )));
    }
    let mut max = 0.0f64;
    for &v in raw {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::BadImageRange(format!("raw intensity {v} is negative or non-finite")));
        }
        max = max.max(v);
    }
    let pixels = if max > 0.0 {
        raw.iter().map(|&v| T::lit(v / max)).collect()
    } else {
        vec![T::zero(); raw.len()]
    };
    Image::new(height, width, pixels)
}

/// Binary segmentation mask with values exactly 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SegMask {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl SegMask {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} mask values for {height}x{width}",
                pixels.len()
            )));
        }
        if pixels.iter().any(|&p| p > 1) {
            return Err(Error::Format("mask values must be 0 or 1".into()));
        }
        Ok(SegMask {
            height,
            width,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        SegMask {
            height,
            width,
            pixels: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut pixels = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                pixels.push(u8::from(f(y, x)));
            }
        }
        SegMask {
            height,
            width,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.pixels[y * self.width + x] == 1
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().map(|&p| p as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn same_shape(&self, height: usize, width: usize) -> bool {
        self.height == height && self.width == width
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GazeSample {
    pub t_ms: f64,
    /// Normalized column coordinate.
    pub x: f64,
    /// Normalized row coordinate.
    pub y: f64,
}

/// Timestamped 5 Hz gaze samples recorded over one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GazeTrajectory {
    pub frame_id: String,
    samples: Vec<GazeSample>,
}

impl GazeTrajectory {
    pub fn new(frame_id: impl Into<String>, samples: Vec<GazeSample>) -> Result<Self> {
        let frame_id = frame_id.into();
        for (i, s) in samples.iter().enumerate() {
            if let Err(reason) = check_sample(s, i.checked_sub(1).map(|p| &samples[p])) {
                return Err(Error::GazeParse {
                    file: frame_id.clone(),
                    line: i + 2,
                    reason,
                });
            }
        }
        Ok(GazeTrajectory { frame_id, samples })
    }

    pub fn samples(&self) -> &[GazeSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn parse_csv(frame_id: impl Into<String>, text: &str) -> Result<Self> {
        let frame_id = frame_id.into();
        let err = |line: usize, reason: String| Error::GazeParse {
            file: frame_id.clone(),
            line,
            reason,
        };
        let mut lines = text.split('\n').enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end_matches('\r').trim() == "t_ms,x,y" => {}
            Some((_, h)) => return Err(err(1, format!("expected header `t_ms,x,y`, got `{h}`"))),
            None => return Err(err(1, "empty file".into())),
        }
        let mut samples: Vec<GazeSample> = Vec::new();
        for (idx, raw) in lines {
            let line_no = idx + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(err(line_no, format!("expected 3 fields, got {}", fields.len())));
            }
            let parse = |s: &str, name: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| err(line_no, format!("field {name}: `{s}` is not a number")))
            };
            let sample = GazeSample {
                t_ms: parse(fields[0], "t_ms")?,
                x: parse(fields[1], "x")?,
                y: parse(fields[2], "y")?,
            };
            check_sample(&sample, samples.last()).map_err(|r| err(line_no, r))?;
            samples.push(sample);
        }
        Ok(GazeTrajectory { frame_id, samples })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t_ms,x,y\n");
        for s in &self.samples {
            out.push_str(&format!("{},{},{}\n", s.t_ms, s.x, s.y));
        }
        out
    }
}

fn check_sample(s: &GazeSample, prev: Option<&GazeSample>) -> std::result::Result<(), String> {
    if !s.t_ms.is_finite() || !s.x.is_finite() || !s.y.is_finite() {
        return Err("non-finite value".into());
    }
    if !(0.0..=1.0).contains(&s.x) || !(0.0..=1.0).contains(&s.y) {
        return Err(format!("coordinates ({}, {}) outside [0,1]", s.x, s.y));
    }
    if let Some(p) = prev {
        if s.t_ms <= p.t_ms {
            return Err(format!("timestamp {} not after {}", s.t_ms, p.t_ms));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainRole {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq)]
struct Record<T> {
    id: String,
    image: Image<T>,
    mask: Option<SegMask>,
    gaze: Option<GazeTrajectory>,
}

/// What training code is allowed to see of one item. Target items never
/// carry a label here; their masks live behind [`DomainDataset::eval_mask`].
#[derive(Clone, Copy, Debug)]
pub struct TrainingItem<'a, T> {
    pub id: &'a str,
    pub image: &'a Image<T>,
    pub label: Option<&'a SegMask>,
    pub gaze: Option<&'a GazeTrajectory>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset<T> {
    role: DomainRole,
    records: Vec<Record<T>>,
}

impl<T: Scalar> DomainDataset<T> {
    pub fn source(items: Vec<(String, Image<T>, SegMask)>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidConfig("source dataset is empty".into()));
        }
        let records = items
            .into_iter()
            .map(|(id, image, mask)| {
                if !mask.same_shape(image.height(), image.width()) {
                    return Err(Error::ShapeMismatch(format!("mask of {id} differs from its image")));
                }
                Ok(Record {
                    id,
                    image,
                    mask: Some(mask),
                    gaze: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DomainDataset {
            role: DomainRole::Source,
            records,
        })
    }

    pub fn target(
        items: Vec<(String, Image<T>, Option<GazeTrajectory>, Option<SegMask>)>,
    ) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidConfig("target dataset is empty".into()));
        }
        let records = items
            .into_iter()
            .map(|(id, image, gaze, mask)| {
                if let Some(m) = &mask {
                    if !m.same_shape(image.height(), image.width()) {
                        return Err(Error::ShapeMismatch(format!("mask of {id} differs from its image")));
                    }
                }
                Ok(Record {
                    id,
                    image,
                    mask,
                    gaze,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DomainDataset {
            role: DomainRole::Target,
            records,
        })
    }

    pub fn role(&self) -> DomainRole {
        self.role
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn id(&self, i: usize) -> &str {
        &self.records[i].id
    }

    pub fn image(&self, i: usize) -> &Image<T> {
        &self.records[i].image
    }

    pub fn gaze(&self, i: usize) -> Option<&GazeTrajectory> {
        self.records[i].gaze.as_ref()
    }

    /// Training-facing accessor.
    pub fn training_item(&self, i: usize) -> TrainingItem<'_, T> {
        let r = &self.records[i];
        TrainingItem {
            id: &r.id,
            image: &r.image,
            label: match self.role {
                DomainRole::Source => r.mask.as_ref(),
                DomainRole::Target => None,
            },
            gaze: r.gaze.as_ref(),
        }
    }

    pub fn training_items(&self) -> impl Iterator<Item = TrainingItem<'_, T>> {
        (0..self.len()).map(move |i| self.training_item(i))
    }

    /// Evaluation-only accessor; the only way to reach target ground truth.
    pub fn eval_mask(&self, i: usize) -> Option<&SegMask> {
        self.records[i].mask.as_ref()
    }

    /// Items `[start, end)` as a new dataset of the same role.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::InvalidConfig(format!(
                "empty or out-of-range split {start}..{end} of {}",
                self.len()
            )));
        }
        Ok(DomainDataset {
            role: self.role,
            records: self.records[start..end].to_vec(),
        })
    }

    /// SHA-256 over ids, pixels, masks and gaze samples in item order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(match self.role {
            DomainRole::Source => b"source".as_slice(),
            DomainRole::Target => b"target".as_slice(),
        });
        let mut buf = Vec::new();
        for r in &self.records {
            h.update(r.id.as_bytes());
            h.update((r.image.height as u64).to_le_bytes());
            h.update((r.image.width as u64).to_le_bytes());
            buf.clear();
            for p in &r.image.pixels {
                p.write_le(&mut buf);
            }
            h.update(&buf);
            if let Some(m) = &r.mask {
                h.update(b"mask");
                h.update(&m.pixels);
            }
            if let Some(g) = &r.gaze {
                h.update(b"gaze");
                for s in g.samples() {
                    h.update(s.t_ms.to_le_bytes());
                    h.update(s.x.to_le_bytes());
                    h.update(s.y.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }
}

fn list_stems(dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut stems = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

fn read_gray(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .into_luma16();
    let (w, h) = img.dimensions();
    Ok((h as usize, w as usize, img.into_raw().into_iter().map(f64::from).collect()))
}

/// Reads a mask PNG; any nonzero pixel is foreground.
pub fn read_mask(path: &Path) -> Result<SegMask> {
    let (h, w, raw) = read_gray(path)?;
    SegMask::new(h, w, raw.into_iter().map(|v| u8::from(v > 0.0)).collect())
}

/// Load a dataset directory in lexicographic stem order.
pub fn load_dataset<T: Scalar>(root: &Path, role: DomainRole) -> Result<DomainDataset<T>> {
    let stems = list_stems(&root.join("images"))?;
    match role {
        DomainRole::Source => {
            let mut items = Vec::with_capacity(stems.len());
            for stem in stems {
                let mask_path = root.join("masks").join(format!("{stem}.png"));
                if !mask_path.is_file() {
                    return Err(Error::IncompleteSourceRecord(stem));
                }
                let image = load_image(&root.join("images").join(format!("{stem}.png")))?;
                let mask = read_mask(&mask_path)?;
                items.push((stem, image, mask));
            }
            DomainDataset::source(items)
        }
        DomainRole::Target => {
            let mut items = Vec::with_capacity(stems.len());
            for stem in stems {
                let image = load_image(&root.join("images").join(format!("{stem}.png")))?;
                let gaze_path = root.join("gaze").join(format!("{stem}.csv"));
                let gaze = if gaze_path.is_file() {
                    let text = fs::read_to_string(&gaze_path).map_err(|e| Error::io(&gaze_path, e))?;
                    Some(GazeTrajectory::parse_csv(stem.clone(), &text).map_err(|e| match e {
                        Error::GazeParse { line, reason, .. } => Error::GazeParse {
                            file: gaze_path.display().to_string(),
                            line,
                            reason,
                        },
                        other => other,
                    })?)
                } else {
                    None
                };
                let mask_path = root.join("masks").join(format!("{stem}.png"));
                let mask = if mask_path.is_file() {
                    Some(read_mask(&mask_path)?)
                } else {
                    None
                };
                items.push((stem, image, gaze, mask));
            }
            DomainDataset::target(items)
        }
    }
}

fn load_image<T: Scalar>(path: &Path) -> Result<Image<T>> {
    let (h, w, raw) = read_gray(path)?;
    normalize_image(h, w, &raw).map_err(|e| match e {
        Error::BadImageRange(r) => Error::BadImageRange(format!("{}: {r}", path.display())),
        other => other,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes a mask as 8-bit 0/255 PNG.
pub fn write_mask(m: &SegMask, path: &Path) -> Result<()> {
    let raw: Vec<u8> = m.pixels.iter().map(|&p| p * 255).collect();
    image::GrayImage::from_raw(m.width as u32, m.height as u32, raw)
        .expect("buffer size matches dimensions")
        .save(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Write a dataset in the layout [`load_dataset`] reads. Images are stored as
/// 16-bit PNG; masks as 8-bit 0/255.
pub fn save_dataset<T: Scalar>(ds: &DomainDataset<T>, root: &Path) -> Result<()> {
    let images = root.join("images");
    let masks = root.join("masks");
    create_dir(&images)?;
    create_dir(&masks)?;
    let gaze_dir = root.join("gaze");
    if ds.role == DomainRole::Target {
        create_dir(&gaze_dir)?;
    }
    for r in &ds.records {
        let (w, h) = (r.image.width as u32, r.image.height as u32);
        let raw: Vec<u16> = r
            .image
            .pixels
            .iter()
            .map(|p| (p.as_f64() * 65535.0).round().clamp(0.0, 65535.0) as u16)
            .collect();
        let path = images.join(format!("{}.png", r.id));
        image::ImageBuffer::<image::Luma<u16>, _>::from_raw(w, h, raw)
            .expect("buffer size matches dimensions")
            .save(&path)
            .map_err(|source| Error::Image { path, source })?;
        if let Some(m) = &r.mask {
            write_mask(m, &masks.join(format!("{}.png", r.id)))?;
        }
        if let Some(g) = &r.gaze {
            let path: PathBuf = gaze_dir.join(format!("{}.csv", r.id));
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            f.write_all(g.to_csv().as_bytes()).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}
