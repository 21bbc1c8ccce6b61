//! Labeled segmentation datasets: on-disk format, validation, splitting and
//! augmentation.
//!
//! A dataset is a JSON manifest naming RGB image / single-channel mask pairs,
//! with an optional train/val/test split map. Masks store one class index per
//! pixel; 255 marks pixels to ignore (augmentation padding). All randomized
//! operations are pure functions of their inputs and an explicit seed.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::IGNORE_LABEL;
use crate::rng::derived_rng;

/// An RGB image paired with a per-pixel class-index mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledImage {
    pub id: String,
    /// H×W×3, 8-bit.
    pub image: Array3<u8>,
    /// H×W class indices; 255 = ignore.
    pub mask: Array2<u8>,
}

impl LabeledImage {
    pub fn new(id: impl Into<String>, image: Array3<u8>, mask: Array2<u8>) -> Result<Self> {
        let s = LabeledImage {
            id: id.into(),
            image,
            mask,
        };
        s.check_aligned()?;
        Ok(s)
    }

    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }

    fn check_aligned(&self) -> Result<()> {
        let (h, w, c) = self.image.dim();
        if c != 3 {
            return Err(Error::validation(format!(
                "sample {}: image has {c} channels, expected 3",
                self.id
            )));
        }
        if (h, w) != self.mask.dim() {
            return Err(Error::validation(format!(
                "sample {}: image is {h}x{w} but mask is {}x{}",
                self.id,
                self.mask.dim().0,
                self.mask.dim().1
            )));
        }
        Ok(())
    }

    /// Check every mask value is a valid class index or the ignore label.
    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        for &v in self.mask.iter() {
            if v != IGNORE_LABEL && usize::from(v) >= num_classes {
                return Err(Error::validation(format!(
                    "sample {}: mask value {v} out of range for {num_classes} classes",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// One manifest entry; paths are relative to the manifest file's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRef {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

/// A dataset: class inventory plus sample references and an optional split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub samples: Vec<SampleRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<BTreeMap<String, Split>>,
    /// Per-class RGB colors for visualizations; falls back to
    /// [`default_palette`] when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub palette: Option<Vec<[u8; 3]>>,
    /// Directory sample paths are resolved against; set on load/save.
    #[serde(skip)]
    root: PathBuf,
}

impl DatasetManifest {
    pub fn new(
        name: impl Into<String>,
        num_classes: usize,
        class_names: Vec<String>,
        root: impl Into<PathBuf>,
    ) -> Result<Self> {
        let m = DatasetManifest {
            name: name.into(),
            num_classes,
            class_names,
            samples: Vec::new(),
            split: None,
            palette: None,
            root: root.into(),
        };
        m.check_header()?;
        Ok(m)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// The visualization palette: the stored one, or a generated default.
    pub fn palette(&self) -> Vec<[u8; 3]> {
        self.palette
            .clone()
            .unwrap_or_else(|| default_palette(self.num_classes))
    }

    fn check_header(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::validation(format!(
                "manifest {}: num_classes must be at least 2, got {}",
                self.name, self.num_classes
            )));
        }
        if self.class_names.len() != self.num_classes {
            return Err(Error::validation(format!(
                "manifest {}: {} class names for {} classes",
                self.name,
                self.class_names.len(),
                self.num_classes
            )));
        }
        if let Some(palette) = &self.palette {
            if palette.len() != self.num_classes {
                return Err(Error::validation(format!(
                    "manifest {}: {} palette entries for {} classes",
                    self.name,
                    palette.len(),
                    self.num_classes
                )));
            }
        }
        Ok(())
    }

    /// Read, parse and fully validate a manifest: the header is checked, ids
    /// must be unique, and every referenced sample must decode with matching
    /// image/mask sizes and in-range mask values.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let manifest = Self::load_header(path)?;
        for s in &manifest.samples {
            manifest.load_sample(s)?;
        }
        Ok(manifest)
    }

    /// Read and structurally validate a manifest without touching any sample
    /// file. Evaluation-only consumers use this so a manifest stays openable
    /// even when files of splits they never read are absent.
    pub fn load_header(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        manifest.root = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        manifest.validate_structure()?;
        Ok(manifest)
    }

    /// Write the manifest JSON; sample paths stay relative to `path`'s parent.
    pub fn save(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.root = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Validate header, id uniqueness, split names and every sample on disk.
    pub fn validate(&self) -> Result<()> {
        self.validate_structure()?;
        for s in &self.samples {
            self.load_sample(s)?;
        }
        Ok(())
    }

    /// The file-free part of [`validate`]: header, id uniqueness and split
    /// name resolution.
    pub fn validate_structure(&self) -> Result<()> {
        self.check_header()?;
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.samples {
            if !seen.insert(&s.id) {
                return Err(Error::validation(format!(
                    "manifest {}: duplicate sample id {}",
                    self.name, s.id
                )));
            }
        }
        if let Some(split) = &self.split {
            for id in split.keys() {
                if !seen.contains(id) {
                    return Err(Error::validation(format!(
                        "manifest {}: split references unknown sample id {id}",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Decode one referenced sample and check its invariants.
    pub fn load_sample(&self, sample: &SampleRef) -> Result<LabeledImage> {
        let image = decode_image(self.root.join(&sample.image))?;
        let mask = decode_mask(self.root.join(&sample.mask))?;
        let li = LabeledImage::new(sample.id.clone(), image, mask)?;
        li.check_classes(self.num_classes)?;
        Ok(li)
    }

    pub fn split_of(&self, id: &str) -> Option<Split> {
        self.split.as_ref().and_then(|m| m.get(id).copied())
    }

    /// Sample references assigned to `split`; errors if no split map exists.
    pub fn samples_in(&self, split: Split) -> Result<Vec<&SampleRef>> {
        let map = self.split.as_ref().ok_or_else(|| {
            Error::validation(format!("manifest {} has no split assignment", self.name))
        })?;
        Ok(self
            .samples
            .iter()
            .filter(|s| map.get(&s.id) == Some(&split))
            .collect())
    }

    /// Decode every sample of `split` (or all samples when `None`).
    pub fn load_split(&self, split: Option<Split>) -> Result<Vec<LabeledImage>> {
        let refs: Vec<&SampleRef> = match split {
            Some(sp) => self.samples_in(sp)?,
            None => self.samples.iter().collect(),
        };
        refs.into_iter().map(|r| self.load_sample(r)).collect()
    }
}

/// A deterministic class-color palette: a fixed table of distinguishable
/// colors for the first classes, extended by golden-angle hue stepping for
/// any remainder.
pub fn default_palette(num_classes: usize) -> Vec<[u8; 3]> {
    const TABLE: [[u8; 3]; 8] = [
        [220, 50, 60],   // crimson
        [60, 110, 230],  // blue
        [60, 180, 90],   // green
        [240, 200, 60],  // yellow
        [170, 70, 200],  // purple
        [70, 210, 210],  // cyan
        [240, 140, 50],  // orange
        [140, 90, 60],   // brown
    ];
    (0..num_classes)
        .map(|i| {
            if i < TABLE.len() {
                TABLE[i]
            } else {
                // Hue walks the golden angle so consecutive entries stay far
                // apart; saturation/value fixed.
                let hue = (i as f64 * 0.618_033_988_75).fract() * 6.0;
                let sector = hue as usize % 6;
                let f = hue.fract();
                let (v, s) = (0.95f64, 0.65f64);
                let p = v * (1.0 - s);
                let q = v * (1.0 - s * f);
                let t = v * (1.0 - s * (1.0 - f));
                let (r, g, b) = match sector {
                    0 => (v, t, p),
                    1 => (q, v, p),
                    2 => (p, v, t),
                    3 => (p, q, v),
                    4 => (t, p, v),
                    _ => (v, p, q),
                };
                [
                    (r * 255.0).round() as u8,
                    (g * 255.0).round() as u8,
                    (b * 255.0).round() as u8,
                ]
            }
        })
        .collect()
}

/// Assign every sample to train/val/test. Counts are floor(train·N) and
/// floor(val·N) with the remainder going to test, so no sample is ever
/// dropped; the assignment is a seed-deterministic shuffle.
pub fn split_dataset(
    manifest: &DatasetManifest,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetManifest> {
    let (tr, va, te) = ratios;
    if (tr + va + te - 1.0).abs() > 1e-9 {
        return Err(Error::validation(format!(
            "split ratios ({tr}, {va}, {te}) do not sum to 1"
        )));
    }
    if tr < 0.0 || va < 0.0 || te < 0.0 {
        return Err(Error::validation("split ratios must be non-negative"));
    }
    let n = manifest.samples.len();
    if n < 3 {
        return Err(Error::validation(format!(
            "cannot split a dataset of {n} samples into three parts"
        )));
    }
    let n_train = (tr * n as f64).floor() as usize;
    let n_val = (va * n as f64).floor() as usize;

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = derived_rng(seed, "split", 0);
    // Fisher–Yates via rand's slice shuffle.
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);

    let mut map = BTreeMap::new();
    for (rank, &idx) in order.iter().enumerate() {
        let split = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        map.insert(manifest.samples[idx].id.clone(), split);
    }
    let mut out = manifest.clone();
    out.split = Some(map);
    Ok(out)
}

/// One augmentation step. The same geometric transform is applied to image
/// and mask; the mask is always resampled nearest-neighbor so no class index
/// is ever invented.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentOp {
    /// Resize both image and mask by a factor drawn uniformly from
    /// `[min_factor, max_factor]`.
    RandomScale { min_factor: f64, max_factor: f64 },
    /// Mirror horizontally with probability `p`.
    RandomFlip { p: f64 },
    /// Cut a `height`×`width` window at a uniform position. Errors if the
    /// window exceeds the current image size.
    RandomCrop { height: usize, width: usize },
    /// Rotate about the image center by an angle drawn uniformly from
    /// `[-max_degrees, +max_degrees]`; uncovered pixels become black in the
    /// image and 255 in the mask.
    RandomRotate { max_degrees: f64 },
}

impl AugmentOp {
    /// The default recipe — scale, flip, rotate, then crop to `crop` pixels —
    /// so every augmented sample comes out at a fixed size.
    pub fn default_recipe(crop: usize) -> Vec<AugmentOp> {
        vec![
            AugmentOp::RandomScale {
                min_factor: 0.75,
                max_factor: 1.25,
            },
            AugmentOp::RandomFlip { p: 0.5 },
            AugmentOp::RandomRotate { max_degrees: 15.0 },
            AugmentOp::RandomCrop {
                height: crop,
                width: crop,
            },
        ]
    }

    fn apply(&self, image: &Array3<u8>, mask: &Array2<u8>, rng: &mut impl Rng) -> Result<(Array3<u8>, Array2<u8>)> {
        let (h, w, _) = image.dim();
        match *self {
            AugmentOp::RandomScale {
                min_factor,
                max_factor,
            } => {
                if !(min_factor > 0.0 && max_factor >= min_factor) {
                    return Err(Error::validation(format!(
                        "invalid scale range [{min_factor}, {max_factor}]"
                    )));
                }
                let f = rng.random_range(min_factor..=max_factor);
                let oh = ((h as f64 * f).round() as usize).max(1);
                let ow = ((w as f64 * f).round() as usize).max(1);
                Ok((resize_bilinear(image, oh, ow), resize_nearest(mask, oh, ow)))
            }
            AugmentOp::RandomFlip { p } => {
                if rng.random_bool(p.clamp(0.0, 1.0)) {
                    let img = image.slice(ndarray::s![.., ..;-1, ..]).to_owned();
                    let msk = mask.slice(ndarray::s![.., ..;-1]).to_owned();
                    Ok((img, msk))
                } else {
                    Ok((image.clone(), mask.clone()))
                }
            }
            AugmentOp::RandomCrop { height, width } => {
                if height > h || width > w {
                    return Err(Error::validation(format!(
                        "crop {height}x{width} exceeds image {h}x{w}"
                    )));
                }
                let top = rng.random_range(0..=h - height);
                let left = rng.random_range(0..=w - width);
                let img = image
                    .slice(ndarray::s![top..top + height, left..left + width, ..])
                    .to_owned();
                let msk = mask
                    .slice(ndarray::s![top..top + height, left..left + width])
                    .to_owned();
                Ok((img, msk))
            }
            AugmentOp::RandomRotate { max_degrees } => {
                let deg = rng.random_range(-max_degrees..=max_degrees);
                Ok(rotate(image, mask, deg))
            }
        }
    }
}

/// Expand a sample list by `copies` augmented variants each. The originals
/// are passed through unchanged; copy `k` of sample `i` draws its randomness
/// from a stream derived from (seed, sample id, k), so the expansion is
/// order-independent and reproducible.
pub fn augment_expand(
    samples: &[LabeledImage],
    ops: &[AugmentOp],
    copies: usize,
    seed: u64,
) -> Result<Vec<LabeledImage>> {
    let mut out = Vec::with_capacity(samples.len() * (copies + 1));
    for sample in samples {
        out.push(sample.clone());
        for k in 0..copies {
            let mut rng = derived_rng(seed, &sample.id, k as u64);
            let mut image = sample.image.clone();
            let mut mask = sample.mask.clone();
            for op in ops {
                let (i2, m2) = op.apply(&image, &mask, &mut rng)?;
                image = i2;
                mask = m2;
            }
            out.push(LabeledImage::new(
                format!("{}_aug{k}", sample.id),
                image,
                mask,
            )?);
        }
    }
    Ok(out)
}

/// Bilinear resize of an 8-bit H×W×3 image (half-pixel-centered sampling).
pub fn resize_bilinear(image: &Array3<u8>, oh: usize, ow: usize) -> Array3<u8> {
    let (h, w, c) = image.dim();
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    Array3::from_shape_fn((oh, ow, c), |(y, x, ch)| {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let dy = fy - y0 as f64;
        let dx = fx - x0 as f64;
        let v = f64::from(image[[y0, x0, ch]]) * (1.0 - dy) * (1.0 - dx)
            + f64::from(image[[y0, x1, ch]]) * (1.0 - dy) * dx
            + f64::from(image[[y1, x0, ch]]) * dy * (1.0 - dx)
            + f64::from(image[[y1, x1, ch]]) * dy * dx;
        v.round().clamp(0.0, 255.0) as u8
    })
}

/// Nearest-neighbor resize for masks; output values are a subset of input
/// values by construction.
pub fn resize_nearest(mask: &Array2<u8>, oh: usize, ow: usize) -> Array2<u8> {
    let (h, w) = mask.dim();
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    Array2::from_shape_fn((oh, ow), |(y, x)| {
        let iy = (((y as f64 + 0.5) * sy).floor() as usize).min(h - 1);
        let ix = (((x as f64 + 0.5) * sx).floor() as usize).min(w - 1);
        mask[[iy, ix]]
    })
}

/// Rotate image (bilinear) and mask (nearest) about the center; out-of-image
/// source coordinates yield black image pixels and ignore-label mask pixels.
fn rotate(image: &Array3<u8>, mask: &Array2<u8>, degrees: f64) -> (Array3<u8>, Array2<u8>) {
    let (h, w, c) = image.dim();
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let source = |y: usize, x: usize| -> (f64, f64) {
        let dy = y as f64 - cy;
        let dx = x as f64 - cx;
        (cy + sin * dx + cos * dy, cx + cos * dx - sin * dy)
    };
    let img = Array3::from_shape_fn((h, w, c), |(y, x, ch)| {
        let (fy, fx) = source(y, x);
        if fy < 0.0 || fx < 0.0 || fy > (h - 1) as f64 || fx > (w - 1) as f64 {
            return 0;
        }
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let dy = fy - y0 as f64;
        let dx = fx - x0 as f64;
        let v = f64::from(image[[y0, x0, ch]]) * (1.0 - dy) * (1.0 - dx)
            + f64::from(image[[y0, x1, ch]]) * (1.0 - dy) * dx
            + f64::from(image[[y1, x0, ch]]) * dy * (1.0 - dx)
            + f64::from(image[[y1, x1, ch]]) * dy * dx;
        v.round().clamp(0.0, 255.0) as u8
    });
    let msk = Array2::from_shape_fn((h, w), |(y, x)| {
        let (fy, fx) = source(y, x);
        let iy = fy.round();
        let ix = fx.round();
        if iy < 0.0 || ix < 0.0 || iy > (h - 1) as f64 || ix > (w - 1) as f64 {
            IGNORE_LABEL
        } else {
            mask[[iy as usize, ix as usize]]
        }
    });
    (img, msk)
}

/// Write an H×W×3 array as an 8-bit RGB PNG.
pub fn encode_image(image: &Array3<u8>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::validation(format!(
            "expected 3 channels to encode, got {c}"
        )));
    }
    let data = image
        .as_standard_layout()
        .iter()
        .copied()
        .collect::<Vec<u8>>();
    let buf = image::RgbImage::from_raw(w as u32, h as u32, data)
        .expect("buffer length matches dimensions");
    buf.save(path).map_err(|e| Error::image(path, e))
}

/// Read an 8-bit RGB raster file into an H×W×3 array. Files with any other
/// channel layout or bit depth are rejected rather than converted.
pub fn decode_image(path: impl AsRef<Path>) -> Result<Array3<u8>> {
    let path = path.as_ref();
    let dynimg = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::image(path, e))?;
    match dynimg {
        image::DynamicImage::ImageRgb8(img) => {
            let (w, h) = img.dimensions();
            let data = img.into_raw();
            Ok(Array3::from_shape_vec((h as usize, w as usize, 3), data)
                .expect("raw RGB buffer is row-major H*W*3"))
        }
        other => Err(Error::validation(format!(
            "{}: expected 8-bit RGB image, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

/// Write a mask as a single-channel 8-bit PNG; pixel value = class index.
pub fn encode_mask(mask: &Array2<u8>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = mask.dim();
    let data = mask
        .as_standard_layout()
        .iter()
        .copied()
        .collect::<Vec<u8>>();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, data)
        .expect("buffer length matches dimensions");
    buf.save(path).map_err(|e| Error::image(path, e))
}

/// Read a single-channel 8-bit mask file. Multi-channel files and other bit
/// depths are errors: silently converting them could corrupt class indices.
pub fn decode_mask(path: impl AsRef<Path>) -> Result<Array2<u8>> {
    let path = path.as_ref();
    let dynimg = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::image(path, e))?;
    match dynimg {
        image::DynamicImage::ImageLuma8(img) => {
            let (w, h) = img.dimensions();
            let data = img.into_raw();
            Ok(Array2::from_shape_vec((h as usize, w as usize), data)
                .expect("raw luma buffer is row-major H*W"))
        }
        image::DynamicImage::ImageLuma16(_) => Err(Error::validation(format!(
            "{}: 16-bit masks are not supported; class indices must be 8-bit",
            path.display()
        ))),
        other => Err(Error::validation(format!(
            "{}: masks must be single-channel, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}
