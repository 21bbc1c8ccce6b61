//! Style transfer: the AdaIN renormalization core, a deterministic
//! statistical backend (moment matching in a log-opponent color space with
//! exact RGB moment pinning), an optional small neural AdaIN backend, and
//! the per-class stylization compositor that re-textures source images
//! class by class while leaving their labels untouched.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{decode_image, encode_image, DatasetManifest, LabeledImage, SampleRef};
use crate::error::{Error, Result};
use crate::metrics::IGNORE_LABEL;
use crate::nn::{read_tensors, write_tensors, Buffers, Graph, ParamStore};
use crate::rng::derived_rng;

/// Minimum side length of a style patch.
pub const MIN_PATCH_SIDE: usize = 16;

/// Epsilon used by the statistical pipeline's internal AdaIN step.
const PIPELINE_EPS: f64 = 1e-6;

// ---------------------------------------------------------------------------
// AdaIN core
// ---------------------------------------------------------------------------

fn channel_moments(x: &Array3<f64>, c: usize) -> (f64, f64) {
    let plane = x.index_axis(Axis(0), c);
    let n = plane.len() as f64;
    let mean = plane.sum() / n;
    let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-channel renormalization of `content`'s statistics to `style`'s:
/// `out[c] = style_std[c] · (content[c] − content_mean[c]) / (content_std[c] + epsilon) + style_mean[c]`.
/// Means and (population) standard deviations are taken over spatial
/// positions; the spatial extents of the two inputs may differ.
pub fn adain(content: &Array3<f64>, style: &Array3<f64>, epsilon: f64) -> Result<Array3<f64>> {
    let (cc, ch, cw) = content.dim();
    let (sc, sh, sw) = style.dim();
    if cc != sc {
        return Err(Error::validation(format!(
            "adain: content has {cc} channels but style has {sc}"
        )));
    }
    if ch * cw == 0 || sh * sw == 0 {
        return Err(Error::validation("adain: empty spatial extent"));
    }
    if !(epsilon > 0.0) {
        return Err(Error::validation(format!(
            "adain: epsilon must be positive, got {epsilon}"
        )));
    }
    let mut out = content.clone();
    for c in 0..cc {
        let (cm, cs) = channel_moments(content, c);
        let (sm, ss) = channel_moments(style, c);
        let scale = ss / (cs + epsilon);
        out.index_axis_mut(Axis(0), c)
            .mapv_inplace(|v| (v - cm) * scale + sm);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Color space: Reinhard-style log-opponent (lαβ) transform
// ---------------------------------------------------------------------------

const LMS_FROM_RGB: [[f64; 3]; 3] = [
    [0.3811, 0.5783, 0.0402],
    [0.1967, 0.7244, 0.0782],
    [0.0241, 0.1288, 0.8444],
];
/// Floor applied before the log so black pixels stay finite.
const LMS_FLOOR: f64 = 1e-4;

/// Exact cofactor inverse, so the color round trip is lossless up to
/// floating-point precision (published rounded inverses cost ~2 levels).
fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            let (r1, r2) = ((r + 1) % 3, (r + 2) % 3);
            let (c1, c2) = ((c + 1) % 3, (c + 2) % 3);
            // Transposed cofactor: entry (c, r) of the adjugate.
            inv[c][r] = (m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1]) / det;
        }
    }
    inv
}

/// H×W×3 bytes → (3, H, W) planes in [0, 1].
fn to_chw01(image: &Array3<u8>) -> Array3<f64> {
    let (h, w, _) = image.dim();
    Array3::from_shape_fn((3, h, w), |(c, y, x)| f64::from(image[[y, x, c]]) / 255.0)
}

/// (3, H, W) planes in [0, 1] → H×W×3 bytes, clamped and rounded.
fn from_chw01(planes: &Array3<f64>) -> Array3<u8> {
    let (_, h, w) = planes.dim();
    Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        (planes[[c, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8
    })
}

fn rgb_to_lab(image: &Array3<u8>) -> Array3<f64> {
    let rgb = to_chw01(image);
    let (_, h, w) = rgb.dim();
    let s3 = 3f64.sqrt();
    let s6 = 6f64.sqrt();
    let s2 = 2f64.sqrt();
    let mut lab = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let px = [rgb[[0, y, x]], rgb[[1, y, x]], rgb[[2, y, x]]];
            let mut log_lms = [0.0; 3];
            for (i, row) in LMS_FROM_RGB.iter().enumerate() {
                let v = row[0] * px[0] + row[1] * px[1] + row[2] * px[2];
                log_lms[i] = v.max(LMS_FLOOR).log10();
            }
            let (l, m, s) = (log_lms[0], log_lms[1], log_lms[2]);
            lab[[0, y, x]] = (l + m + s) / s3;
            lab[[1, y, x]] = (l + m - 2.0 * s) / s6;
            lab[[2, y, x]] = (l - m) / s2;
        }
    }
    lab
}

/// Inverse of [`rgb_to_lab`], returning float RGB planes clamped to [0, 1].
fn lab_to_rgb01(lab: &Array3<f64>) -> Array3<f64> {
    let (_, h, w) = lab.dim();
    let s3 = 3f64.sqrt();
    let s6 = 6f64.sqrt();
    let s2 = 2f64.sqrt();
    let rgb_from_lms = invert3(&LMS_FROM_RGB);
    let mut rgb = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let (l, a, b) = (lab[[0, y, x]], lab[[1, y, x]], lab[[2, y, x]]);
            let log_l = l / s3 + a / s6 + b / s2;
            let log_m = l / s3 + a / s6 - b / s2;
            let log_s = l / s3 - 2.0 * a / s6;
            let lms = [
                10f64.powf(log_l),
                10f64.powf(log_m),
                10f64.powf(log_s),
            ];
            for (c, row) in rgb_from_lms.iter().enumerate() {
                let v = row[0] * lms[0] + row[1] * lms[1] + row[2] * lms[2];
                rgb[[c, y, x]] = v.clamp(0.0, 1.0);
            }
        }
    }
    rgb
}

// ---------------------------------------------------------------------------
// Backends
// ---------------------------------------------------------------------------

/// Feature width of the small neural AdaIN encoder/decoder.
const NEURAL_CHANNELS: usize = 16;

/// Weights of the neural backend's convolutional encoder/decoder pair.
pub struct NeuralWeights {
    params: ParamStore<f64>,
    buffers: Buffers<f64>,
}

impl NeuralWeights {
    const LAYERS: [(&'static str, usize, usize); 4] = [
        ("enc.conv1", 3, NEURAL_CHANNELS),
        ("enc.conv2", NEURAL_CHANNELS, NEURAL_CHANNELS),
        ("dec.conv1", NEURAL_CHANNELS, NEURAL_CHANNELS),
        ("dec.conv2", NEURAL_CHANNELS, 3),
    ];

    /// Deterministically initialize the encoder/decoder from a seed.
    pub fn seeded(seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        for (name, cin, cout) in Self::LAYERS {
            let weight_name = format!("{name}.weight");
            let std = (2.0 / (cout * 9) as f64).sqrt();
            let mut rng = derived_rng(seed, &weight_name, 0);
            let normal = rand_distr::Normal::new(0.0, std)
                .map_err(|e| Error::validation(format!("weight init: {e}")))?;
            let data: Vec<f64> = (0..cout * cin * 9).map(|_| rng.sample(normal)).collect();
            let weight = ndarray::ArrayD::from_shape_vec(vec![cout, cin, 3, 3], data)
                .expect("weight element count matches shape");
            params.insert(weight_name, weight)?;
            params.insert(
                format!("{name}.bias"),
                ndarray::ArrayD::zeros(vec![cout]),
            )?;
        }
        Ok(NeuralWeights {
            params,
            buffers: Buffers::new(),
        })
    }

    /// Serialize to separate encoder and decoder tensor blobs.
    pub fn to_blobs(&self) -> Result<(Vec<u8>, Vec<u8>)> {
        let mut enc = BTreeMap::new();
        let mut dec = BTreeMap::new();
        for (name, value) in self.params.iter() {
            let dest = if name.starts_with("enc.") { &mut enc } else { &mut dec };
            dest.insert(name.to_owned(), value.clone());
        }
        let mut enc_bytes = Vec::new();
        write_tensors(&mut enc_bytes, &enc)
            .map_err(|e| Error::validation(format!("encoder blob: {e}")))?;
        let mut dec_bytes = Vec::new();
        write_tensors(&mut dec_bytes, &dec)
            .map_err(|e| Error::validation(format!("decoder blob: {e}")))?;
        Ok((enc_bytes, dec_bytes))
    }

    /// Rebuild from blobs produced by [`NeuralWeights::to_blobs`].
    pub fn from_blobs(encoder: &[u8], decoder: &[u8]) -> Result<Self> {
        let mut map = read_tensors::<f64, _>(&mut &*encoder)?;
        map.append(&mut read_tensors::<f64, _>(&mut &*decoder)?);
        let reference = Self::seeded(0)?;
        for (name, value) in reference.params.iter() {
            let loaded = map.get(name).ok_or_else(|| {
                Error::validation(format!("neural backend blob is missing tensor {name}"))
            })?;
            if loaded.shape() != value.shape() {
                return Err(Error::validation(format!(
                    "neural backend tensor {name}: shape {:?}, expected {:?}",
                    loaded.shape(),
                    value.shape()
                )));
            }
        }
        if map.len() != reference.params.len() {
            return Err(Error::validation(format!(
                "neural backend blobs hold {} tensors, expected {}",
                map.len(),
                reference.params.len()
            )));
        }
        Ok(NeuralWeights {
            params: ParamStore::from_map(map),
            buffers: Buffers::new(),
        })
    }

    fn encode(&self, planes: &Array3<f64>) -> Result<Array3<f64>> {
        let mut g = Graph::new(&self.params, &self.buffers, false);
        let x = g.leaf(planes.clone().insert_axis(Axis(0)));
        let h = g.conv2d(x, "enc.conv1.weight", Some("enc.conv1.bias"), 1, 1, 1)?;
        let h = g.relu(h);
        let h = g.conv2d(h, "enc.conv2.weight", Some("enc.conv2.bias"), 1, 1, 1)?;
        let h = g.relu(h);
        Ok(g.value(h).index_axis(Axis(0), 0).to_owned())
    }

    fn decode(&self, features: &Array3<f64>) -> Result<Array3<f64>> {
        let mut g = Graph::new(&self.params, &self.buffers, false);
        let x = g.leaf(features.clone().insert_axis(Axis(0)));
        let h = g.conv2d(x, "dec.conv1.weight", Some("dec.conv1.bias"), 1, 1, 1)?;
        let h = g.relu(h);
        let h = g.conv2d(h, "dec.conv2.weight", Some("dec.conv2.bias"), 1, 1, 1)?;
        Ok(g.value(h).index_axis(Axis(0), 0).to_owned())
    }
}

/// How full-image restyling is computed.
pub enum TransferBackend {
    /// Parameter-free moment matching: AdaIN in the log-opponent space, then
    /// exact per-channel RGB moment pinning. Fully deterministic.
    Statistical,
    /// Encoder → AdaIN on deep features → decoder, blended into the content
    /// by `alpha` (1.0 = fully stylized).
    Neural {
        alpha: f64,
        weights: Option<NeuralWeights>,
    },
}

impl TransferBackend {
    pub fn statistical() -> Self {
        TransferBackend::Statistical
    }

    pub fn neural_seeded(seed: u64, alpha: f64) -> Result<Self> {
        Ok(TransferBackend::Neural {
            alpha,
            weights: Some(NeuralWeights::seeded(seed)?),
        })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            TransferBackend::Statistical => "statistical",
            TransferBackend::Neural { .. } => "neural",
        }
    }
}

/// Restyle a whole image after the statistics of `patch`.
fn stylize_image(
    content: &Array3<u8>,
    patch: &Array3<u8>,
    backend: &TransferBackend,
) -> Result<Array3<u8>> {
    match backend {
        TransferBackend::Statistical => {
            let stylized_lab = adain(&rgb_to_lab(content), &rgb_to_lab(patch), PIPELINE_EPS)?;
            let mut rgb = lab_to_rgb01(&stylized_lab);
            // Pin the RGB channel moments to the patch's exactly; the
            // log-space step alone only matches them approximately.
            let patch_rgb = to_chw01(patch);
            for c in 0..3 {
                let (tm, ts) = channel_moments(&rgb, c);
                let (pm, ps) = channel_moments(&patch_rgb, c);
                let scale = ps / (ts + 1e-8);
                rgb.index_axis_mut(Axis(0), c)
                    .mapv_inplace(|v| (v - tm) * scale + pm);
            }
            Ok(from_chw01(&rgb))
        }
        TransferBackend::Neural { alpha, weights } => {
            if !(0.0..=1.0).contains(alpha) {
                return Err(Error::validation(format!(
                    "neural backend alpha must lie in [0, 1], got {alpha}"
                )));
            }
            let Some(weights) = weights else {
                return Err(Error::validation(
                    "neural backend parameter blobs are missing",
                ));
            };
            let content01 = to_chw01(content);
            let decoded = if *alpha == 0.0 {
                content01.clone()
            } else {
                let content_features = weights.encode(&content01)?;
                let style_features = weights.encode(&to_chw01(patch))?;
                let renormed = adain(&content_features, &style_features, PIPELINE_EPS)?;
                weights.decode(&renormed)?
            };
            let blended = decoded.mapv(|v| v * alpha)
                + content01.mapv(|v| v * (1.0 - alpha));
            Ok(from_chw01(&blended))
        }
    }
}

// ---------------------------------------------------------------------------
// Style bank
// ---------------------------------------------------------------------------

/// On-disk style bank: class index → patch image paths (relative to the bank
/// file), plus a free-text provenance note and the designated whole-image
/// patch used by conventional (global) stylization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StyleBankFile {
    pub source_note: String,
    pub styles: BTreeMap<u8, Vec<PathBuf>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conventional: Option<PathBuf>,
}

/// A loaded style bank with decoded patches.
pub struct StyleBank {
    pub source_note: String,
    styles: BTreeMap<u8, Vec<Array3<u8>>>,
    conventional: Option<Array3<u8>>,
}

impl StyleBank {
    pub fn new(
        source_note: impl Into<String>,
        styles: BTreeMap<u8, Vec<Array3<u8>>>,
        conventional: Option<Array3<u8>>,
    ) -> Result<Self> {
        let bank = StyleBank {
            source_note: source_note.into(),
            styles,
            conventional,
        };
        bank.validate()?;
        Ok(bank)
    }

    fn validate(&self) -> Result<()> {
        if self.styles.is_empty() {
            return Err(Error::validation("style bank has no class entries"));
        }
        for (expected, (&class, patches)) in self.styles.iter().enumerate() {
            if class as usize != expected {
                return Err(Error::validation(format!(
                    "style bank classes must be contiguous from 0; missing class {expected}"
                )));
            }
            if patches.is_empty() {
                return Err(Error::validation(format!(
                    "style bank class {class} has no patches"
                )));
            }
            for (i, p) in patches.iter().enumerate() {
                let (h, w, _) = p.dim();
                if h < MIN_PATCH_SIDE || w < MIN_PATCH_SIDE {
                    return Err(Error::validation(format!(
                        "style bank class {class} patch {i} is {h}x{w}; patches must be \
                         at least {MIN_PATCH_SIDE}x{MIN_PATCH_SIDE}"
                    )));
                }
            }
        }
        if let Some(p) = &self.conventional {
            let (h, w, _) = p.dim();
            if h < MIN_PATCH_SIDE || w < MIN_PATCH_SIDE {
                return Err(Error::validation(format!(
                    "designated conventional patch is {h}x{w}; patches must be at least \
                     {MIN_PATCH_SIDE}x{MIN_PATCH_SIDE}"
                )));
            }
        }
        Ok(())
    }

    /// Load a bank file and decode every referenced patch.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: StyleBankFile =
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let root = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        let mut styles = BTreeMap::new();
        for (class, patch_paths) in &file.styles {
            let mut patches = Vec::new();
            for p in patch_paths {
                patches.push(decode_image(root.join(p))?);
            }
            styles.insert(*class, patches);
        }
        let conventional = file
            .conventional
            .as_ref()
            .map(|p| decode_image(root.join(p)))
            .transpose()?;
        StyleBank::new(file.source_note, styles, conventional)
    }

    /// Number of target style classes (entries are contiguous from 0).
    pub fn num_classes(&self) -> usize {
        self.styles.len()
    }

    pub fn patches(&self, class: u8) -> Result<&[Array3<u8>]> {
        self.styles
            .get(&class)
            .map(Vec::as_slice)
            .ok_or_else(|| {
                Error::validation(format!("style bank has no entry for class {class}"))
            })
    }

    pub fn conventional_patch(&self) -> Result<&Array3<u8>> {
        self.conventional.as_ref().ok_or_else(|| {
            Error::validation(
                "style bank has no designated patch for conventional stylization",
            )
        })
    }
}

/// Write a bank's patches and JSON file under `dir`, returning the bank path.
pub fn save_style_bank(bank: &StyleBank, dir: &Path) -> Result<PathBuf> {
    let patch_dir = dir.join("patches");
    std::fs::create_dir_all(&patch_dir).map_err(|e| Error::io(&patch_dir, e))?;
    let mut file = StyleBankFile {
        source_note: bank.source_note.clone(),
        styles: BTreeMap::new(),
        conventional: None,
    };
    for (&class, patches) in &bank.styles {
        let mut paths = Vec::new();
        for (i, patch) in patches.iter().enumerate() {
            let rel = PathBuf::from(format!("patches/class{class}_{i}.png"));
            encode_image(patch, dir.join(&rel))?;
            paths.push(rel);
        }
        file.styles.insert(class, paths);
    }
    if let Some(patch) = &bank.conventional {
        let rel = PathBuf::from("patches/conventional.png");
        encode_image(patch, dir.join(&rel))?;
        file.conventional = Some(rel);
    }
    let bank_path = dir.join("style_bank.json");
    let text = serde_json::to_string_pretty(&file).map_err(|e| Error::json(&bank_path, e))?;
    std::fs::write(&bank_path, text).map_err(|e| Error::io(&bank_path, e))?;
    Ok(bank_path)
}

// ---------------------------------------------------------------------------
// Stylization operations
// ---------------------------------------------------------------------------

/// The three stylization arms applied to source datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StylizeMode {
    None,
    Conventional,
    Advanced,
}

impl fmt::Display for StylizeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            StylizeMode::None => "none",
            StylizeMode::Conventional => "conventional",
            StylizeMode::Advanced => "advanced",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for StylizeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(StylizeMode::None),
            "conventional" => Ok(StylizeMode::Conventional),
            "advanced" => Ok(StylizeMode::Advanced),
            other => Err(Error::validation(format!(
                "unknown stylization mode {other:?}; expected none, conventional or advanced"
            ))),
        }
    }
}

/// A stylized labeled image plus provenance: the mode and, per source class,
/// the index of the bank patch that styled it.
pub struct StylizedSample {
    pub sample: LabeledImage,
    pub mode: StylizeMode,
    pub styles_used: BTreeMap<u8, usize>,
}

/// Map every source class to the target class whose style it receives.
/// Default: identity on the first `target_classes` indices, surplus source
/// classes assigned round-robin. An explicit map must cover every source
/// class with an in-range target class.
pub fn assign_classes(
    source_classes: usize,
    target_classes: usize,
    explicit: Option<&BTreeMap<u8, u8>>,
) -> Result<BTreeMap<u8, u8>> {
    if target_classes == 0 {
        return Err(Error::validation("target style bank has no classes"));
    }
    if source_classes > usize::from(IGNORE_LABEL) {
        return Err(Error::validation(format!(
            "source class count {source_classes} exceeds the representable range"
        )));
    }
    if source_classes < target_classes {
        return Err(Error::validation(format!(
            "source dataset has {source_classes} classes but the target style bank has \
             {target_classes}; the source must have at least as many classes as the target"
        )));
    }
    if let Some(map) = explicit {
        for source in 0..source_classes {
            let target = map.get(&(source as u8)).ok_or_else(|| {
                Error::validation(format!("class assignment is missing source class {source}"))
            })?;
            if usize::from(*target) >= target_classes {
                return Err(Error::validation(format!(
                    "class assignment maps source class {source} to target class {target}, \
                     but the bank has only {target_classes} classes"
                )));
            }
        }
        if map.len() != source_classes {
            return Err(Error::validation(format!(
                "class assignment has {} entries for {source_classes} source classes",
                map.len()
            )));
        }
        return Ok(map.clone());
    }
    Ok((0..source_classes)
        .map(|i| (i as u8, (i % target_classes) as u8))
        .collect())
}

/// Restyle the whole image after one patch; the mask is untouched.
pub fn stylize_global(
    content: &LabeledImage,
    style_patch: &Array3<u8>,
    backend: &TransferBackend,
) -> Result<StylizedSample> {
    let (h, w, _) = style_patch.dim();
    if h == 0 || w == 0 {
        return Err(Error::validation("style patch is empty"));
    }
    let image = stylize_image(&content.image, style_patch, backend)?;
    Ok(StylizedSample {
        sample: LabeledImage::new(content.id.clone(), image, content.mask.clone())?,
        mode: StylizeMode::Conventional,
        styles_used: BTreeMap::new(),
    })
}

/// The per-class compositor: stylize the full image once per class present
/// in the mask (with a seed-chosen patch from that class's bank entry under
/// `assignment`), then assemble the output by selecting, at every pixel, the
/// stylized image of that pixel's class. Ignored pixels keep the content's
/// original values; the mask is untouched.
pub fn stylize_per_class(
    content: &LabeledImage,
    bank: &StyleBank,
    assignment: &BTreeMap<u8, u8>,
    backend: &TransferBackend,
    seed: u64,
) -> Result<StylizedSample> {
    let classes: BTreeSet<u8> = content
        .mask
        .iter()
        .copied()
        .filter(|&c| c != IGNORE_LABEL)
        .collect();
    if classes.is_empty() {
        return Err(Error::validation(format!(
            "sample {}: mask has no labeled pixels to stylize",
            content.id
        )));
    }
    let mut image = content.image.clone();
    let mut styles_used = BTreeMap::new();
    for &class in &classes {
        let style_class = *assignment.get(&class).ok_or_else(|| {
            Error::validation(format!(
                "sample {}: mask class {class} has no class assignment",
                content.id
            ))
        })?;
        let patches = bank.patches(style_class)?;
        let mut rng = derived_rng(seed, &content.id, u64::from(class));
        let patch_index = rng.random_range(0..patches.len());
        let stylized = stylize_image(&content.image, &patches[patch_index], backend)?;
        for ((y, x), &mask_value) in content.mask.indexed_iter() {
            if mask_value == class {
                for c in 0..3 {
                    image[[y, x, c]] = stylized[[y, x, c]];
                }
            }
        }
        styles_used.insert(class, patch_index);
    }
    Ok(StylizedSample {
        sample: LabeledImage::new(content.id.clone(), image, content.mask.clone())?,
        mode: StylizeMode::Advanced,
        styles_used,
    })
}

/// Per-sample provenance of a stylized dataset, written alongside the
/// emitted manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StylizationRecord {
    pub mode: StylizeMode,
    pub backend: String,
    pub seed: u64,
    /// sample id → (source class → bank patch index); empty for global modes.
    pub styles_used: BTreeMap<String, BTreeMap<u8, usize>>,
}

/// Apply one stylization mode to every sample of a dataset, writing images,
/// byte-identical mask copies, the new manifest and a provenance record
/// under `out_dir`. Split assignments carry over unchanged. Mode `none`
/// copies images and needs no bank; the other modes require one.
pub fn stylize_dataset(
    manifest: &DatasetManifest,
    bank: Option<&StyleBank>,
    mode: StylizeMode,
    backend: &TransferBackend,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    enum Plan<'a> {
        Copy,
        Global(&'a StyleBank),
        PerClass(&'a StyleBank, BTreeMap<u8, u8>),
    }
    let plan = match (mode, bank) {
        (StylizeMode::None, _) => Plan::Copy,
        (StylizeMode::Conventional, Some(bank)) => {
            // Fail before writing anything if the designated patch is absent.
            bank.conventional_patch()?;
            Plan::Global(bank)
        }
        (StylizeMode::Advanced, Some(bank)) => Plan::PerClass(
            bank,
            assign_classes(manifest.num_classes, bank.num_classes(), None)?,
        ),
        (_, None) => {
            return Err(Error::validation(format!(
                "stylize mode {mode} requires a style bank"
            )))
        }
    };
    let image_dir = out_dir.join("images");
    let mask_dir = out_dir.join("masks");
    std::fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    std::fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;

    let mut record = StylizationRecord {
        mode,
        backend: backend.kind().to_owned(),
        seed,
        styles_used: BTreeMap::new(),
    };
    let mut out = DatasetManifest::new(
        format!("{}-{mode}", manifest.name),
        manifest.num_classes,
        manifest.class_names.clone(),
        out_dir,
    )?;
    out.split = manifest.split.clone();
    out.palette = manifest.palette.clone();
    for sample_ref in &manifest.samples {
        let sample = manifest.load_sample(sample_ref)?;
        let with_id = |e: Error| Error::validation(format!("sample {}: {e}", sample_ref.id));
        let image = match &plan {
            Plan::Copy => sample.image.clone(),
            Plan::Global(bank) => stylize_global(&sample, bank.conventional_patch()?, backend)
                .map_err(with_id)?
                .sample
                .image,
            Plan::PerClass(bank, assignment) => {
                let stylized =
                    stylize_per_class(&sample, bank, assignment, backend, seed).map_err(with_id)?;
                record
                    .styles_used
                    .insert(sample_ref.id.clone(), stylized.styles_used);
                stylized.sample.image
            }
        };
        let image_rel = PathBuf::from(format!("images/{}.png", sample_ref.id));
        let mask_rel = PathBuf::from(format!("masks/{}.png", sample_ref.id));
        encode_image(&image, out_dir.join(&image_rel))?;
        // Copy the mask file verbatim: labels must survive byte-for-byte.
        let mask_src = manifest.root().join(&sample_ref.mask);
        std::fs::copy(&mask_src, out_dir.join(&mask_rel))
            .map_err(|e| Error::io(&mask_src, e))?;
        out.samples.push(SampleRef {
            id: sample_ref.id.clone(),
            image: image_rel,
            mask: mask_rel,
        });
    }
    out.save(out_dir.join("manifest.json"))?;
    let record_path = out_dir.join("stylization.json");
    let text =
        serde_json::to_string_pretty(&record).map_err(|e| Error::json(&record_path, e))?;
    std::fs::write(&record_path, text).map_err(|e| Error::io(&record_path, e))?;
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Straight-line reimplementation of the renormalization formula,
    /// written independently of `adain` (explicit loops, no shared helpers).
    fn adain_oracle(content: &Array3<f64>, style: &Array3<f64>, eps: f64) -> Array3<f64> {
        let (c, h, w) = content.dim();
        let (_, sh, sw) = style.dim();
        let mut out = Array3::zeros((c, h, w));
        for ch in 0..c {
            let mut c_sum = 0.0;
            for y in 0..h {
                for x in 0..w {
                    c_sum += content[[ch, y, x]];
                }
            }
            let c_mean = c_sum / (h * w) as f64;
            let mut c_sq = 0.0;
            for y in 0..h {
                for x in 0..w {
                    c_sq += (content[[ch, y, x]] - c_mean).powi(2);
                }
            }
            let c_std = (c_sq / (h * w) as f64).sqrt();
            let mut s_sum = 0.0;
            for y in 0..sh {
                for x in 0..sw {
                    s_sum += style[[ch, y, x]];
                }
            }
            let s_mean = s_sum / (sh * sw) as f64;
            let mut s_sq = 0.0;
            for y in 0..sh {
                for x in 0..sw {
                    s_sq += (style[[ch, y, x]] - s_mean).powi(2);
                }
            }
            let s_std = (s_sq / (sh * sw) as f64).sqrt();
            for y in 0..h {
                for x in 0..w {
                    out[[ch, y, x]] =
                        s_std * (content[[ch, y, x]] - c_mean) / (c_std + eps) + s_mean;
                }
            }
        }
        out
    }

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, lo: u8, hi: u8) -> Array3<u8> {
        Array3::from_shape_fn((h, w, 3), |_| rng.random_range(lo..=hi))
    }

    fn u8_moments(image: &Array3<u8>, c: usize) -> (f64, f64) {
        let vals: Vec<f64> = image
            .indexed_iter()
            .filter(|((_, _, ci), _)| *ci == c)
            .map(|(_, &v)| f64::from(v))
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    #[test]
    fn adain_matches_the_straight_line_oracle() {
        // The worked single-channel case: content [[1,2],[3,4]], style with
        // mean 0 and (population) std 1.
        let content = Array3::from_shape_vec((1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let style = Array3::from_shape_vec((1, 1, 2), vec![-1.0, 1.0]).unwrap();
        let got = adain(&content, &style, 1e-6).unwrap();
        let want = adain_oracle(&content, &style, 1e-6);
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-12);
        }

        // And a random multi-channel case with differing spatial extents.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let content = Array3::from_shape_fn((5, 7, 4), |_| rng.random_range(-2.0..2.0));
        let style = Array3::from_shape_fn((5, 3, 9), |_| rng.random_range(-5.0..5.0));
        let got = adain(&content, &style, 1e-6).unwrap();
        let want = adain_oracle(&content, &style, 1e-6);
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn adain_output_takes_the_style_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // Content channel ~ mean 0 / std 1; style channel mean 5 / std 2.
        let raw: Vec<f64> = (0..1024).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        let std =
            (raw.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / raw.len() as f64).sqrt();
        let content =
            Array3::from_shape_vec((1, 32, 32), raw.iter().map(|v| (v - mean) / std).collect())
                .unwrap();
        let style: Array3<f64> =
            Array3::from_shape_vec((1, 1, 4), vec![3.0, 7.0, 3.0, 7.0]).unwrap();
        let out = adain(&content, &style, 1e-9).unwrap();
        let (om, os) = channel_moments(&out, 0);
        assert!((om - 5.0).abs() < 1e-5, "mean {om}");
        assert!((os - 2.0).abs() < 1e-5, "std {os}");
    }

    #[test]
    fn adain_is_identity_when_style_stats_match_content() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let content = Array3::from_shape_fn((3, 8, 8), |_| rng.random_range(-1.0..1.0));
        let out = adain(&content, &content, 1e-9).unwrap();
        for (a, b) in out.iter().zip(content.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn adain_rejects_bad_inputs() {
        let a = Array3::<f64>::zeros((3, 4, 4));
        let b = Array3::<f64>::zeros((2, 4, 4));
        assert!(adain(&a, &b, 1e-6).is_err());
        let empty = Array3::<f64>::zeros((3, 0, 4));
        assert!(adain(&a, &empty, 1e-6).is_err());
        assert!(adain(&empty, &a, 1e-6).is_err());
        assert!(adain(&a, &a, 0.0).is_err());
    }

    #[test]
    fn color_space_round_trip_stays_within_one_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let image = random_image(&mut rng, 13, 9, 0, 255);
        let back = from_chw01(&lab_to_rgb01(&rgb_to_lab(&image)));
        for (a, b) in image.iter().zip(back.iter()) {
            assert!((i16::from(*a) - i16::from(*b)).abs() <= 1, "{a} vs {b}");
        }
    }

    fn labeled(id: &str, image: Array3<u8>, mask: Array2<u8>) -> LabeledImage {
        LabeledImage::new(id, image, mask).unwrap()
    }

    #[test]
    fn self_style_is_a_fixed_point_up_to_quantization() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let image = random_image(&mut rng, 24, 24, 40, 215);
        let content = labeled("s", image.clone(), Array2::zeros((24, 24)));
        let out = stylize_global(&content, &image, &TransferBackend::Statistical).unwrap();
        for (a, b) in image.iter().zip(out.sample.image.iter()) {
            assert!((i16::from(*a) - i16::from(*b)).abs() <= 1);
        }
        assert_eq!(out.sample.mask, content.mask);
    }

    #[test]
    fn constant_content_takes_the_style_channel_means() {
        // Patch values symmetric around (100, 150, 200) → exact means.
        let means = [100u8, 150, 200];
        let patch = Array3::from_shape_fn((16, 16, 3), |(y, x, c)| {
            if (y + x) % 2 == 0 {
                means[c] - 20
            } else {
                means[c] + 20
            }
        });
        let gray = Array3::from_elem((20, 20, 3), 128u8);
        let content = labeled("g", gray, Array2::zeros((20, 20)));
        let out = stylize_global(&content, &patch, &TransferBackend::Statistical).unwrap();
        for c in 0..3 {
            let plane: Vec<u8> = out
                .sample
                .image
                .indexed_iter()
                .filter(|((_, _, ci), _)| *ci == c)
                .map(|(_, &v)| v)
                .collect();
            // A constant image has no variance for moment matching to
            // stretch, so every output pixel sits at the style mean.
            assert!(plane.iter().all(|&v| v == plane[0]));
            assert!(
                (f64::from(plane[0]) - f64::from(means[c])).abs() <= 1.0,
                "channel {c}: {} vs {}",
                plane[0],
                means[c]
            );
        }
    }

    #[test]
    fn statistical_backend_matches_patch_moments_within_1_5_levels() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for case in 0..10 {
            let image = random_image(&mut rng, 32, 24, 30, 225);
            let patch = random_image(&mut rng, 16, 16, 60, 195);
            let content = labeled("m", image, Array2::zeros((32, 24)));
            let out = stylize_global(&content, &patch, &TransferBackend::Statistical).unwrap();
            for c in 0..3 {
                let (om, os) = u8_moments(&out.sample.image, c);
                let (pm, ps) = u8_moments(&patch, c);
                assert!((om - pm).abs() <= 1.5, "case {case} chan {c}: mean {om} vs {pm}");
                assert!((os - ps).abs() <= 1.5, "case {case} chan {c}: std {os} vs {ps}");
            }
        }
    }

    fn two_class_bank(rng: &mut ChaCha8Rng) -> StyleBank {
        let mut styles = BTreeMap::new();
        styles.insert(0u8, vec![random_image(rng, 16, 16, 10, 120)]);
        styles.insert(1u8, vec![random_image(rng, 18, 16, 130, 250)]);
        let conventional = random_image(rng, 16, 16, 80, 170);
        StyleBank::new("test bank", styles, Some(conventional)).unwrap()
    }

    #[test]
    fn compositor_selects_each_pixel_from_its_class_stylization() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bank = two_class_bank(&mut rng);
        let image = random_image(&mut rng, 20, 20, 20, 235);
        // Checkerboard mask with an ignored stripe.
        let mask = Array2::from_shape_fn((20, 20), |(y, x)| {
            if y < 2 {
                IGNORE_LABEL
            } else {
                ((y + x) % 2) as u8
            }
        });
        let content = labeled("cb", image.clone(), mask.clone());
        let assignment = assign_classes(2, 2, None).unwrap();
        let backend = TransferBackend::Statistical;
        let out = stylize_per_class(&content, &bank, &assignment, &backend, 77).unwrap();

        // Oracle: the bank has one patch per class, so the per-class images
        // are exactly the global stylizations with those patches.
        let styled: Vec<Array3<u8>> = (0..2)
            .map(|c| {
                stylize_global(&content, &bank.patches(c).unwrap()[0], &backend)
                    .unwrap()
                    .sample
                    .image
            })
            .collect();
        for ((y, x), &m) in mask.indexed_iter() {
            for c in 0..3 {
                let got = out.sample.image[[y, x, c]];
                let want = if m == IGNORE_LABEL {
                    image[[y, x, c]]
                } else {
                    styled[m as usize][[y, x, c]]
                };
                assert_eq!(got, want, "pixel ({y},{x}) channel {c} class {m}");
            }
        }
        assert_eq!(out.sample.mask, mask);
        assert_eq!(out.styles_used.len(), 2);
    }

    #[test]
    fn single_class_mask_degenerates_to_global_stylization() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let bank = two_class_bank(&mut rng);
        let image = random_image(&mut rng, 20, 20, 20, 235);
        let content = labeled("sc", image, Array2::from_elem((20, 20), 1u8));
        let assignment = assign_classes(2, 2, None).unwrap();
        let backend = TransferBackend::Statistical;
        let per_class = stylize_per_class(&content, &bank, &assignment, &backend, 5).unwrap();
        let global =
            stylize_global(&content, &bank.patches(1).unwrap()[0], &backend).unwrap();
        assert_eq!(per_class.sample.image, global.sample.image);
    }

    #[test]
    fn per_class_stylization_is_deterministic_and_rejects_bad_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut styles = BTreeMap::new();
        styles.insert(0u8, vec![
            random_image(&mut rng, 16, 16, 10, 120),
            random_image(&mut rng, 16, 16, 50, 160),
            random_image(&mut rng, 16, 16, 90, 200),
        ]);
        styles.insert(1u8, vec![random_image(&mut rng, 16, 16, 130, 250)]);
        let bank = StyleBank::new("b", styles, None).unwrap();
        let image = random_image(&mut rng, 20, 20, 20, 235);
        let mask = Array2::from_shape_fn((20, 20), |(y, _)| (y % 2) as u8);
        let content = labeled("det", image.clone(), mask);
        let assignment = assign_classes(2, 2, None).unwrap();
        let backend = TransferBackend::Statistical;
        let a = stylize_per_class(&content, &bank, &assignment, &backend, 42).unwrap();
        let b = stylize_per_class(&content, &bank, &assignment, &backend, 42).unwrap();
        assert_eq!(a.sample.image, b.sample.image);
        assert_eq!(a.styles_used, b.styles_used);

        let all_ignored = labeled(
            "ig",
            image.clone(),
            Array2::from_elem((20, 20), IGNORE_LABEL),
        );
        assert!(stylize_per_class(&all_ignored, &bank, &assignment, &backend, 1).is_err());

        let unknown_class = labeled("uc", image, Array2::from_elem((20, 20), 5u8));
        assert!(stylize_per_class(&unknown_class, &bank, &assignment, &backend, 1).is_err());
    }

    #[test]
    fn class_assignment_follows_the_stated_rules() {
        let id = assign_classes(2, 2, None).unwrap();
        assert_eq!(id, BTreeMap::from([(0, 0), (1, 1)]));
        assert!(assign_classes(2, 3, None).is_err());
        let rr = assign_classes(4, 2, None).unwrap();
        assert_eq!(rr, BTreeMap::from([(0, 0), (1, 1), (2, 0), (3, 1)]));

        let explicit = BTreeMap::from([(0u8, 1u8), (1, 0)]);
        assert_eq!(assign_classes(2, 2, Some(&explicit)).unwrap(), explicit);
        let out_of_range = BTreeMap::from([(0u8, 2u8), (1, 0)]);
        assert!(assign_classes(2, 2, Some(&out_of_range)).is_err());
        let incomplete = BTreeMap::from([(0u8, 0u8)]);
        assert!(assign_classes(2, 2, Some(&incomplete)).is_err());
    }

    #[test]
    fn neural_backend_is_deterministic_and_alpha_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let image = random_image(&mut rng, 20, 20, 20, 235);
        let patch = random_image(&mut rng, 16, 16, 60, 195);
        let content = labeled("n", image.clone(), Array2::zeros((20, 20)));

        let b1 = TransferBackend::neural_seeded(3, 1.0).unwrap();
        let b2 = TransferBackend::neural_seeded(3, 1.0).unwrap();
        let o1 = stylize_global(&content, &patch, &b1).unwrap();
        let o2 = stylize_global(&content, &patch, &b2).unwrap();
        assert_eq!(o1.sample.image, o2.sample.image);

        let id = TransferBackend::neural_seeded(3, 0.0).unwrap();
        let oid = stylize_global(&content, &patch, &id).unwrap();
        assert_eq!(oid.sample.image, image);

        let missing = TransferBackend::Neural { alpha: 1.0, weights: None };
        let err = stylize_global(&content, &patch, &missing).err().unwrap();
        assert!(err.to_string().contains("missing"), "{err}");

        let bad_alpha = TransferBackend::neural_seeded(3, 1.5).unwrap();
        assert!(stylize_global(&content, &patch, &bad_alpha).is_err());
    }

    #[test]
    fn neural_weights_round_trip_through_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let image = random_image(&mut rng, 20, 20, 20, 235);
        let patch = random_image(&mut rng, 16, 16, 60, 195);
        let content = labeled("rt", image, Array2::zeros((20, 20)));

        let weights = NeuralWeights::seeded(9).unwrap();
        let (enc, dec) = weights.to_blobs().unwrap();
        let restored = NeuralWeights::from_blobs(&enc, &dec).unwrap();
        let a = stylize_global(
            &content,
            &patch,
            &TransferBackend::Neural { alpha: 1.0, weights: Some(weights) },
        )
        .unwrap();
        let b = stylize_global(
            &content,
            &patch,
            &TransferBackend::Neural { alpha: 1.0, weights: Some(restored) },
        )
        .unwrap();
        assert_eq!(a.sample.image, b.sample.image);

        assert!(NeuralWeights::from_blobs(&enc, &enc).is_err());
    }

    #[test]
    fn bank_validation_catches_bad_banks() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let small = BTreeMap::from([(0u8, vec![random_image(&mut rng, 8, 16, 0, 255)])]);
        assert!(StyleBank::new("s", small, None).is_err());
        let gap = BTreeMap::from([(1u8, vec![random_image(&mut rng, 16, 16, 0, 255)])]);
        assert!(StyleBank::new("g", gap, None).is_err());
        let empty_class = BTreeMap::from([(0u8, vec![])]);
        assert!(StyleBank::new("e", empty_class, None).is_err());
        assert!(StyleBank::new("n", BTreeMap::new(), None).is_err());
    }

    #[test]
    fn bank_save_load_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let bank = two_class_bank(&mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = save_style_bank(&bank, dir.path()).unwrap();
        let loaded = StyleBank::load(&path).unwrap();
        assert_eq!(loaded.num_classes(), 2);
        assert_eq!(loaded.source_note, "test bank");
        for c in 0..2 {
            assert_eq!(loaded.patches(c).unwrap(), bank.patches(c).unwrap());
        }
        assert_eq!(
            loaded.conventional_patch().unwrap(),
            bank.conventional_patch().unwrap()
        );
    }

    fn write_dataset(dir: &Path, rng: &mut ChaCha8Rng, n: usize) -> DatasetManifest {
        use crate::dataset::encode_mask;
        let image_dir = dir.join("images");
        let mask_dir = dir.join("masks");
        std::fs::create_dir_all(&image_dir).unwrap();
        std::fs::create_dir_all(&mask_dir).unwrap();
        let mut manifest =
            DatasetManifest::new("src", 2, vec!["bg".into(), "fg".into()], dir).unwrap();
        for i in 0..n {
            let image = random_image(rng, 20, 20, 20, 235);
            let mask = Array2::from_shape_fn((20, 20), |(y, x)| ((y / 3 + x / 3) % 2) as u8);
            let image_rel = PathBuf::from(format!("images/s{i}.png"));
            let mask_rel = PathBuf::from(format!("masks/s{i}.png"));
            encode_image(&image, dir.join(&image_rel)).unwrap();
            encode_mask(&mask, dir.join(&mask_rel)).unwrap();
            manifest.samples.push(SampleRef {
                id: format!("s{i}"),
                image: image_rel,
                mask: mask_rel,
            });
        }
        manifest.save(dir.join("manifest.json")).unwrap();
        manifest
    }

    #[test]
    fn dataset_stylization_modes_behave_as_specified() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let src_dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(src_dir.path(), &mut rng, 4);
        let bank = two_class_bank(&mut rng);
        let backend = TransferBackend::Statistical;

        // mode=none: pixel-identical copy, masks byte-identical, no bank needed.
        let none_dir = tempfile::tempdir().unwrap();
        let none =
            stylize_dataset(&manifest, None, StylizeMode::None, &backend, 1, none_dir.path())
                .unwrap();
        assert_eq!(none.samples.len(), 4);
        for (a, b) in manifest.samples.iter().zip(none.samples.iter()) {
            let sa = manifest.load_sample(a).unwrap();
            let sb = none.load_sample(b).unwrap();
            assert_eq!(sa.image, sb.image);
            assert_eq!(sa.mask, sb.mask);
            let mask_bytes_a = std::fs::read(manifest.root().join(&a.mask)).unwrap();
            let mask_bytes_b = std::fs::read(none.root().join(&b.mask)).unwrap();
            assert_eq!(mask_bytes_a, mask_bytes_b);
        }

        // mode=advanced: every sample passes the pixel-selection oracle.
        let adv_dir = tempfile::tempdir().unwrap();
        let adv = stylize_dataset(
            &manifest,
            Some(&bank),
            StylizeMode::Advanced,
            &backend,
            7,
            adv_dir.path(),
        )
        .unwrap();
        let assignment = assign_classes(2, 2, None).unwrap();
        for (orig_ref, new_ref) in manifest.samples.iter().zip(adv.samples.iter()) {
            let orig = manifest.load_sample(orig_ref).unwrap();
            let got = adv.load_sample(new_ref).unwrap();
            let expect = stylize_per_class(&orig, &bank, &assignment, &backend, 7).unwrap();
            assert_eq!(got.image, expect.sample.image, "sample {}", orig_ref.id);
            assert_eq!(got.mask, orig.mask);
        }
        assert!(adv_dir.path().join("stylization.json").exists());

        // mode=conventional requires a bank carrying the designated patch.
        let no_conv = StyleBank::new(
            "nc",
            BTreeMap::from([
                (0u8, vec![random_image(&mut rng, 16, 16, 10, 120)]),
                (1u8, vec![random_image(&mut rng, 16, 16, 130, 250)]),
            ]),
            None,
        )
        .unwrap();
        let conv_dir = tempfile::tempdir().unwrap();
        assert!(stylize_dataset(
            &manifest,
            Some(&no_conv),
            StylizeMode::Conventional,
            &backend,
            1,
            conv_dir.path()
        )
        .is_err());
        assert!(stylize_dataset(
            &manifest,
            None,
            StylizeMode::Conventional,
            &backend,
            1,
            conv_dir.path()
        )
        .is_err());
        let conv = stylize_dataset(
            &manifest,
            Some(&bank),
            StylizeMode::Conventional,
            &backend,
            1,
            conv_dir.path(),
        )
        .unwrap();
        for (orig_ref, new_ref) in manifest.samples.iter().zip(conv.samples.iter()) {
            let orig = manifest.load_sample(orig_ref).unwrap();
            let got = conv.load_sample(new_ref).unwrap();
            let expect =
                stylize_global(&orig, bank.conventional_patch().unwrap(), &backend).unwrap();
            assert_eq!(got.image, expect.sample.image);
        }
    }

    #[test]
    fn conventional_equals_advanced_on_single_class_masks_with_shared_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        // All masks are class 0 and the conventional patch IS class 0's patch.
        let class0 = random_image(&mut rng, 16, 16, 10, 120);
        let bank = StyleBank::new(
            "shared",
            BTreeMap::from([
                (0u8, vec![class0.clone()]),
                (1u8, vec![random_image(&mut rng, 16, 16, 130, 250)]),
            ]),
            Some(class0),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let image_dir = dir.path().join("images");
        let mask_dir = dir.path().join("masks");
        std::fs::create_dir_all(&image_dir).unwrap();
        std::fs::create_dir_all(&mask_dir).unwrap();
        let mut manifest =
            DatasetManifest::new("one", 2, vec!["bg".into(), "fg".into()], dir.path()).unwrap();
        for i in 0..2 {
            let image = random_image(&mut rng, 20, 20, 20, 235);
            encode_image(&image, dir.path().join(format!("images/s{i}.png"))).unwrap();
            crate::dataset::encode_mask(
                &Array2::zeros((20, 20)),
                dir.path().join(format!("masks/s{i}.png")),
            )
            .unwrap();
            manifest.samples.push(SampleRef {
                id: format!("s{i}"),
                image: PathBuf::from(format!("images/s{i}.png")),
                mask: PathBuf::from(format!("masks/s{i}.png")),
            });
        }
        manifest.save(dir.path().join("manifest.json")).unwrap();

        let backend = TransferBackend::Statistical;
        let conv_dir = tempfile::tempdir().unwrap();
        let adv_dir = tempfile::tempdir().unwrap();
        let conv = stylize_dataset(
            &manifest,
            Some(&bank),
            StylizeMode::Conventional,
            &backend,
            3,
            conv_dir.path(),
        )
        .unwrap();
        let adv = stylize_dataset(
            &manifest,
            Some(&bank),
            StylizeMode::Advanced,
            &backend,
            3,
            adv_dir.path(),
        )
        .unwrap();
        for (a, b) in conv.samples.iter().zip(adv.samples.iter()) {
            assert_eq!(
                conv.load_sample(a).unwrap().image,
                adv.load_sample(b).unwrap().image
            );
        }
    }
}
