//! The segmentation network: a multi-resolution backbone that keeps a
//! full-detail branch alive end to end, an optional atrous context module,
//! and a choice of decoder or FCN head — plus the five ablation variants
//! that bridge the baseline head and the final texture-sensitive wiring.

mod arch;
mod checkpoint;

pub use arch::FeatureVars;
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};

use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Buffers, Graph, ParamStore, Scalar, Var};

/// Fixed per-channel normalization constants (pixel/255 − mean)/std; recorded
/// in every checkpoint sidecar so saved models stay portable.
pub const NORM_MEAN: [f64; 3] = [0.5, 0.5, 0.5];
pub const NORM_STD: [f64; 3] = [0.5, 0.5, 0.5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    /// Low-level-fusion decoder head.
    Decoder,
    /// Baseline pointwise-convolution head.
    Fcn,
}

/// Which stem features the decoder fuses as its low-level input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LowLevel {
    /// First stem convolution: 1/2 resolution — maximum texture detail.
    Conv1,
    /// Second stem convolution: 1/4 resolution.
    Conv2,
}

/// Complete architectural description of one network variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegConfig {
    pub num_classes: usize,
    /// Channel widths of the four resolution branches (1/4 … 1/32).
    pub branch_widths: [usize; 4],
    /// Residual blocks in the initial layer and in each subsequent stage.
    pub stage_depths: [usize; 4],
    pub head: Head,
    pub use_aspp: bool,
    pub low_level: LowLevel,
    pub aspp_out_channels: usize,
    pub aspp_rates: Vec<usize>,
    /// Width of the decoder fusion blocks.
    pub decoder_channels: usize,
    /// Channels the low-level features are projected to before fusion.
    pub low_level_channels: usize,
}

impl Default for SegConfig {
    /// Full-scale final variant: W48 widths, decoder head fusing the first
    /// stem convolution, context module enabled.
    fn default() -> Self {
        SegConfig {
            num_classes: 2,
            branch_widths: [48, 96, 192, 384],
            stage_depths: [4, 4, 4, 4],
            head: Head::Decoder,
            use_aspp: true,
            low_level: LowLevel::Conv1,
            aspp_out_channels: 256,
            aspp_rates: vec![1, 6, 12, 18],
            decoder_channels: 256,
            low_level_channels: 48,
        }
    }
}

impl SegConfig {
    /// Desk-scale preset: small widths and single-block stages, with context
    /// rates sized for small feature maps. Same wiring as the full model.
    pub fn toy(num_classes: usize) -> Self {
        SegConfig {
            num_classes,
            branch_widths: [8, 16, 32, 64],
            stage_depths: [1, 1, 1, 1],
            aspp_out_channels: 48,
            aspp_rates: vec![1, 2, 3],
            decoder_channels: 32,
            low_level_channels: 16,
            ..SegConfig::default()
        }
    }

    /// Channels of the concatenated multi-branch backbone output.
    pub fn backbone_channels(&self) -> usize {
        self.branch_widths.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::validation(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.branch_widths.iter().any(|&w| w == 0)
            || self.stage_depths.iter().any(|&d| d == 0)
        {
            return Err(Error::validation(
                "branch widths and stage depths must all be positive",
            ));
        }
        if self.head == Head::Fcn && self.use_aspp {
            return Err(Error::validation(
                "the fcn head is the plain baseline wiring and cannot be combined \
                 with the context module",
            ));
        }
        if self.use_aspp {
            if self.aspp_rates.is_empty() {
                return Err(Error::validation("aspp_rates must not be empty"));
            }
            if self.aspp_rates.iter().any(|&r| r == 0) {
                return Err(Error::validation("aspp_rates must be positive"));
            }
            if self.aspp_out_channels == 0 {
                return Err(Error::validation("aspp_out_channels must be positive"));
            }
        }
        if self.head == Head::Decoder
            && (self.decoder_channels == 0 || self.low_level_channels == 0)
        {
            return Err(Error::validation("decoder channel widths must be positive"));
        }
        Ok(())
    }
}

/// The five head/fusion ablation variants, from the plain baseline head (a)
/// to the final configuration (e).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationTag {
    A,
    B,
    C,
    D,
    E,
}

impl std::str::FromStr for AblationTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(AblationTag::A),
            "b" => Ok(AblationTag::B),
            "c" => Ok(AblationTag::C),
            "d" => Ok(AblationTag::D),
            "e" => Ok(AblationTag::E),
            other => Err(Error::validation(format!(
                "unknown ablation tag {other:?}; expected one of a-e"
            ))),
        }
    }
}

/// Rewire `base` into one ablation variant:
/// a = FCN head; b/c = decoder fusing the 1/4-resolution stem features
/// (without/with context module); d/e = decoder fusing the 1/2-resolution
/// stem features (without/with context module). (e) is the final network.
pub fn ablation_variant(tag: AblationTag, base: &SegConfig) -> SegConfig {
    let mut config = base.clone();
    match tag {
        AblationTag::A => {
            config.head = Head::Fcn;
            config.use_aspp = false;
        }
        AblationTag::B => {
            config.head = Head::Decoder;
            config.low_level = LowLevel::Conv2;
            config.use_aspp = false;
        }
        AblationTag::C => {
            config.head = Head::Decoder;
            config.low_level = LowLevel::Conv2;
            config.use_aspp = true;
        }
        AblationTag::D => {
            config.head = Head::Decoder;
            config.low_level = LowLevel::Conv1;
            config.use_aspp = false;
        }
        AblationTag::E => {
            config.head = Head::Decoder;
            config.low_level = LowLevel::Conv1;
            config.use_aspp = true;
        }
    }
    config
}

/// A built network: config, wiring, parameters and batch-norm state.
pub struct Model<S: Scalar> {
    config: SegConfig,
    seed: u64,
    pub params: ParamStore<S>,
    pub buffers: Buffers<S>,
    arch: arch::Arch,
}

impl<S: Scalar> Model<S> {
    /// Construct and deterministically initialize a network. Two builds with
    /// the same (config, seed) hold bit-identical parameters.
    pub fn build(config: SegConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let arch = arch::Arch::new(&config);
        let mut params = ParamStore::new();
        let mut buffers = Buffers::new();
        arch.init(&mut params, &mut buffers, seed)?;
        Ok(Model {
            config,
            seed,
            params,
            buffers,
            arch,
        })
    }

    /// Rebuild from saved state, verifying every parameter and buffer of a
    /// fresh build is present with the right shape.
    pub fn from_parts(
        config: SegConfig,
        seed: u64,
        params: ParamStore<S>,
        buffers: Buffers<S>,
    ) -> Result<Self> {
        let fresh: Model<S> = Model::build(config, seed)?;
        for (name, value) in fresh.params.iter() {
            let loaded = params.get(name)?;
            if loaded.shape() != value.shape() {
                return Err(Error::validation(format!(
                    "parameter {name}: shape {:?} does not match architecture {:?}",
                    loaded.shape(),
                    value.shape()
                )));
            }
        }
        if params.len() != fresh.params.len() {
            return Err(Error::validation(format!(
                "parameter count {} does not match architecture {}",
                params.len(),
                fresh.params.len()
            )));
        }
        for (name, value) in fresh.buffers.to_map() {
            let loaded = buffers.get(&name)?;
            if loaded.shape() != value.shape() {
                return Err(Error::validation(format!(
                    "buffer {name}: shape {:?} does not match architecture {:?}",
                    loaded.shape(),
                    value.shape()
                )));
            }
        }
        Ok(Model {
            arch: fresh.arch,
            config: fresh.config,
            seed,
            params,
            buffers,
        })
    }

    pub fn config(&self) -> &SegConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Run the network on a normalized batch. The returned graph can drive a
    /// backward pass (training mode) and carries queued batch-norm updates.
    pub fn forward(
        &self,
        batch: &Array4<S>,
        training: bool,
    ) -> Result<(Graph<'_, S>, Var, FeatureVars)> {
        let mut g = Graph::new(&self.params, &self.buffers, training);
        let (logits, features) = self.arch.forward(&mut g, batch)?;
        Ok((g, logits, features))
    }

    /// Fold queued batch-norm running-stat updates back into the model.
    pub fn apply_buffer_updates(&mut self, updates: Vec<(String, ndarray::ArrayD<S>)>) -> Result<()> {
        for (name, value) in updates {
            *self.buffers.get_mut(&name)? = value;
        }
        Ok(())
    }

    /// Whole-image prediction: normalize, evaluation-mode forward, argmax.
    pub fn predict(&self, image: &Array3<u8>) -> Result<Array2<u8>> {
        let batch = normalize_images::<S>(&[image])?;
        let (g, logits, _) = self.forward(&batch, false)?;
        let classes = argmax_classes(g.value(logits));
        Ok(classes.index_axis(ndarray::Axis(0), 0).to_owned())
    }
}

/// Stack H×W×3 byte images into a normalized (B, 3, H, W) batch.
pub fn normalize_images<S: Scalar>(images: &[&Array3<u8>]) -> Result<Array4<S>> {
    let Some(first) = images.first() else {
        return Err(Error::validation("cannot build an empty batch"));
    };
    let (h, w, _) = first.dim();
    for (i, img) in images.iter().enumerate() {
        if img.dim() != (h, w, 3) {
            return Err(Error::validation(format!(
                "batch image {i} has shape {:?}, expected {:?}",
                img.dim(),
                (h, w, 3)
            )));
        }
    }
    let mut out = Array4::zeros((images.len(), 3, h, w));
    for (b, img) in images.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = f64::from(img[[y, x, c]]) / 255.0;
                    out[[b, c, y, x]] = S::from_f64((v - NORM_MEAN[c]) / NORM_STD[c]);
                }
            }
        }
    }
    Ok(out)
}

/// Per-pixel argmax over the class axis; ties go to the lowest class index.
pub fn argmax_classes<S: Scalar>(logits: &Array4<S>) -> Array3<u8> {
    let (b, c, h, w) = logits.dim();
    debug_assert!(c <= 255, "class count must leave 255 free as ignore");
    let mut out = Array3::zeros((b, h, w));
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let mut best = 0usize;
                let mut best_v = logits[[bi, 0, y, x]];
                for ci in 1..c {
                    let v = logits[[bi, ci, y, x]];
                    if v > best_v {
                        best_v = v;
                        best = ci;
                    }
                }
                out[[bi, y, x]] = best as u8;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> SegConfig {
        SegConfig {
            num_classes: 2,
            branch_widths: [3, 4, 5, 6],
            stage_depths: [1, 1, 1, 1],
            aspp_out_channels: 6,
            aspp_rates: vec![1],
            decoder_channels: 8,
            low_level_channels: 4,
            ..SegConfig::default()
        }
    }

    #[test]
    fn w48_widths_yield_720_backbone_channels() {
        // Full widths with single-block stages: the channel count depends
        // only on the widths.
        let config = SegConfig {
            stage_depths: [1, 1, 1, 1],
            ..SegConfig::default()
        };
        assert_eq!(config.backbone_channels(), 720);
        let model = Model::<f32>::build(config, 3).unwrap();
        let batch = Array4::zeros((1, 3, 128, 128));
        let (g, logits, features) = model.forward(&batch, false).unwrap();
        assert_eq!(g.value(features.backbone).dim(), (1, 720, 32, 32));
        assert_eq!(g.value(features.conv1).dim(), (1, 64, 64, 64));
        assert_eq!(g.value(features.conv2).dim(), (1, 64, 32, 32));
        assert_eq!(g.value(features.aspp.unwrap()).dim(), (1, 256, 32, 32));
        assert_eq!(g.value(logits).dim(), (1, 2, 128, 128));
    }

    #[test]
    fn toy_widths_yield_120_backbone_channels() {
        let config = SegConfig::toy(2);
        assert_eq!(config.backbone_channels(), 120);
        let model = Model::<f32>::build(config, 1).unwrap();
        let batch = Array4::zeros((1, 3, 32, 32));
        let (g, _, features) = model.forward(&batch, false).unwrap();
        assert_eq!(g.value(features.backbone).dim(), (1, 120, 8, 8));
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let a = Model::<f32>::build(SegConfig::toy(3), 77).unwrap();
        let b = Model::<f32>::build(SegConfig::toy(3), 77).unwrap();
        assert_eq!(a.params.len(), b.params.len());
        for (name, pa) in a.params.iter() {
            let pb = b.params.get(name).unwrap();
            for (x, y) in pa.iter().zip(pb.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name}");
            }
        }
        let c = Model::<f32>::build(SegConfig::toy(3), 78).unwrap();
        let wa = a.params.get("stem.conv1.weight").unwrap();
        let wc = c.params.get("stem.conv1.weight").unwrap();
        assert!(wa.iter().zip(wc.iter()).any(|(x, y)| x != y));
    }

    #[test]
    fn all_five_variants_build_and_produce_correct_shapes() {
        let base = SegConfig::toy(2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = Array4::from_shape_fn((1, 3, 64, 64), |_| rng.random_range(-1.0..1.0f32));
        for tag in [
            AblationTag::A,
            AblationTag::B,
            AblationTag::C,
            AblationTag::D,
            AblationTag::E,
        ] {
            let config = ablation_variant(tag, &base);
            config.validate().unwrap();
            let model = Model::<f32>::build(config, 9).unwrap();
            let (g, logits, _) = model.forward(&batch, false).unwrap();
            assert_eq!(g.value(logits).dim(), (1, 2, 64, 64), "{tag:?}");
            assert!(
                g.value(logits).iter().all(|v| v.is_finite()),
                "{tag:?} produced non-finite logits"
            );
        }
    }

    #[test]
    fn variant_wiring_matches_the_ablation_table() {
        let base = SegConfig::toy(2);
        let e = ablation_variant(AblationTag::E, &base);
        assert_eq!(e.head, Head::Decoder);
        assert!(e.use_aspp);
        assert_eq!(e.low_level, LowLevel::Conv1);
        let a = ablation_variant(AblationTag::A, &base);
        assert_eq!(a.head, Head::Fcn);
        assert!(!a.use_aspp);
        let b = ablation_variant(AblationTag::B, &base);
        assert_eq!((b.head, b.use_aspp, b.low_level), (Head::Decoder, false, LowLevel::Conv2));
        let c = ablation_variant(AblationTag::C, &base);
        assert_eq!((c.head, c.use_aspp, c.low_level), (Head::Decoder, true, LowLevel::Conv2));
        let d = ablation_variant(AblationTag::D, &base);
        assert_eq!((d.head, d.use_aspp, d.low_level), (Head::Decoder, false, LowLevel::Conv1));
    }

    #[test]
    fn rectangular_input_and_class_count_respected() {
        let mut config = SegConfig::toy(4);
        config.num_classes = 4;
        let model = Model::<f32>::build(config, 2).unwrap();
        let batch = Array4::zeros((2, 3, 96, 64));
        let (g, logits, _) = model.forward(&batch, false).unwrap();
        assert_eq!(g.value(logits).dim(), (2, 4, 96, 64));
    }

    #[test]
    fn all_zero_input_produces_finite_logits() {
        let model = Model::<f32>::build(SegConfig::toy(2), 11).unwrap();
        let batch = Array4::zeros((1, 3, 32, 32));
        let (g, logits, _) = model.forward(&batch, false).unwrap();
        assert!(g.value(logits).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let model = Model::<f32>::build(SegConfig::toy(2), 0).unwrap();
        assert!(model.forward(&Array4::zeros((1, 3, 30, 32)), false).is_err());
        assert!(model.forward(&Array4::zeros((1, 1, 32, 32)), false).is_err());
    }

    #[test]
    fn fcn_with_aspp_is_rejected() {
        let mut config = SegConfig::toy(2);
        config.head = Head::Fcn;
        config.use_aspp = true;
        assert!(config.validate().is_err());
    }

    #[test]
    fn degenerate_aspp_rate_is_rejected_at_forward() {
        let mut config = SegConfig::toy(2);
        config.aspp_rates = vec![1, 6];
        let model = Model::<f32>::build(config, 0).unwrap();
        // 16×16 input → 4×4 features; a dilation of 6 has no valid taps.
        let err = model.forward(&Array4::zeros((1, 3, 16, 16)), false).err().unwrap();
        assert!(err.to_string().contains("degenerate"), "{err}");
    }

    #[test]
    fn permuting_classifier_rows_permutes_logit_channels() {
        let mut config = SegConfig::toy(3);
        config.num_classes = 3;
        let mut model = Model::<f32>::build(config, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let batch = Array4::from_shape_fn((1, 3, 32, 32), |_| rng.random_range(-1.0..1.0f32));
        let (g, logits, _) = model.forward(&batch, false).unwrap();
        let before = g.value(logits).clone();
        drop(g);

        let perm = [2usize, 0, 1];
        let w = model.params.get("decoder.classifier.weight").unwrap().as_ref().clone();
        let b = model.params.get("decoder.classifier.bias").unwrap().as_ref().clone();
        let mut wp = w.clone();
        let mut bp = b.clone();
        for (dst, &src) in perm.iter().enumerate() {
            wp.index_axis_mut(ndarray::Axis(0), dst)
                .assign(&w.index_axis(ndarray::Axis(0), src));
            bp[[dst]] = b[[src]];
        }
        *model.params.get_mut("decoder.classifier.weight").unwrap() = wp;
        *model.params.get_mut("decoder.classifier.bias").unwrap() = bp;

        let (g, logits, _) = model.forward(&batch, false).unwrap();
        let after = g.value(logits);
        for (dst, &src) in perm.iter().enumerate() {
            let expect = before.index_axis(ndarray::Axis(1), src);
            let got = after.index_axis(ndarray::Axis(1), dst);
            for (e, o) in expect.iter().zip(got.iter()) {
                assert!((e - o).abs() <= 1e-6, "channel {dst} from {src}");
            }
        }
    }

    #[test]
    fn normalization_maps_pixel_range_onto_unit_interval() {
        let img = ndarray::Array3::from_shape_fn((4, 4, 3), |(y, x, _)| {
            if (y + x) % 2 == 0 {
                0u8
            } else {
                255
            }
        });
        let batch = normalize_images::<f32>(&[&img]).unwrap();
        for v in batch.iter() {
            assert!(*v == -1.0 || (*v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn argmax_breaks_ties_toward_lower_class() {
        let mut logits = Array4::<f32>::zeros((1, 3, 1, 2));
        logits[[0, 2, 0, 1]] = 1.0;
        let classes = argmax_classes(&logits);
        assert_eq!(classes[[0, 0, 0]], 0);
        assert_eq!(classes[[0, 0, 1]], 2);
    }

    /// The differentiability contract: on a tiny config and 8×8 input, the
    /// analytic gradient of the mean logit matches central finite differences
    /// at relative error 1e-3 for ≥ 99% of 100 sampled parameters.
    #[test]
    fn parameter_gradients_match_finite_differences() {
        let config = tiny_config();
        let mut model = Model::<f64>::build(config, 31).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let batch = Array4::from_shape_fn((2, 3, 8, 8), |_| rng.random_range(-1.0..1.0));

        let mean_logit = |model: &Model<f64>| -> f64 {
            let (g, logits, _) = model.forward(&batch, true).unwrap();
            let v = g.value(logits);
            v.sum() / v.len() as f64
        };

        let (analytic, numel) = {
            let (g, logits, _) = model.forward(&batch, true).unwrap();
            let n = g.value(logits).len() as f64;
            let seed = Array4::from_elem(g.value(logits).dim(), 1.0 / n);
            (g.backward(logits, seed).unwrap().params, n)
        };
        assert!(numel > 0.0);

        // Sample 100 (parameter, element) coordinates.
        let names: Vec<String> = model.params.names().map(str::to_owned).collect();
        let mut checked = 0;
        let mut passed = 0;
        let h = 1e-5;
        while checked < 100 {
            let name = &names[rng.random_range(0..names.len())];
            let flat = {
                let p = model.params.get(name).unwrap();
                rng.random_range(0..p.len())
            };
            let ix = {
                let p = model.params.get(name).unwrap();
                p.indexed_iter().nth(flat).unwrap().0
            };
            let orig = model.params.get(name).unwrap()[&ix];
            model.params.get_mut(name).unwrap()[&ix] = orig + h;
            let plus = mean_logit(&model);
            model.params.get_mut(name).unwrap()[&ix] = orig - h;
            let minus = mean_logit(&model);
            model.params.get_mut(name).unwrap()[&ix] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(name).map_or(0.0, |g| g[&ix]);
            let denom = a.abs().max(numeric.abs()).max(1e-4);
            if (a - numeric).abs() / denom <= 1e-3 {
                passed += 1;
            }
            checked += 1;
        }
        assert!(
            passed >= 99,
            "only {passed}/100 sampled parameter gradients matched finite differences"
        );
    }
}
