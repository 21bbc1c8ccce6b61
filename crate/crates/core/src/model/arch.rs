//! Layer declarations and wiring for the segmentation network.
//!
//! Each layer struct owns its dotted parameter-name prefix and knows both how
//! to initialize its parameters and how to apply itself to a [`Graph`], so
//! initialization and forward wiring can never drift apart.

use ndarray::{Array4, ArrayD, IxDyn};
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{Head, LowLevel, SegConfig};
use crate::nn::{Buffers, Graph, ParamStore, Scalar, Var};
use crate::rng::derived_rng;

/// A convolution layer declaration.
pub(crate) struct Conv {
    name: String,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
    bias: bool,
}

impl Conv {
    fn new(
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        bias: bool,
    ) -> Self {
        Conv {
            name: name.into(),
            cin,
            cout,
            k,
            stride,
            // "Same"-style padding for odd kernels; 1×1 kernels get none.
            padding: dilation * (k - 1) / 2,
            dilation,
            bias,
        }
    }

    /// He-normal weights (fan-out scaling) sampled in f64 from a stream
    /// derived from the parameter name, then cast — so f32 and f64 builds of
    /// the same seed hold the same numbers and build order is irrelevant.
    fn init<S: Scalar>(&self, params: &mut ParamStore<S>, seed: u64) -> Result<()> {
        let wname = format!("{}.weight", self.name);
        let std = (2.0 / (self.cout * self.k * self.k) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("std is positive and finite");
        let mut rng = derived_rng(seed, &wname, 0);
        let n = self.cout * self.cin * self.k * self.k;
        let values: Vec<S> = (0..n)
            .map(|_| S::from_f64(normal.sample(&mut rng)))
            .collect();
        let w = ArrayD::from_shape_vec(IxDyn(&[self.cout, self.cin, self.k, self.k]), values)
            .expect("shape matches element count");
        params.insert(wname, w)?;
        if self.bias {
            params.insert(
                format!("{}.bias", self.name),
                ArrayD::zeros(IxDyn(&[self.cout])),
            )?;
        }
        Ok(())
    }

    fn forward<S: Scalar>(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let bias_name = self.bias.then(|| format!("{}.bias", self.name));
        g.conv2d(
            x,
            &format!("{}.weight", self.name),
            bias_name.as_deref(),
            self.stride,
            self.padding,
            self.dilation,
        )
    }
}

/// Convolution + batch norm (+ optional ReLU), the building unit of the
/// whole network.
pub(crate) struct ConvBn {
    conv: Conv,
    bn_prefix: String,
    relu: bool,
}

impl ConvBn {
    fn new(
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        relu: bool,
    ) -> Self {
        let name = name.into();
        let bn_prefix = format!("{name}.bn");
        ConvBn {
            conv: Conv::new(name, cin, cout, k, stride, dilation, false),
            bn_prefix,
            relu,
        }
    }

    fn init<S: Scalar>(
        &self,
        params: &mut ParamStore<S>,
        buffers: &mut Buffers<S>,
        seed: u64,
    ) -> Result<()> {
        self.conv.init(params, seed)?;
        let c = self.conv.cout;
        params.insert(format!("{}.gamma", self.bn_prefix), ArrayD::ones(IxDyn(&[c])))?;
        params.insert(format!("{}.beta", self.bn_prefix), ArrayD::zeros(IxDyn(&[c])))?;
        buffers.insert(
            format!("{}.running_mean", self.bn_prefix),
            ArrayD::zeros(IxDyn(&[c])),
        )?;
        buffers.insert(
            format!("{}.running_var", self.bn_prefix),
            ArrayD::ones(IxDyn(&[c])),
        )?;
        Ok(())
    }

    fn forward<S: Scalar>(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = g.batch_norm(y, &self.bn_prefix)?;
        Ok(if self.relu { g.relu(y) } else { y })
    }
}

/// Residual unit of two 3×3 convolutions at constant width.
struct BasicBlock {
    c1: ConvBn,
    c2: ConvBn,
}

impl BasicBlock {
    fn new(name: &str, width: usize) -> Self {
        BasicBlock {
            c1: ConvBn::new(format!("{name}.conv1"), width, width, 3, 1, 1, true),
            c2: ConvBn::new(format!("{name}.conv2"), width, width, 3, 1, 1, false),
        }
    }

    fn init<S: Scalar>(
        &self,
        params: &mut ParamStore<S>,
        buffers: &mut Buffers<S>,
        seed: u64,
    ) -> Result<()> {
        self.c1.init(params, buffers, seed)?;
        self.c2.init(params, buffers, seed)
    }

    fn forward<S: Scalar>(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let y = self.c1.forward(g, x)?;
        let y = self.c2.forward(g, y)?;
        let y = g.add(x, y)?;
        Ok(g.relu(y))
    }
}

/// How one fused output branch receives one input branch.
enum FusePath {
    /// Same branch: pass through.
    Identity,
    /// From a lower-resolution branch: 1×1 channel projection, then bilinear
    /// upsampling to the target branch's size.
    Up(ConvBn),
    /// From a higher-resolution branch: a chain of stride-2 3×3 convolutions,
    /// the last one switching to the target width.
    Down(Vec<ConvBn>),
}

/// One multi-branch stage: per-branch residual blocks followed by all-to-all
/// cross-resolution fusion.
struct Stage {
    branches: Vec<Vec<BasicBlock>>,
    /// `fuse[i][j]` carries branch `j`'s features into output branch `i`.
    fuse: Vec<Vec<FusePath>>,
}

impl Stage {
    fn new(index: usize, widths: &[usize], depth: usize) -> Self {
        let nb = widths.len();
        let branches = (0..nb)
            .map(|b| {
                (0..depth)
                    .map(|n| BasicBlock::new(&format!("stage{index}.branch{b}.block{n}"), widths[b]))
                    .collect()
            })
            .collect();
        let fuse = (0..nb)
            .map(|i| {
                (0..nb)
                    .map(|j| {
                        if i == j {
                            FusePath::Identity
                        } else if j > i {
                            FusePath::Up(ConvBn::new(
                                format!("stage{index}.fuse{i}from{j}"),
                                widths[j],
                                widths[i],
                                1,
                                1,
                                1,
                                false,
                            ))
                        } else {
                            let steps = i - j;
                            FusePath::Down(
                                (0..steps)
                                    .map(|t| {
                                        let last = t + 1 == steps;
                                        ConvBn::new(
                                            format!("stage{index}.fuse{i}from{j}.step{t}"),
                                            widths[j],
                                            if last { widths[i] } else { widths[j] },
                                            3,
                                            2,
                                            1,
                                            !last,
                                        )
                                    })
                                    .collect(),
                            )
                        }
                    })
                    .collect()
            })
            .collect();
        Stage { branches, fuse }
    }

    fn init<S: Scalar>(
        &self,
        params: &mut ParamStore<S>,
        buffers: &mut Buffers<S>,
        seed: u64,
    ) -> Result<()> {
        for blocks in &self.branches {
            for b in blocks {
                b.init(params, buffers, seed)?;
            }
        }
        for row in &self.fuse {
            for path in row {
                match path {
                    FusePath::Identity => {}
                    FusePath::Up(c) => c.init(params, buffers, seed)?,
                    FusePath::Down(cs) => {
                        for c in cs {
                            c.init(params, buffers, seed)?;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn forward<S: Scalar>(&self, g: &mut Graph<S>, inputs: &[Var]) -> Result<Vec<Var>> {
        let nb = self.branches.len();
        let mut after = Vec::with_capacity(nb);
        for (b, blocks) in self.branches.iter().enumerate() {
            let mut x = inputs[b];
            for block in blocks {
                x = block.forward(g, x)?;
            }
            after.push(x);
        }
        let mut outputs = Vec::with_capacity(nb);
        for i in 0..nb {
            let (_, _, th, tw) = g.value(after[i]).dim();
            let mut acc: Option<Var> = None;
            for (j, path) in self.fuse[i].iter().enumerate() {
                let contrib = match path {
                    FusePath::Identity => after[j],
                    FusePath::Up(conv) => {
                        let y = conv.forward(g, after[j])?;
                        g.upsample_bilinear(y, th, tw)
                    }
                    FusePath::Down(convs) => {
                        let mut y = after[j];
                        for conv in convs {
                            y = conv.forward(g, y)?;
                        }
                        y
                    }
                };
                acc = Some(match acc {
                    None => contrib,
                    Some(a) => g.add(a, contrib)?,
                });
            }
            outputs.push(g.relu(acc.expect("at least one branch")));
        }
        Ok(outputs)
    }
}

/// Multi-resolution backbone: two stride-2 stem convolutions, one residual
/// layer at 1/4 resolution, then three transitions that each open a new
/// half-resolution branch, with a fused multi-branch stage after every
/// transition. The output concatenates all branches at 1/4 resolution.
pub(crate) struct Backbone {
    conv1: ConvBn,
    conv2: ConvBn,
    layer1: Vec<BasicBlock>,
    /// transition1 reshapes the stem width into branches 0 and 1; later
    /// transitions derive one new branch from the lowest-resolution one.
    transition1: (ConvBn, ConvBn),
    transition2: ConvBn,
    transition3: ConvBn,
    stage2: Stage,
    stage3: Stage,
    stage4: Stage,
}

/// Width of both stem convolutions and the first residual layer.
pub(crate) const STEM_WIDTH: usize = 64;

impl Backbone {
    pub(crate) fn new(config: &SegConfig) -> Self {
        let w = &config.branch_widths;
        let d = &config.stage_depths;
        Backbone {
            conv1: ConvBn::new("stem.conv1", 3, STEM_WIDTH, 3, 2, 1, true),
            conv2: ConvBn::new("stem.conv2", STEM_WIDTH, STEM_WIDTH, 3, 2, 1, true),
            layer1: (0..d[0])
                .map(|n| BasicBlock::new(&format!("layer1.block{n}"), STEM_WIDTH))
                .collect(),
            transition1: (
                ConvBn::new("transition1.branch0", STEM_WIDTH, w[0], 3, 1, 1, true),
                ConvBn::new("transition1.branch1", STEM_WIDTH, w[1], 3, 2, 1, true),
            ),
            transition2: ConvBn::new("transition2.branch2", w[1], w[2], 3, 2, 1, true),
            transition3: ConvBn::new("transition3.branch3", w[2], w[3], 3, 2, 1, true),
            stage2: Stage::new(2, &w[..2], d[1]),
            stage3: Stage::new(3, &w[..3], d[2]),
            stage4: Stage::new(4, &w[..4], d[3]),
        }
    }

    pub(crate) fn init<S: Scalar>(
        &self,
        params: &mut ParamStore<S>,
        buffers: &mut Buffers<S>,
        seed: u64,
    ) -> Result<()> {
        self.conv1.init(params, buffers, seed)?;
        self.conv2.init(params, buffers, seed)?;
        for b in &self.layer1 {
            b.init(params, buffers, seed)?;
        }
        self.transition1.0.init(params, buffers, seed)?;
        self.transition1.1.init(params, buffers, seed)?;
        self.transition2.init(params, buffers, seed)?;
        self.transition3.init(params, buffers, seed)?;
        self.stage2.init(params, buffers, seed)?;
        self.stage3.init(params, buffers, seed)?;
        self.stage4.init(params, buffers, seed)
    }

    /// Returns (conv1 features at 1/2, conv2 features at 1/4, concatenated
    /// multi-branch features at 1/4).
    pub(crate) fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        x: Var,
    ) -> Result<(Var, Var, Var)> {
        let conv1 = self.conv1.forward(g, x)?;
        let conv2 = self.conv2.forward(g, conv1)?;
        let mut y = conv2;
        for b in &self.layer1 {
            y = b.forward(g, y)?;
        }
        let b0 = self.transition1.0.forward(g, y)?;
        let b1 = self.transition1.1.forward(g, y)?;
        let s2 = self.stage2.forward(g, &[b0, b1])?;
        let b2 = self.transition2.forward(g, s2[1])?;
        let s3 = self.stage3.forward(g, &[s2[0], s2[1], b2])?;
        let b3 = self.transition3.forward(g, s3[2])?;
        let s4 = self.stage4.forward(g, &[s3[0], s3[1], s3[2], b3])?;

        let (_, _, th, tw) = g.value(s4[0]).dim();
        let mut to_concat = vec![s4[0]];
        for &b in &s4[1..] {
            to_concat.push(g.upsample_bilinear(b, th, tw));
        }
        let concat = g.concat_channels(&to_concat)?;
        Ok((conv1, conv2, concat))
    }
}

/// Atrous spatial pyramid pooling: parallel context branches — a 1×1
/// convolution for rate 1, dilated 3×3 convolutions for larger rates, and a
/// global-pooling branch — concatenated and projected to `out_channels`.
pub(crate) struct Aspp {
    rates: Vec<usize>,
    branches: Vec<ConvBn>,
    pool: ConvBn,
    project: ConvBn,
}

impl Aspp {
    pub(crate) fn new(cin: usize, rates: &[usize], out_channels: usize) -> Self {
        let branches = rates
            .iter()
            .enumerate()
            .map(|(k, &rate)| {
                if rate <= 1 {
                    ConvBn::new(format!("aspp.branch{k}"), cin, out_channels, 1, 1, 1, true)
                } else {
                    ConvBn::new(format!("aspp.branch{k}"), cin, out_channels, 3, 1, rate, true)
                }
            })
            .collect();
        Aspp {
            rates: rates.to_vec(),
            branches,
            pool: ConvBn::new("aspp.pool", cin, out_channels, 1, 1, 1, true),
            project: ConvBn::new(
                "aspp.project",
                out_channels * (rates.len() + 1),
                out_channels,
                1,
                1,
                1,
                true,
            ),
        }
    }

    pub(crate) fn init<S: Scalar>(
        &self,
        params: &mut ParamStore<S>,
        buffers: &mut Buffers<S>,
        seed: u64,
    ) -> Result<()> {
        for b in &self.branches {
            b.init(params, buffers, seed)?;
        }
        self.pool.init(params, buffers, seed)?;
        self.project.init(params, buffers, seed)
    }

    pub(crate) fn forward<S: Scalar>(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let (_, _, h, w) = g.value(x).dim();
        for &rate in &self.rates {
            if rate > 1 && rate >= h.min(w) {
                return Err(Error::validation(format!(
                    "ASPP rate {rate} is degenerate for {h}x{w} features: every \
                     dilated tap falls outside the map"
                )));
            }
        }
        let mut outs = Vec::with_capacity(self.branches.len() + 1);
        for b in &self.branches {
            outs.push(b.forward(g, x)?);
        }
        let pooled = g.global_avg_pool(x);
        let pooled = self.pool.forward(g, pooled)?;
        outs.push(g.upsample_bilinear(pooled, h, w));
        let cat = g.concat_channels(&outs)?;
        self.project.forward(g, cat)
    }
}

/// Decoder head in the DeepLabV3+ pattern: upsample deep features to the
/// low-level resolution, fuse with projected low-level features, refine with
/// two 3×3 blocks, classify, and upsample to full resolution.
pub(crate) struct DecoderHead {
    lowlevel: ConvBn,
    fuse1: ConvBn,
    fuse2: ConvBn,
    classifier: Conv,
}

impl DecoderHead {
    pub(crate) fn new(config: &SegConfig, deep_channels: usize) -> Self {
        let llc = config.low_level_channels;
        let dc = config.decoder_channels;
        DecoderHead {
            lowlevel: ConvBn::new("decoder.lowlevel", STEM_WIDTH, llc, 1, 1, 1, true),
            fuse1: ConvBn::new("decoder.fuse1", deep_channels + llc, dc, 3, 1, 1, true),
            fuse2: ConvBn::new("decoder.fuse2", dc, dc, 3, 1, 1, true),
            classifier: Conv::new("decoder.classifier", dc, config.num_classes, 1, 1, 1, true),
        }
    }

    pub(crate) fn init<S: Scalar>(
        &self,
        params: &mut ParamStore<S>,
        buffers: &mut Buffers<S>,
        seed: u64,
    ) -> Result<()> {
        self.lowlevel.init(params, buffers, seed)?;
        self.fuse1.init(params, buffers, seed)?;
        self.fuse2.init(params, buffers, seed)?;
        self.classifier.init(params, seed)
    }

    pub(crate) fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        deep: Var,
        low: Var,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var> {
        let low = self.lowlevel.forward(g, low)?;
        let (_, _, lh, lw) = g.value(low).dim();
        let deep = g.upsample_bilinear(deep, lh, lw);
        let cat = g.concat_channels(&[deep, low])?;
        let y = self.fuse1.forward(g, cat)?;
        let y = self.fuse2.forward(g, y)?;
        let y = self.classifier.forward(g, y)?;
        Ok(g.upsample_bilinear(y, out_h, out_w))
    }
}

/// Baseline head: pointwise convolution stack plus bilinear upsampling.
pub(crate) struct FcnHead {
    conv: ConvBn,
    classifier: Conv,
}

impl FcnHead {
    pub(crate) fn new(channels: usize, num_classes: usize) -> Self {
        FcnHead {
            conv: ConvBn::new("fcn.conv", channels, channels, 1, 1, 1, true),
            classifier: Conv::new("fcn.classifier", channels, num_classes, 1, 1, 1, true),
        }
    }

    pub(crate) fn init<S: Scalar>(
        &self,
        params: &mut ParamStore<S>,
        buffers: &mut Buffers<S>,
        seed: u64,
    ) -> Result<()> {
        self.conv.init(params, buffers, seed)?;
        self.classifier.init(params, seed)
    }

    pub(crate) fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        features: Var,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var> {
        let y = self.conv.forward(g, features)?;
        let y = self.classifier.forward(g, y)?;
        Ok(g.upsample_bilinear(y, out_h, out_w))
    }
}

pub(crate) enum HeadArch {
    Decoder(DecoderHead),
    Fcn(FcnHead),
}

/// The full network wiring derived from a [`SegConfig`].
pub(crate) struct Arch {
    backbone: Backbone,
    aspp: Option<Aspp>,
    head: HeadArch,
    low_level: LowLevel,
}

/// Graph handles for the intermediate features of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct FeatureVars {
    /// After the first stem convolution: 1/2 resolution, stem width.
    pub conv1: Var,
    /// After the second stem convolution: 1/4 resolution, stem width.
    pub conv2: Var,
    /// Concatenated multi-branch output at 1/4 resolution.
    pub backbone: Var,
    /// Context-module output, when the config enables it.
    pub aspp: Option<Var>,
}

impl Arch {
    pub(crate) fn new(config: &SegConfig) -> Self {
        let backbone_channels = config.backbone_channels();
        let aspp = config
            .use_aspp
            .then(|| Aspp::new(backbone_channels, &config.aspp_rates, config.aspp_out_channels));
        let deep_channels = if config.use_aspp {
            config.aspp_out_channels
        } else {
            backbone_channels
        };
        let head = match config.head {
            Head::Decoder => HeadArch::Decoder(DecoderHead::new(config, deep_channels)),
            Head::Fcn => HeadArch::Fcn(FcnHead::new(backbone_channels, config.num_classes)),
        };
        Arch {
            backbone: Backbone::new(config),
            aspp,
            head,
            low_level: config.low_level,
        }
    }

    pub(crate) fn init<S: Scalar>(
        &self,
        params: &mut ParamStore<S>,
        buffers: &mut Buffers<S>,
        seed: u64,
    ) -> Result<()> {
        self.backbone.init(params, buffers, seed)?;
        if let Some(aspp) = &self.aspp {
            aspp.init(params, buffers, seed)?;
        }
        match &self.head {
            HeadArch::Decoder(h) => h.init(params, buffers, seed),
            HeadArch::Fcn(h) => h.init(params, buffers, seed),
        }
    }

    pub(crate) fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        batch: &Array4<S>,
    ) -> Result<(Var, FeatureVars)> {
        let (_, c, h, w) = batch.dim();
        if c != 3 {
            return Err(Error::validation(format!(
                "model input must have 3 channels, got {c}"
            )));
        }
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::validation(format!(
                "model input size {h}x{w} must be a positive multiple of 4"
            )));
        }
        let x = g.leaf(batch.clone());
        let (conv1, conv2, backbone) = self.backbone.forward(g, x)?;
        let aspp = match &self.aspp {
            Some(aspp) => Some(aspp.forward(g, backbone)?),
            None => None,
        };
        let logits = match &self.head {
            HeadArch::Decoder(head) => {
                let deep = aspp.unwrap_or(backbone);
                let low = match self.low_level {
                    LowLevel::Conv1 => conv1,
                    LowLevel::Conv2 => conv2,
                };
                head.forward(g, deep, low, h, w)?
            }
            HeadArch::Fcn(head) => head.forward(g, backbone, h, w)?,
        };
        Ok((
            logits,
            FeatureVars {
                conv1,
                conv2,
                backbone,
                aspp,
            },
        ))
    }
}
