//! Acceptance gate: nine checks, each enforcing a stated tolerance and
//! runtime budget. The harness prints one pass/fail line per check.
//!
//! 1. Metrics equal a brute-force per-pixel oracle to 1e-12.
//! 2. Feature renormalization pins per-channel moments to the style within
//!    1e-5 and is the identity under self-style.
//! 3. The per-class compositor equals whole-image stylization selected by
//!    mask position, byte for byte.
//! 4. Architecture invariants: the full-scale backbone concatenates to 720
//!    channels, all five head/fusion variants build and produce correctly
//!    shaped logits, and analytic gradients match finite differences at
//!    relative error 1e-3.
//! 5. The learning-rate schedule reproduces its anchor values exactly.
//! 6. A toy model overfits two synthetic samples to mIoU >= 0.95 within 200
//!    iterations.
//! 7. Zero-shot arm ordering on the synthetic domains (3-seed median):
//!    advanced >= none + 0.15, advanced >= conventional + 0.05, and
//!    supervised >= advanced.
//! 8. Zero-shot contract: deleting target-domain training masks changes no
//!    training byte of the none/conventional/advanced arms, and training on
//!    the target maps to exit code 3.
//! 9. Fixed seeds reproduce the loss at iteration 50 bit-exactly, and resume
//!    replays the uninterrupted loss sequence bit-exactly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ndarray::{Array2, Array3, Array4, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use icehrnet::dataset::{DatasetManifest, LabeledImage, Split};
use icehrnet::experiments::{
    gen_synthetic_domains, run_experiment, BackendSpec, ExperimentMode, ExperimentSpec,
    SyntheticDomainParams,
};
use icehrnet::metrics::{ConfusionMatrix, IGNORE_LABEL};
use icehrnet::model::{ablation_variant, load_checkpoint, AblationTag, Model, SegConfig};
use icehrnet::styletransfer::{
    adain, assign_classes, stylize_global, stylize_per_class, StyleBank, TransferBackend,
};
use icehrnet::training::{evaluate, lr_at, train, ResumePoint, TrainConfig};

fn budget(start: Instant, limit: Duration, what: &str) {
    let elapsed = start.elapsed();
    assert!(
        elapsed <= limit,
        "{what} took {elapsed:?}, over its {limit:?} budget"
    );
    println!("{what}: {elapsed:?} (budget {limit:?})");
}

// ---------------------------------------------------------------------------
// Shared fixtures
// ---------------------------------------------------------------------------

/// Small synthetic domains: 32x32 images, 3 samples per split.
fn small_params(seed: u64) -> SyntheticDomainParams {
    SyntheticDomainParams {
        image_size: 32,
        mask_scale: 16,
        train_count: 3,
        val_count: 3,
        test_count: 3,
        patches_per_class: 1,
        seed,
        ..SyntheticDomainParams::default()
    }
}

/// Narrow network used where capacity is irrelevant.
fn tiny_seg() -> SegConfig {
    SegConfig {
        branch_widths: [4, 8, 12, 16],
        stage_depths: [1, 1, 1, 1],
        aspp_out_channels: 16,
        aspp_rates: vec![1, 2],
        decoder_channels: 16,
        low_level_channels: 8,
        ..SegConfig::toy(2)
    }
}

/// Desk-scale training preset for the experiment arms: enough iterations to
/// separate the strategies on the synthetic domains, small enough to keep
/// the twelve runs of check 7 within budget on one CPU core.
fn desk_train() -> TrainConfig {
    TrainConfig {
        total_iters: 400,
        batch_size: 4,
        crop_size: 32,
        warmup_iters: 40,
        base_lr: 3e-3,
        warmup_start_lr: 3e-4,
        milestones: vec![300],
        val_every: 100,
        ..TrainConfig::default()
    }
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array3<u8> {
    Array3::from_shape_fn((h, w, 3), |_| rng.random())
}

// ---------------------------------------------------------------------------
// 1. Metrics oracle equivalence
// ---------------------------------------------------------------------------

/// Brute-force per-pixel reference: no confusion matrix, just counters.
#[derive(Clone)]
struct PixelOracle {
    correct: u64,
    valid: u64,
    tp: Vec<u64>,
    fp: Vec<u64>,
    fn_: Vec<u64>,
}

impl PixelOracle {
    fn new(k: usize) -> Self {
        PixelOracle {
            correct: 0,
            valid: 0,
            tp: vec![0; k],
            fp: vec![0; k],
            fn_: vec![0; k],
        }
    }

    fn accumulate(&mut self, pred: &Array2<u8>, gt: &Array2<u8>) {
        for (p, g) in pred.iter().zip(gt.iter()) {
            if *g == IGNORE_LABEL {
                continue;
            }
            self.valid += 1;
            if p == g {
                self.correct += 1;
                self.tp[*p as usize] += 1;
            } else {
                self.fp[*p as usize] += 1;
                self.fn_[*g as usize] += 1;
            }
        }
    }

    fn accuracy(&self) -> f64 {
        self.correct as f64 / self.valid as f64
    }

    fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.tp.len())
            .map(|c| {
                let union = self.tp[c] + self.fp[c] + self.fn_[c];
                (union > 0).then(|| self.tp[c] as f64 / union as f64)
            })
            .collect()
    }

    fn miou(&self) -> f64 {
        let present: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        present.iter().sum::<f64>() / present.len() as f64
    }
}

#[test]
fn check_1_metrics_match_a_brute_force_pixel_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut streamed_oracle = PixelOracle::new(8);
    let mut streamed_matrix = ConfusionMatrix::new(8);

    for case in 0..1000 {
        let k = rng.random_range(2..=8usize);
        let pred = Array2::from_shape_fn((8, 8), |_| rng.random_range(0..k) as u8);
        let gt = Array2::from_shape_fn((8, 8), |_| {
            if rng.random_range(0..10) == 0 {
                IGNORE_LABEL
            } else {
                rng.random_range(0..k) as u8
            }
        });

        let mut oracle = PixelOracle::new(k);
        oracle.accumulate(&pred, &gt);
        let mut matrix = ConfusionMatrix::new(k);
        matrix.accumulate(pred.view(), gt.view()).unwrap();
        let report = matrix.report().unwrap();

        assert!(
            (report.accuracy - oracle.accuracy()).abs() <= 1e-12,
            "case {case}: accuracy {} vs oracle {}",
            report.accuracy,
            oracle.accuracy()
        );
        assert!(
            (report.miou - oracle.miou()).abs() <= 1e-12,
            "case {case}: mIoU {} vs oracle {}",
            report.miou,
            oracle.miou()
        );
        assert_eq!(report.total_pixels, oracle.valid, "case {case}");
        for (c, (got, want)) in report
            .per_class_iou
            .iter()
            .zip(oracle.per_class_iou())
            .enumerate()
        {
            match (got, want) {
                (Some(g), Some(w)) => assert!(
                    (g - w).abs() <= 1e-12,
                    "case {case} class {c}: IoU {g} vs oracle {w}"
                ),
                (None, None) => {}
                other => panic!("case {case} class {c}: presence mismatch {other:?}"),
            }
        }

        // Streaming equivalence for the widest class count.
        if k == 8 {
            streamed_oracle.accumulate(&pred, &gt);
            streamed_matrix.accumulate(pred.view(), gt.view()).unwrap();
        }
    }

    let streamed = streamed_matrix.report().unwrap();
    assert!((streamed.accuracy - streamed_oracle.accuracy()).abs() <= 1e-12);
    assert!((streamed.miou - streamed_oracle.miou()).abs() <= 1e-12);
    budget(start, Duration::from_secs(10), "check 1 (metrics oracle)");
}

// ---------------------------------------------------------------------------
// 2. Moment matching
// ---------------------------------------------------------------------------

fn channel_stats(a: &Array3<f64>) -> Vec<(f64, f64)> {
    (0..a.dim().0)
        .map(|c| {
            let ch = a.index_axis(Axis(0), c);
            let n = ch.len() as f64;
            let mean = ch.sum() / n;
            let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            (mean, var.sqrt())
        })
        .collect()
}

#[test]
fn check_2_renormalized_features_carry_the_style_moments() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for case in 0..200 {
        let channels = rng.random_range(1..=5usize);
        let (ch, cw) = (rng.random_range(3..12usize), rng.random_range(3..12usize));
        let (sh, sw) = (rng.random_range(3..12usize), rng.random_range(3..12usize));
        let spread = rng.random_range(0.2..3.0);
        let content =
            Array3::from_shape_fn((channels, ch, cw), |_| rng.random_range(-2.0..2.0));
        let style = Array3::from_shape_fn((channels, sh, sw), |_| {
            rng.random_range(-spread..spread) + 1.5
        });

        let out = adain(&content, &style, 1e-9).unwrap();
        for (c, ((om, os), (sm, ss))) in channel_stats(&out)
            .into_iter()
            .zip(channel_stats(&style))
            .enumerate()
        {
            assert!(
                (om - sm).abs() <= 1e-5,
                "case {case} channel {c}: mean {om} vs style {sm}"
            );
            assert!(
                (os - ss).abs() <= 1e-5,
                "case {case} channel {c}: std {os} vs style {ss}"
            );
        }

        // Self-style is the identity.
        let same = adain(&content, &content, 1e-9).unwrap();
        for (got, want) in same.iter().zip(content.iter()) {
            assert!(
                (got - want).abs() <= 1e-5,
                "case {case}: identity drifted ({got} vs {want})"
            );
        }
    }
    budget(start, Duration::from_secs(5), "check 2 (moment matching)");
}

// ---------------------------------------------------------------------------
// 3. Compositor exactness
// ---------------------------------------------------------------------------

#[test]
fn check_3_compositor_selects_per_class_stylizations_byte_for_byte() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let backend = TransferBackend::statistical();

    for case in 0..100u64 {
        let k = rng.random_range(2..=4usize);
        let (h, w) = (rng.random_range(18..40usize), rng.random_range(18..40usize));
        let styles: BTreeMap<u8, Vec<Array3<u8>>> = (0..k as u8)
            .map(|c| {
                let patches = (0..rng.random_range(1..=3usize))
                    .map(|_| random_image(&mut rng, 16, 16))
                    .collect();
                (c, patches)
            })
            .collect();
        let bank = StyleBank::new(format!("case {case}"), styles, None).unwrap();

        let image = random_image(&mut rng, h, w);
        let mask = Array2::from_shape_fn((h, w), |_| {
            if rng.random_range(0..12) == 0 {
                IGNORE_LABEL
            } else {
                rng.random_range(0..k) as u8
            }
        });
        let sample = LabeledImage::new(format!("s{case}"), image.clone(), mask.clone()).unwrap();
        let assignment = assign_classes(k, k, None).unwrap();
        let stylized = stylize_per_class(&sample, &bank, &assignment, &backend, case).unwrap();

        // Oracle: stylize the whole image once per used patch, then pick the
        // stylized pixel wherever the mask names that class, and the original
        // pixel where the mask is ignored.
        let mut expected_by_class: BTreeMap<u8, Array3<u8>> = BTreeMap::new();
        for (&class, &patch_index) in &stylized.styles_used {
            let patch = &bank.patches(class).unwrap()[patch_index];
            let whole = stylize_global(&sample, patch, &backend).unwrap();
            expected_by_class.insert(class, whole.sample.image);
        }
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let got = stylized.sample.image[[y, x, c]];
                    let want = match mask[[y, x]] {
                        IGNORE_LABEL => image[[y, x, c]],
                        class => expected_by_class[&class][[y, x, c]],
                    };
                    assert_eq!(
                        got, want,
                        "case {case}: pixel ({y},{x},{c}) class {}",
                        mask[[y, x]]
                    );
                }
            }
        }

        // Exactly the classes present in the mask were stylized.
        let present: Vec<u8> = {
            let mut v: Vec<u8> = mask.iter().copied().filter(|&m| m != IGNORE_LABEL).collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        let used: Vec<u8> = stylized.styles_used.keys().copied().collect();
        assert_eq!(used, present, "case {case}");
    }
    budget(start, Duration::from_secs(30), "check 3 (compositor)");
}

// ---------------------------------------------------------------------------
// 4. Architecture invariants
// ---------------------------------------------------------------------------

#[test]
fn check_4_backbone_width_variants_and_gradients() {
    let start = Instant::now();

    // Full-scale widths concatenate to 720 backbone channels, and the
    // full-scale model actually builds.
    let full = SegConfig::default();
    assert_eq!(full.backbone_channels(), 720);
    let model = Model::<f32>::build(full, 0).unwrap();
    assert_eq!(model.config().backbone_channels(), 720);
    drop(model);

    // All five head/fusion variants build and emit (batch, classes, h, w)
    // logits at the input resolution.
    let base = SegConfig {
        num_classes: 3,
        ..tiny_seg()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let batch = Array4::from_shape_fn((2, 3, 16, 16), |_| rng.random_range(-1.0..1.0f32));
    for tag in [
        AblationTag::A,
        AblationTag::B,
        AblationTag::C,
        AblationTag::D,
        AblationTag::E,
    ] {
        let config = ablation_variant(tag, &base);
        let model = Model::<f32>::build(config, 7).unwrap();
        let (g, logits, _) = model.forward(&batch, false).unwrap();
        assert_eq!(
            g.value(logits).dim(),
            (2, 3, 16, 16),
            "variant {tag:?} logits shape"
        );
    }

    // Analytic gradients of the mean logit match central finite differences
    // at relative error 1e-3 on sampled parameters. f64 end to end, narrow
    // widths, and a single dilation rate keep the finite-difference step
    // h = 1e-5 inside its accurate regime on the 8x8 probe input.
    let grad_config = SegConfig {
        num_classes: 2,
        branch_widths: [3, 4, 5, 6],
        stage_depths: [1, 1, 1, 1],
        aspp_out_channels: 6,
        aspp_rates: vec![1],
        decoder_channels: 8,
        low_level_channels: 4,
        ..SegConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let mut model = Model::<f64>::build(grad_config, 31).unwrap();
    let batch = Array4::from_shape_fn((2, 3, 8, 8), |_| rng.random_range(-1.0..1.0));
    let mean_logit = |model: &Model<f64>| -> f64 {
        let (g, logits, _) = model.forward(&batch, true).unwrap();
        let v = g.value(logits);
        v.sum() / v.len() as f64
    };
    let analytic = {
        let (g, logits, _) = model.forward(&batch, true).unwrap();
        let n = g.value(logits).len() as f64;
        let seed = Array4::from_elem(g.value(logits).dim(), 1.0 / n);
        g.backward(logits, seed).unwrap().params
    };
    let names: Vec<String> = model.params.names().map(str::to_owned).collect();
    let h = 1e-5;
    let mut passed = 0;
    for _ in 0..100 {
        let name = &names[rng.random_range(0..names.len())];
        let ix = {
            let p = model.params.get(name).unwrap();
            let flat = rng.random_range(0..p.len());
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
    }
    assert!(
        passed >= 99,
        "only {passed}/100 sampled gradients matched finite differences"
    );
    budget(start, Duration::from_secs(120), "check 4 (architecture)");
}

// ---------------------------------------------------------------------------
// 5. Schedule exactness
// ---------------------------------------------------------------------------

#[test]
fn check_5_schedule_anchors_are_exact() {
    let start = Instant::now();
    let config = TrainConfig::default();
    assert_eq!(lr_at(0, &config).unwrap(), 1e-5);
    assert_eq!(lr_at(1000, &config).unwrap(), 1e-4);
    assert_eq!(lr_at(29_999, &config).unwrap(), 1e-4);
    assert_eq!(lr_at(30_000, &config).unwrap(), 1e-4 * 0.1);
    assert_eq!(lr_at(35_999, &config).unwrap(), 1e-4 * 0.1);
    assert_eq!(lr_at(36_000, &config).unwrap(), 1e-4 * 0.1 * 0.1);
    assert_eq!(lr_at(39_999, &config).unwrap(), 1e-4 * 0.1 * 0.1);
    // Warmup is linear between its endpoints.
    assert_eq!(
        lr_at(500, &config).unwrap(),
        1e-5 + (1e-4 - 1e-5) * 0.5
    );
    budget(start, Duration::from_secs(1), "check 5 (schedule)");
}

// ---------------------------------------------------------------------------
// 6. Overfit smoke
// ---------------------------------------------------------------------------

#[test]
fn check_6_toy_model_overfits_two_synthetic_samples() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let domains = gen_synthetic_domains(&small_params(11), dir.path()).unwrap();
    let source = DatasetManifest::load(&domains.source_manifest_path).unwrap();
    let samples: Vec<LabeledImage> = source
        .load_split(Some(Split::Train))
        .unwrap()
        .into_iter()
        .take(2)
        .collect();
    assert_eq!(samples.len(), 2);

    let config = TrainConfig {
        total_iters: 200,
        batch_size: 2,
        crop_size: 32,
        warmup_iters: 20,
        base_lr: 3e-3,
        warmup_start_lr: 3e-4,
        milestones: vec![],
        val_every: 50,
        seed: 5,
        ..TrainConfig::default()
    };
    let mut model = Model::<f32>::build(SegConfig::toy(2), 3).unwrap();
    train(
        &mut model,
        &samples,
        &samples,
        &config,
        ResumePoint::fresh(),
        None,
    )
    .unwrap();
    let report = evaluate(&model, &samples).unwrap();
    println!("check 6 training mIoU: {:.4}", report.miou);
    assert!(
        report.miou >= 0.95,
        "training mIoU {:.4} below 0.95 after 200 iterations",
        report.miou
    );
    budget(start, Duration::from_secs(180), "check 6 (overfit)");
}

// ---------------------------------------------------------------------------
// 7. Zero-shot arm ordering
// ---------------------------------------------------------------------------

#[test]
fn check_7_arm_ordering_holds_over_three_seed_medians() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let domains =
        gen_synthetic_domains(&SyntheticDomainParams::default(), &dir.path().join("data"))
            .unwrap();

    let seeds = [0u64, 1, 2];
    let mut mious: BTreeMap<ExperimentMode, Vec<f64>> = BTreeMap::new();
    for &seed in &seeds {
        for mode in ExperimentMode::ALL {
            let spec = ExperimentSpec {
                mode,
                source_manifest: Some(domains.source_manifest_path.clone()),
                target_manifest: domains.target_manifest_path.clone(),
                style_bank: Some(domains.bank_path.clone()),
                seg_config: SegConfig::toy(2),
                train_config: desk_train(),
                backend: BackendSpec::Statistical,
                neural_alpha: 1.0,
                seed,
                out_dir: dir.path().join(format!("seed{seed}/{mode}")),
            };
            let report = run_experiment(&spec).unwrap();
            mious.entry(mode).or_default().push(report.metrics.miou);
        }
    }

    let median = |mode: ExperimentMode| -> f64 {
        let mut v = mious[&mode].clone();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let supervised = median(ExperimentMode::Supervised);
    let none = median(ExperimentMode::None);
    let conventional = median(ExperimentMode::Conventional);
    let advanced = median(ExperimentMode::Advanced);
    println!(
        "check 7 medians: supervised {supervised:.4}, advanced {advanced:.4}, \
         conventional {conventional:.4}, none {none:.4}"
    );

    assert!(
        advanced >= none + 0.15,
        "advanced {advanced:.4} not >= none {none:.4} + 0.15"
    );
    assert!(
        advanced >= conventional + 0.05,
        "advanced {advanced:.4} not >= conventional {conventional:.4} + 0.05"
    );
    assert!(
        supervised >= advanced,
        "supervised {supervised:.4} not >= advanced {advanced:.4}"
    );
    budget(start, Duration::from_secs(1800), "check 7 (arm ordering)");
}

// ---------------------------------------------------------------------------
// 8. Zero-shot contract
// ---------------------------------------------------------------------------

/// All files under `dir`, as relative path -> content bytes.
fn dir_bytes(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn assert_dirs_equal(a: &Path, b: &Path, what: &str) {
    let left = dir_bytes(a);
    let right = dir_bytes(b);
    let left_names: Vec<_> = left.keys().collect();
    let right_names: Vec<_> = right.keys().collect();
    assert_eq!(left_names, right_names, "{what}: file sets differ");
    for (name, bytes) in &left {
        assert_eq!(
            bytes,
            &right[name],
            "{what}: {} differs between runs",
            name.display()
        );
    }
}

#[test]
fn check_8_deleting_target_training_masks_changes_no_training_byte() {
    let start = Instant::now();
    let root = tempfile::tempdir().unwrap();
    let intact = root.path().join("intact");
    let pruned = root.path().join("pruned");
    gen_synthetic_domains(&small_params(11), &intact).unwrap();
    // An identically seeded second copy, from which the target-domain
    // train/val masks are then deleted.
    gen_synthetic_domains(&small_params(11), &pruned).unwrap();
    let pruned_target = DatasetManifest::load_header(pruned.join("target/manifest.json")).unwrap();
    let split = pruned_target.split.clone().unwrap();
    let mut deleted = 0;
    for sample in &pruned_target.samples {
        if matches!(split[&sample.id], Split::Train | Split::Val) {
            std::fs::remove_file(pruned_target.root().join(&sample.mask)).unwrap();
            deleted += 1;
        }
    }
    assert_eq!(deleted, 6, "expected to delete 3 train + 3 val masks");

    let config = TrainConfig {
        total_iters: 20,
        batch_size: 2,
        crop_size: 16,
        warmup_iters: 4,
        milestones: vec![12],
        val_every: 10,
        base_lr: 3e-3,
        warmup_start_lr: 3e-4,
        ..TrainConfig::default()
    };
    let zero_shot_modes = [
        ExperimentMode::None,
        ExperimentMode::Conventional,
        ExperimentMode::Advanced,
    ];
    for &mode in &zero_shot_modes {
        let spec_for = |data: &Path, out: &Path| ExperimentSpec {
            mode,
            source_manifest: Some(data.join("source/manifest.json")),
            target_manifest: data.join("target/manifest.json"),
            style_bank: Some(data.join("bank/style_bank.json")),
            seg_config: tiny_seg(),
            train_config: config.clone(),
            backend: BackendSpec::Statistical,
            neural_alpha: 1.0,
            seed: 4,
            out_dir: out.to_path_buf(),
        };
        let out_intact = root.path().join(format!("run-intact/{mode}"));
        let out_pruned = root.path().join(format!("run-pruned/{mode}"));
        let report_intact = run_experiment(&spec_for(&intact, &out_intact)).unwrap();
        let report_pruned = run_experiment(&spec_for(&pruned, &out_pruned)).unwrap();

        // Every training byte — stylized inputs, checkpoints, logs — is
        // identical with and without the target training masks.
        assert_dirs_equal(
            &out_intact.join("train"),
            &out_pruned.join("train"),
            &format!("{mode}: train dir"),
        );
        let stylized = out_intact.join("stylized");
        assert_eq!(
            stylized.exists(),
            out_pruned.join("stylized").exists(),
            "{mode}: stylized dir presence"
        );
        if stylized.exists() {
            assert_dirs_equal(
                &stylized,
                &out_pruned.join("stylized"),
                &format!("{mode}: stylized dir"),
            );
        }
        assert_eq!(
            report_intact.metrics.miou, report_pruned.metrics.miou,
            "{mode}: target-test mIoU"
        );

        // Training on the target domain itself is refused with exit code 3.
        let mut violating = spec_for(&intact, &root.path().join(format!("violate/{mode}")));
        violating.source_manifest = Some(intact.join("target/manifest.json"));
        let err = run_experiment(&violating).unwrap_err();
        assert_eq!(err.exit_code(), 3, "{mode}: {err}");
    }
    budget(start, Duration::from_secs(300), "check 8 (zero-shot contract)");
}

// ---------------------------------------------------------------------------
// 9. Determinism & resume
// ---------------------------------------------------------------------------

#[test]
fn check_9_fixed_seeds_and_resume_reproduce_losses_bit_exactly() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let domains = gen_synthetic_domains(&small_params(11), &dir.path().join("data")).unwrap();
    let source = DatasetManifest::load(&domains.source_manifest_path).unwrap();
    let train_set = source.load_split(Some(Split::Train)).unwrap();
    let val_set = source.load_split(Some(Split::Val)).unwrap();

    let config = TrainConfig {
        total_iters: 60,
        batch_size: 2,
        crop_size: 16,
        warmup_iters: 6,
        milestones: vec![40],
        val_every: 30,
        seed: 7,
        ..TrainConfig::default()
    };

    let run = |config: &TrainConfig, out: Option<&Path>, resume: ResumePoint| {
        let mut model = Model::<f32>::build(tiny_seg(), config.seed).unwrap();
        train(&mut model, &train_set, &val_set, config, resume, out).unwrap()
    };

    // Two fresh runs agree bit-for-bit, in particular at iteration 50.
    let first = run(&config, None, ResumePoint::fresh());
    let second = run(&config, None, ResumePoint::fresh());
    let loss_at = |outcome: &icehrnet::training::TrainOutcome, iter: u64| -> f64 {
        outcome
            .history
            .iter()
            .find(|r| r.iteration == iter)
            .unwrap_or_else(|| panic!("no record for iteration {iter}"))
            .loss
    };
    assert_eq!(
        loss_at(&first, 50).to_bits(),
        loss_at(&second, 50).to_bits(),
        "loss at iteration 50 differs between identical runs"
    );
    assert_eq!(first.history.len(), second.history.len());
    for (a, b) in first.history.iter().zip(&second.history) {
        assert_eq!(a.iteration, b.iteration);
        assert_eq!(a.loss.to_bits(), b.loss.to_bits(), "iteration {}", a.iteration);
        assert_eq!(a.lr.to_bits(), b.lr.to_bits(), "iteration {}", a.iteration);
    }

    // An interrupted run resumed from its checkpoint replays the exact loss
    // sequence of the uninterrupted run.
    // Same schedule over the truncated range: the dropped milestone sits
    // beyond iteration 30, so it changes no learning rate in 1..=30.
    let half = TrainConfig {
        total_iters: 30,
        milestones: vec![],
        ..config.clone()
    };
    let half_dir = dir.path().join("half");
    run(&half, Some(&half_dir), ResumePoint::fresh());
    let (mut model, meta, sections) =
        load_checkpoint::<f32>(&half_dir.join("last.ckpt")).unwrap();
    assert_eq!(meta.iteration, 30);
    let resume = ResumePoint::from_checkpoint(&sections, meta.iteration).unwrap();
    let resumed = train(&mut model, &train_set, &val_set, &config, resume, None).unwrap();

    // Iteration records are zero-based; a checkpoint taken after 30
    // completed iterations resumes with the record labeled 30.
    let tail: Vec<_> = first
        .history
        .iter()
        .filter(|r| r.iteration >= 30)
        .collect();
    assert_eq!(resumed.history.len(), tail.len());
    for (a, b) in resumed.history.iter().zip(tail) {
        assert_eq!(a.iteration, b.iteration);
        assert_eq!(
            a.loss.to_bits(),
            b.loss.to_bits(),
            "resumed loss differs at iteration {}",
            a.iteration
        );
    }
    budget(start, Duration::from_secs(300), "check 9 (determinism/resume)");
}
