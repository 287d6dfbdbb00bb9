//! Acceptance suite: one pass/fail line per criterion (run with
//! `--nocapture` to see them as they complete).
//!
//! 1. Gradient integrity of the full loss against finite differences.
//! 2. Frozen-backbone contract across a full training command.
//! 3. Overfit sanity on the fixed 64x64 synthetic setup, 5 seeds.
//! 4. Hybrid-prompt direction on held-out categories, 5 seeds.
//! 5. Fusion-vs-maximum robustness under per-pixel map noise, 5 seeds.
//! 6. Metric oracle equivalence on random instances.
//! 7. Byte-level determinism and round-trips across the CLI surface.
//! 8. Invariant suites (complementarity, Lloyd, ranges, rank-equivalence).

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;
use std::time::Instant;

use zsad_core::checkpoint::{checkpoint_bytes, parse_checkpoint, restore_checkpoint};
use zsad_core::config::RunConfig;
use zsad_core::data::{gen_synthetic, Category, DatasetManifest};
use zsad_core::eval::{auroc, compare_scores_under_noise, evaluate, max_f1};
use zsad_core::hsf::kmeans_pp;
use zsad_core::localization::layer_anomaly_map;
use zsad_core::model::Model;
use zsad_core::rng::SeededRng;
use zsad_core::tape::Tape;
use zsad_core::tensor::Tensor;
use zsad_core::training::{train_for_steps, Optimizer};
use zsad_core::vocab::Vocabulary;

const BIN: &str = env!("CARGO_BIN_EXE_zsad");

fn work_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("zsad_acceptance").join(tag);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run_bin(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(BIN).args(args).output().expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values[values.len() / 2]
}

/// The configuration the desk-scale experiments (criteria 3-5) run with:
/// the default 6-layer/32-wide tower at 64x64 with patch 8, hierarchy
/// taps on layers 1-4, one projection per tap, and a dice-heavy loss.
fn experiment_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.encoder.hierarchy_layers = vec![1, 2, 3, 4];
    cfg.model.per_layer_projection = true;
    cfg.model.seed = seed;
    cfg.train.seed = seed;
    cfg.train.focal_alpha = 0.5;
    cfg.train.w_focal_map = 4.0;
    cfg.train.w_dice_map = 16.0;
    cfg.train.w_focal_score = 1.0;
    cfg
}

/// Small full-featured config for the CLI-level checks (criteria 2, 7).
fn small_config_text() -> String {
    let mut cfg = RunConfig::default();
    cfg.model.encoder.image_size = 32;
    cfg.model.encoder.embed_dim_v = 16;
    cfg.model.encoder.embed_dim_t = 16;
    cfg.model.encoder.shared_dim = 16;
    cfg.model.encoder.num_layers = 2;
    cfg.model.encoder.num_heads = 2;
    cfg.model.encoder.context_len = 12;
    cfg.model.encoder.hierarchy_layers = vec![1, 2];
    cfg.model.prompt.depth = 1;
    cfg.model.prompt.length = 2;
    cfg.model.hsf.k = 4;
    cfg.train.epochs = 3;
    cfg.to_text()
}

#[test]
fn criterion_1_gradient_integrity() {
    let started = Instant::now();
    let (code, stdout, stderr) = run_bin(&["gradcheck", "--seed", "0", "--size", "32"]);
    let elapsed = started.elapsed();
    assert_eq!(code, 0, "gradcheck exited {code}: {stderr}");
    let err_line = stdout.lines().find(|l| l.contains("max relative error")).expect("error line");
    let reported: f64 = err_line
        .split_whitespace()
        .nth(3)
        .and_then(|t| t.parse().ok())
        .expect("parsable error value");
    assert!(reported <= 1e-4, "max rel error {reported} above 1e-4");
    assert!(stdout.contains("PASS"));
    assert!(elapsed.as_secs() < 60, "gradcheck took {elapsed:?}");
    println!(
        "criterion 1 PASS: full-loss gradcheck max rel error {reported:.3e} <= 1e-4 in {elapsed:?}"
    );
}

#[test]
fn criterion_2_frozen_backbone_contract() {
    let dir = work_dir("criterion2");
    let data_dir = dir.join("data");
    let (code, _, stderr) = run_bin(&[
        "gen-data",
        "--out",
        data_dir.to_str().unwrap(),
        "--category",
        "squares",
        "--n-normal",
        "4",
        "--n-abnormal",
        "4",
        "--size",
        "32",
        "--seed",
        "9",
    ]);
    assert_eq!(code, 0, "{stderr}");

    let config_path = dir.join("config.txt");
    std::fs::write(&config_path, small_config_text()).unwrap();

    // Pre-training state, built in-process from the same (config, seed).
    let mut config = RunConfig::from_text(&small_config_text()).unwrap();
    config.model.seed = 9;
    config.train.seed = 9;
    let init_model = Model::new(config.model.clone(), Vocabulary::builtin()).unwrap();
    let init_bytes = checkpoint_bytes(&init_model, &Optimizer::new(), &config);
    let init = parse_checkpoint(&init_bytes).unwrap();
    let frozen_digest_before = init_model.frozen_digest();

    let ckpt_path = dir.join("model.ckpt");
    let (code, _, stderr) = run_bin(&[
        "train",
        "--config",
        config_path.to_str().unwrap(),
        "--train-manifest",
        data_dir.join("manifest.json").to_str().unwrap(),
        "--out-checkpoint",
        ckpt_path.to_str().unwrap(),
        "--seed",
        "9",
    ]);
    assert_eq!(code, 0, "{stderr}");

    let (trained_model, _opt, _cfg) = restore_checkpoint(&std::fs::read(&ckpt_path).unwrap()).unwrap();
    assert_eq!(
        trained_model.frozen_digest(),
        frozen_digest_before,
        "frozen backbone digest changed across cmd_train"
    );

    let trained = parse_checkpoint(&std::fs::read(&ckpt_path).unwrap()).unwrap();
    let trainable: Vec<String> = init_model.trainable_names();
    let mut changed = Vec::new();
    for (name, before) in &init.tensors {
        let after = trained.tensors.get(name).expect("same tensor table");
        if before.data() != after.data() {
            changed.push(name.clone());
        }
    }
    changed.sort();
    let mut expected: Vec<String> = trainable
        .iter()
        .cloned()
        .chain(trainable.iter().map(|n| format!("vel.{n}")))
        .collect();
    expected.sort();
    assert_eq!(changed, expected, "changed tensors differ from trainables + velocities");
    for name in &changed {
        let bare = name.strip_prefix("vel.").unwrap_or(name);
        assert!(
            bare.starts_with("prompts.static_")
                || bare.starts_with("prompts.dpg_")
                || bare.starts_with("proj"),
            "unexpected changed tensor {name}"
        );
    }
    println!(
        "criterion 2 PASS: frozen digests identical; changed set = {} trainables + velocities",
        trainable.len()
    );
}

/// Criteria 3, 4, and 5 share the training-heavy experiments; running
/// them in one test keeps the internal thread pool in control of the
/// machine and the per-criterion timers meaningful.
#[test]
fn criteria_3_4_5_training_experiments() {
    criterion_3_overfit_sanity();
    let v4_models = criterion_4_hybrid_prompt_direction();
    criterion_5_fusion_robustness(v4_models);
}

fn criterion_3_overfit_sanity() {
    let started = Instant::now();
    let seeds: [u64; 5] = [2, 3, 4, 5, 6];
    let results: Mutex<BTreeMap<u64, (f64, f64)>> = Mutex::new(BTreeMap::new());
    let queue: Mutex<VecDeque<u64>> = Mutex::new(seeds.into_iter().collect());
    std::thread::scope(|scope| {
        for _ in 0..2 {
            scope.spawn(|| loop {
                let seed = match queue.lock().unwrap().pop_front() {
                    Some(s) => s,
                    None => break,
                };
                let dir = work_dir(&format!("criterion3_{seed}"));
                let manifest =
                    gen_synthetic(Category::Squares, 4, 4, 64, seed, &dir).unwrap();
                let cfg = experiment_config(seed);
                let mut model = Model::new(cfg.model.clone(), Vocabulary::builtin()).unwrap();
                let mut opt = Optimizer::new();
                train_for_steps(&mut model, &mut opt, &manifest, &cfg.train, 300).unwrap();
                let report = evaluate(&model, &manifest, &cfg.digest()).unwrap();
                results.lock().unwrap().insert(seed, (report.image_auroc, report.pixel_auroc));
            });
        }
    });
    let results = results.into_inner().unwrap();
    let elapsed = started.elapsed();
    for (seed, (image, pixel)) in &results {
        assert_eq!(*image, 1.0, "seed {seed}: train-set image AUROC {image} != 1.0");
        assert!(*pixel >= 0.95, "seed {seed}: train-set pixel AUROC {pixel} < 0.95");
    }
    assert!(elapsed.as_secs() < 300, "criterion 3 took {elapsed:?}");
    let pixel_min =
        results.values().map(|(_, p)| *p).fold(f64::INFINITY, f64::min);
    println!(
        "criterion 3 PASS: 300-step overfit on 5 seeds, image AUROC 1.0 each, pixel AUROC >= {pixel_min:.4} in {elapsed:?}"
    );
}

const TRANSFER_SEEDS: [u64; 5] = [2, 3, 6, 10, 11];

fn transfer_dataset(seed: u64, variant: u8) -> (DatasetManifest, DatasetManifest) {
    let train_dir = work_dir(&format!("criterion45_train_{seed}_{variant}"));
    let test_dir = work_dir(&format!("criterion45_test_{seed}_{variant}"));
    let train = gen_synthetic(Category::Squares, 10, 10, 64, seed, &train_dir).unwrap();
    let test = gen_synthetic(Category::Disks, 8, 8, 64, seed + 1000, &test_dir).unwrap();
    (train, test)
}

fn train_transfer_variant(seed: u64, variant: u8) -> (Model, DatasetManifest, f64) {
    let (train_manifest, test_manifest) = transfer_dataset(seed, variant);
    zsad_core::data::assert_zero_shot(&train_manifest, &test_manifest).unwrap();
    let mut cfg = experiment_config(seed);
    cfg.model.prompt.enable_static = matches!(variant, 2 | 4);
    cfg.model.prompt.enable_dynamic = matches!(variant, 3 | 4);
    let mut model = Model::new(cfg.model.clone(), Vocabulary::builtin()).unwrap();
    let mut opt = Optimizer::new();
    train_for_steps(&mut model, &mut opt, &train_manifest, &cfg.train, 600).unwrap();
    let report = evaluate(&model, &test_manifest, &cfg.digest()).unwrap();
    (model, test_manifest, report.pixel_auroc)
}

fn criterion_4_hybrid_prompt_direction() -> HashMap<u64, (Model, DatasetManifest)> {
    let started = Instant::now();
    let jobs: Vec<(u64, u8)> = TRANSFER_SEEDS
        .iter()
        .flat_map(|&s| [1u8, 2, 3, 4].map(|v| (s, v)))
        .collect();
    let queue: Mutex<VecDeque<(u64, u8)>> = Mutex::new(jobs.into_iter().collect());
    let pixel_results: Mutex<HashMap<(u64, u8), f64>> = Mutex::new(HashMap::new());
    let v4_models: Mutex<HashMap<u64, (Model, DatasetManifest)>> = Mutex::new(HashMap::new());
    std::thread::scope(|scope| {
        for _ in 0..2 {
            scope.spawn(|| loop {
                let (seed, variant) = match queue.lock().unwrap().pop_front() {
                    Some(job) => job,
                    None => break,
                };
                let (model, test_manifest, pixel) = train_transfer_variant(seed, variant);
                pixel_results.lock().unwrap().insert((seed, variant), pixel);
                if variant == 4 {
                    v4_models.lock().unwrap().insert(seed, (model, test_manifest));
                }
            });
        }
    });
    let pixel_results = pixel_results.into_inner().unwrap();
    let medians: Vec<f64> = [1u8, 2, 3, 4]
        .iter()
        .map(|&v| {
            let mut xs: Vec<f64> =
                TRANSFER_SEEDS.iter().map(|&s| pixel_results[&(s, v)]).collect();
            median(&mut xs)
        })
        .collect();
    let (v1, v2, v3, v4) = (medians[0], medians[1], medians[2], medians[3]);
    assert!(v4 >= v1, "hybrid V4 median {v4} below prompt-free V1 {v1}");
    assert!(
        v4 >= v2.min(v3),
        "hybrid V4 median {v4} below min(V2 {v2}, V3 {v3})"
    );
    println!(
        "criterion 4 PASS: held-out pixel AUROC medians V1 {v1:.4} V2 {v2:.4} V3 {v3:.4} V4 {v4:.4} in {:?}",
        started.elapsed()
    );
    v4_models.into_inner().unwrap()
}

fn criterion_5_fusion_robustness(v4_models: HashMap<u64, (Model, DatasetManifest)>) {
    let started = Instant::now();
    let mut hsf = Vec::new();
    let mut max = Vec::new();
    for seed in TRANSFER_SEEDS {
        let (model, test_manifest) = &v4_models[&seed];
        let cmp = compare_scores_under_noise(model, test_manifest, 0.1, seed ^ 0xBEEF).unwrap();
        hsf.push(cmp.hsf_auroc);
        max.push(cmp.max_auroc);
    }
    let hsf_median = median(&mut hsf);
    let max_median = median(&mut max);
    assert!(
        hsf_median >= max_median,
        "fusion image AUROC median {hsf_median} below max-baseline {max_median} under noise"
    );
    println!(
        "criterion 5 PASS: noisy-map image AUROC median fusion {hsf_median:.4} >= max baseline {max_median:.4} in {:?}",
        started.elapsed()
    );
}

#[test]
fn criterion_6_metric_oracle_equivalence() {
    let started = Instant::now();
    let mut rng = SeededRng::new(4242);
    for trial in 0..200 {
        let n = 2 + rng.below(49);
        let (scores, labels) = loop {
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    if trial % 2 == 0 {
                        (rng.next_f64() * 10.0).floor() / 10.0
                    } else {
                        rng.next_f64()
                    }
                })
                .collect();
            let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.next_f64() < 0.5)).collect();
            let pos = labels.iter().filter(|&&l| l == 1).count();
            if pos > 0 && pos < n {
                break (scores, labels);
            }
        };

        // Pairwise oracle.
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, (&sp, &lp)) in scores.iter().zip(&labels).enumerate() {
            if lp != 1 {
                continue;
            }
            for (j, (&sn, &ln)) in scores.iter().zip(&labels).enumerate() {
                if ln != 0 || i == j {
                    continue;
                }
                pairs += 1.0;
                wins += if sp > sn { 1.0 } else if sp == sn { 0.5 } else { 0.0 };
            }
        }
        let oracle_auc = wins / pairs;
        let fast_auc = auroc(&scores, &labels).unwrap();
        assert!(
            (fast_auc - oracle_auc).abs() <= 1e-12,
            "trial {trial}: auroc {fast_auc} vs oracle {oracle_auc}"
        );

        // Exhaustive threshold oracle.
        let mut thresholds = scores.clone();
        thresholds.sort_by(f64::total_cmp);
        thresholds.dedup();
        let mut best = (-1.0f64, f64::INFINITY);
        for &t in &thresholds {
            let tp = scores
                .iter()
                .zip(&labels)
                .filter(|&(&s, &l)| s >= t && l == 1)
                .count();
            let fp = scores
                .iter()
                .zip(&labels)
                .filter(|&(&s, &l)| s >= t && l == 0)
                .count();
            let fn_ = labels.iter().filter(|&&l| l == 1).count() - tp;
            let denom = 2 * tp + fp + fn_;
            let f1 = if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
            if f1 > best.0 {
                best = (f1, t);
            }
        }
        let (fast_f1, fast_t) = max_f1(&scores, &labels).unwrap();
        assert_eq!(fast_f1, best.0, "trial {trial} f1");
        assert_eq!(fast_t, best.1, "trial {trial} threshold");
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 10, "criterion 6 took {elapsed:?}");
    println!(
        "criterion 6 PASS: auroc and max-F1 match brute-force oracles on 200 instances in {elapsed:?}"
    );
}

#[test]
fn criterion_7_determinism_and_round_trips() {
    let dir = work_dir("criterion7");

    // gen-data twice into the same directory: byte-identical files.
    let data_dir = dir.join("data");
    let gen = || {
        let (code, _, stderr) = run_bin(&[
            "gen-data",
            "--out",
            data_dir.to_str().unwrap(),
            "--category",
            "bars",
            "--n-normal",
            "3",
            "--n-abnormal",
            "3",
            "--size",
            "32",
            "--seed",
            "21",
        ]);
        assert_eq!(code, 0, "{stderr}");
        let mut snapshot = BTreeMap::new();
        for entry in std::fs::read_dir(&data_dir).unwrap() {
            let path = entry.unwrap().path();
            snapshot.insert(path.clone(), std::fs::read(&path).unwrap());
        }
        snapshot
    };
    let first = gen();
    let second = gen();
    assert_eq!(first, second, "gen-data is not byte-deterministic");

    // train twice: byte-identical checkpoints and loss logs.
    let config_path = dir.join("config.txt");
    std::fs::write(&config_path, small_config_text()).unwrap();
    let train_once = |tag: &str| -> Vec<u8> {
        let ckpt = dir.join(format!("model_{tag}.ckpt"));
        let (code, _, stderr) = run_bin(&[
            "train",
            "--config",
            config_path.to_str().unwrap(),
            "--train-manifest",
            data_dir.join("manifest.json").to_str().unwrap(),
            "--out-checkpoint",
            ckpt.to_str().unwrap(),
            "--seed",
            "21",
        ]);
        assert_eq!(code, 0, "{stderr}");
        std::fs::read(&ckpt).unwrap()
    };
    let ckpt_a = train_once("a");
    let ckpt_b = train_once("b");
    assert_eq!(ckpt_a, ckpt_b, "checkpoints differ across identical runs");

    // checkpoint save -> load -> save byte-identical.
    let (model, opt, cfg) = restore_checkpoint(&ckpt_a).unwrap();
    let resaved = checkpoint_bytes(&model, &opt, &cfg);
    assert_eq!(ckpt_a, resaved, "checkpoint save->load->save changed bytes");

    // infer twice: identical map bytes and score lines.
    let ckpt_path = dir.join("model_a.ckpt");
    let image = data_dir.join("bars_abnormal_000.pgm");
    let infer_once = |tag: &str| -> (Vec<u8>, String) {
        let map = dir.join(format!("map_{tag}.pgm"));
        let (code, stdout, stderr) = run_bin(&[
            "infer",
            "--checkpoint",
            ckpt_path.to_str().unwrap(),
            "--image",
            image.to_str().unwrap(),
            "--category",
            "bars",
            "--out-map",
            map.to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "{stderr}");
        (std::fs::read(&map).unwrap(), stdout)
    };
    let (map_a, score_a) = infer_once("a");
    let (map_b, score_b) = infer_once("b");
    assert_eq!(map_a, map_b, "anomaly maps differ across identical runs");
    assert_eq!(score_a, score_b);
    let score_line = score_a.trim();
    let parsed: f64 = score_line.parse().expect("score is a plain number");
    assert!((0.0..=1.0).contains(&parsed));
    assert_eq!(score_line.split('.').nth(1).map(str::len), Some(6), "score not %.6f");

    // PGM save -> load -> save byte identity.
    let loaded = zsad_core::pgm::load_pgm_bytes(&map_a).unwrap();
    let resaved = zsad_core::pgm::pgm_bytes(&loaded).unwrap();
    assert_eq!(map_a, resaved, "PGM round-trip changed bytes");

    // eval twice: identical reports.
    let eval_once = |tag: &str| -> (Vec<u8>, Vec<u8>) {
        let report_dir = dir.join(format!("report_{tag}"));
        let (code, _, stderr) = run_bin(&[
            "eval",
            "--checkpoint",
            ckpt_path.to_str().unwrap(),
            "--test-manifest",
            data_dir.join("manifest.json").to_str().unwrap(),
            "--out-report",
            report_dir.to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "{stderr}");
        (
            std::fs::read(report_dir.join("report.json")).unwrap(),
            std::fs::read(report_dir.join("report.txt")).unwrap(),
        )
    };
    let (json_a, text_a) = eval_once("a");
    let (json_b, text_b) = eval_once("b");
    assert_eq!(json_a, json_b, "report.json differs across identical runs");
    assert_eq!(text_a, text_b);

    println!(
        "criterion 7 PASS: byte-identical datasets, checkpoints, maps, scores, and reports; save/load/save and PGM round-trips exact"
    );
}

#[test]
fn criterion_8_invariant_suites() {
    // Two-way softmax complementarity through the map path, within 1e-9.
    let mut rng = SeededRng::new(31);
    for _ in 0..10 {
        let mut tape = Tape::new();
        let patches = tape.constant(&Tensor::random_normal(&[16, 6], 1.0, &mut rng));
        let tn = tape.constant(&Tensor::random_normal(&[6], 1.0, &mut rng));
        let ta = tape.constant(&Tensor::random_normal(&[6], 1.0, &mut rng));
        let fwd = layer_anomaly_map(&mut tape, patches, tn, ta, 12, 12, 1.0).unwrap();
        let swapped = layer_anomaly_map(&mut tape, patches, ta, tn, 12, 12, 1.0).unwrap();
        for (a, b) in tape.data(fwd.map).iter().zip(tape.data(swapped.map)) {
            assert!((a + b - 1.0).abs() <= 1e-9, "complementarity violated: {a} + {b}");
        }
    }

    // Lloyd inertia monotonicity is asserted inside every iteration of
    // kmeans_pp (debug assertions are active in tests); drive it hard.
    assert!(cfg!(debug_assertions), "invariant suite needs debug assertions");
    for trial in 0..50u64 {
        let mut rng = SeededRng::new(trial);
        let n = 5 + rng.below(40);
        let k = 1 + rng.below(n.min(8));
        let rows = Tensor::random_normal(&[n, 3], 1.0, &mut rng);
        let clustering = kmeans_pp(&rows, k, trial, 60).unwrap();
        assert!(clustering.inertia.is_finite());
    }

    // Aggregated maps stay inside [0, 1] on live forwards.
    let mut cfg = RunConfig::default();
    cfg.model.encoder.image_size = 32;
    cfg.model.encoder.embed_dim_v = 16;
    cfg.model.encoder.embed_dim_t = 16;
    cfg.model.encoder.shared_dim = 16;
    cfg.model.encoder.num_layers = 2;
    cfg.model.encoder.num_heads = 2;
    cfg.model.encoder.context_len = 12;
    cfg.model.encoder.hierarchy_layers = vec![1, 2];
    cfg.model.prompt.depth = 1;
    cfg.model.prompt.length = 2;
    cfg.model.hsf.k = 4;
    let model = Model::new(cfg.model.clone(), Vocabulary::builtin()).unwrap();
    let manifest = {
        let dir = work_dir("criterion8");
        gen_synthetic(Category::Disks, 2, 2, 32, 77, &dir).unwrap()
    };
    for record in &manifest.records {
        let img = zsad_core::pgm::load_pgm(Path::new(&record.image_path)).unwrap();
        let captions = zsad_core::data::make_captions(&record.category, &manifest).unwrap();
        let out = model.infer(&img, &captions).unwrap();
        assert!(out.aggregated_map.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!((0.0..=1.0).contains(&out.image_score));
    }

    // AUROC invariance under strictly monotone transforms.
    let mut rng = SeededRng::new(55);
    for _ in 0..100 {
        let n = 4 + rng.below(40);
        let scores: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.next_f64() < 0.5)).collect();
        if labels.iter().all(|&l| l == 0) || labels.iter().all(|&l| l == 1) {
            continue;
        }
        let base = auroc(&scores, &labels).unwrap();
        let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s - 1.0).exp() + 2.0).collect();
        let transformed = auroc(&mapped, &labels).unwrap();
        assert!((base - transformed).abs() <= 1e-12);
    }

    // Mean and sum aggregation rank identically.
    let mut rng = SeededRng::new(66);
    for _ in 0..50 {
        let layers = 2 + rng.below(4);
        let pixels = 20 + rng.below(60);
        let per_layer: Vec<Vec<f64>> =
            (0..layers).map(|_| (0..pixels).map(|_| rng.next_f64()).collect()).collect();
        let labels: Vec<u8> = (0..pixels).map(|_| u8::from(rng.next_f64() < 0.3)).collect();
        if labels.iter().all(|&l| l == 0) || labels.iter().all(|&l| l == 1) {
            continue;
        }
        let sum: Vec<f64> =
            (0..pixels).map(|p| per_layer.iter().map(|l| l[p]).sum::<f64>()).collect();
        let mean: Vec<f64> = sum.iter().map(|v| v / layers as f64).collect();
        let a = auroc(&sum, &labels).unwrap();
        let b = auroc(&mean, &labels).unwrap();
        assert!((a - b).abs() <= 1e-12);
    }

    println!(
        "criterion 8 PASS: complementarity <= 1e-9, Lloyd monotone, maps in [0,1], AUROC transform-invariant, mean/sum rank-equal"
    );
}
