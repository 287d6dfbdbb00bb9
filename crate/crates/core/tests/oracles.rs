//! Independent oracles for the metric and gradient paths: brute-force
//! pair counting for AUROC, exhaustive threshold scans for max-F1, and
//! central finite differences for every loss composition.

use zsad_core::data::CaptionPair;
use zsad_core::eval::{auroc, max_f1, report_from_items, EvalItem};
use zsad_core::model::Model;
use zsad_core::prompts::{pixel_map_loss, refine_prompts_per_image};
use zsad_core::rng::SeededRng;
use zsad_core::tape::{finite_diff_check, Parameter, Tape};
use zsad_core::tensor::Tensor;
use zsad_core::training::{dice_loss_value, focal_loss_value, TrainConfig};
use zsad_core::vocab::Vocabulary;

/// Pairwise AUROC: mean over (positive, negative) pairs of
/// `[s_p > s_n] + 0.5 [s_p == s_n]`.
fn auroc_oracle(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, (&sp, &lp)) in scores.iter().zip(labels).enumerate() {
        if lp != 1 {
            continue;
        }
        for (j, (&sn, &ln)) in scores.iter().zip(labels).enumerate() {
            if ln != 0 || i == j {
                continue;
            }
            pairs += 1.0;
            if sp > sn {
                wins += 1.0;
            } else if sp == sn {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Exhaustive max-F1: recompute counts from scratch at every distinct
/// threshold; prefer the smallest threshold among maxima.
fn max_f1_oracle(scores: &[f64], labels: &[u8]) -> (f64, f64) {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let mut best = (-1.0, f64::INFINITY);
    for &t in &thresholds {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for (&s, &l) in scores.iter().zip(labels) {
            let predicted = s >= t;
            match (predicted, l) {
                (true, 1) => tp += 1,
                (true, 0) => fp += 1,
                (false, 1) => fn_ += 1,
                _ => {}
            }
        }
        let denom = 2 * tp + fp + fn_;
        let f1 = if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
        if f1 > best.0 {
            best = (f1, t);
        }
    }
    best
}

fn random_instance(rng: &mut SeededRng, n: usize, tie_prone: bool) -> (Vec<f64>, Vec<u8>) {
    loop {
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if tie_prone {
                    // Quantized scores force plenty of exact ties.
                    (rng.next_f64() * 8.0).floor() / 8.0
                } else {
                    rng.next_f64()
                }
            })
            .collect();
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.next_f64() < 0.4)).collect();
        let pos = labels.iter().filter(|&&l| l == 1).count();
        if pos > 0 && pos < n {
            return (scores, labels);
        }
    }
}

#[test]
fn auroc_matches_pairwise_oracle_on_random_instances() {
    let mut rng = SeededRng::new(606);
    for trial in 0..200 {
        let n = 2 + rng.below(49);
        let (scores, labels) = random_instance(&mut rng, n, trial % 2 == 0);
        let fast = auroc(&scores, &labels).unwrap();
        let slow = auroc_oracle(&scores, &labels);
        assert!(
            (fast - slow).abs() <= 1e-12,
            "trial {trial}: {fast} vs oracle {slow} (n={n})"
        );
    }
}

#[test]
fn max_f1_matches_exhaustive_oracle_exactly() {
    let mut rng = SeededRng::new(707);
    for trial in 0..200 {
        let n = 2 + rng.below(49);
        let (scores, labels) = random_instance(&mut rng, n, trial % 3 == 0);
        let (fast_f1, fast_t) = max_f1(&scores, &labels).unwrap();
        let (slow_f1, slow_t) = max_f1_oracle(&scores, &labels);
        assert_eq!(fast_f1, slow_f1, "trial {trial} f1 (n={n})");
        assert_eq!(fast_t, slow_t, "trial {trial} threshold (n={n})");
    }
}

#[test]
fn mean_and_sum_aggregation_rank_identically() {
    // The mean map is the sum map scaled by a positive constant, so any
    // ranking metric agrees between them.
    let mut rng = SeededRng::new(808);
    for _ in 0..20 {
        let layers = 2 + rng.below(4);
        let pixels = 30 + rng.below(40);
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
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

#[test]
fn oracle_model_scores_perfect_pixel_auroc() {
    // A model that emits the ground-truth mask as its map maxes out the
    // pixel metrics.
    let mut rng = SeededRng::new(909);
    let mut items = Vec::new();
    for i in 0..6 {
        let mut mask = Tensor::zeros(&[8, 8]);
        let abnormal = i % 2 == 0;
        if abnormal {
            for _ in 0..5 {
                let y = rng.below(8);
                let x = rng.below(8);
                mask.set(y, x, 1.0);
            }
        }
        items.push(EvalItem {
            score: if abnormal { 0.9 } else { 0.1 },
            label: u8::from(abnormal),
            map: mask.clone(),
            mask,
        });
    }
    let report = report_from_items(&items, "digest").unwrap();
    assert_eq!(report.pixel_auroc, 1.0);
    assert_eq!(report.image_auroc, 1.0);
    assert_eq!(report.pixel_max_f1, 1.0);
}

#[test]
fn constant_model_scores_half_auroc() {
    let mut items = Vec::new();
    for i in 0..4 {
        let mut mask = Tensor::zeros(&[4, 4]);
        if i % 2 == 0 {
            mask.set(1, 1, 1.0);
        }
        items.push(EvalItem {
            score: 0.5,
            label: u8::from(i % 2 == 0),
            map: Tensor::filled(&[4, 4], 0.3),
            mask,
        });
    }
    let report = report_from_items(&items, "digest").unwrap();
    assert_eq!(report.image_auroc, 0.5);
    assert_eq!(report.pixel_auroc, 0.5);
}

fn tiny_model() -> Model {
    let mut cfg = zsad_core::config::RunConfig::default();
    cfg.model.encoder.image_size = 16;
    cfg.model.encoder.patch_size = 8;
    cfg.model.encoder.embed_dim_v = 8;
    cfg.model.encoder.embed_dim_t = 8;
    cfg.model.encoder.shared_dim = 8;
    cfg.model.encoder.num_layers = 2;
    cfg.model.encoder.num_heads = 2;
    cfg.model.encoder.context_len = 10;
    cfg.model.encoder.hierarchy_layers = vec![1, 2];
    cfg.model.prompt.depth = 1;
    cfg.model.prompt.length = 2;
    cfg.model.hsf.k = 2;
    cfg.model.seed = 5;
    Model::new(cfg.model, Vocabulary::builtin()).unwrap()
}

fn captions() -> CaptionPair {
    CaptionPair {
        normal: "a photo of normal squares".to_string(),
        abnormal: "a photo of damaged squares".to_string(),
    }
}

#[test]
fn loss_compositions_match_finite_differences() {
    // Check the standalone focal and dice builders (not just total_loss)
    // against central differences through a live forward pass.
    let model = tiny_model();
    let mut rng = SeededRng::new(3);
    let img = Tensor::new(vec![16, 16], (0..256).map(|_| rng.next_f64()).collect()).unwrap();
    let mut mask = Tensor::zeros(&[16, 16]);
    for y in 3..7 {
        for x in 9..14 {
            mask.set(y, x, 1.0);
        }
    }

    for mode in ["focal", "dice"] {
        let loss_of = |m: &Model| -> f64 {
            let mut fp = m.forward(&img, &captions()).unwrap();
            let loss = match mode {
                "focal" => {
                    focal_loss_value(&mut fp.tape, fp.aggregated_map, &mask, 0.25, 2.0).unwrap()
                }
                _ => dice_loss_value(&mut fp.tape, fp.aggregated_map, &mask, 1.0).unwrap(),
            };
            fp.tape.data(loss)[0]
        };

        // Analytic gradient for one representative parameter per family.
        let mut work = model.clone();
        work.zero_gradients();
        let mut fp = work.forward(&img, &captions()).unwrap();
        let loss = match mode {
            "focal" => {
                focal_loss_value(&mut fp.tape, fp.aggregated_map, &mask, 0.25, 2.0).unwrap()
            }
            _ => dice_loss_value(&mut fp.tape, fp.aggregated_map, &mask, 1.0).unwrap(),
        };
        fp.tape.backward(loss).unwrap();
        let grads = fp.binder.collect_gradients(&fp.tape);
        work.accumulate_gradients(&grads);
        drop(fp);

        for name in ["proj.weight", "prompts.static_image.00"] {
            let mut checked: Option<Parameter> = None;
            work.visit(&mut |p| {
                if p.name == name {
                    checked = Some(p.clone());
                }
            });
            let checked = checked.expect("parameter");
            let err = finite_diff_check(
                |probe| {
                    let mut m2 = model.clone();
                    m2.visit_mut(&mut |p| {
                        if p.name == name {
                            p.value = probe.clone();
                        }
                    });
                    Ok(loss_of(&m2))
                },
                &checked,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "{mode} loss grad err {err} on {name}");
        }
    }
}

#[test]
fn backward_accumulates_across_calls() {
    // Two backward-extract rounds double the parameter gradient.
    let p = Parameter::trainable("p", Tensor::from_vec(vec![1.0, -2.0]));
    let mut model_grad = Tensor::zeros(&[2]);
    for _ in 0..2 {
        let mut tape = Tape::new();
        let v = tape.leaf(&p);
        let sq = tape.mul(v, v);
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        for (acc, g) in model_grad.data_mut().iter_mut().zip(tape.grad(v).data()) {
            *acc += g;
        }
    }
    assert_eq!(model_grad.data(), &[4.0, -8.0]);
}

#[test]
fn refinement_never_increases_the_pixel_loss() {
    let cfg = TrainConfig::default();
    let caps = captions();
    for seed in 0..5u64 {
        let model = tiny_model();
        let mut rng = SeededRng::new(seed);
        let img = Tensor::new(vec![16, 16], (0..256).map(|_| rng.next_f64()).collect()).unwrap();
        let mut mask = Tensor::zeros(&[16, 16]);
        for y in 2..6 {
            for x in 2..6 {
                mask.set(y, x, 1.0);
            }
        }
        let before = pixel_map_loss(&model, &img, &mask, &caps, &cfg).unwrap();
        let refined = refine_prompts_per_image(&model, &img, &mask, &caps, &cfg, 3, 1e-3).unwrap();
        let mut after_model = model.clone();
        after_model.prompts = refined;
        let after = pixel_map_loss(&after_model, &img, &mask, &caps, &cfg).unwrap();
        assert!(
            after <= before + 1e-9,
            "seed {seed}: refinement went {before} -> {after}"
        );
    }
}

#[test]
fn refinement_zero_steps_is_identity_and_preserves_original() {
    let model = tiny_model();
    let cfg = TrainConfig::default();
    let caps = captions();
    let mut rng = SeededRng::new(11);
    let img = Tensor::new(vec![16, 16], (0..256).map(|_| rng.next_f64()).collect()).unwrap();
    let mut mask = Tensor::zeros(&[16, 16]);
    mask.set(4, 4, 1.0);

    let original_digest = model.prompts.digest();
    let refined = refine_prompts_per_image(&model, &img, &mask, &caps, &cfg, 0, 1e-3).unwrap();
    assert_eq!(refined.digest(), original_digest);

    let refined = refine_prompts_per_image(&model, &img, &mask, &caps, &cfg, 2, 1e-3).unwrap();
    assert_eq!(model.prompts.digest(), original_digest, "original mutated");
    assert_ne!(refined.digest(), original_digest, "no update applied");
}

#[test]
fn refinement_rejects_non_binary_masks() {
    let model = tiny_model();
    let cfg = TrainConfig::default();
    let mut rng = SeededRng::new(12);
    let img = Tensor::new(vec![16, 16], (0..256).map(|_| rng.next_f64()).collect()).unwrap();
    let mask = Tensor::filled(&[16, 16], 0.5);
    assert!(refine_prompts_per_image(&model, &img, &mask, &captions(), &cfg, 1, 1e-3).is_err());
}
