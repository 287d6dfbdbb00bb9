//! AUROC and max-F1 at image and pixel level, plus whole-manifest
//! evaluation. Pixel metrics pool the pixels of every test image into one
//! global curve.

use crate::data::{make_captions, DatasetManifest};
use crate::error::{Error, Result};
use crate::hsf::{image_score, max_score_baseline, semantic_embedding};
use crate::model::Model;
use crate::rng::SeededRng;
use crate::training::load_samples;

/// Mann-Whitney AUROC with mid-rank tie handling.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::usage(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUROC needs both classes present".to_string(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Mid-ranks over ties, 1-based.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += mid_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Max F1 over thresholds at every distinct score (predict positive when
/// `score >= t`). Returns the best F1 and the smallest threshold
/// achieving it.
pub fn max_f1(scores: &[f64], labels: &[u8]) -> Result<(f64, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::usage(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let total_pos = labels.iter().filter(|&&l| l == 1).count();
    if total_pos == 0 {
        return Err(Error::UndefinedMetric("max-F1 needs at least one positive".to_string()));
    }
    // Descending sweep accumulates predictions; ties share a threshold.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut best_f1 = -1.0;
    let mut best_threshold = f64::INFINITY;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let f1 = f1_from_counts(tp, fp, total_pos - tp);
        // `>=` so equal F1 at a lower threshold wins (descending sweep).
        if f1 >= best_f1 {
            best_f1 = f1;
            best_threshold = threshold;
        }
    }
    Ok((best_f1, best_threshold))
}

/// The four headline metrics plus the config digest of the model that
/// produced them.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Report {
    pub image_auroc: f64,
    pub image_max_f1: f64,
    pub pixel_auroc: f64,
    pub pixel_max_f1: f64,
    pub config_digest: String,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("metric        value\n");
        out.push_str("------------  --------\n");
        out.push_str(&format!("image AUROC   {:.6}\n", self.image_auroc));
        out.push_str(&format!("image max-F1  {:.6}\n", self.image_max_f1));
        out.push_str(&format!("pixel AUROC   {:.6}\n", self.pixel_auroc));
        out.push_str(&format!("pixel max-F1  {:.6}\n", self.pixel_max_f1));
        out.push_str("pixel metrics pool all pixels of the test set into one curve\n");
        out.push_str(&format!("config digest {}\n", self.config_digest));
        out
    }
}

/// One evaluated sample: the image score, its label, the predicted map,
/// and the ground-truth mask.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub score: f64,
    pub label: u8,
    pub map: crate::tensor::Tensor,
    pub mask: crate::tensor::Tensor,
}

/// Image metrics over per-image scores; pixel metrics over all pixels of
/// every item pooled into one curve.
pub fn report_from_items(items: &[EvalItem], config_digest: &str) -> Result<Report> {
    if items.is_empty() {
        return Err(Error::input("nothing to evaluate".to_string()));
    }
    let mut image_scores = Vec::with_capacity(items.len());
    let mut image_labels = Vec::with_capacity(items.len());
    let mut pixel_scores = Vec::new();
    let mut pixel_labels = Vec::new();
    for item in items {
        if item.mask.len() != item.map.len() {
            return Err(Error::input(format!(
                "mask has {} pixels but map has {}",
                item.mask.len(),
                item.map.len()
            )));
        }
        image_scores.push(item.score);
        image_labels.push(item.label);
        pixel_scores.extend_from_slice(item.map.data());
        pixel_labels.extend(item.mask.data().iter().map(|&v| u8::from(v > 0.0)));
    }

    let image_auroc = auroc(&image_scores, &image_labels)
        .map_err(|e| Error::UndefinedMetric(format!("image level: {e}")))?;
    let (image_max_f1, _) = max_f1(&image_scores, &image_labels)
        .map_err(|e| Error::UndefinedMetric(format!("image level: {e}")))?;
    let pixel_auroc = auroc(&pixel_scores, &pixel_labels)
        .map_err(|e| Error::UndefinedMetric(format!("pixel level: {e}")))?;
    let (pixel_max_f1, _) = max_f1(&pixel_scores, &pixel_labels)
        .map_err(|e| Error::UndefinedMetric(format!("pixel level: {e}")))?;

    Ok(Report {
        image_auroc,
        image_max_f1,
        pixel_auroc,
        pixel_max_f1,
        config_digest: config_digest.to_string(),
    })
}

/// Evaluate a model over a manifest: image level from the per-image score
/// `S`, pixel level from all pixels pooled across the test set.
pub fn evaluate(model: &Model, manifest: &DatasetManifest, config_digest: &str) -> Result<Report> {
    let samples = load_samples(manifest)?;
    if samples.is_empty() {
        return Err(Error::input("evaluation manifest has no records".to_string()));
    }
    let mut items = Vec::with_capacity(samples.len());
    for sample in &samples {
        let captions = make_captions(&sample.category, manifest)?;
        let out = model.infer(&sample.image, &captions)?;
        items.push(EvalItem {
            score: out.image_score,
            label: sample.label,
            map: out.aggregated_map,
            mask: sample.mask.clone(),
        });
    }
    report_from_items(&items, config_digest)
}

/// Image AUROC of the fused score versus the map-maximum baseline when
/// seeded Gaussian noise corrupts the per-patch anomaly scores.
#[derive(Debug, Clone, Copy)]
pub struct NoisyScoreComparison {
    pub hsf_auroc: f64,
    pub max_auroc: f64,
}

/// Ablation helper: inject per-pixel Gaussian noise into each image's
/// aggregated anomaly map, then score the image both ways. The fusion
/// path rescores clusters by averaging the noisy map over each member
/// patch's pixel footprint; the baseline takes the noisy map's maximum.
pub fn compare_scores_under_noise(
    model: &Model,
    manifest: &DatasetManifest,
    sigma: f64,
    seed: u64,
) -> Result<NoisyScoreComparison> {
    let samples = load_samples(manifest)?;
    let mut labels = Vec::with_capacity(samples.len());
    let mut hsf_scores = Vec::with_capacity(samples.len());
    let mut max_scores = Vec::with_capacity(samples.len());
    let master = SeededRng::new(seed);
    let size = model.config.encoder.image_size;
    let patch = model.config.encoder.patch_size;
    let grid = model.config.encoder.grid_side();

    for (i, sample) in samples.iter().enumerate() {
        let captions = make_captions(&sample.category, manifest)?;
        let mut fp = model.forward(&sample.image, &captions)?;
        let mut rng = master.derive(i as u64);
        let clean_map = fp.tape.tensor(fp.aggregated_map);
        let mut noisy_map = clean_map.clone();
        for v in noisy_map.data_mut() {
            *v = (*v + sigma * rng.next_normal()).clamp(0.0, 1.0);
        }
        max_scores.push(max_score_baseline(&noisy_map));

        // Per-patch score = mean of the noisy map over the patch's pixels.
        let mut patch_scores = vec![0.0; grid * grid];
        for (p, score) in patch_scores.iter_mut().enumerate() {
            let (gy, gx) = (p / grid, p % grid);
            let mut sum = 0.0;
            for y in gy * patch..(gy + 1) * patch {
                for x in gx * patch..(gx + 1) * patch {
                    sum += noisy_map.at(y.min(size - 1), x.min(size - 1));
                }
            }
            *score = sum / (patch * patch) as f64;
        }

        let layer_scores = vec![patch_scores; fp.hierarchy_patches.len()];
        let fused = semantic_embedding(
            &mut fp.tape,
            &mut fp.binder,
            &fp.hierarchy_patches,
            &layer_scores,
            fp.f_global,
            &mut |pos| model.projection_for(pos).clone(),
            &model.config.hsf,
        )?;
        let score = image_score(&mut fp.tape, fused, fp.text_normal, fp.text_abnormal)?;
        hsf_scores.push(fp.tape.data(score)[0]);
        labels.push(sample.label);
    }

    Ok(NoisyScoreComparison {
        hsf_auroc: auroc(&hsf_scores, &labels)?,
        max_auroc: auroc(&max_scores, &labels)?,
    })
}
