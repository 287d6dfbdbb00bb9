//! Hybrid semantic fusion: cluster patch embeddings, score clusters by
//! the anomaly map, and fuse the most-abnormal centroids into the global
//! image embedding for image-level scoring.

use crate::error::{Error, Result};
use crate::localization::{project_patches, ProjectionLayer};
use crate::rng::SeededRng;
use crate::tape::{Binder, Tape, Value};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HsfVariant {
    /// Fuse the centroid of the single highest-scoring cluster per layer.
    Top1,
    /// Select the top-scoring patches first, cluster them, and average all
    /// centroids.
    Legacy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    /// Score clusters with the multi-hierarchy mean of patch scores.
    Aggregated,
    /// Score clusters with the owning layer's own patch scores.
    PerLayer,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HsfConfig {
    /// Cluster count, clamped to the patch count on small grids.
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub variant: HsfVariant,
    pub score_source: ScoreSource,
    /// Patch selection size for the legacy variant.
    pub topk: usize,
    /// Cluster count for the legacy variant.
    pub legacy_clusters: usize,
}

impl Default for HsfConfig {
    fn default() -> Self {
        HsfConfig {
            k: 20,
            seed: 0,
            max_iter: 100,
            variant: HsfVariant::Top1,
            score_source: ScoreSource::Aggregated,
            topk: 20,
            legacy_clusters: 5,
        }
    }
}

/// Result of one KMeans run.
#[derive(Debug, Clone)]
pub struct Clustering {
    pub assignments: Vec<usize>,
    pub centroids: Tensor,
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// KMeans with KMeans++ seeding and Lloyd iterations until the assignment
/// fixpoint or `max_iter`. Deterministic in (rows, k, seed); empty
/// clusters are re-seeded to the point farthest from its centroid.
pub fn kmeans_pp(rows: &Tensor, k: usize, seed: u64, max_iter: usize) -> Result<Clustering> {
    if rows.shape().len() != 2 {
        return Err(Error::usage(format!("kmeans_pp expects a matrix, got {:?}", rows.shape())));
    }
    let n = rows.rows();
    let d = rows.cols();
    if k < 1 {
        return Err(Error::input("kmeans_pp needs k >= 1".to_string()));
    }
    if k > n {
        return Err(Error::input(format!("kmeans_pp with k={k} > {n} points")));
    }
    if max_iter < 1 {
        return Err(Error::usage("kmeans_pp needs max_iter >= 1".to_string()));
    }
    let row = |i: usize| &rows.data()[i * d..(i + 1) * d];
    let mut rng = SeededRng::new(seed).derive(0x4b4d_4541);

    // KMeans++ seeding: uniform first centroid, then proportional to the
    // squared distance to the nearest chosen centroid.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(row(rng.below(n)).to_vec());
    let mut min_d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = min_d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.next_f64() * total;
            let mut chosen = n - 1;
            for (i, &w) in min_d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.below(n)
        };
        let c = row(pick).to_vec();
        for i in 0..n {
            let dist = sq_dist(row(i), &c);
            if dist < min_d2[i] {
                min_d2[i] = dist;
            }
        }
        centroids.push(c);
    }

    let mut assignments = vec![0usize; n];
    let mut inertia = f64::INFINITY;
    for _ in 0..max_iter {
        // Assignment step.
        let mut changed = false;
        let mut new_inertia = 0.0;
        for i in 0..n {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let dist = sq_dist(row(i), centroid);
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
            new_inertia += best_d;
        }
        debug_assert!(
            new_inertia <= inertia + 1e-9 * (1.0 + inertia.abs().min(1e300)),
            "Lloyd inertia increased: {inertia} -> {new_inertia}"
        );
        let converged = !changed && new_inertia.is_finite() && inertia.is_finite();
        inertia = new_inertia;
        if converged {
            break;
        }

        // Update step: means of members; empty clusters jump to the point
        // farthest from its current centroid.
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assignments[i]] += 1;
            for (s, v) in sums[assignments[i]].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for s in sums[c].iter_mut() {
                    *s /= counts[c] as f64;
                }
                centroids[c] = std::mem::take(&mut sums[c]);
            } else {
                let farthest = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(row(a), &centroids[assignments[a]]);
                        let db = sq_dist(row(b), &centroids[assignments[b]]);
                        da.total_cmp(&db)
                    })
                    .expect("n >= 1");
                centroids[c] = row(farthest).to_vec();
            }
        }
    }

    // Final assignment pass so centroids and labels agree.
    let mut final_inertia = 0.0;
    for i in 0..n {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (c, centroid) in centroids.iter().enumerate() {
            let dist = sq_dist(row(i), centroid);
            if dist < best_d {
                best_d = dist;
                best = c;
            }
        }
        assignments[i] = best;
        final_inertia += best_d;
    }

    let centroids = Tensor::new(vec![k, d], centroids.into_iter().flatten().collect())?;
    Ok(Clustering { assignments, centroids, inertia: final_inertia })
}

/// Mean patch score per cluster.
pub fn cluster_scores(clustering: &Clustering, patch_scores: &[f64]) -> Result<Vec<f64>> {
    if patch_scores.len() != clustering.assignments.len() {
        return Err(Error::usage(format!(
            "{} patch scores for {} assignments",
            patch_scores.len(),
            clustering.assignments.len()
        )));
    }
    let k = clustering.centroids.rows();
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (&c, &s) in clustering.assignments.iter().zip(patch_scores) {
        sums[c] += s;
        counts[c] += 1;
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(&s, &n)| if n > 0 { s / n as f64 } else { f64::NEG_INFINITY })
        .collect())
}

/// Index of the highest-scoring cluster; ties break to the lowest id.
pub fn argmax_cluster(scores: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Sort row indices lexicographically by row content. Clustering runs on
/// this canonical order so the result is invariant to patch permutations.
fn canonical_order(rows: &Tensor) -> Vec<usize> {
    let d = rows.cols();
    let mut order: Vec<usize> = (0..rows.rows()).collect();
    order.sort_by(|&a, &b| {
        let ra = &rows.data()[a * d..(a + 1) * d];
        let rb = &rows.data()[b * d..(b + 1) * d];
        for (x, y) in ra.iter().zip(rb) {
            match x.total_cmp(y) {
                std::cmp::Ordering::Equal => continue,
                other => return other,
            }
        }
        std::cmp::Ordering::Equal
    });
    order
}

/// Cluster one layer's patch embeddings in canonical row order and return
/// the clustering with assignments mapped back to original patch indices.
pub fn cluster_layer(rows: &Tensor, k: usize, seed: u64, max_iter: usize) -> Result<Clustering> {
    let order = canonical_order(rows);
    let d = rows.cols();
    let mut sorted = Vec::with_capacity(rows.len());
    for &i in &order {
        sorted.extend_from_slice(&rows.data()[i * d..(i + 1) * d]);
    }
    let sorted = Tensor::new(vec![rows.rows(), d], sorted)?;
    let clustering = kmeans_pp(&sorted, k, seed, max_iter)?;
    let mut assignments = vec![0usize; rows.rows()];
    for (pos, &orig) in order.iter().enumerate() {
        assignments[orig] = clustering.assignments[pos];
    }
    Ok(Clustering { assignments, centroids: clustering.centroids, inertia: clustering.inertia })
}

/// The members (original patch indices) whose centroid feeds the fusion,
/// per the configured variant. Returns groups of member index sets; the
/// fused local semantic is the mean over groups of per-group row means.
pub fn select_member_groups(
    embeds: &Tensor,
    patch_scores: &[f64],
    cfg: &HsfConfig,
) -> Result<Vec<Vec<usize>>> {
    let n = embeds.rows();
    match cfg.variant {
        HsfVariant::Top1 => {
            let k = cfg.k.min(n).max(1);
            let clustering = cluster_layer(embeds, k, cfg.seed, cfg.max_iter)?;
            let scores = cluster_scores(&clustering, patch_scores)?;
            let best = argmax_cluster(&scores);
            let members: Vec<usize> = clustering
                .assignments
                .iter()
                .enumerate()
                .filter(|(_, &c)| c == best)
                .map(|(i, _)| i)
                .collect();
            Ok(vec![members])
        }
        HsfVariant::Legacy => {
            let take = cfg.topk.min(n).max(1);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| {
                patch_scores[b].total_cmp(&patch_scores[a]).then(a.cmp(&b))
            });
            let mut chosen: Vec<usize> = idx[..take].to_vec();
            chosen.sort_unstable();
            let d = embeds.cols();
            let mut sub = Vec::with_capacity(take * d);
            for &i in &chosen {
                sub.extend_from_slice(&embeds.data()[i * d..(i + 1) * d]);
            }
            let sub = Tensor::new(vec![take, d], sub)?;
            let n_c = cfg.legacy_clusters.min(take).max(1);
            let clustering = cluster_layer(&sub, n_c, cfg.seed, cfg.max_iter)?;
            let mut groups = vec![Vec::new(); n_c];
            for (pos, &c) in clustering.assignments.iter().enumerate() {
                groups[c].push(chosen[pos]);
            }
            groups.retain(|g| !g.is_empty());
            Ok(groups)
        }
    }
}

/// Fuse selected cluster centroids into the global embedding:
/// the local semantic of each layer is projected and added to `f_global`.
/// Returns the enriched embedding as a 1-row matrix in the shared space.
#[allow(clippy::too_many_arguments)]
pub fn semantic_embedding(
    tape: &mut Tape,
    binder: &mut Binder,
    layer_embeds: &[(usize, Value)],
    layer_scores: &[Vec<f64>],
    f_global: Value,
    projection_for: &mut dyn FnMut(usize) -> ProjectionLayer,
    cfg: &HsfConfig,
) -> Result<Value> {
    if layer_embeds.len() != layer_scores.len() {
        return Err(Error::usage("layer embeds and scores length mismatch".to_string()));
    }
    let mut fused = f_global;
    for (pos, ((layer, embeds), scores)) in layer_embeds.iter().zip(layer_scores).enumerate() {
        let plain = tape.tensor(*embeds);
        if scores.len() != plain.rows() {
            return Err(Error::usage(format!(
                "layer {layer}: {} scores for {} patches",
                scores.len(),
                plain.rows()
            )));
        }
        let groups = select_member_groups(&plain, scores, cfg)?;
        let proj = projection_for(pos);
        let mut local: Option<Value> = None;
        let weight = 1.0 / groups.len() as f64;
        for members in &groups {
            let selected = tape.select_rows(*embeds, members);
            let centroid = tape.mean_rows(selected);
            let centroid = tape.reshape(centroid, vec![1, plain.cols()]);
            let contribution =
                if groups.len() == 1 { centroid } else { tape.scale(centroid, weight) };
            local = Some(match local {
                Some(acc) => tape.add(acc, contribution),
                None => contribution,
            });
        }
        let local = local.expect("at least one group");
        let projected = project_patches(tape, binder, &proj, local)?;
        fused = tape.add(fused, projected);
    }
    Ok(fused)
}

/// Abnormal-branch probability for the enriched image embedding against
/// the two text embeddings.
pub fn image_score(
    tape: &mut Tape,
    f_semantic: Value,
    text_normal: Value,
    text_abnormal: Value,
) -> Result<Value> {
    for (v, what) in [(f_semantic, "semantic embedding"), (text_normal, "normal text"), (text_abnormal, "abnormal text")] {
        let norm: f64 = tape.data(v).iter().map(|x| x * x).sum();
        if norm == 0.0 {
            return Err(Error::domain(format!("image_score on zero-norm {what}")));
        }
    }
    let cos_a = tape.cosine_rows(f_semantic, text_abnormal);
    let cos_n = tape.cosine_rows(f_semantic, text_normal);
    Ok(tape.two_way_softmax(cos_a, cos_n))
}

/// The ablated baseline: maximum pixel of the aggregated map.
pub fn max_score_baseline(aggregated_map: &Tensor) -> f64 {
    aggregated_map.max()
}
