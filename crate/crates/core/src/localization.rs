//! Learnable projection into the shared space and pixel-level anomaly
//! maps with multi-hierarchy aggregation.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tape::{Binder, Parameter, Tape, Value};
use crate::tensor::Tensor;

/// Affine map from patch dimension to the shared vision-language
/// dimension; trainable, shared across hierarchy layers by default.
#[derive(Debug, Clone)]
pub struct ProjectionLayer {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl ProjectionLayer {
    pub fn init(name_prefix: &str, d_v: usize, d_u: usize, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed).derive(0x5052_4f4a);
        ProjectionLayer {
            weight: Parameter::trainable(
                format!("{name_prefix}.weight"),
                Tensor::random_normal(&[d_v, d_u], 1.0 / (d_v as f64).sqrt(), &mut rng),
            ),
            bias: Parameter::trainable(format!("{name_prefix}.bias"), Tensor::zeros(&[d_u])),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.weight);
        f(&self.bias);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Per-layer and aggregated pixel maps plus the image score.
#[derive(Debug, Clone)]
pub struct AnomalyOutput {
    pub per_layer_maps: Vec<(usize, Tensor)>,
    pub aggregated_map: Tensor,
    pub image_score: f64,
}

/// Rowwise affine projection of patch embeddings: (N, d_v) -> (N, d_u).
pub fn project_patches(
    tape: &mut Tape,
    binder: &mut Binder,
    proj: &ProjectionLayer,
    patches: Value,
) -> Result<Value> {
    let shape = tape.shape(patches);
    if shape.len() != 2 || shape[1] != proj.weight.value.rows() {
        return Err(Error::usage(format!(
            "project_patches on shape {:?}, expected (_, {})",
            shape,
            proj.weight.value.rows()
        )));
    }
    let w = binder.bind(tape, &proj.weight);
    let b = binder.bind(tape, &proj.bias);
    let out = tape.matmul(patches, w);
    Ok(tape.add_bias(out, b))
}

/// Anomaly map of one hierarchy layer.
pub struct LayerMap {
    /// Per-patch abnormal probability, before interpolation.
    pub patch_scores: Value,
    /// Map interpolated to the requested extents.
    pub map: Value,
}

fn require_nonzero_rows(tape: &Tape, v: Value, what: &str) -> Result<()> {
    let data = tape.data(v);
    let shape = tape.shape(v);
    let (rows, cols) = if shape.len() == 1 { (1, shape[0]) } else { (shape[0], shape[1]) };
    for r in 0..rows {
        let norm: f64 = data[r * cols..(r + 1) * cols].iter().map(|x| x * x).sum();
        if norm == 0.0 {
            return Err(Error::domain(format!("{what} row {r} has zero norm")));
        }
    }
    Ok(())
}

/// Per-patch two-way softmax of cosine similarities against the abnormal
/// and normal text embeddings, reshaped to the patch grid and bilinearly
/// resized. `temperature` divides both cosines (1.0 = the plain formula).
pub fn layer_anomaly_map(
    tape: &mut Tape,
    projected: Value,
    text_normal: Value,
    text_abnormal: Value,
    out_h: usize,
    out_w: usize,
    temperature: f64,
) -> Result<LayerMap> {
    let n = tape.shape(projected)[0];
    let side = (n as f64).sqrt() as usize;
    if side * side != n {
        return Err(Error::usage(format!("patch count {n} is not a perfect square")));
    }
    if temperature <= 0.0 {
        return Err(Error::usage("temperature must be positive".to_string()));
    }
    require_nonzero_rows(tape, text_normal, "normal text embedding")?;
    require_nonzero_rows(tape, text_abnormal, "abnormal text embedding")?;
    require_nonzero_rows(tape, projected, "projected patch embedding")?;

    let mut cos_a = tape.cosine_rows(projected, text_abnormal);
    let mut cos_n = tape.cosine_rows(projected, text_normal);
    if temperature != 1.0 {
        cos_a = tape.scale(cos_a, 1.0 / temperature);
        cos_n = tape.scale(cos_n, 1.0 / temperature);
    }
    let patch_scores = tape.two_way_softmax(cos_a, cos_n);
    let grid = tape.reshape(patch_scores, vec![side, side]);
    let map = tape.bilinear_resize(grid, out_h, out_w);
    Ok(LayerMap { patch_scores, map })
}

/// Elementwise mean across layers. The mean (rather than a bare sum)
/// keeps every pixel inside [0, 1]; it rescales all scores by the same
/// positive constant, so ranking metrics are unaffected.
pub fn aggregate_maps(tape: &mut Tape, maps: &[Value]) -> Result<Value> {
    let first = *maps.first().ok_or_else(|| Error::usage("aggregate_maps on empty list".to_string()))?;
    let shape = tape.shape(first).to_vec();
    let mut acc = first;
    for &m in &maps[1..] {
        if tape.shape(m) != shape {
            return Err(Error::usage("aggregate_maps extent mismatch".to_string()));
        }
        acc = tape.add(acc, m);
    }
    Ok(tape.scale(acc, 1.0 / maps.len() as f64))
}
