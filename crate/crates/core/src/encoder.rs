//! Frozen dual encoder: a patch-embedding image tower with class token and
//! a causal text tower, sharing a prompt-aware transformer core.
//!
//! Weights are drawn once from a seeded Gaussian (std 1/sqrt(fan_in)) and
//! never trained; two runs with the same (seed, config) produce identical
//! weights. Prompt tokens are appended after the vanilla tokens: layers up
//! to the prompting depth receive fresh prompt rows and drop them from
//! their output, later layers carry the prompt rows through.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tape::{Binder, Parameter, Tape, Value};
use crate::tensor::Tensor;
use crate::vocab::TokenSequence;

/// MLP hidden width as a multiple of the embed dim.
const MLP_RATIO: usize = 4;
/// Additive attention mask value for disallowed key positions.
const MASK_OFF: f64 = -1e30;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim_v: usize,
    pub embed_dim_t: usize,
    pub shared_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub context_len: usize,
    /// 1-based layer indices whose patch embeddings feed localization.
    pub hierarchy_layers: Vec<usize>,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::usage(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.num_heads == 0
            || self.embed_dim_v % self.num_heads != 0
            || self.embed_dim_t % self.num_heads != 0
        {
            return Err(Error::usage("embed dims must be divisible by num_heads".to_string()));
        }
        if self.hierarchy_layers.is_empty() {
            return Err(Error::usage("hierarchy_layers must be nonempty".to_string()));
        }
        let mut prev = 0usize;
        for &h in &self.hierarchy_layers {
            if h == 0 || h > self.num_layers {
                return Err(Error::usage(format!(
                    "hierarchy layer {h} outside 1..={}",
                    self.num_layers
                )));
            }
            if h <= prev {
                return Err(Error::usage("hierarchy_layers must be strictly increasing".to_string()));
            }
            prev = h;
        }
        if self.context_len < 2 {
            return Err(Error::usage("context_len must fit BOS and EOS".to_string()));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch count N.
    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }
}

/// One transformer block: pre-LN attention and MLP with residuals.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub ln1_gamma: Parameter,
    pub ln1_beta: Parameter,
    pub wq: Parameter,
    pub bq: Parameter,
    pub wk: Parameter,
    pub bk: Parameter,
    pub wv: Parameter,
    pub bv: Parameter,
    pub wo: Parameter,
    pub bo: Parameter,
    pub ln2_gamma: Parameter,
    pub ln2_beta: Parameter,
    pub mlp_w1: Parameter,
    pub mlp_b1: Parameter,
    pub mlp_w2: Parameter,
    pub mlp_b2: Parameter,
}

impl LayerWeights {
    fn init(prefix: &str, dim: usize, rng: &mut SeededRng) -> Self {
        let w_std = 1.0 / (dim as f64).sqrt();
        let mlp = dim * MLP_RATIO;
        let name = |s: &str| format!("{prefix}.{s}");
        LayerWeights {
            ln1_gamma: Parameter::frozen(name("ln1.gamma"), Tensor::filled(&[dim], 1.0)),
            ln1_beta: Parameter::frozen(name("ln1.beta"), Tensor::zeros(&[dim])),
            wq: Parameter::frozen(name("attn.wq"), Tensor::random_normal(&[dim, dim], w_std, rng)),
            bq: Parameter::frozen(name("attn.bq"), Tensor::zeros(&[dim])),
            wk: Parameter::frozen(name("attn.wk"), Tensor::random_normal(&[dim, dim], w_std, rng)),
            bk: Parameter::frozen(name("attn.bk"), Tensor::zeros(&[dim])),
            wv: Parameter::frozen(name("attn.wv"), Tensor::random_normal(&[dim, dim], w_std, rng)),
            bv: Parameter::frozen(name("attn.bv"), Tensor::zeros(&[dim])),
            wo: Parameter::frozen(name("attn.wo"), Tensor::random_normal(&[dim, dim], w_std, rng)),
            bo: Parameter::frozen(name("attn.bo"), Tensor::zeros(&[dim])),
            ln2_gamma: Parameter::frozen(name("ln2.gamma"), Tensor::filled(&[dim], 1.0)),
            ln2_beta: Parameter::frozen(name("ln2.beta"), Tensor::zeros(&[dim])),
            mlp_w1: Parameter::frozen(
                name("mlp.w1"),
                Tensor::random_normal(&[dim, mlp], w_std, rng),
            ),
            mlp_b1: Parameter::frozen(name("mlp.b1"), Tensor::zeros(&[mlp])),
            mlp_w2: Parameter::frozen(
                name("mlp.w2"),
                Tensor::random_normal(&[mlp, dim], 1.0 / (mlp as f64).sqrt(), rng),
            ),
            mlp_b2: Parameter::frozen(name("mlp.b2"), Tensor::zeros(&[dim])),
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.ln1_gamma);
        f(&self.ln1_beta);
        f(&self.wq);
        f(&self.bq);
        f(&self.wk);
        f(&self.bk);
        f(&self.wv);
        f(&self.bv);
        f(&self.wo);
        f(&self.bo);
        f(&self.ln2_gamma);
        f(&self.ln2_beta);
        f(&self.mlp_w1);
        f(&self.mlp_b1);
        f(&self.mlp_w2);
        f(&self.mlp_b2);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.ln1_gamma);
        f(&mut self.ln1_beta);
        f(&mut self.wq);
        f(&mut self.bq);
        f(&mut self.wk);
        f(&mut self.bk);
        f(&mut self.wv);
        f(&mut self.bv);
        f(&mut self.wo);
        f(&mut self.bo);
        f(&mut self.ln2_gamma);
        f(&mut self.ln2_beta);
        f(&mut self.mlp_w1);
        f(&mut self.mlp_b1);
        f(&mut self.mlp_w2);
        f(&mut self.mlp_b2);
    }
}

/// All frozen parameters of both towers plus the output projections.
#[derive(Debug, Clone)]
pub struct EncoderWeights {
    pub patch_embed: Parameter,
    pub class_token: Parameter,
    pub image_layers: Vec<LayerWeights>,
    pub text_layers: Vec<LayerWeights>,
    pub token_embedding: Parameter,
    pub image_proj_w: Parameter,
    pub image_proj_b: Parameter,
    pub text_proj_w: Parameter,
    pub text_proj_b: Parameter,
}

impl EncoderWeights {
    pub fn init(cfg: &EncoderConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::new(seed).derive(0x5745_4947);
        let patch_pixels = cfg.patch_size * cfg.patch_size;
        let dv = cfg.embed_dim_v;
        let dt = cfg.embed_dim_t;
        let du = cfg.shared_dim;

        let patch_embed = Parameter::frozen(
            "encoder.image.patch_embed",
            Tensor::random_normal(&[patch_pixels, dv], 1.0 / (patch_pixels as f64).sqrt(), &mut rng),
        );
        let class_token = Parameter::frozen(
            "encoder.image.class_token",
            Tensor::random_normal(&[1, dv], 1.0 / (dv as f64).sqrt(), &mut rng),
        );
        let image_layers = (0..cfg.num_layers)
            .map(|i| LayerWeights::init(&format!("encoder.image.layer{i:02}"), dv, &mut rng))
            .collect();
        let text_layers = (0..cfg.num_layers)
            .map(|i| LayerWeights::init(&format!("encoder.text.layer{i:02}"), dt, &mut rng))
            .collect();
        let token_embedding = Parameter::frozen(
            "encoder.text.token_embedding",
            Tensor::random_normal(&[vocab_size, dt], 1.0 / (dt as f64).sqrt(), &mut rng),
        );
        let image_proj_w = Parameter::frozen(
            "encoder.image_proj.weight",
            Tensor::random_normal(&[dv, du], 1.0 / (dv as f64).sqrt(), &mut rng),
        );
        let image_proj_b = Parameter::frozen("encoder.image_proj.bias", Tensor::zeros(&[du]));
        let text_proj_w = Parameter::frozen(
            "encoder.text_proj.weight",
            Tensor::random_normal(&[dt, du], 1.0 / (dt as f64).sqrt(), &mut rng),
        );
        let text_proj_b = Parameter::frozen("encoder.text_proj.bias", Tensor::zeros(&[du]));

        Ok(EncoderWeights {
            patch_embed,
            class_token,
            image_layers,
            text_layers,
            token_embedding,
            image_proj_w,
            image_proj_b,
            text_proj_w,
            text_proj_b,
        })
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.patch_embed);
        f(&self.class_token);
        for layer in &self.image_layers {
            layer.visit(f);
        }
        for layer in &self.text_layers {
            layer.visit(f);
        }
        f(&self.token_embedding);
        f(&self.image_proj_w);
        f(&self.image_proj_b);
        f(&self.text_proj_w);
        f(&self.text_proj_b);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.patch_embed);
        f(&mut self.class_token);
        for layer in &mut self.image_layers {
            layer.visit_mut(f);
        }
        for layer in &mut self.text_layers {
            layer.visit_mut(f);
        }
        f(&mut self.token_embedding);
        f(&mut self.image_proj_w);
        f(&mut self.image_proj_b);
        f(&mut self.text_proj_w);
        f(&mut self.text_proj_b);
    }

    /// SHA-256 over every tensor (name, shape, little-endian payload), in
    /// visit order. Training must leave this unchanged.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        self.visit(&mut |p: &Parameter| {
            hasher.update(p.name.as_bytes());
            for &d in p.value.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                hasher.update(v.to_le_bytes());
            }
        });
        let out = hasher.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Flatten a grayscale image into per-patch pixel rows, patches in grid
/// row-major order.
pub fn patchify(img: &Tensor, cfg: &EncoderConfig) -> Result<Tensor> {
    if img.shape() != [cfg.image_size, cfg.image_size] {
        return Err(Error::input(format!(
            "image extents {:?} do not match config {}x{}",
            img.shape(),
            cfg.image_size,
            cfg.image_size
        )));
    }
    let g = cfg.grid_side();
    let p = cfg.patch_size;
    let mut data = Vec::with_capacity(g * g * p * p);
    for gy in 0..g {
        for gx in 0..g {
            for py in 0..p {
                for px in 0..p {
                    data.push(img.at(gy * p + py, gx * p + px));
                }
            }
        }
    }
    Tensor::new(vec![g * g, p * p], data)
}

fn attention(
    tape: &mut Tape,
    binder: &mut Binder,
    lw: &LayerWeights,
    x: Value,
    num_heads: usize,
    mask: Option<Value>,
) -> Value {
    let dim = tape.shape(x)[1];
    let head_dim = dim / num_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let wq = binder.bind(tape, &lw.wq);
    let bq = binder.bind(tape, &lw.bq);
    let wk = binder.bind(tape, &lw.wk);
    let bk = binder.bind(tape, &lw.bk);
    let wv = binder.bind(tape, &lw.wv);
    let bv = binder.bind(tape, &lw.bv);
    let wo = binder.bind(tape, &lw.wo);
    let bo = binder.bind(tape, &lw.bo);

    let q = tape.matmul(x, wq);
    let q = tape.add_bias(q, bq);
    let k = tape.matmul(x, wk);
    let k = tape.add_bias(k, bk);
    let v = tape.matmul(x, wv);
    let v = tape.add_bias(v, bv);

    let mut merged: Option<Value> = None;
    for h in 0..num_heads {
        let (c0, c1) = (h * head_dim, (h + 1) * head_dim);
        let qh = tape.slice_cols(q, c0, c1);
        let kh = tape.slice_cols(k, c0, c1);
        let vh = tape.slice_cols(v, c0, c1);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let mut scores = tape.scale(scores, scale);
        if let Some(m) = mask {
            scores = tape.add(scores, m);
        }
        let attn = tape.softmax_rows(scores);
        let oh = tape.matmul(attn, vh);
        merged = Some(match merged {
            Some(acc) => tape.concat_cols(acc, oh),
            None => oh,
        });
    }
    let o = tape.matmul(merged.expect("at least one head"), wo);
    tape.add_bias(o, bo)
}

fn transformer_layer(
    tape: &mut Tape,
    binder: &mut Binder,
    lw: &LayerWeights,
    x: Value,
    num_heads: usize,
    mask: Option<Value>,
) -> Value {
    let g1 = binder.bind(tape, &lw.ln1_gamma);
    let b1 = binder.bind(tape, &lw.ln1_beta);
    let normed = tape.layer_norm(x, g1, b1, LN_EPS);
    let attn_out = attention(tape, binder, lw, normed, num_heads, mask);
    let x = tape.add(x, attn_out);

    let g2 = binder.bind(tape, &lw.ln2_gamma);
    let b2 = binder.bind(tape, &lw.ln2_beta);
    let normed2 = tape.layer_norm(x, g2, b2, LN_EPS);
    let w1 = binder.bind(tape, &lw.mlp_w1);
    let mb1 = binder.bind(tape, &lw.mlp_b1);
    let w2 = binder.bind(tape, &lw.mlp_w2);
    let mb2 = binder.bind(tape, &lw.mlp_b2);
    let h = tape.matmul(normed2, w1);
    let h = tape.add_bias(h, mb1);
    let h = tape.gelu(h);
    let h = tape.matmul(h, w2);
    let h = tape.add_bias(h, mb2);
    tape.add(x, h)
}

/// Run a tower over the vanilla token block with the prompt schedule:
/// layers `1..=J` (`J` = `prompts.len()`) receive fresh prompt rows and
/// keep only the vanilla block, later layers carry the prompt rows of the
/// previous output. `on_layer` sees the vanilla block after each layer.
fn run_tower(
    tape: &mut Tape,
    binder: &mut Binder,
    layers: &[LayerWeights],
    vanilla: Value,
    prompts: &[Value],
    num_heads: usize,
    mut mask_for: impl FnMut(&mut Tape, usize) -> Option<Value>,
    mut on_layer: impl FnMut(&mut Tape, usize, Value),
) -> Value {
    let vanilla_len = tape.shape(vanilla)[0];
    let mut tokens = vanilla;
    let mut carried: Option<Value> = None;
    for (idx, lw) in layers.iter().enumerate() {
        let prompt_in = if idx < prompts.len() { Some(prompts[idx]) } else { carried };
        let (input, rows) = match prompt_in {
            Some(p) => {
                let joined = tape.concat_rows(tokens, p);
                let rows = tape.shape(joined)[0];
                (joined, rows)
            }
            None => (tokens, vanilla_len),
        };
        let mask = mask_for(tape, rows);
        let out = transformer_layer(tape, binder, lw, input, num_heads, mask);
        if prompt_in.is_some() {
            tokens = tape.slice_rows(out, 0, vanilla_len);
            carried = Some(tape.slice_rows(out, vanilla_len, rows));
        } else {
            tokens = out;
            carried = None;
        }
        on_layer(tape, idx + 1, tokens);
    }
    tokens
}

/// Patch embeddings recorded at the hierarchy layers plus the final class
/// token (as a 1-row matrix).
pub struct EncodedImage {
    pub hierarchy_patches: Vec<(usize, Value)>,
    pub class_final: Value,
}

/// Image tower forward. `prompts` holds per-layer prompt blocks for layers
/// `1..=J`; pass an empty slice for a prompt-free run.
pub fn encode_image(
    tape: &mut Tape,
    binder: &mut Binder,
    weights: &EncoderWeights,
    cfg: &EncoderConfig,
    img: &Tensor,
    prompts: &[Value],
) -> Result<EncodedImage> {
    if prompts.len() > cfg.num_layers {
        return Err(Error::usage(format!(
            "{} prompt layers for a {}-layer tower",
            prompts.len(),
            cfg.num_layers
        )));
    }
    for (i, p) in prompts.iter().enumerate() {
        if tape.shape(*p).len() != 2 || tape.shape(*p)[1] != cfg.embed_dim_v {
            return Err(Error::usage(format!(
                "image prompt block {i} has shape {:?}, expected (_, {})",
                tape.shape(*p),
                cfg.embed_dim_v
            )));
        }
    }
    img.validate_finite("image")?;
    let patches = patchify(img, cfg)?;
    let patches = tape.constant(&patches);
    let embed = binder.bind(tape, &weights.patch_embed);
    let embedded = tape.matmul(patches, embed);
    let class = binder.bind(tape, &weights.class_token);
    let tokens = tape.concat_rows(class, embedded);

    let mut recorded = Vec::new();
    let n = cfg.num_patches();
    let final_tokens = run_tower(
        tape,
        binder,
        &weights.image_layers,
        tokens,
        prompts,
        cfg.num_heads,
        |_, _| None,
        |tape, layer, vanilla| {
            if cfg.hierarchy_layers.contains(&layer) {
                recorded.push((layer, tape.slice_rows(vanilla, 1, 1 + n)));
            }
        },
    );
    let class_final = tape.slice_rows(final_tokens, 0, 1);
    Ok(EncodedImage { hierarchy_patches: recorded, class_final })
}

/// Additive attention mask for the text tower.
///
/// Real tokens attend causally among themselves; prompt rows are visible
/// to every query; pad positions are excluded as keys everywhere.
fn text_attention_mask(context_len: usize, last_index: usize, n_prompt: usize) -> Tensor {
    let rows = context_len + n_prompt;
    let mut m = Tensor::zeros(&[rows, rows]);
    for i in 0..rows {
        for k in 0..rows {
            let allowed = if k < context_len {
                k <= last_index && (i >= context_len || k <= i)
            } else {
                true
            };
            if !allowed {
                m.set(i, k, MASK_OFF);
            }
        }
    }
    m
}

/// Text tower forward: embeds the token ids, runs the prompted causal
/// tower, reads the hidden state at the last real token, and projects it
/// into the shared space. Returns a `shared_dim` vector.
pub fn encode_text(
    tape: &mut Tape,
    binder: &mut Binder,
    weights: &EncoderWeights,
    cfg: &EncoderConfig,
    seq: &TokenSequence,
    prompts: &[Value],
) -> Result<Value> {
    if seq.ids.len() != cfg.context_len || seq.last_index >= cfg.context_len {
        return Err(Error::usage(format!(
            "token sequence length {} does not match context {}",
            seq.ids.len(),
            cfg.context_len
        )));
    }
    if prompts.len() > cfg.num_layers {
        return Err(Error::usage(format!(
            "{} prompt layers for a {}-layer tower",
            prompts.len(),
            cfg.num_layers
        )));
    }
    for (i, p) in prompts.iter().enumerate() {
        if tape.shape(*p).len() != 2 || tape.shape(*p)[1] != cfg.embed_dim_t {
            return Err(Error::usage(format!(
                "text prompt block {i} has shape {:?}, expected (_, {})",
                tape.shape(*p),
                cfg.embed_dim_t
            )));
        }
    }

    // Embedding lookup stays off-tape: the table is frozen.
    let dt = cfg.embed_dim_t;
    let table = &weights.token_embedding.value;
    let mut rows = Vec::with_capacity(cfg.context_len * dt);
    for &id in &seq.ids {
        let r = id as usize;
        assert!(r < table.rows(), "token id {r} outside embedding table");
        rows.extend_from_slice(&table.data()[r * dt..(r + 1) * dt]);
    }
    let embedded = Tensor::new(vec![cfg.context_len, dt], rows)?;
    let tokens = tape.constant(&embedded);

    let mut mask_cache: std::collections::HashMap<usize, Value> = std::collections::HashMap::new();
    let context_len = cfg.context_len;
    let last_index = seq.last_index;
    let final_tokens = run_tower(
        tape,
        binder,
        &weights.text_layers,
        tokens,
        prompts,
        cfg.num_heads,
        move |tape, rows| {
            Some(*mask_cache.entry(rows).or_insert_with(|| {
                tape.constant(&text_attention_mask(context_len, last_index, rows - context_len))
            }))
        },
        |_, _, _| {},
    );

    let hidden = tape.slice_rows(final_tokens, seq.last_index, seq.last_index + 1);
    let w = binder.bind(tape, &weights.text_proj_w);
    let b = binder.bind(tape, &weights.text_proj_b);
    let projected = tape.matmul(hidden, w);
    let projected = tape.add_bias(projected, b);
    Ok(tape.reshape(projected, vec![cfg.shared_dim]))
}

/// Project the final class token into the shared space: the global image
/// embedding, as a 1-row matrix.
pub fn image_global(
    tape: &mut Tape,
    binder: &mut Binder,
    weights: &EncoderWeights,
    class_final: Value,
) -> Result<Value> {
    let dv = weights.image_proj_w.value.rows();
    if tape.shape(class_final) != [1, dv] {
        return Err(Error::usage(format!(
            "class token shape {:?}, expected (1, {dv})",
            tape.shape(class_final)
        )));
    }
    let w = binder.bind(tape, &weights.image_proj_w);
    let b = binder.bind(tape, &weights.image_proj_b);
    let projected = tape.matmul(class_final, w);
    Ok(tape.add_bias(projected, b))
}
