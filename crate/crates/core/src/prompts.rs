//! Learnable prompts: static per-layer tokens, the dynamic prompt
//! generator (frozen backbone class token through a learnable linear
//! layer), and their hybrid sum.

use crate::encoder::{encode_image, EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tape::{Binder, Parameter, Tape, Value};
use crate::tensor::Tensor;

/// Static prompt initialization spread.
const STATIC_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PromptConfig {
    /// Layers receiving fresh prompts in the image tower.
    pub depth: usize,
    /// Override for the text tower; defaults to `depth`.
    pub depth_text: Option<usize>,
    /// Prompt tokens per prompted layer.
    pub length: usize,
    pub enable_static: bool,
    pub enable_dynamic: bool,
}

impl PromptConfig {
    pub fn validate(&self, encoder: &EncoderConfig) -> Result<()> {
        if self.depth == 0 || self.depth > encoder.num_layers {
            return Err(Error::usage(format!(
                "prompt depth {} outside 1..={}",
                self.depth, encoder.num_layers
            )));
        }
        if let Some(dt) = self.depth_text {
            if dt == 0 || dt > encoder.num_layers {
                return Err(Error::usage(format!(
                    "text prompt depth {dt} outside 1..={}",
                    encoder.num_layers
                )));
            }
        }
        if self.length == 0 {
            return Err(Error::usage("prompt length must be at least 1".to_string()));
        }
        Ok(())
    }

    pub fn image_depth(&self) -> usize {
        self.depth
    }

    pub fn text_depth(&self) -> usize {
        self.depth_text.unwrap_or(self.depth)
    }
}

/// All trainable prompt parameters for both encoders.
#[derive(Debug, Clone)]
pub struct PromptSet {
    pub static_image: Vec<Parameter>,
    pub static_text: Vec<Parameter>,
    pub dpg_image_w: Parameter,
    pub dpg_image_b: Parameter,
    pub dpg_text_w: Parameter,
    pub dpg_text_b: Parameter,
}

impl PromptSet {
    /// Static prompts start from a seeded Gaussian; the generator linears
    /// start at zero so training begins at the pure-static model.
    pub fn init(pcfg: &PromptConfig, encoder: &EncoderConfig, seed: u64) -> Result<Self> {
        pcfg.validate(encoder)?;
        let mut rng = SeededRng::new(seed).derive(0x5052_4f4d);
        let m = pcfg.length;
        let (dv, dt) = (encoder.embed_dim_v, encoder.embed_dim_t);
        let static_image = (0..pcfg.image_depth())
            .map(|j| {
                Parameter::trainable(
                    format!("prompts.static_image.{j:02}"),
                    Tensor::random_normal(&[m, dv], STATIC_INIT_STD, &mut rng),
                )
            })
            .collect();
        let static_text = (0..pcfg.text_depth())
            .map(|j| {
                Parameter::trainable(
                    format!("prompts.static_text.{j:02}"),
                    Tensor::random_normal(&[m, dt], STATIC_INIT_STD, &mut rng),
                )
            })
            .collect();
        let img_out = pcfg.image_depth() * m * dv;
        let txt_out = pcfg.text_depth() * m * dt;
        Ok(PromptSet {
            static_image,
            static_text,
            dpg_image_w: Parameter::trainable("prompts.dpg_image.weight", Tensor::zeros(&[dv, img_out])),
            dpg_image_b: Parameter::trainable("prompts.dpg_image.bias", Tensor::zeros(&[img_out])),
            dpg_text_w: Parameter::trainable("prompts.dpg_text.weight", Tensor::zeros(&[dv, txt_out])),
            dpg_text_b: Parameter::trainable("prompts.dpg_text.bias", Tensor::zeros(&[txt_out])),
        })
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        for p in &self.static_image {
            f(p);
        }
        for p in &self.static_text {
            f(p);
        }
        f(&self.dpg_image_w);
        f(&self.dpg_image_b);
        f(&self.dpg_text_w);
        f(&self.dpg_text_b);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        for p in &mut self.static_image {
            f(p);
        }
        for p in &mut self.static_text {
            f(p);
        }
        f(&mut self.dpg_image_w);
        f(&mut self.dpg_image_b);
        f(&mut self.dpg_text_w);
        f(&mut self.dpg_text_b);
    }

    /// SHA-256 over all prompt tensors, for isolation checks.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        self.visit(&mut |p: &Parameter| {
            hasher.update(p.name.as_bytes());
            for &v in p.value.data() {
                hasher.update(v.to_le_bytes());
            }
        });
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Per-layer dynamic prompt blocks for both towers.
pub struct DynamicPrompts {
    pub image: Vec<Value>,
    pub text: Vec<Value>,
}

/// Run the frozen image tower prompt-free, then project its class token
/// through the generator linears into per-layer prompt blocks.
pub fn generate_dynamic(
    tape: &mut Tape,
    binder: &mut Binder,
    weights: &EncoderWeights,
    encoder_cfg: &EncoderConfig,
    pcfg: &PromptConfig,
    pset: &PromptSet,
    img: &Tensor,
) -> Result<DynamicPrompts> {
    let backbone = encode_image(tape, binder, weights, encoder_cfg, img, &[])?;
    let class = backbone.class_final;

    let m = pcfg.length;
    let split = |tape: &mut Tape, flat: Value, depth: usize, dim: usize| -> Vec<Value> {
        (0..depth)
            .map(|j| {
                let block = tape.slice_cols(flat, j * m * dim, (j + 1) * m * dim);
                tape.reshape(block, vec![m, dim])
            })
            .collect()
    };

    let wi = binder.bind(tape, &pset.dpg_image_w);
    let bi = binder.bind(tape, &pset.dpg_image_b);
    let flat_i = tape.matmul(class, wi);
    let flat_i = tape.add_bias(flat_i, bi);
    let image = split(tape, flat_i, pcfg.image_depth(), encoder_cfg.embed_dim_v);

    let wt = binder.bind(tape, &pset.dpg_text_w);
    let bt = binder.bind(tape, &pset.dpg_text_b);
    let flat_t = tape.matmul(class, wt);
    let flat_t = tape.add_bias(flat_t, bt);
    let text = split(tape, flat_t, pcfg.text_depth(), encoder_cfg.embed_dim_t);

    Ok(DynamicPrompts { image, text })
}

/// Elementwise sum of static and dynamic prompt blocks. A disabled branch
/// contributes zero; with exactly one branch enabled its blocks pass
/// through untouched, and with both disabled the result is all-zero
/// blocks of the given shape.
pub fn combine_hybrid(
    tape: &mut Tape,
    static_blocks: Option<&[Value]>,
    dynamic_blocks: Option<&[Value]>,
    depth: usize,
    block_shape: (usize, usize),
) -> Result<Vec<Value>> {
    let check = |tape: &Tape, blocks: &[Value], which: &str| -> Result<()> {
        if blocks.len() != depth {
            return Err(Error::usage(format!(
                "{which} prompts have {} layers, expected {depth}",
                blocks.len()
            )));
        }
        for (i, b) in blocks.iter().enumerate() {
            if tape.shape(*b) != [block_shape.0, block_shape.1] {
                return Err(Error::usage(format!(
                    "{which} prompt block {i} has shape {:?}, expected {:?}",
                    tape.shape(*b),
                    block_shape
                )));
            }
        }
        Ok(())
    };
    if let Some(s) = static_blocks {
        check(tape, s, "static")?;
    }
    if let Some(d) = dynamic_blocks {
        check(tape, d, "dynamic")?;
    }
    Ok(match (static_blocks, dynamic_blocks) {
        (Some(s), Some(d)) => s.iter().zip(d).map(|(&a, &b)| tape.add(a, b)).collect(),
        (Some(s), None) => s.to_vec(),
        (None, Some(d)) => d.to_vec(),
        (None, None) => {
            let zeros = Tensor::zeros(&[block_shape.0, block_shape.1]);
            (0..depth).map(|_| tape.constant(&zeros)).collect()
        }
    })
}

/// The pixel-map objective used by per-image refinement: weighted focal
/// plus dice of the aggregated map against the mask (no score term).
pub fn pixel_map_loss(
    model: &crate::model::Model,
    img: &Tensor,
    mask: &Tensor,
    captions: &crate::data::CaptionPair,
    cfg: &crate::training::TrainConfig,
) -> Result<f64> {
    let mut fp = model.forward(img, captions)?;
    let focal = crate::training::focal_loss_value(
        &mut fp.tape,
        fp.aggregated_map,
        mask,
        cfg.focal_alpha,
        cfg.focal_gamma,
    )?;
    let dice = crate::training::dice_loss_value(&mut fp.tape, fp.aggregated_map, mask, cfg.dice_eps)?;
    let f = fp.tape.scale(focal, cfg.w_focal_map);
    let d = fp.tape.scale(dice, cfg.w_dice_map);
    let loss = fp.tape.add(f, d);
    Ok(fp.tape.data(loss)[0])
}

/// Refine a trained model's prompts for one specific (image, mask) pair:
/// plain gradient steps on the pixel-map losses, touching only a cloned
/// prompt set. The given model is left untouched.
pub fn refine_prompts_per_image(
    model: &crate::model::Model,
    img: &Tensor,
    mask: &Tensor,
    captions: &crate::data::CaptionPair,
    cfg: &crate::training::TrainConfig,
    steps: usize,
    lr: f64,
) -> Result<PromptSet> {
    if mask.shape() != img.shape() {
        return Err(Error::input(format!(
            "mask extents {:?} do not match image {:?}",
            mask.shape(),
            img.shape()
        )));
    }
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::input("refinement mask must be binary".to_string()));
    }
    let mut work = model.clone();
    for _ in 0..steps {
        let mut fp = work.forward(img, captions)?;
        let focal = crate::training::focal_loss_value(
            &mut fp.tape,
            fp.aggregated_map,
            mask,
            cfg.focal_alpha,
            cfg.focal_gamma,
        )?;
        let dice =
            crate::training::dice_loss_value(&mut fp.tape, fp.aggregated_map, mask, cfg.dice_eps)?;
        let f = fp.tape.scale(focal, cfg.w_focal_map);
        let d = fp.tape.scale(dice, cfg.w_dice_map);
        let loss = fp.tape.add(f, d);
        fp.tape.backward(loss)?;
        let grads = fp.binder.collect_gradients(&fp.tape);
        work.zero_gradients();
        work.accumulate_gradients(&grads);
        work.prompts.visit_mut(&mut |p| {
            for (x, g) in p.value.data_mut().iter_mut().zip(p.gradient.data()) {
                *x -= lr * g;
            }
            p.zero_grad();
        });
        // Projection gradients were accumulated too; refinement must not
        // apply them.
        work.zero_gradients();
    }
    Ok(work.prompts)
}
