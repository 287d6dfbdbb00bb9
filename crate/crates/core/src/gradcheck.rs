//! Finite-difference verification of the full training loss.
//!
//! Builds a small model, runs one forward/backward over the complete
//! objective (map focal + map dice + score focal, fusion path included),
//! then compares every trainable coordinate against central differences.

use crate::data::{synth_sample, CaptionPair, Category};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::hsf::HsfConfig;
use crate::model::{Model, ModelConfig};
use crate::prompts::PromptConfig;
use crate::rng::SeededRng;
use crate::tape::{finite_diff_check, Parameter};
use crate::tensor::Tensor;
use crate::training::{total_loss_value, TrainConfig};
use crate::vocab::Vocabulary;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const PASS_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub per_param: Vec<(String, f64)>,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= PASS_THRESHOLD
    }
}

/// Small full-featured config for the check: every trainable family is
/// present (static prompts, generator linears, projection).
pub fn gradcheck_config(size: usize, seed: u64) -> Result<ModelConfig> {
    if size < 8 || size % 8 != 0 {
        return Err(Error::usage(format!(
            "gradcheck size must be a positive multiple of the 8-pixel patch, got {size}"
        )));
    }
    Ok(ModelConfig {
        encoder: EncoderConfig {
            image_size: size,
            patch_size: 8,
            embed_dim_v: 16,
            embed_dim_t: 16,
            shared_dim: 16,
            num_layers: 2,
            num_heads: 2,
            context_len: 12,
            hierarchy_layers: vec![1, 2],
        },
        prompt: PromptConfig {
            depth: 1,
            depth_text: None,
            length: 2,
            enable_static: true,
            enable_dynamic: true,
        },
        hsf: HsfConfig { k: 4, ..Default::default() },
        per_layer_projection: false,
        temperature: 1.0,
        seed,
    })
}

fn loss_of(model: &Model, img: &Tensor, mask: &Tensor, captions: &CaptionPair, tcfg: &TrainConfig) -> Result<f64> {
    let mut fp = model.forward(img, captions)?;
    let loss =
        total_loss_value(&mut fp.tape, fp.aggregated_map, fp.score, mask, 1, tcfg)?;
    Ok(fp.tape.data(loss)[0])
}

/// Run the check over every trainable parameter of a fresh model on one
/// synthetic abnormal sample.
pub fn gradcheck_full_loss(size: usize, seed: u64, step: f64) -> Result<GradCheckReport> {
    let config = gradcheck_config(size, seed)?;
    let mut model = Model::new(config, Vocabulary::builtin())?;
    // Nonzero generator weights so the dynamic path carries real signal.
    let mut rng = SeededRng::new(seed).derive(0x47_43);
    for p in [&mut model.prompts.dpg_image_w, &mut model.prompts.dpg_text_w] {
        p.value = Tensor::random_normal(p.value.shape(), 0.05, &mut rng);
    }

    let mut sample_rng = SeededRng::new(seed).derive(0x53_41);
    let (img, mask) = synth_sample(Category::Squares, size, true, &mut sample_rng);
    let captions = CaptionPair {
        normal: "a photo of normal squares".to_string(),
        abnormal: "a photo of damaged squares".to_string(),
    };
    let tcfg = TrainConfig::default();

    // Analytic gradients.
    model.zero_gradients();
    let mut fp = model.forward(&img, &captions)?;
    let loss = total_loss_value(&mut fp.tape, fp.aggregated_map, fp.score, &mask, 1, &tcfg)?;
    fp.tape.backward(loss)?;
    let grads = fp.binder.collect_gradients(&fp.tape);
    model.accumulate_gradients(&grads);
    drop(fp);

    let mut per_param = Vec::new();
    let mut coordinates = 0;
    let names = model.trainable_names();
    for name in names {
        let mut checked: Option<Parameter> = None;
        model.visit(&mut |p| {
            if p.name == name {
                checked = Some(p.clone());
            }
        });
        let checked = checked.expect("trainable parameter exists");
        coordinates += checked.value.len();
        let base = model.clone();
        let target = name.clone();
        let err = finite_diff_check(
            |probe| {
                let mut perturbed = base.clone();
                perturbed.visit_mut(&mut |p| {
                    if p.name == target {
                        p.value = probe.clone();
                    }
                });
                loss_of(&perturbed, &img, &mask, &captions, &tcfg)
            },
            &checked,
            step,
        )?;
        per_param.push((name, err));
    }

    let max_rel_error =
        per_param.iter().map(|(_, e)| *e).fold(0.0f64, f64::max);
    Ok(GradCheckReport { max_rel_error, per_param, coordinates })
}
