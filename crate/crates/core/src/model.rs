//! The assembled model: frozen dual encoder, hybrid prompts, learnable
//! projection, anomaly maps, and hybrid-semantic image scoring.

use std::collections::HashMap;

use crate::data::CaptionPair;
use crate::encoder::{encode_image, encode_text, image_global, EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};
use crate::hsf::{semantic_embedding, HsfConfig, ScoreSource};
use crate::localization::{
    aggregate_maps, layer_anomaly_map, project_patches, AnomalyOutput, ProjectionLayer,
};
use crate::prompts::{combine_hybrid, generate_dynamic, PromptConfig, PromptSet};
use crate::tape::{Binder, Parameter, Tape, Value};
use crate::tensor::Tensor;
use crate::vocab::{tokenize, Vocabulary};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub prompt: PromptConfig,
    pub hsf: HsfConfig,
    /// One projection shared across hierarchy layers (default) or one per
    /// hierarchy layer.
    pub per_layer_projection: bool,
    /// Divides the cosines feeding the two-way softmax. 1.0 = plain.
    pub temperature: f64,
    /// Seed for every weight draw (frozen towers, prompts, projection).
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.prompt.validate(&self.encoder)?;
        if self.temperature <= 0.0 {
            return Err(Error::usage("temperature must be positive".to_string()));
        }
        if self.hsf.k == 0 {
            return Err(Error::usage("hsf k must be at least 1".to_string()));
        }
        Ok(())
    }
}

/// Frozen encoder weights plus all trainable parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub encoder: EncoderWeights,
    pub prompts: PromptSet,
    pub projections: Vec<ProjectionLayer>,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let encoder = EncoderWeights::init(&config.encoder, vocab.size(), config.seed)?;
        let prompts = PromptSet::init(&config.prompt, &config.encoder, config.seed)?;
        let (dv, du) = (config.encoder.embed_dim_v, config.encoder.shared_dim);
        let projections = if config.per_layer_projection {
            config
                .encoder
                .hierarchy_layers
                .iter()
                .enumerate()
                .map(|(i, _)| {
                    ProjectionLayer::init(&format!("proj.h{i:02}"), dv, du, config.seed ^ i as u64)
                })
                .collect()
        } else {
            vec![ProjectionLayer::init("proj", dv, du, config.seed)]
        };
        Ok(Model { config, vocab, encoder, prompts, projections })
    }

    /// The projection used for hierarchy position `pos`.
    pub fn projection_for(&self, pos: usize) -> &ProjectionLayer {
        if self.config.per_layer_projection {
            &self.projections[pos]
        } else {
            &self.projections[0]
        }
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.encoder.visit(f);
        self.prompts.visit(f);
        for p in &self.projections {
            p.visit(f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.encoder.visit_mut(f);
        self.prompts.visit_mut(f);
        for p in &mut self.projections {
            p.visit_mut(f);
        }
    }

    pub fn visit_trainable_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.visit_mut(&mut |p| {
            if p.trainable {
                f(p);
            }
        });
    }

    pub fn trainable_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |p| {
            if p.trainable {
                names.push(p.name.clone());
            }
        });
        names
    }

    pub fn zero_gradients(&mut self) {
        self.visit_mut(&mut |p| p.zero_grad());
    }

    /// Add `grads` (by parameter name) into the trainable gradients.
    pub fn accumulate_gradients(&mut self, grads: &HashMap<String, Tensor>) {
        self.visit_trainable_mut(&mut |p| {
            if let Some(g) = grads.get(&p.name) {
                for (dst, src) in p.gradient.data_mut().iter_mut().zip(g.data()) {
                    *dst += src;
                }
            }
        });
    }

    /// Digest of the frozen backbone; must survive training unchanged.
    pub fn frozen_digest(&self) -> String {
        self.encoder.digest()
    }

    /// Full forward pass for one grayscale image and a caption pair.
    pub fn forward(&self, img: &Tensor, captions: &CaptionPair) -> Result<ForwardPass> {
        let cfg = &self.config;
        let (h, w) = (cfg.encoder.image_size, cfg.encoder.image_size);
        let m = cfg.prompt.length;
        let (dv, dt) = (cfg.encoder.embed_dim_v, cfg.encoder.embed_dim_t);

        let mut tape = Tape::new();
        let mut binder = Binder::new();

        // Dynamic prompts come from the frozen backbone's class token; the
        // generator is skipped entirely when disabled.
        let dynamic = if cfg.prompt.enable_dynamic {
            Some(generate_dynamic(
                &mut tape,
                &mut binder,
                &self.encoder,
                &cfg.encoder,
                &cfg.prompt,
                &self.prompts,
                img,
            )?)
        } else {
            None
        };

        let static_image: Option<Vec<Value>> = cfg.prompt.enable_static.then(|| {
            self.prompts.static_image.iter().map(|p| binder.bind(&mut tape, p)).collect()
        });
        let static_text: Option<Vec<Value>> = cfg.prompt.enable_static.then(|| {
            self.prompts.static_text.iter().map(|p| binder.bind(&mut tape, p)).collect()
        });

        let image_prompts = combine_hybrid(
            &mut tape,
            static_image.as_deref(),
            dynamic.as_ref().map(|d| d.image.as_slice()),
            cfg.prompt.image_depth(),
            (m, dv),
        )?;
        let text_prompts = combine_hybrid(
            &mut tape,
            static_text.as_deref(),
            dynamic.as_ref().map(|d| d.text.as_slice()),
            cfg.prompt.text_depth(),
            (m, dt),
        )?;

        let encoded =
            encode_image(&mut tape, &mut binder, &self.encoder, &cfg.encoder, img, &image_prompts)?;
        let f_global =
            image_global(&mut tape, &mut binder, &self.encoder, encoded.class_final)?;

        let seq_n = tokenize(&captions.normal, &self.vocab, cfg.encoder.context_len)?;
        let seq_a = tokenize(&captions.abnormal, &self.vocab, cfg.encoder.context_len)?;
        let f_t_n =
            encode_text(&mut tape, &mut binder, &self.encoder, &cfg.encoder, &seq_n, &text_prompts)?;
        let f_t_a =
            encode_text(&mut tape, &mut binder, &self.encoder, &cfg.encoder, &seq_a, &text_prompts)?;

        let mut layer_patch_scores = Vec::new();
        let mut layer_maps = Vec::new();
        for (pos, (layer, patches)) in encoded.hierarchy_patches.iter().enumerate() {
            let proj = self.projection_for(pos);
            let projected = project_patches(&mut tape, &mut binder, proj, *patches)?;
            let lm =
                layer_anomaly_map(&mut tape, projected, f_t_n, f_t_a, h, w, cfg.temperature)?;
            layer_patch_scores.push((*layer, lm.patch_scores));
            layer_maps.push((*layer, lm.map));
        }

        let score_values: Vec<Value> = layer_patch_scores.iter().map(|(_, v)| *v).collect();
        let agg_patch_scores = aggregate_maps(&mut tape, &score_values)?;
        let map_values: Vec<Value> = layer_maps.iter().map(|(_, v)| *v).collect();
        let aggregated_map = aggregate_maps(&mut tape, &map_values)?;

        // Cluster scoring reads materialized patch scores.
        let hsf_scores: Vec<Vec<f64>> = match cfg.hsf.score_source {
            ScoreSource::Aggregated => {
                let agg = tape.data(agg_patch_scores).to_vec();
                vec![agg; encoded.hierarchy_patches.len()]
            }
            ScoreSource::PerLayer => {
                layer_patch_scores.iter().map(|(_, v)| tape.data(*v).to_vec()).collect()
            }
        };
        let f_semantic = semantic_embedding(
            &mut tape,
            &mut binder,
            &encoded.hierarchy_patches,
            &hsf_scores,
            f_global,
            &mut |pos| self.projection_for(pos).clone(),
            &cfg.hsf,
        )?;
        let score = crate::hsf::image_score(&mut tape, f_semantic, f_t_n, f_t_a)?;

        Ok(ForwardPass {
            tape,
            binder,
            hierarchy_patches: encoded.hierarchy_patches,
            layer_patch_scores,
            layer_maps,
            agg_patch_scores,
            aggregated_map,
            f_global,
            f_semantic,
            text_normal: f_t_n,
            text_abnormal: f_t_a,
            score,
        })
    }

    /// Inference: run the forward pass and materialize the outputs.
    pub fn infer(&self, img: &Tensor, captions: &CaptionPair) -> Result<AnomalyOutput> {
        Ok(self.forward(img, captions)?.outputs())
    }
}

/// Everything the forward pass produced, still attached to its tape.
pub struct ForwardPass {
    pub tape: Tape,
    pub binder: Binder,
    pub hierarchy_patches: Vec<(usize, Value)>,
    pub layer_patch_scores: Vec<(usize, Value)>,
    pub layer_maps: Vec<(usize, Value)>,
    pub agg_patch_scores: Value,
    pub aggregated_map: Value,
    pub f_global: Value,
    pub f_semantic: Value,
    pub text_normal: Value,
    pub text_abnormal: Value,
    pub score: Value,
}

impl ForwardPass {
    pub fn outputs(&self) -> AnomalyOutput {
        AnomalyOutput {
            per_layer_maps: self
                .layer_maps
                .iter()
                .map(|(layer, v)| (*layer, self.tape.tensor(*v)))
                .collect(),
            aggregated_map: self.tape.tensor(self.aggregated_map),
            image_score: self.tape.data(self.score)[0],
        }
    }

    pub fn image_score(&self) -> f64 {
        self.tape.data(self.score)[0]
    }

    /// Pre-resize per-patch scores of the aggregated map.
    pub fn aggregated_patch_scores(&self) -> Vec<f64> {
        self.tape.data(self.agg_patch_scores).to_vec()
    }
}
