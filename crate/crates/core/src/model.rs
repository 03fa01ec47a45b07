//! The assembled segmentation model: one parameter store holding the ViT
//! encoder (with optional prompt bank) and the mask decoder, wired to the
//! query builder. One forward pass produces per-class mask logits for an
//! image against an arbitrary set of active classes.
//!
//! Also hosts the frozen-backbone stand-in: before freezing, the encoder can
//! be briefly pretrained on an attribute-classification task over the
//! synthetic world, scoring the [cls] embedding against the same frozen
//! attribute prototypes the class text embeddings are built from. A randomly
//! initialized frozen encoder is supported but makes the fixed-backbone
//! baselines uninformative.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::WorldSpec;
use crate::decoder::{upsample, DecoderConfig, MaskDecoder};
use crate::encoder::{EncoderConfig, PromptConfig, Regime, ViTEncoder};
use crate::error::{Error, Result};
use crate::graph::{Graph, Tensor};
use crate::optim::{AdamW, OptimState};
use crate::params::{BoundParams, ParamId, ParamStore};
use crate::text::{build_queries, synthesize_bank, ClassEmbeddingBank, QueryFormat};
use crate::value::Value;

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub prompt: Option<PromptConfig>,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub query_format: QueryFormat,
    pub self_attention: bool,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.encoder.regime == Regime::Dpt && self.prompt.is_none() {
            return Err(Error::Config("dpt regime requires a prompt bank".into()));
        }
        Ok(())
    }
}

pub struct SegModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: ViTEncoder,
    pub decoder: MaskDecoder,
}

pub struct Forward {
    /// `[active, num_patches]` mask logits.
    pub masks: Tensor,
    /// `[width]` image embedding.
    pub g: Tensor,
}

impl SegModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let encoder = ViTEncoder::new(
            &mut store,
            cfg.encoder.clone(),
            cfg.prompt.as_ref(),
            cfg.init_seed,
        )?;
        let d = cfg.encoder.width;
        let mut dec_cfg = DecoderConfig::new(d * cfg.query_format.dim_multiplier(), d);
        dec_cfg.layers = cfg.decoder_layers;
        dec_cfg.heads = cfg.decoder_heads;
        dec_cfg.self_attention = cfg.self_attention;
        let decoder = MaskDecoder::new(&mut store, dec_cfg, cfg.init_seed)?;
        Ok(SegModel {
            cfg,
            store,
            encoder,
            decoder,
        })
    }

    /// Bind all parameters into a graph. One binding serves every forward on
    /// that graph, and its leaves are where gradients land after backward.
    pub fn bind(&self, graph: &Graph) -> BoundParams {
        self.store.bind(graph)
    }

    /// Forward to patch-grid mask logits for the given active classes.
    pub fn forward(
        &self,
        graph: &Graph,
        bound: &BoundParams,
        bank: &ClassEmbeddingBank,
        image: &Value,
        active: &[usize],
    ) -> Result<Forward> {
        if bank.dim() != self.cfg.encoder.width {
            return Err(Error::CheckpointMismatch(format!(
                "embedding dim {} but encoder width {}",
                bank.dim(),
                self.cfg.encoder.width
            )));
        }
        let enc = self.encoder.encode(graph, bound, image)?;
        let queries = build_queries(graph, bank, &enc.g, self.cfg.query_format, active)?;
        let masks = self.decoder.decode(bound, &queries, &enc.patches)?;
        Ok(Forward { masks, g: enc.g })
    }

    /// Forward to pixel-resolution logits `[active, h, w]`.
    pub fn forward_pixels(
        &self,
        graph: &Graph,
        bound: &BoundParams,
        bank: &ClassEmbeddingBank,
        image: &Value,
        active: &[usize],
    ) -> Result<Tensor> {
        let s = self.cfg.encoder.image_size;
        let fwd = self.forward(graph, bound, bank, image, active)?;
        upsample(&fwd.masks, s, s)
    }

    /// Inference-only pixel logits on a throwaway graph.
    pub fn infer_pixels(
        &self,
        bank: &ClassEmbeddingBank,
        image: &Value,
        active: &[usize],
    ) -> Result<Value> {
        let graph = Graph::new();
        let bound = self.bind(&graph);
        Ok(self
            .forward_pixels(&graph, &bound, bank, image, active)?
            .value())
    }

    /// Ids of every parameter the current regime trains.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.store.trainable_ids()
    }
}

/// Pretrain the encoder backbone as a stand-in for a pretrained frozen
/// model: single-object images of seen classes, classified by scoring `g`
/// against the frozen shape and color prototypes. All encoder parameters
/// train during this phase; the configured regime's freeze is re-applied
/// afterwards.
pub fn pretrain_backbone(
    model: &mut SegModel,
    world: &WorldSpec,
    iters: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<()> {
    if iters == 0 {
        return Ok(());
    }
    let d = model.cfg.encoder.width;
    let synth = synthesize_bank(world, d)?;
    let shape_protos = synth.shape_protos;
    let color_protos = synth.color_protos;
    // attribute logits need some spread before softmax; fixed temperature
    let scale = 10.0;

    // train the whole backbone (not the prompts) regardless of regime
    for id in model.encoder.backbone_param_ids() {
        model.store.set_trainable(id, true);
    }
    for id in model.encoder.prompt_param_ids() {
        model.store.set_trainable(id, false);
    }
    let dec_ids = model.decoder.param_ids();
    for &id in &dec_ids {
        model.store.set_trainable(id, false);
    }

    let seen_classes: Vec<usize> = (0..world.classes.len()).filter(|&c| world.seen[c]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0xBACB);
    let opt = AdamW::new(lr, 0.0);
    let mut state = OptimState::new();

    for _ in 0..iters {
        let mut grad_sum: HashMap<ParamId, Vec<f64>> = HashMap::new();
        for _ in 0..batch_size {
            let class_id = seen_classes[rng.random_range(0..seen_classes.len())];
            let sample_seed: u64 = rng.random();
            let (image, shape_idx, color_idx) =
                crate::data::single_object_sample(world, class_id, sample_seed)?;

            let graph = Graph::new();
            let bound = model.store.bind(&graph);
            let enc = model.encoder.encode(&graph, &bound, &image)?;
            let g_col = enc.g.reshape(&[d, 1])?;
            let shape_scores = graph
                .constant(shape_protos.clone())
                .matmul(&g_col)?
                .scale(scale);
            let color_scores = graph
                .constant(color_protos.clone())
                .matmul(&g_col)?
                .scale(scale);
            let ce = |scores: &Tensor, idx: usize, n: usize| -> Result<Tensor> {
                let mut onehot = Value::zeros(&[n, 1]);
                onehot.data_mut()[idx] = 1.0;
                Ok(scores
                    .softmax(0)?
                    .log()
                    .mul(&graph.constant(onehot))?
                    .sum_all()
                    .neg())
            };
            let loss = ce(&shape_scores, shape_idx, world.shapes.len())?
                .add(&ce(&color_scores, color_idx, world.colors.len())?)?;
            loss.backward()?;

            for id in model.store.trainable_ids() {
                let g = bound[id]
                    .grad()
                    .ok_or_else(|| Error::MissingGrad(model.store.name(id).to_string()))?;
                let entry = grad_sum
                    .entry(id)
                    .or_insert_with(|| vec![0.0; g.numel()]);
                for (a, b) in entry.iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
        for g in grad_sum.values_mut() {
            for v in g.iter_mut() {
                *v /= batch_size as f64;
            }
        }
        opt.step(&mut model.store, &grad_sum, &mut state, None)?;
    }

    // restore regime flags
    model.encoder.apply_regime(&mut model.store);
    for id in dec_ids {
        model.store.set_trainable(id, true);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_world;

    fn tiny_model(regime: Regime, format: QueryFormat) -> SegModel {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                image_size: 16,
                patch_size: 4,
                depth: 2,
                width: 16,
                heads: 2,
                mlp_ratio: 2,
                regime,
                attention_identity: false,
            },
            prompt: (regime == Regime::Dpt).then(|| PromptConfig::all_layers(3, 2)),
            decoder_layers: 2,
            decoder_heads: 2,
            query_format: format,
            self_attention: false,
            init_seed: 5,
        };
        SegModel::new(cfg).unwrap()
    }

    #[test]
    fn forward_shapes_for_all_formats() {
        let world = make_world(1, 4, 3, 3, 16, false).unwrap();
        let synth = synthesize_bank(&world, 16).unwrap();
        let img = crate::testsupport::randv(1, &[3, 16, 16]);
        for fmt in [QueryFormat::T, QueryFormat::CatProdT, QueryFormat::CatProdAbsT] {
            let model = tiny_model(Regime::Fix, fmt);
            let graph = Graph::new();
            let bound = model.bind(&graph);
            let out = model
                .forward(&graph, &bound, &synth.bank, &img, &[0, 2, 5])
                .unwrap();
            assert_eq!(out.masks.shape(), vec![3, 16]);
            let px = model
                .forward_pixels(&graph, &bound, &synth.bank, &img, &[0, 2, 5])
                .unwrap();
            assert_eq!(px.shape(), vec![3, 16, 16]);
        }
    }

    #[test]
    fn dim_mismatch_between_bank_and_encoder_rejected() {
        let world = make_world(1, 4, 3, 3, 16, false).unwrap();
        let synth = synthesize_bank(&world, 8).unwrap();
        let model = tiny_model(Regime::Fix, QueryFormat::CatProdT);
        let img = crate::testsupport::randv(1, &[3, 16, 16]);
        let graph = Graph::new();
        let bound = model.bind(&graph);
        assert!(matches!(
            model.forward(&graph, &bound, &synth.bank, &img, &[0]),
            Err(Error::CheckpointMismatch(_))
        ));
    }

    #[test]
    fn pretrain_moves_backbone_and_respects_regime_after() {
        let world = make_world(3, 4, 3, 3, 16, false).unwrap();
        let mut model = tiny_model(Regime::Fix, QueryFormat::CatProdT);
        let before = model.store.value(model.store.id("enc.patch.w").unwrap()).clone();
        pretrain_backbone(&mut model, &world, 3, 2, 1e-3, 9).unwrap();
        let after = model.store.value(model.store.id("enc.patch.w").unwrap()).clone();
        assert_ne!(before, after);
        // Fix regime restored: encoder frozen, decoder trainable
        assert!(!model.store.is_trainable(model.store.id("enc.patch.w").unwrap()));
        assert!(model.store.is_trainable(model.store.id("dec.qin.w").unwrap()));
    }

    #[test]
    fn pretrain_is_deterministic() {
        let world = make_world(3, 4, 3, 3, 16, false).unwrap();
        let run = || {
            let mut model = tiny_model(Regime::Fix, QueryFormat::CatProdT);
            pretrain_backbone(&mut model, &world, 2, 2, 1e-3, 9).unwrap();
            model
                .store
                .value(model.store.id("enc.patch.w").unwrap())
                .clone()
        };
        assert_eq!(run(), run());
    }
}
