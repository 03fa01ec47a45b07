//! Optimization loops and evaluation protocols.
//!
//! - Inductive: train on seen-class ground truth with seen-class queries;
//!   unseen embeddings are never read (the bank's access log proves it).
//! - Transductive: the first half of the iterations is inductive; afterwards
//!   every batch is pseudo-labeled by the live model over all classes and
//!   supervised on the merged maps. Ground-truth labels are never overwritten.
//!   The unseen-only variant assigns a pseudo label only where the argmax
//!   falls in the unseen set.
//! - Supervised: all classes, full labels (the upper-bound protocol).
//!
//! Training is deterministic given (seed, config, dataset): all randomness is
//! ChaCha-derived, batch-parallel gradients are reduced in sample order, and
//! parameters are rounded through f32 at init and at the end so the in-memory
//! model always equals its checkpoint.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{Dataset, IGNORE_INDEX};
use crate::encoder::{EncoderConfig, PromptConfig, Regime};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{build_targets, loss_for_mode, LossConfig, LossMode};
use crate::metrics::{compute, ConfusionMatrix, EvalReport};
use crate::model::{pretrain_backbone, ModelConfig, SegModel};
use crate::optim::{AdamW, OptimState};
use crate::params::ParamId;
use crate::text::{ClassEmbeddingBank, QueryFormat};
use crate::value::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Inductive,
    TransductiveAll,
    TransductiveUnseenOnly,
    Supervised,
}

impl TrainMode {
    pub fn name(&self) -> &'static str {
        match self {
            TrainMode::Inductive => "inductive",
            TrainMode::TransductiveAll => "transductive-all",
            TrainMode::TransductiveUnseenOnly => "transductive-unseen-only",
            TrainMode::Supervised => "supervised",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "inductive" => Ok(TrainMode::Inductive),
            "transductive-all" => Ok(TrainMode::TransductiveAll),
            "transductive-unseen-only" => Ok(TrainMode::TransductiveUnseenOnly),
            "supervised" => Ok(TrainMode::Supervised),
            other => Err(Error::Config(format!("unknown training mode `{other}`"))),
        }
    }

    pub fn is_transductive(&self) -> bool {
        matches!(self, TrainMode::TransductiveAll | TrainMode::TransductiveUnseenOnly)
    }
}

/// Every tunable of a run. Serializes to flat key=value text (the config file
/// format, the checkpoint echo, and the report's config block).
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub regime: Regime,
    pub loss: LossMode,
    pub query_format: QueryFormat,
    pub iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Linear warmup iterations; 0 disables.
    pub lr_warmup: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub prompt_tokens: usize,
    /// 1-based inclusive layer range; `None` means every layer.
    pub prompt_layers: Option<(usize, usize)>,
    /// Minimum max-sigmoid confidence for a pseudo label; `None` disables.
    pub threshold: Option<f64>,
    pub seed: u64,
    pub log_every: usize,
    /// Attribute-classification pretraining steps for the backbone stand-in;
    /// 0 trains from random init.
    pub pretrain_iters: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub self_attention: bool,
    /// Compute batch gradients on worker threads (reduction stays ordered, so
    /// results are bitwise identical either way).
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Inductive,
            regime: Regime::Dpt,
            loss: LossMode::NelPlus,
            query_format: QueryFormat::CatProdT,
            iters: 2000,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 1e-4,
            lr_warmup: 0,
            alpha: 1.0,
            beta: 1.0,
            gamma: 2.0,
            prompt_tokens: 10,
            prompt_layers: None,
            threshold: None,
            seed: 1,
            log_every: 20,
            pretrain_iters: 300,
            image_size: 32,
            patch_size: 8,
            depth: 6,
            width: 64,
            heads: 4,
            mlp_ratio: 4,
            decoder_layers: 3,
            decoder_heads: 4,
            self_attention: false,
            parallel: true,
        }
    }
}

impl TrainConfig {
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            depth: self.depth,
            width: self.width,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            regime: self.regime,
            attention_identity: false,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            mode: self.loss,
            gamma: self.gamma,
            alpha: self.alpha,
            beta: self.beta,
            ignore_index: IGNORE_INDEX,
            eps_dice: 1e-6,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let prompt = (self.regime == Regime::Dpt).then(|| match self.prompt_layers {
            Some((a, b)) => PromptConfig {
                tokens: self.prompt_tokens,
                first_layer: a,
                last_layer: b,
            },
            None => PromptConfig::all_layers(self.prompt_tokens, self.depth),
        });
        ModelConfig {
            encoder: self.encoder_config(),
            prompt,
            decoder_layers: self.decoder_layers,
            decoder_heads: self.decoder_heads,
            query_format: self.query_format,
            self_attention: self.self_attention,
            init_seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<Vec<String>> {
        let mut problems = Vec::new();
        if let Err(e) = self.encoder_config().validate() {
            problems.push(e.to_string());
        }
        if let Err(e) = self.loss_config().validate() {
            problems.push(e.to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch size must be >= 1".into());
        }
        if self.log_every == 0 {
            problems.push("log-every must be >= 1".into());
        }
        if let Some((a, b)) = self.prompt_layers {
            if a == 0 || a > b || b > self.depth {
                problems.push(format!(
                    "prompt layer range {a}..{b} invalid for depth {}",
                    self.depth
                ));
            }
        }
        if let Some(t) = self.threshold {
            if !(0.0..=1.0).contains(&t) {
                problems.push(format!("threshold must be in [0, 1], got {t}"));
            }
        }
        if problems.is_empty() {
            Ok(vec![])
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Flat key=value form; parseable by [`TrainConfig::from_text`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        kv("mode", self.mode.name().into());
        kv("regime", self.regime.name().into());
        kv("loss", self.loss.name().into());
        kv("query-format", self.query_format.name().into());
        kv("iters", self.iters.to_string());
        kv("batch-size", self.batch_size.to_string());
        kv("lr", self.lr.to_string());
        kv("wd", self.weight_decay.to_string());
        kv("lr-warmup", self.lr_warmup.to_string());
        kv("alpha", self.alpha.to_string());
        kv("beta", self.beta.to_string());
        kv("gamma", self.gamma.to_string());
        kv("prompt-tokens", self.prompt_tokens.to_string());
        kv(
            "prompt-layers",
            match self.prompt_layers {
                Some((a, b)) => format!("{a}..{b}"),
                None => "all".into(),
            },
        );
        kv(
            "threshold",
            self.threshold.map_or("none".into(), |t| t.to_string()),
        );
        kv("seed", self.seed.to_string());
        kv("log-every", self.log_every.to_string());
        kv("pretrain-iters", self.pretrain_iters.to_string());
        kv("image-size", self.image_size.to_string());
        kv("patch-size", self.patch_size.to_string());
        kv("depth", self.depth.to_string());
        kv("width", self.width.to_string());
        kv("heads", self.heads.to_string());
        kv("mlp-ratio", self.mlp_ratio.to_string());
        kv("decoder-layers", self.decoder_layers.to_string());
        kv("decoder-heads", self.decoder_heads.to_string());
        kv("self-attention", (self.self_attention as u8).to_string());
        kv("parallel", (self.parallel as u8).to_string());
        s
    }

    /// Apply one key=value pair (config file lines and CLI overrides share
    /// this path).
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("bad value `{value}` for {what}"));
        match key {
            "mode" => self.mode = TrainMode::parse(value)?,
            "regime" => self.regime = Regime::parse(value)?,
            "loss" => self.loss = LossMode::parse(value)?,
            "query-format" => self.query_format = QueryFormat::parse(value)?,
            "iters" => self.iters = value.parse().map_err(|_| bad("iters"))?,
            "batch-size" => self.batch_size = value.parse().map_err(|_| bad("batch-size"))?,
            "lr" => self.lr = value.parse().map_err(|_| bad("lr"))?,
            "wd" => self.weight_decay = value.parse().map_err(|_| bad("wd"))?,
            "lr-warmup" => self.lr_warmup = value.parse().map_err(|_| bad("lr-warmup"))?,
            "alpha" => self.alpha = value.parse().map_err(|_| bad("alpha"))?,
            "beta" => self.beta = value.parse().map_err(|_| bad("beta"))?,
            "gamma" => self.gamma = value.parse().map_err(|_| bad("gamma"))?,
            "prompt-tokens" => {
                self.prompt_tokens = value.parse().map_err(|_| bad("prompt-tokens"))?
            }
            "prompt-layers" => {
                self.prompt_layers = if value == "all" {
                    None
                } else {
                    let (a, b) = value
                        .split_once("..")
                        .ok_or_else(|| bad("prompt-layers (want a..b or all)"))?;
                    Some((
                        a.parse().map_err(|_| bad("prompt-layers"))?,
                        b.parse().map_err(|_| bad("prompt-layers"))?,
                    ))
                }
            }
            "threshold" => {
                self.threshold = if value == "none" {
                    None
                } else {
                    Some(value.parse().map_err(|_| bad("threshold"))?)
                }
            }
            "seed" => self.seed = value.parse().map_err(|_| bad("seed"))?,
            "log-every" => self.log_every = value.parse().map_err(|_| bad("log-every"))?,
            "pretrain-iters" => {
                self.pretrain_iters = value.parse().map_err(|_| bad("pretrain-iters"))?
            }
            "image-size" => self.image_size = value.parse().map_err(|_| bad("image-size"))?,
            "patch-size" => self.patch_size = value.parse().map_err(|_| bad("patch-size"))?,
            "depth" => self.depth = value.parse().map_err(|_| bad("depth"))?,
            "width" => self.width = value.parse().map_err(|_| bad("width"))?,
            "heads" => self.heads = value.parse().map_err(|_| bad("heads"))?,
            "mlp-ratio" => self.mlp_ratio = value.parse().map_err(|_| bad("mlp-ratio"))?,
            "decoder-layers" => {
                self.decoder_layers = value.parse().map_err(|_| bad("decoder-layers"))?
            }
            "decoder-heads" => {
                self.decoder_heads = value.parse().map_err(|_| bad("decoder-heads"))?
            }
            "self-attention" => self.self_attention = parse_bool(value).ok_or_else(|| bad("self-attention"))?,
            "parallel" => self.parallel = parse_bool(value).ok_or_else(|| bad("parallel"))?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad config line `{line}`")))?;
            cfg.apply_kv(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "1" | "true" | "yes" => Some(true),
        "0" | "false" | "no" => Some(false),
        _ => None,
    }
}

/// One logged training iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRecord {
    pub iter: usize,
    pub phase: u8,
    pub loss: f64,
    pub lr: f64,
}

pub fn history_to_text(history: &[HistoryRecord]) -> String {
    let mut s = String::new();
    for r in history {
        s.push_str(&format!(
            "iter={} phase={} loss={} lr={}\n",
            r.iter, r.phase, r.loss, r.lr
        ));
    }
    s
}

pub struct TrainOutcome {
    pub model: SegModel,
    pub config: TrainConfig,
    pub history: Vec<HistoryRecord>,
}

/// Which pixels receive pseudo labels in the self-training phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PseudoMode {
    /// Every ignore-labeled pixel receives the all-class argmax.
    All,
    /// A pixel is labeled only when its argmax falls in the unseen set.
    UnseenOnly,
}

/// Apply the pseudo-labeling rules to one sample. `logits` are the
/// pixel-resolution scores over all classes in id order; ground-truth labels
/// are never overwritten; with a threshold set, pixels whose max sigmoid
/// probability falls below it stay ignored.
pub fn merge_pseudo_labels(
    logits: &Value,
    gt: &[u8],
    unseen: &[bool],
    mode: PseudoMode,
    threshold: Option<f64>,
    ignore: u8,
) -> Vec<u8> {
    let shape = logits.shape();
    let c = shape[0];
    let hw = shape[1] * shape[2];
    debug_assert_eq!(gt.len(), hw);
    let data = logits.data();
    let mut out = gt.to_vec();
    for i in 0..hw {
        if gt[i] != ignore {
            continue;
        }
        let mut best = 0;
        let mut best_v = data[i];
        for k in 1..c {
            let v = data[k * hw + i];
            if v > best_v {
                best_v = v;
                best = k;
            }
        }
        if let Some(t) = threshold {
            let p = 1.0 / (1.0 + (-best_v).exp());
            if p < t {
                continue;
            }
        }
        if mode == PseudoMode::UnseenOnly && !unseen[best] {
            continue;
        }
        out[i] = best as u8;
    }
    out
}

/// Pseudo-label one image with the current model (all-class queries).
pub fn pseudo_label(
    model: &SegModel,
    bank: &ClassEmbeddingBank,
    image: &Value,
    gt: &[u8],
    mode: PseudoMode,
    threshold: Option<f64>,
) -> Result<Vec<u8>> {
    let all: Vec<usize> = (0..bank.classes()).collect();
    let logits = model.infer_pixels(bank, image, &all)?;
    let unseen: Vec<bool> = bank.seen_mask().iter().map(|&s| !s).collect();
    Ok(merge_pseudo_labels(
        &logits,
        gt,
        &unseen,
        mode,
        threshold,
        IGNORE_INDEX,
    ))
}

struct SampleGrad {
    loss: f64,
    grads: Vec<(ParamId, Vec<f64>)>,
}

/// Forward/backward for one sample at pixel resolution. With `pseudo` set,
/// the sample's own forward pass pseudo-labels its ignore pixels before the
/// loss is built (online self-training: labels always come from the live
/// model). Samples without a single valid pixel (possible in transductive
/// phase 1, where unseen objects are ignore-labeled) contribute nothing and
/// return `None`.
fn sample_step(
    model: &SegModel,
    bank: &ClassEmbeddingBank,
    image: &Value,
    labels: &[u8],
    active: &[usize],
    loss_cfg: &LossConfig,
    pseudo: Option<(PseudoMode, Option<f64>)>,
) -> Result<Option<SampleGrad>> {
    let graph = Graph::new();
    let bound = model.bind(&graph);
    let pixel_logits = model.forward_pixels(&graph, &bound, bank, image, active)?;
    let s = model.cfg.encoder.image_size;
    let flat = pixel_logits.reshape(&[active.len(), s * s])?;

    let effective_labels = match pseudo {
        Some((mode, threshold)) => {
            let unseen: Vec<bool> = bank.seen_mask().iter().map(|&x| !x).collect();
            merge_pseudo_labels(
                &pixel_logits.value(),
                labels,
                &unseen,
                mode,
                threshold,
                IGNORE_INDEX,
            )
        }
        None => labels.to_vec(),
    };
    let targets = build_targets(&effective_labels, active, IGNORE_INDEX)?;
    if targets.n_valid == 0 {
        return Ok(None);
    }
    let loss = loss_for_mode(&flat, &targets, loss_cfg)?;
    loss.backward()?;

    let mut grads = Vec::new();
    for id in model.store.trainable_ids() {
        let g = bound[id]
            .grad()
            .ok_or_else(|| Error::MissingGrad(model.store.name(id).to_string()))?;
        grads.push((id, g.into_data()));
    }
    Ok(Some(SampleGrad {
        loss: loss.scalar_value(),
        grads,
    }))
}

/// Run one optimizer step over a batch. Per-sample work may run on worker
/// threads; the reduction always folds in sample order, so the result is
/// bitwise independent of scheduling.
#[allow(clippy::too_many_arguments)]
fn batch_step(
    model: &mut SegModel,
    bank: &ClassEmbeddingBank,
    dataset: &Dataset,
    batch: &[usize],
    active: &[usize],
    loss_cfg: &LossConfig,
    pseudo: Option<(PseudoMode, Option<f64>)>,
    opt: &AdamW,
    state: &mut OptimState,
    lr: f64,
    parallel: bool,
) -> Result<f64> {
    let run = |&i: &usize| {
        let rec = &dataset.samples[i];
        sample_step(model, bank, &rec.image, &rec.labels, active, loss_cfg, pseudo)
    };
    let results: Vec<Result<Option<SampleGrad>>> = if parallel {
        batch.par_iter().map(run).collect()
    } else {
        batch.iter().map(run).collect()
    };

    let mut contributing = 0usize;
    let mut loss_sum = 0.0;
    let mut grad_sum: HashMap<ParamId, Vec<f64>> = HashMap::new();
    for r in results {
        let Some(sg) = r? else { continue };
        contributing += 1;
        loss_sum += sg.loss;
        for (id, g) in sg.grads {
            match grad_sum.entry(id) {
                std::collections::hash_map::Entry::Occupied(mut e) => {
                    for (a, b) in e.get_mut().iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(g);
                }
            }
        }
    }
    if contributing == 0 {
        // nothing supervisable in this batch; no update
        return Ok(0.0);
    }
    let inv = 1.0 / contributing as f64;
    for g in grad_sum.values_mut() {
        for v in g.iter_mut() {
            *v *= inv;
        }
    }
    opt.step(&mut model.store, &grad_sum, state, Some(lr))?;
    Ok(loss_sum * inv)
}

/// Deterministic epoch-shuffled batch stream.
struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    n: usize,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0xBA7C);
        BatchSampler {
            rng,
            order: Vec::new(),
            cursor: 0,
            n,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        for _ in 0..size {
            if self.cursor == self.order.len() {
                self.order = (0..self.n).collect();
                for i in (1..self.n).rev() {
                    let j = self.rng.random_range(0..=i);
                    self.order.swap(i, j);
                }
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Train a model from scratch per the config. Dispatches on `cfg.mode`; the
/// transductive modes run inductively for the first `iters/2` iterations and
/// self-train for the rest.
pub fn train(cfg: &TrainConfig, dataset: &Dataset, bank: &ClassEmbeddingBank) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.world.image_size != cfg.image_size {
        return Err(Error::Config(format!(
            "dataset images are {} px but the encoder expects {}",
            dataset.world.image_size, cfg.image_size
        )));
    }
    if bank.dim() != cfg.width {
        return Err(Error::Config(format!(
            "embedding dim {} but encoder width {}",
            bank.dim(),
            cfg.width
        )));
    }
    if dataset.samples.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    if cfg.mode.is_transductive() && bank.unseen_ids().is_empty() {
        return Err(Error::Config(
            "transductive training requires unseen classes in the bank".into(),
        ));
    }
    let seen_active = bank.seen_ids();
    let all_active: Vec<usize> = (0..bank.classes()).collect();
    // labels must stay inside the phase-1 active set (plus ignore)
    let phase1_active: &[usize] = match cfg.mode {
        TrainMode::Supervised => &all_active,
        _ => &seen_active,
    };

    let mut model = SegModel::new(cfg.model_config())?;
    pretrain_backbone(
        &mut model,
        &dataset.world,
        cfg.pretrain_iters,
        cfg.batch_size,
        1e-3,
        cfg.seed,
    )?;
    // keep parameters f32-exact so a freshly saved checkpoint reproduces the
    // in-memory model bit for bit
    model.store.round_to_f32();

    let loss_cfg = cfg.loss_config();
    let opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut state = OptimState::new();
    let mut sampler = BatchSampler::new(dataset.samples.len(), cfg.seed);
    let mut history = Vec::new();

    let phase1_end = if cfg.mode.is_transductive() {
        cfg.iters / 2
    } else {
        cfg.iters
    };
    let pseudo_mode = match cfg.mode {
        TrainMode::TransductiveAll => Some(PseudoMode::All),
        TrainMode::TransductiveUnseenOnly => Some(PseudoMode::UnseenOnly),
        _ => None,
    };

    for iter in 1..=cfg.iters {
        let phase2 = iter > phase1_end;
        let (active, pseudo) = if phase2 {
            (
                &all_active[..],
                pseudo_mode.map(|m| (m, cfg.threshold)),
            )
        } else {
            (phase1_active, None)
        };
        let lr = if cfg.lr_warmup > 0 && iter < cfg.lr_warmup {
            cfg.lr * iter as f64 / cfg.lr_warmup as f64
        } else {
            cfg.lr
        };
        let batch = sampler.next_batch(cfg.batch_size);
        let loss = batch_step(
            &mut model,
            bank,
            dataset,
            &batch,
            active,
            &loss_cfg,
            pseudo,
            &opt,
            &mut state,
            lr,
            cfg.parallel,
        )?;
        if !loss.is_finite() {
            return Err(Error::NanLoss { iter });
        }
        if iter == 1 || iter == cfg.iters || iter % cfg.log_every == 0 {
            history.push(HistoryRecord {
                iter,
                phase: if phase2 { 2 } else { 1 },
                loss,
                lr,
            });
        }
    }

    model.store.round_to_f32();
    Ok(TrainOutcome {
        model,
        config: cfg.clone(),
        history,
    })
}

/// Evaluate a model over a dataset with all-class queries.
pub fn evaluate(
    model: &SegModel,
    dataset: &Dataset,
    bank: &ClassEmbeddingBank,
    parallel: bool,
) -> Result<EvalReport> {
    if dataset.samples.is_empty() {
        return Err(Error::Config("evaluation dataset is empty".into()));
    }
    let all: Vec<usize> = (0..bank.classes()).collect();
    let run = |rec: &crate::data::SampleRecord| -> Result<ConfusionMatrix> {
        let logits = model.infer_pixels(bank, &rec.image, &all)?;
        let pred = crate::decoder::predict(&logits)?;
        let mut cm = ConfusionMatrix::new(bank.classes());
        cm.accumulate(&pred, &rec.labels, IGNORE_INDEX)?;
        Ok(cm)
    };
    let parts: Vec<Result<ConfusionMatrix>> = if parallel {
        dataset.samples.par_iter().map(run).collect()
    } else {
        dataset.samples.iter().map(run).collect()
    };
    let mut cm = ConfusionMatrix::new(bank.classes());
    for p in parts {
        cm.merge(&p?);
    }
    compute(&cm, bank.seen_mask())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, make_world};
    use crate::text::synthesize_bank;

    fn micro_config() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.image_size = 16;
        cfg.patch_size = 4;
        cfg.depth = 2;
        cfg.width = 16;
        cfg.heads = 2;
        cfg.mlp_ratio = 2;
        cfg.decoder_layers = 2;
        cfg.decoder_heads = 2;
        cfg.prompt_tokens = 2;
        cfg.iters = 6;
        cfg.batch_size = 2;
        cfg.log_every = 2;
        cfg.pretrain_iters = 2;
        cfg
    }

    fn micro_world() -> crate::data::WorldSpec {
        make_world(3, 4, 3, 3, 16, false).unwrap()
    }

    #[test]
    fn config_text_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.mode = TrainMode::TransductiveUnseenOnly;
        cfg.regime = Regime::Ft;
        cfg.threshold = Some(0.75);
        cfg.prompt_layers = Some((2, 5));
        cfg.lr = 5e-4;
        let text = cfg.to_text();
        let back = TrainConfig::from_text(&text).unwrap();
        assert_eq!(back.to_text(), text);
        assert_eq!(back.mode, TrainMode::TransductiveUnseenOnly);
        assert_eq!(back.threshold, Some(0.75));
        assert_eq!(back.prompt_layers, Some((2, 5)));
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        assert!(TrainConfig::from_text("nonsense=1\n").is_err());
        assert!(TrainConfig::from_text("lr=abc\n").is_err());
        let mut cfg = TrainConfig::default();
        cfg.gamma = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn pseudo_rules_match_loop_oracle() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..50 {
            let (c, h, w) = (4, 3, 3);
            let hw = h * w;
            let logits = Value::new(
                vec![c, h, w],
                (0..c * hw).map(|_| rng.random_range(-3.0..3.0)).collect(),
            )
            .unwrap();
            let gt: Vec<u8> = (0..hw)
                .map(|_| {
                    if rng.random::<f32>() < 0.5 {
                        IGNORE_INDEX
                    } else {
                        rng.random_range(0..c as u8)
                    }
                })
                .collect();
            let unseen = [false, false, true, true];
            let threshold = if trial % 2 == 0 { Some(0.6) } else { None };
            for mode in [PseudoMode::All, PseudoMode::UnseenOnly] {
                let got = merge_pseudo_labels(&logits, &gt, &unseen, mode, threshold, IGNORE_INDEX);
                for i in 0..hw {
                    // loop oracle applying the stated rules pixel by pixel
                    let want = if gt[i] != IGNORE_INDEX {
                        gt[i]
                    } else {
                        let mut best = 0usize;
                        for k in 1..c {
                            if logits.data()[k * hw + i] > logits.data()[best * hw + i] {
                                best = k;
                            }
                        }
                        let p = 1.0 / (1.0 + (-logits.data()[best * hw + i]).exp());
                        if threshold.is_some_and(|t| p < t) {
                            IGNORE_INDEX
                        } else if mode == PseudoMode::UnseenOnly && !unseen[best] {
                            IGNORE_INDEX
                        } else {
                            best as u8
                        }
                    };
                    assert_eq!(got[i], want, "mode {mode:?} pixel {i}");
                }
            }
        }
    }

    #[test]
    fn threshold_one_blocks_all_pseudo_labels() {
        let logits = Value::new(vec![2, 1, 2], vec![5.0, -1.0, 0.0, 2.0]).unwrap();
        let gt = [IGNORE_INDEX, IGNORE_INDEX];
        let out = merge_pseudo_labels(
            &logits,
            &gt,
            &[false, true],
            PseudoMode::All,
            Some(1.0),
            IGNORE_INDEX,
        );
        assert_eq!(out, vec![IGNORE_INDEX, IGNORE_INDEX]);
    }

    #[test]
    fn unseen_only_keeps_seen_argmax_ignored_and_gt_is_fixed_point() {
        // pixel 0: argmax class 0 (seen) → stays ignore in ‡ mode
        // pixel 1: argmax class 1 (unseen) → labeled
        let logits = Value::new(vec![2, 1, 2], vec![5.0, -1.0, 0.0, 2.0]).unwrap();
        let gt = [IGNORE_INDEX, IGNORE_INDEX];
        let out = merge_pseudo_labels(
            &logits,
            &gt,
            &[false, true],
            PseudoMode::UnseenOnly,
            None,
            IGNORE_INDEX,
        );
        assert_eq!(out, vec![IGNORE_INDEX, 1]);

        // ground-truth labels are never overwritten
        let gt2 = [0u8, 0u8];
        let out2 = merge_pseudo_labels(
            &logits,
            &gt2,
            &[false, true],
            PseudoMode::All,
            None,
            IGNORE_INDEX,
        );
        assert_eq!(out2, vec![0, 0]);
    }

    #[test]
    fn zero_lr_training_is_a_no_op() {
        let world = micro_world();
        let ds = generate(&world, 6, 2, crate::data::GenRegime::InductiveTrain).unwrap();
        let synth = synthesize_bank(&world, 16).unwrap();
        let mut cfg = micro_config();
        cfg.lr = 0.0;
        cfg.weight_decay = 0.0;

        let outcome = train(&cfg, &ds, &synth.bank).unwrap();
        // rebuild the initial model (same seed, same pretraining) and compare
        let mut init = SegModel::new(cfg.model_config()).unwrap();
        pretrain_backbone(&mut init, &world, cfg.pretrain_iters, cfg.batch_size, 1e-3, cfg.seed)
            .unwrap();
        init.store.round_to_f32();
        for id in init.store.ids() {
            assert_eq!(
                init.store.value(id),
                outcome.model.store.value(id),
                "{}",
                init.store.name(id)
            );
        }
    }

    #[test]
    fn training_is_deterministic_and_parallel_matches_sequential() {
        let world = micro_world();
        let ds = generate(&world, 6, 2, crate::data::GenRegime::InductiveTrain).unwrap();
        let synth = synthesize_bank(&world, 16).unwrap();
        let cfg = micro_config();

        let run = |parallel: bool| {
            let mut c = cfg.clone();
            c.parallel = parallel;
            let out = train(&c, &ds, &synth.bank).unwrap();
            let weights: Vec<Vec<u64>> = out
                .model
                .store
                .ids()
                .map(|i| out.model.store.value(i).data().iter().map(|v| v.to_bits()).collect())
                .collect();
            (weights, out.history)
        };
        let (w1, h1) = run(true);
        let (w2, h2) = run(true);
        assert_eq!(w1, w2);
        assert_eq!(h1, h2);
        let (w3, h3) = run(false);
        assert_eq!(w1, w3);
        assert_eq!(h1, h3);
    }

    #[test]
    fn inductive_training_never_reads_unseen_rows() {
        let world = micro_world();
        let ds = generate(&world, 6, 2, crate::data::GenRegime::InductiveTrain).unwrap();
        let synth = synthesize_bank(&world, 16).unwrap();
        synth.bank.reset_read_log();
        train(&micro_config(), &ds, &synth.bank).unwrap();
        let counts = synth.bank.read_counts();
        for id in synth.bank.unseen_ids() {
            assert_eq!(counts[id], 0, "unseen row {id} was read");
        }
        for id in synth.bank.seen_ids() {
            assert!(counts[id] > 0);
        }
    }

    #[test]
    fn transductive_history_phases_and_degenerate_equality() {
        let world = micro_world();
        let ds = generate(&world, 6, 2, crate::data::GenRegime::TransductiveTrain).unwrap();
        let synth = synthesize_bank(&world, 16).unwrap();
        let mut cfg = micro_config();
        cfg.mode = TrainMode::TransductiveAll;
        cfg.iters = 8;
        cfg.log_every = 1;
        let out = train(&cfg, &ds, &synth.bank).unwrap();
        for r in &out.history {
            assert_eq!(r.phase, if r.iter <= 4 { 1 } else { 2 }, "iter {}", r.iter);
        }

        // inductive training on the same transductive dataset equals the
        // phase-1 trajectory bit for bit
        let mut ind = cfg.clone();
        ind.mode = TrainMode::Inductive;
        let a = train(&ind, &ds, &synth.bank).unwrap();
        let phase1: Vec<_> = out.history.iter().filter(|r| r.phase == 1).collect();
        for (ra, rb) in phase1.iter().zip(a.history.iter()) {
            assert_eq!(ra.iter, rb.iter);
            assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
        }
    }

    #[test]
    fn nan_loss_aborts_with_iteration() {
        let world = micro_world();
        let ds = generate(&world, 4, 2, crate::data::GenRegime::InductiveTrain).unwrap();
        let synth = synthesize_bank(&world, 16).unwrap();
        let mut cfg = micro_config();
        cfg.lr = 1e18; // explodes immediately
        cfg.iters = 30;
        cfg.pretrain_iters = 0;
        match train(&cfg, &ds, &synth.bank) {
            Err(Error::NanLoss { iter }) => assert!(iter >= 1),
            other => panic!("expected NanLoss, got {other:?}", other = other.map(|_| ())),
        }
    }

    #[test]
    fn evaluate_is_deterministic_and_parallel_invariant() {
        let world = micro_world();
        let train_ds = generate(&world, 4, 2, crate::data::GenRegime::InductiveTrain).unwrap();
        let test_ds = generate(&world, 5, 3, crate::data::GenRegime::FullyLabeled).unwrap();
        let synth = synthesize_bank(&world, 16).unwrap();
        let out = train(&micro_config(), &train_ds, &synth.bank).unwrap();
        let a = evaluate(&out.model, &test_ds, &synth.bank, true).unwrap();
        let b = evaluate(&out.model, &test_ds, &synth.bank, false).unwrap();
        assert_eq!(a, b);
        let c = evaluate(&out.model, &test_ds, &synth.bank, true).unwrap();
        assert_eq!(a, c);
        // harmonic identity
        let h = 2.0 * a.miou_seen * a.miou_unseen / (a.miou_seen + a.miou_unseen).max(1e-300);
        assert!((a.hiou - h).abs() < 1e-9);
    }

    #[test]
    fn history_text_format() {
        let h = vec![
            HistoryRecord { iter: 1, phase: 1, loss: 0.5, lr: 0.001 },
            HistoryRecord { iter: 20, phase: 2, loss: 0.25, lr: 0.001 },
        ];
        let txt = history_to_text(&h);
        assert_eq!(txt, "iter=1 phase=1 loss=0.5 lr=0.001\niter=20 phase=2 loss=0.25 lr=0.001\n");
    }
}
