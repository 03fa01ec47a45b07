//! Small ViT-style image encoder producing the global [cls] embedding and the
//! patch embeddings, under one of three update regimes:
//!
//! - `Fix`: encoder parameters frozen (the stand-in for a frozen pretrained
//!   backbone),
//! - `Ft`: everything fine-tuned,
//! - `Dpt`: deep prompt tuning — the backbone stays frozen and each layer in a
//!   configurable range prepends its own learnable prompt tokens to the input
//!   sequence. A prompted layer consumes `[cls] ∥ prompts ∥ patches` and its
//!   outputs at the prompt positions are discarded, never fed forward.
//!
//! Prompt tokens receive no positional embeddings (position embeddings cover
//! only [cls] and the patch grid); noted as an implementation choice.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Tensor};
use crate::params::{BoundParams, ParamId, ParamStore};
use crate::value::Value;

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Fix,
    Ft,
    Dpt,
}

impl Regime {
    pub fn name(&self) -> &'static str {
        match self {
            Regime::Fix => "fix",
            Regime::Ft => "ft",
            Regime::Dpt => "dpt",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fix" => Ok(Regime::Fix),
            "ft" => Ok(Regime::Ft),
            "dpt" => Ok(Regime::Dpt),
            other => Err(Error::Config(format!("unknown regime `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub regime: Regime,
    /// Test hook: replace the attention sublayer output with its input, so
    /// every token is processed independently of the others.
    pub attention_identity: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 32,
            patch_size: 8,
            depth: 6,
            width: 64,
            heads: 4,
            mlp_ratio: 4,
            regime: Regime::Fix,
            attention_identity: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.depth == 0 {
            return Err(Error::Config("encoder depth must be >= 1".into()));
        }
        Ok(())
    }

    /// Patch tokens per image.
    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }
}

/// Where prompts go and how many per layer. Layers are numbered 1..=depth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptConfig {
    pub tokens: usize,
    pub first_layer: usize,
    pub last_layer: usize,
}

impl PromptConfig {
    pub fn all_layers(tokens: usize, depth: usize) -> Self {
        PromptConfig {
            tokens,
            first_layer: 1,
            last_layer: depth,
        }
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.first_layer == 0 || self.first_layer > self.last_layer || self.last_layer > depth
        {
            return Err(Error::Config(format!(
                "prompt layer range {}..{} invalid for depth {depth}",
                self.first_layer, self.last_layer
            )));
        }
        Ok(())
    }
}

struct LayerParams {
    ln1: (ParamId, ParamId),
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2: (ParamId, ParamId),
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

pub struct EncoderOutput {
    /// `[width]` — the [cls] token embedding.
    pub g: Tensor,
    /// `[num_patches, width]` — raster-ordered patch embeddings.
    pub patches: Tensor,
}

pub struct ViTEncoder {
    pub cfg: EncoderConfig,
    patch_w: ParamId,
    patch_b: ParamId,
    cls: ParamId,
    pos: ParamId,
    layers: Vec<LayerParams>,
    ln_f: (ParamId, ParamId),
    /// One prompt matrix per layer index (0-based), where configured.
    prompts: Vec<Option<ParamId>>,
}

impl ViTEncoder {
    /// Register all encoder parameters. Under `Dpt` a prompt config is
    /// required; `Fix` and `Ft` forbid one.
    pub fn new(
        store: &mut ParamStore,
        cfg: EncoderConfig,
        prompt_cfg: Option<&PromptConfig>,
        init_seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        match (cfg.regime, prompt_cfg) {
            (Regime::Dpt, None) => {
                return Err(Error::Config("dpt regime requires a prompt bank".into()))
            }
            (Regime::Fix | Regime::Ft, Some(_)) => {
                return Err(Error::Config(format!(
                    "{} regime does not take a prompt bank",
                    cfg.regime.name()
                )))
            }
            _ => {}
        }
        if let Some(p) = prompt_cfg {
            p.validate(cfg.depth)?;
        }

        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        rng.set_stream(0xE2C);
        let d = cfg.width;
        let pd = 3 * cfg.patch_size * cfg.patch_size;
        let n = cfg.num_patches();
        let hidden = cfg.mlp_ratio * d;

        // weight matrices scale with fan-in; token embeddings use a small std
        fn fan_in_randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Value {
            Value::randn(rng, shape, (1.0 / shape[0] as f64).sqrt())
        }
        let patch_w = store.register("enc.patch.w", fan_in_randn(&mut rng, &[pd, d]), true)?;
        let patch_b = store.register("enc.patch.b", Value::zeros(&[d]), true)?;
        let cls = store.register("enc.cls", Value::randn(&mut rng, &[1, d], INIT_STD), true)?;
        let pos = store.register(
            "enc.pos",
            Value::randn(&mut rng, &[n + 1, d], INIT_STD),
            true,
        )?;
        let mut randn = |shape: &[usize]| fan_in_randn(&mut rng, shape);
        let mut layers = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let p = |s: &str| format!("enc.l{l}.{s}");
            layers.push(LayerParams {
                ln1: (
                    store.register(&p("ln1.g"), Value::full(&[d], 1.0), true)?,
                    store.register(&p("ln1.b"), Value::zeros(&[d]), true)?,
                ),
                wq: store.register(&p("attn.wq"), randn(&[d, d]), true)?,
                bq: store.register(&p("attn.bq"), Value::zeros(&[d]), true)?,
                wk: store.register(&p("attn.wk"), randn(&[d, d]), true)?,
                bk: store.register(&p("attn.bk"), Value::zeros(&[d]), true)?,
                wv: store.register(&p("attn.wv"), randn(&[d, d]), true)?,
                bv: store.register(&p("attn.bv"), Value::zeros(&[d]), true)?,
                wo: store.register(&p("attn.wo"), randn(&[d, d]), true)?,
                bo: store.register(&p("attn.bo"), Value::zeros(&[d]), true)?,
                ln2: (
                    store.register(&p("ln2.g"), Value::full(&[d], 1.0), true)?,
                    store.register(&p("ln2.b"), Value::zeros(&[d]), true)?,
                ),
                w1: store.register(&p("mlp.w1"), randn(&[d, hidden]), true)?,
                b1: store.register(&p("mlp.b1"), Value::zeros(&[hidden]), true)?,
                w2: store.register(&p("mlp.w2"), randn(&[hidden, d]), true)?,
                b2: store.register(&p("mlp.b2"), Value::zeros(&[d]), true)?,
            });
        }
        let ln_f = (
            store.register("enc.lnf.g", Value::full(&[d], 1.0), true)?,
            store.register("enc.lnf.b", Value::zeros(&[d]), true)?,
        );

        drop(randn);
        let mut prompts = vec![None; cfg.depth];
        if let Some(pc) = prompt_cfg {
            for l in pc.first_layer..=pc.last_layer {
                // prompts are token embeddings, not weights: fixed small std
                let id = store.register(
                    &format!("prompt.l{}", l - 1),
                    Value::randn(&mut rng, &[pc.tokens, d], INIT_STD),
                    true,
                )?;
                prompts[l - 1] = Some(id);
            }
        }

        let enc = ViTEncoder {
            cfg,
            patch_w,
            patch_b,
            cls,
            pos,
            layers,
            ln_f,
            prompts,
        };
        enc.apply_regime(store);
        Ok(enc)
    }

    /// Set trainable flags for the configured regime: `Fix` freezes the
    /// encoder, `Ft` trains everything, `Dpt` trains prompts only.
    pub fn apply_regime(&self, store: &mut ParamStore) {
        let backbone_trainable = self.cfg.regime == Regime::Ft;
        for id in self.backbone_param_ids() {
            store.set_trainable(id, backbone_trainable);
        }
        for id in self.prompt_param_ids() {
            store.set_trainable(id, self.cfg.regime == Regime::Dpt);
        }
    }

    /// Every non-prompt encoder parameter.
    pub fn backbone_param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.patch_w, self.patch_b, self.cls, self.pos];
        for l in &self.layers {
            ids.extend([
                l.ln1.0, l.ln1.1, l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo, l.ln2.0,
                l.ln2.1, l.w1, l.b1, l.w2, l.b2,
            ]);
        }
        ids.extend([self.ln_f.0, self.ln_f.1]);
        ids
    }

    pub fn prompt_param_ids(&self) -> Vec<ParamId> {
        self.prompts.iter().flatten().copied().collect()
    }

    /// Flattened patches linearly projected to the embedding width, before
    /// positional embeddings.
    pub fn patchify(&self, graph: &Graph, params: &BoundParams, image: &Value) -> Result<Tensor> {
        let want = [3, self.cfg.image_size, self.cfg.image_size];
        if image.shape() != want {
            return Err(Error::ShapeMismatch {
                op: "patchify",
                lhs: image.shape().to_vec(),
                rhs: want.to_vec(),
            });
        }
        graph
            .constant(image.clone())
            .extract_patches(self.cfg.patch_size)?
            .matmul(&params[self.patch_w])?
            .add(&params[self.patch_b])
    }

    /// `[cls] ∥ patches` with positional embeddings added — the layer-0 input.
    pub fn embed(&self, graph: &Graph, params: &BoundParams, image: &Value) -> Result<Tensor> {
        let tokens = self.patchify(graph, params, image)?;
        Tensor::concat(&[&params[self.cls], &tokens], 0)?.add(&params[self.pos])
    }

    /// Full forward pass.
    pub fn encode(
        &self,
        graph: &Graph,
        params: &BoundParams,
        image: &Value,
    ) -> Result<EncoderOutput> {
        let n = self.cfg.num_patches();
        let mut seq = self.embed(graph, params, image)?;
        for (l, layer) in self.layers.iter().enumerate() {
            seq = match self.prompts[l] {
                Some(pid) => {
                    let m = params[pid].shape()[0];
                    let cls_row = seq.slice(0, 0, 1)?;
                    let patch_rows = seq.slice(0, 1, n + 1)?;
                    // [cls] ∥ prompts ∥ patches, length 1 + M + N
                    let full = Tensor::concat(&[&cls_row, &params[pid], &patch_rows], 0)?;
                    let out = self.block(params, layer, &full)?;
                    // prompt outputs are discarded here, not fed forward
                    let cls_out = out.slice(0, 0, 1)?;
                    let patch_out = out.slice(0, 1 + m, 1 + m + n)?;
                    Tensor::concat(&[&cls_out, &patch_out], 0)?
                }
                None => self.block(params, layer, &seq)?,
            };
        }
        let seq = seq.layer_norm(&params[self.ln_f.0], &params[self.ln_f.1], LN_EPS)?;
        let d = self.cfg.width;
        // g is L2-normalized, matching the unit-norm convention of the class
        // text embeddings it is matched against
        let g_raw = seq.slice(0, 0, 1)?.reshape(&[d])?;
        let norm = g_raw.mul(&g_raw)?.sum_all().powf(0.5);
        Ok(EncoderOutput {
            g: g_raw.div(&norm)?,
            patches: seq.slice(0, 1, n + 1)?,
        })
    }

    /// Pre-norm transformer block: x + MHA(LN(x)), then x + MLP(LN(x)).
    fn block(&self, params: &BoundParams, layer: &LayerParams, x: &Tensor) -> Result<Tensor> {
        let y = x.layer_norm(&params[layer.ln1.0], &params[layer.ln1.1], LN_EPS)?;
        let attn = if self.cfg.attention_identity {
            y
        } else {
            self.mha(params, layer, &y)?
        };
        let x = x.add(&attn)?;
        let z = x.layer_norm(&params[layer.ln2.0], &params[layer.ln2.1], LN_EPS)?;
        let h = z
            .matmul(&params[layer.w1])?
            .add(&params[layer.b1])?
            .gelu()
            .matmul(&params[layer.w2])?
            .add(&params[layer.b2])?;
        x.add(&h)
    }

    fn mha(&self, params: &BoundParams, layer: &LayerParams, y: &Tensor) -> Result<Tensor> {
        let d = self.cfg.width;
        let heads = self.cfg.heads;
        let dh = d / heads;
        let q = y.matmul(&params[layer.wq])?.add(&params[layer.bq])?;
        let k = y.matmul(&params[layer.wk])?.add(&params[layer.bk])?;
        let v = y.matmul(&params[layer.wv])?.add(&params[layer.bv])?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let qh = q.slice(1, a, b)?;
            let kh = k.slice(1, a, b)?;
            let vh = v.slice(1, a, b)?;
            let scores = qh
                .matmul(&kh.transpose()?)?
                .scale(1.0 / (dh as f64).sqrt());
            outs.push(scores.softmax(1)?.matmul(&vh)?);
        }
        let refs: Vec<&Tensor> = outs.iter().collect();
        Tensor::concat(&refs, 1)?
            .matmul(&params[layer.wo])?
            .add(&params[layer.bo])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(regime: Regime) -> EncoderConfig {
        EncoderConfig {
            image_size: 8,
            patch_size: 4,
            depth: 2,
            width: 8,
            heads: 2,
            mlp_ratio: 2,
            regime,
            attention_identity: false,
        }
    }

    fn test_image(cfg: &EncoderConfig, seed: u64) -> Value {
        crate::testsupport::randv(seed, &[3, cfg.image_size, cfg.image_size])
    }

    #[test]
    fn default_patch_count() {
        let cfg = EncoderConfig::default();
        assert_eq!(cfg.num_patches(), 16);
    }

    #[test]
    fn config_validation() {
        let mut cfg = EncoderConfig::default();
        cfg.patch_size = 7;
        assert!(cfg.validate().is_err());
        let mut cfg = EncoderConfig::default();
        cfg.heads = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn regime_prompt_pairing_enforced() {
        let mut store = ParamStore::new();
        assert!(ViTEncoder::new(&mut store, tiny_cfg(Regime::Dpt), None, 0).is_err());
        let mut store = ParamStore::new();
        let pc = PromptConfig::all_layers(2, 2);
        assert!(ViTEncoder::new(&mut store, tiny_cfg(Regime::Fix), Some(&pc), 0).is_err());
        let mut store = ParamStore::new();
        assert!(ViTEncoder::new(&mut store, tiny_cfg(Regime::Dpt), Some(&pc), 0).is_ok());
    }

    #[test]
    fn zero_image_zero_bias_embeds_to_positionals() {
        let mut store = ParamStore::new();
        let cfg = tiny_cfg(Regime::Fix);
        let enc = ViTEncoder::new(&mut store, cfg.clone(), None, 3).unwrap();
        let zero = Value::zeros(&[3, cfg.image_size, cfg.image_size]);
        let graph = Graph::new();
        let bound = store.bind(&graph);
        // patch projection bias is zero-initialized, so tokens are all zero
        let tokens = enc.patchify(&graph, &bound, &zero).unwrap().value();
        assert!(tokens.data().iter().all(|&v| v == 0.0));
        // and the embedded sequence is exactly cls/pos sums
        let seq = enc.embed(&graph, &bound, &zero).unwrap().value();
        let pos = store.value(store.id("enc.pos").unwrap()).clone();
        let cls = store.value(store.id("enc.cls").unwrap()).clone();
        let d = cfg.width;
        for j in 0..d {
            assert_eq!(seq.at(&[0, j]), cls.at(&[0, j]) + pos.at(&[0, j]));
        }
        for r in 1..=cfg.num_patches() {
            for j in 0..d {
                assert_eq!(seq.at(&[r, j]), pos.at(&[r, j]));
            }
        }
    }

    #[test]
    fn permuting_patches_permutes_patchify_rows() {
        let mut store = ParamStore::new();
        let cfg = tiny_cfg(Regime::Fix);
        let enc = ViTEncoder::new(&mut store, cfg.clone(), None, 5).unwrap();
        let img = test_image(&cfg, 11);
        // swap patch (0,0) with patch (1,1) in pixel space
        let p = cfg.patch_size;
        let s = cfg.image_size;
        let mut swapped = img.clone();
        for ch in 0..3 {
            for y in 0..p {
                for x in 0..p {
                    let a = (ch * s + y) * s + x;
                    let b = (ch * s + p + y) * s + p + x;
                    let tmp = swapped.data()[a];
                    swapped.data_mut()[a] = swapped.data()[b];
                    swapped.data_mut()[b] = tmp;
                }
            }
        }
        let graph = Graph::new();
        let bound = store.bind(&graph);
        let base = enc.patchify(&graph, &bound, &img).unwrap().value();
        let perm = enc.patchify(&graph, &bound, &swapped).unwrap().value();
        let grid = s / p;
        let (ra, rb) = (0, grid + 1); // raster indices of the swapped patches
        let d = cfg.width;
        for j in 0..d {
            assert_eq!(base.at(&[ra, j]), perm.at(&[rb, j]));
            assert_eq!(base.at(&[rb, j]), perm.at(&[ra, j]));
            for r in 0..cfg.num_patches() {
                if r != ra && r != rb {
                    assert_eq!(base.at(&[r, j]), perm.at(&[r, j]));
                }
            }
        }
    }

    #[test]
    fn zero_prompts_match_fix_forward_bitwise() {
        let cfg_fix = tiny_cfg(Regime::Fix);
        let mut store_fix = ParamStore::new();
        let enc_fix = ViTEncoder::new(&mut store_fix, cfg_fix, None, 7).unwrap();

        let cfg_dpt = tiny_cfg(Regime::Dpt);
        let mut store_dpt = ParamStore::new();
        let pc = PromptConfig::all_layers(0, 2);
        let enc_dpt = ViTEncoder::new(&mut store_dpt, cfg_dpt, Some(&pc), 7).unwrap();

        let img = test_image(&enc_fix.cfg, 13);
        let run = |enc: &ViTEncoder, store: &ParamStore| {
            let graph = Graph::new();
            let bound = store.bind(&graph);
            let out = enc.encode(&graph, &bound, &img).unwrap();
            (out.g.value(), out.patches.value())
        };
        let (g1, h1) = run(&enc_fix, &store_fix);
        let (g2, h2) = run(&enc_dpt, &store_dpt);
        assert_eq!(g1, g2);
        assert_eq!(h1, h2);
    }

    #[test]
    fn prompts_change_the_output_and_gradients_reach_them() {
        let mut store = ParamStore::new();
        let pc = PromptConfig::all_layers(3, 2);
        let enc = ViTEncoder::new(&mut store, tiny_cfg(Regime::Dpt), Some(&pc), 7).unwrap();
        let img = test_image(&enc.cfg, 13);

        let graph = Graph::new();
        let bound = store.bind(&graph);
        let out = enc.encode(&graph, &bound, &img).unwrap();
        let loss = out.patches.sum_all();
        loss.backward().unwrap();
        for pid in enc.prompt_param_ids() {
            let g = bound[pid].grad().expect("prompt gradient");
            assert!(g.data().iter().any(|&v| v != 0.0));
        }
        // frozen backbone receives no gradient under DPT
        for id in enc.backbone_param_ids() {
            assert!(bound[id].grad().is_none());
        }

        // different prompt values produce different outputs
        let pid = enc.prompt_param_ids()[0];
        let mut bumped = store.value(pid).clone();
        bumped.data_mut()[0] += 1.0;
        let mut store2 = store.clone();
        store2.set_value(pid, bumped);
        let graph2 = Graph::new();
        let bound2 = store2.bind(&graph2);
        let out2 = enc.encode(&graph2, &bound2, &img).unwrap();
        assert_ne!(out.patches.value(), out2.patches.value());
    }

    #[test]
    fn identity_attention_makes_tokens_independent_of_prompts() {
        let mut cfg = tiny_cfg(Regime::Dpt);
        cfg.attention_identity = true;
        let pc = PromptConfig::all_layers(2, 2);
        let mut store = ParamStore::new();
        let enc = ViTEncoder::new(&mut store, cfg, Some(&pc), 9).unwrap();
        let img = test_image(&enc.cfg, 17);

        let run = |store: &ParamStore| {
            let graph = Graph::new();
            let bound = store.bind(&graph);
            enc.encode(&graph, &bound, &img).unwrap().patches.value()
        };
        let base = run(&store);
        let pid = enc.prompt_param_ids()[0];
        let mut other = store.value(pid).clone();
        for v in other.data_mut() {
            *v += 5.0;
        }
        let mut store2 = store.clone();
        store2.set_value(pid, other);
        assert_eq!(base, run(&store2));
    }

    #[test]
    fn identity_attention_matches_per_token_oracle() {
        let mut cfg = tiny_cfg(Regime::Fix);
        cfg.attention_identity = true;
        cfg.depth = 1;
        let mut store = ParamStore::new();
        let enc = ViTEncoder::new(&mut store, cfg.clone(), None, 21).unwrap();
        let img = test_image(&cfg, 23);

        let graph = Graph::new();
        let bound = store.bind(&graph);
        let embedded = enc.embed(&graph, &bound, &img).unwrap().value();
        let got = enc.encode(&graph, &bound, &img).unwrap().patches.value();

        // oracle: apply ln1/add, ln2/mlp/add, then the final ln per token,
        // with plain loops over the stored weights
        let d = cfg.width;
        let hid = cfg.mlp_ratio * d;
        let val = |n: &str| store.value(store.id(n).unwrap()).data().to_vec();
        let ln = |x: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
            let mu = x.iter().sum::<f64>() / x.len() as f64;
            let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / x.len() as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            x.iter()
                .enumerate()
                .map(|(j, v)| (v - mu) * inv * g[j] + b[j])
                .collect()
        };
        let gelu = |x: f64| {
            let u = 0.797_884_560_802_865_4 * (x + 0.044_715 * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        };
        let (g1, b1) = (val("enc.l0.ln1.g"), val("enc.l0.ln1.b"));
        let (g2, b2) = (val("enc.l0.ln2.g"), val("enc.l0.ln2.b"));
        let (w1, bb1) = (val("enc.l0.mlp.w1"), val("enc.l0.mlp.b1"));
        let (w2, bb2) = (val("enc.l0.mlp.w2"), val("enc.l0.mlp.b2"));
        let (gf, bf) = (val("enc.lnf.g"), val("enc.lnf.b"));

        for r in 0..cfg.num_patches() {
            let tok: Vec<f64> = (0..d).map(|j| embedded.at(&[r + 1, j])).collect();
            let x1: Vec<f64> = ln(&tok, &g1, &b1)
                .iter()
                .zip(&tok)
                .map(|(a, b)| a + b)
                .collect();
            let z = ln(&x1, &g2, &b2);
            let mut h = vec![0.0; hid];
            for (j, hj) in h.iter_mut().enumerate() {
                let mut s = bb1[j];
                for i in 0..d {
                    s += z[i] * w1[i * hid + j];
                }
                *hj = gelu(s);
            }
            let mut x2 = x1.clone();
            for (j, xj) in x2.iter_mut().enumerate() {
                let mut s = bb2[j];
                for (i, hi) in h.iter().enumerate() {
                    s += hi * w2[i * d + j];
                }
                *xj += s;
            }
            let fin = ln(&x2, &gf, &bf);
            for j in 0..d {
                assert!(
                    (got.at(&[r, j]) - fin[j]).abs() < 1e-9,
                    "token {r} dim {j}: {} vs {}",
                    got.at(&[r, j]),
                    fin[j]
                );
            }
        }
    }

    #[test]
    fn trainable_counts_per_regime() {
        // Fix: no encoder parameters trainable
        let mut store = ParamStore::new();
        ViTEncoder::new(&mut store, tiny_cfg(Regime::Fix), None, 0).unwrap();
        assert_eq!(store.trainable_scalar_count(), 0);

        // FT: everything trainable
        let mut store = ParamStore::new();
        ViTEncoder::new(&mut store, tiny_cfg(Regime::Ft), None, 0).unwrap();
        assert!(store.trainable_scalar_count() > 0);
        assert_eq!(
            store.trainable_scalar_count(),
            store.ids().map(|i| store.value(i).numel()).sum::<usize>()
        );

        // DPT with 12 layers, 10 tokens, width 64: 12·10·64 trainable scalars
        let cfg = EncoderConfig {
            image_size: 32,
            patch_size: 8,
            depth: 12,
            width: 64,
            heads: 4,
            mlp_ratio: 4,
            regime: Regime::Dpt,
            attention_identity: false,
        };
        let mut store = ParamStore::new();
        let pc = PromptConfig::all_layers(10, 12);
        ViTEncoder::new(&mut store, cfg, Some(&pc), 0).unwrap();
        assert_eq!(store.trainable_scalar_count(), 12 * 10 * 64);
    }

    #[test]
    fn partial_prompt_range_only_prompts_those_layers() {
        let cfg = EncoderConfig {
            depth: 4,
            ..tiny_cfg(Regime::Dpt)
        };
        let mut store = ParamStore::new();
        let pc = PromptConfig {
            tokens: 2,
            first_layer: 2,
            last_layer: 3,
        };
        let enc = ViTEncoder::new(&mut store, cfg, Some(&pc), 0).unwrap();
        assert!(enc.prompts[0].is_none());
        assert!(enc.prompts[1].is_some());
        assert!(enc.prompts[2].is_some());
        assert!(enc.prompts[3].is_none());
    }
}
