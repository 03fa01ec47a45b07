//! Lightweight transformer decoder that matches class queries against patch
//! embeddings and emits per-class mask logits.
//!
//! Both sides are first mapped to a shared width by trainable input
//! projections. Intermediate layers update the query stream by multi-head
//! cross-attention over the patches (queries never attend to each other
//! unless the self-attention ablation flag is set) followed by a residual
//! MLP. The mask is the final layer's single-head pre-softmax score matrix
//! `QKᵀ/√d_k`; with `layers = 1` the decoder reduces to exactly that score
//! of the projected inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::LN_EPS;
use crate::error::{Error, Result};
use crate::graph::Tensor;
use crate::params::{BoundParams, ParamId, ParamStore};
use crate::value::Value;

#[derive(Debug, Clone)]
pub struct DecoderConfig {
    /// Total layers including the final scoring layer.
    pub layers: usize,
    /// Shared key width.
    pub d_k: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Query input width (embedding dim times the query format multiplier).
    pub query_dim: usize,
    /// Patch input width (the encoder width).
    pub patch_dim: usize,
    /// Ablation flag: let queries attend to each other before cross-attention.
    pub self_attention: bool,
    /// Test hook: intermediate layers keep only their attention output (no
    /// residual connection, no MLP).
    pub disable_residual_mlp: bool,
}

impl DecoderConfig {
    pub fn new(query_dim: usize, patch_dim: usize) -> Self {
        DecoderConfig {
            layers: 3,
            d_k: patch_dim,
            heads: 4,
            mlp_ratio: 4,
            query_dim,
            patch_dim,
            self_attention: false,
            disable_residual_mlp: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        if self.heads == 0 || self.d_k % self.heads != 0 {
            return Err(Error::Config(format!(
                "key width {} not divisible by heads {}",
                self.d_k, self.heads
            )));
        }
        Ok(())
    }
}

struct CrossLayer {
    ln_q: (ParamId, ParamId),
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
    // query self-attention (ablation only)
    sa: Option<SelfAttn>,
}

struct SelfAttn {
    ln: (ParamId, ParamId),
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

pub struct MaskDecoder {
    pub cfg: DecoderConfig,
    q_in_w: ParamId,
    q_in_b: ParamId,
    p_in_w: ParamId,
    p_in_b: ParamId,
    layers: Vec<CrossLayer>,
    final_wq: ParamId,
    final_bq: ParamId,
    final_wk: ParamId,
    final_bk: ParamId,
}

impl MaskDecoder {
    pub fn new(store: &mut ParamStore, cfg: DecoderConfig, init_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        rng.set_stream(0xDEC);
        let dk = cfg.d_k;
        let hidden = cfg.mlp_ratio * dk;
        // all decoder parameters are weight matrices; scale by fan-in
        let mut randn =
            |shape: &[usize]| Value::randn(&mut rng, shape, (1.0 / shape[0] as f64).sqrt());

        let q_in_w = store.register("dec.qin.w", randn(&[cfg.query_dim, dk]), true)?;
        let q_in_b = store.register("dec.qin.b", Value::zeros(&[dk]), true)?;
        let p_in_w = store.register("dec.pin.w", randn(&[cfg.patch_dim, dk]), true)?;
        let p_in_b = store.register("dec.pin.b", Value::zeros(&[dk]), true)?;

        let mut layers = Vec::new();
        for l in 0..cfg.layers - 1 {
            let p = |s: &str| format!("dec.l{l}.{s}");
            let sa = if cfg.self_attention {
                Some(SelfAttn {
                    ln: (
                        store.register(&p("sa.ln.g"), Value::full(&[dk], 1.0), true)?,
                        store.register(&p("sa.ln.b"), Value::zeros(&[dk]), true)?,
                    ),
                    wq: store.register(&p("sa.wq"), randn(&[dk, dk]), true)?,
                    bq: store.register(&p("sa.bq"), Value::zeros(&[dk]), true)?,
                    wk: store.register(&p("sa.wk"), randn(&[dk, dk]), true)?,
                    bk: store.register(&p("sa.bk"), Value::zeros(&[dk]), true)?,
                    wv: store.register(&p("sa.wv"), randn(&[dk, dk]), true)?,
                    bv: store.register(&p("sa.bv"), Value::zeros(&[dk]), true)?,
                    wo: store.register(&p("sa.wo"), randn(&[dk, dk]), true)?,
                    bo: store.register(&p("sa.bo"), Value::zeros(&[dk]), true)?,
                })
            } else {
                None
            };
            layers.push(CrossLayer {
                ln_q: (
                    store.register(&p("ln1.g"), Value::full(&[dk], 1.0), true)?,
                    store.register(&p("ln1.b"), Value::zeros(&[dk]), true)?,
                ),
                wq: store.register(&p("xa.wq"), randn(&[dk, dk]), true)?,
                bq: store.register(&p("xa.bq"), Value::zeros(&[dk]), true)?,
                wk: store.register(&p("xa.wk"), randn(&[dk, dk]), true)?,
                bk: store.register(&p("xa.bk"), Value::zeros(&[dk]), true)?,
                wv: store.register(&p("xa.wv"), randn(&[dk, dk]), true)?,
                bv: store.register(&p("xa.bv"), Value::zeros(&[dk]), true)?,
                wo: store.register(&p("xa.wo"), randn(&[dk, dk]), true)?,
                bo: store.register(&p("xa.bo"), Value::zeros(&[dk]), true)?,
                ln2: (
                    store.register(&p("ln2.g"), Value::full(&[dk], 1.0), true)?,
                    store.register(&p("ln2.b"), Value::zeros(&[dk]), true)?,
                ),
                w1: store.register(&p("mlp.w1"), randn(&[dk, hidden]), true)?,
                b1: store.register(&p("mlp.b1"), Value::zeros(&[hidden]), true)?,
                w2: store.register(&p("mlp.w2"), randn(&[hidden, dk]), true)?,
                b2: store.register(&p("mlp.b2"), Value::zeros(&[dk]), true)?,
                sa,
            });
        }
        let final_wq = store.register("dec.final.wq", randn(&[dk, dk]), true)?;
        let final_bq = store.register("dec.final.bq", Value::zeros(&[dk]), true)?;
        let final_wk = store.register("dec.final.wk", randn(&[dk, dk]), true)?;
        let final_bk = store.register("dec.final.bk", Value::zeros(&[dk]), true)?;

        Ok(MaskDecoder {
            cfg,
            q_in_w,
            q_in_b,
            p_in_w,
            p_in_b,
            layers,
            final_wq,
            final_bq,
            final_wk,
            final_bk,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.q_in_w, self.q_in_b, self.p_in_w, self.p_in_b];
        for l in &self.layers {
            ids.extend([
                l.ln_q.0, l.ln_q.1, l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo, l.ln2.0,
                l.ln2.1, l.w1, l.b1, l.w2, l.b2,
            ]);
            if let Some(sa) = &l.sa {
                ids.extend([
                    sa.ln.0, sa.ln.1, sa.wq, sa.bq, sa.wk, sa.bk, sa.wv, sa.bv, sa.wo, sa.bo,
                ]);
            }
        }
        ids.extend([self.final_wq, self.final_bq, self.final_wk, self.final_bk]);
        ids
    }

    /// Map queries and patches to the shared key width.
    pub fn project_inputs(
        &self,
        params: &BoundParams,
        queries: &Tensor,
        patches: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let q = queries
            .matmul(&params[self.q_in_w])?
            .add(&params[self.q_in_b])?;
        let p = patches
            .matmul(&params[self.p_in_w])?
            .add(&params[self.p_in_b])?;
        Ok((q, p))
    }

    /// Run the decoder and return the `[classes, patches]` mask logits.
    pub fn decode(
        &self,
        params: &BoundParams,
        queries: &Tensor,
        patches: &Tensor,
    ) -> Result<Tensor> {
        let (mut x, p) = self.project_inputs(params, queries, patches)?;
        for layer in &self.layers {
            x = self.cross_block(params, layer, &x, &p)?;
        }
        // Final scoring layer, single head: masks = QKᵀ/√d_k.
        let q = x
            .matmul(&params[self.final_wq])?
            .add(&params[self.final_bq])?;
        let k = p
            .matmul(&params[self.final_wk])?
            .add(&params[self.final_bk])?;
        Ok(q.matmul(&k.transpose()?)?
            .scale(1.0 / (self.cfg.d_k as f64).sqrt()))
    }

    fn cross_block(
        &self,
        params: &BoundParams,
        layer: &CrossLayer,
        x: &Tensor,
        p: &Tensor,
    ) -> Result<Tensor> {
        let mut x = x.clone();
        if let Some(sa) = &layer.sa {
            let y = x.layer_norm(&params[sa.ln.0], &params[sa.ln.1], LN_EPS)?;
            let attn = self.attention(params, &y, &y, (sa.wq, sa.bq), (sa.wk, sa.bk), (sa.wv, sa.bv), (sa.wo, sa.bo))?;
            x = x.add(&attn)?;
        }
        let y = x.layer_norm(&params[layer.ln_q.0], &params[layer.ln_q.1], LN_EPS)?;
        let attn = self.attention(
            params,
            &y,
            p,
            (layer.wq, layer.bq),
            (layer.wk, layer.bk),
            (layer.wv, layer.bv),
            (layer.wo, layer.bo),
        )?;
        if self.cfg.disable_residual_mlp {
            return Ok(attn);
        }
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

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        params: &BoundParams,
        q_src: &Tensor,
        kv_src: &Tensor,
        wq: (ParamId, ParamId),
        wk: (ParamId, ParamId),
        wv: (ParamId, ParamId),
        wo: (ParamId, ParamId),
    ) -> Result<Tensor> {
        let dk = self.cfg.d_k;
        let heads = self.cfg.heads;
        let dh = dk / heads;
        let q = q_src.matmul(&params[wq.0])?.add(&params[wq.1])?;
        let k = kv_src.matmul(&params[wk.0])?.add(&params[wk.1])?;
        let v = kv_src.matmul(&params[wv.0])?.add(&params[wv.1])?;
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
            .matmul(&params[wo.0])?
            .add(&params[wo.1])
    }
}

/// Reshape `[classes, n]` patch-grid logits to planes and upsample them to
/// pixel resolution. `n` must be a perfect square.
pub fn upsample(masks: &Tensor, h_px: usize, w_px: usize) -> Result<Tensor> {
    let shape = masks.shape();
    if shape.len() != 2 {
        return Err(Error::BadShape {
            op: "upsample",
            shape,
            reason: "expected [classes, patches]".into(),
        });
    }
    let n = shape[1];
    let grid = (n as f64).sqrt().round() as usize;
    if grid * grid != n {
        return Err(Error::BadShape {
            op: "upsample",
            shape,
            reason: format!("{n} patches do not form a square grid"),
        });
    }
    masks
        .reshape(&[shape[0], grid, grid])?
        .upsample_bilinear(h_px, w_px)
}

/// Per-pixel argmax over class planes; ties resolve to the lowest row index.
/// Returns row indices into the active-class list.
pub fn predict(logits: &Value) -> Result<Vec<usize>> {
    let shape = logits.shape().to_vec();
    if shape.len() != 3 || shape[0] == 0 {
        return Err(Error::BadShape {
            op: "predict",
            shape,
            reason: "expected non-empty [classes, h, w]".into(),
        });
    }
    let (c, hw) = (shape[0], shape[1] * shape[2]);
    let data = logits.data();
    let mut out = vec![0usize; hw];
    for (i, o) in out.iter_mut().enumerate() {
        let mut best = 0;
        let mut best_v = data[i];
        for k in 1..c {
            let v = data[k * hw + i];
            if v > best_v {
                best_v = v;
                best = k;
            }
        }
        *o = best;
    }
    Ok(out)
}
