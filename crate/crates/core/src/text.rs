//! Class text embeddings and the image-specific query builder.
//!
//! The bank holds one frozen embedding per class plus the seen/unseen split.
//! Row reads are counted, which lets tests prove that inductive training
//! never touches an unseen class's embedding.
//!
//! Queries fed to the decoder combine a class embedding `t` with the image's
//! global embedding `g`. The relationship descriptor `r = t ⊙ g` sums to the
//! image-text matching score `tᵀg`, and concatenating it with `t` gives the
//! default query format; the remaining formats exist for the query ablation.
//!
//! Embedding file layout (little-endian): magic `ZEGE`, version u32, class
//! count u32, dim u32, per class a name record (len u32 + bytes), then the
//! C×d f32 row-major payload, then C seen-flag bytes (0/1).

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::WorldSpec;
use crate::error::{Error, Result};
use crate::graph::{Graph, Tensor};
use crate::params::{write_atomic, Cursor};
use crate::value::{dot, Value};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"ZEGE";
pub const EMBEDDING_VERSION: u32 = 1;

/// Per-class noise std used when synthesizing embeddings from attributes.
const CLASS_NOISE_STD: f64 = 0.01;

/// Frozen per-class text embeddings with split membership and an access log.
pub struct ClassEmbeddingBank {
    /// `[classes, dim]`, rows L2-normalized.
    t: Value,
    class_names: Vec<String>,
    seen: Vec<bool>,
    reads: Vec<AtomicU64>,
}

impl ClassEmbeddingBank {
    pub fn new(t: Value, class_names: Vec<String>, seen: Vec<bool>) -> Result<Self> {
        let shape = t.shape().to_vec();
        if shape.len() != 2 || shape[0] < 2 {
            return Err(Error::BadShape {
                op: "ClassEmbeddingBank::new",
                shape,
                reason: "need a [classes >= 2, dim] matrix".into(),
            });
        }
        if class_names.len() != shape[0] || seen.len() != shape[0] {
            return Err(Error::Config(format!(
                "bank with {} rows but {} names / {} seen flags",
                shape[0],
                class_names.len(),
                seen.len()
            )));
        }
        if t.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite class embedding".into()));
        }
        let reads = (0..shape[0]).map(|_| AtomicU64::new(0)).collect();
        Ok(ClassEmbeddingBank {
            t,
            class_names,
            seen,
            reads,
        })
    }

    pub fn classes(&self) -> usize {
        self.t.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.t.shape()[1]
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn seen_mask(&self) -> &[bool] {
        &self.seen
    }

    pub fn seen_ids(&self) -> Vec<usize> {
        (0..self.classes()).filter(|&i| self.seen[i]).collect()
    }

    pub fn unseen_ids(&self) -> Vec<usize> {
        (0..self.classes()).filter(|&i| !self.seen[i]).collect()
    }

    /// One embedding row. Counted in the access log.
    pub fn row(&self, class: usize) -> &[f64] {
        self.reads[class].fetch_add(1, Ordering::Relaxed);
        let d = self.dim();
        &self.t.data()[class * d..(class + 1) * d]
    }

    /// Rows for the given classes, in their order. Each read is counted.
    pub fn rows(&self, active: &[usize]) -> Value {
        let d = self.dim();
        let mut data = Vec::with_capacity(active.len() * d);
        for &c in active {
            data.extend_from_slice(self.row(c));
        }
        Value::new(vec![active.len(), d], data).unwrap()
    }

    /// Row read counts since construction or the last reset.
    pub fn read_counts(&self) -> Vec<u64> {
        self.reads.iter().map(|a| a.load(Ordering::Relaxed)).collect()
    }

    pub fn reset_read_log(&self) {
        for a in &self.reads {
            a.store(0, Ordering::Relaxed);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(EMBEDDING_MAGIC);
        buf.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.classes() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for name in &self.class_names {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
        }
        for &v in self.t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &s in &self.seen {
            buf.push(s as u8);
        }
        write_atomic(path, &buf)
    }

    /// Load a bank; rows are L2-renormalized so imported embeddings can come
    /// from any scale.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut rd = Cursor::new(path, &bytes);
        rd.expect_magic(EMBEDDING_MAGIC)?;
        let version = rd.u32()?;
        if version != EMBEDDING_VERSION {
            return Err(Error::BadVersion {
                path: rd.path(),
                found: version,
                supported: EMBEDDING_VERSION,
            });
        }
        let c = rd.u32()? as usize;
        let d = rd.u32()? as usize;
        let mut names = Vec::with_capacity(c);
        for _ in 0..c {
            names.push(rd.string()?);
        }
        let mut data = Vec::with_capacity(c * d);
        for _ in 0..c * d {
            data.push(rd.f32()? as f64);
        }
        let mut seen = Vec::with_capacity(c);
        for _ in 0..c {
            seen.push(rd.u8()? != 0);
        }
        if !rd.done() {
            return Err(Error::CorruptFile {
                path: rd.path(),
                reason: "trailing bytes after payload".into(),
            });
        }
        let mut t = Value::new(vec![c, d], data)?;
        normalize_rows(&mut t);
        Self::new(t, names, seen)
    }
}

fn normalize_rows(t: &mut Value) {
    let d = t.shape()[1];
    let rows = t.shape()[0];
    for r in 0..rows {
        let row = &mut t.data_mut()[r * d..(r + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in row {
                *v /= norm;
            }
        }
    }
}

/// Per-class mean across templates, L2-renormalized per row.
pub fn average_templates(per_template: &Value) -> Result<Value> {
    let shape = per_template.shape().to_vec();
    if shape.len() != 3 || shape[0] == 0 {
        return Err(Error::BadShape {
            op: "average_templates",
            shape,
            reason: "need [templates >= 1, classes, dim]".into(),
        });
    }
    let (k, c, d) = (shape[0], shape[1], shape[2]);
    let mut out = vec![0.0; c * d];
    for t in 0..k {
        let block = &per_template.data()[t * c * d..(t + 1) * c * d];
        for i in 0..c * d {
            out[i] += block[i];
        }
    }
    for v in &mut out {
        *v /= k as f64;
    }
    let mut avg = Value::new(vec![c, d], out)?;
    normalize_rows(&mut avg);
    Ok(avg)
}

/// The image-level matching score `tᵀg`, equal to the sum of the
/// relationship descriptor's entries.
pub fn match_score(t: &[f64], g: &[f64]) -> Result<f64> {
    if t.len() != g.len() {
        return Err(Error::ShapeMismatch {
            op: "match_score",
            lhs: vec![t.len()],
            rhs: vec![g.len()],
        });
    }
    Ok(dot(t, g))
}

/// Relationship descriptor `r = t ⊙ g` for one class.
pub fn relationship_descriptor(t: &[f64], g: &[f64]) -> Result<Vec<f64>> {
    if t.len() != g.len() {
        return Err(Error::ShapeMismatch {
            op: "relationship_descriptor",
            lhs: vec![t.len()],
            rhs: vec![g.len()],
        });
    }
    Ok(t.iter().zip(g).map(|(&a, &b)| a * b).collect())
}

/// How a class query is assembled from its text embedding `t` and the image
/// embedding `g`. Output dims are d, 2d, or 3d.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryFormat {
    /// `t` (image-independent baseline)
    T,
    /// `t ⊙ g`
    Prod,
    /// `|t − g|`
    AbsDiff,
    /// `t − g`
    Diff,
    /// `t + g`
    Sum,
    /// `[t ⊙ g, t]` — the relationship-descriptor default
    CatProdT,
    /// `[t, g]`
    CatTG,
    /// `[|t − g|, t]`
    CatAbsT,
    /// `[t ⊙ g, t + g]`
    CatProdSum,
    /// `[t + g, t]`
    CatSumT,
    /// `[t ⊙ g, |t − g|]`
    CatProdAbs,
    /// `[t ⊙ g, |t − g|, t]`
    CatProdAbsT,
}

impl QueryFormat {
    pub const ALL: [QueryFormat; 12] = [
        QueryFormat::T,
        QueryFormat::Prod,
        QueryFormat::AbsDiff,
        QueryFormat::Diff,
        QueryFormat::Sum,
        QueryFormat::CatTG,
        QueryFormat::CatProdT,
        QueryFormat::CatAbsT,
        QueryFormat::CatProdSum,
        QueryFormat::CatSumT,
        QueryFormat::CatProdAbs,
        QueryFormat::CatProdAbsT,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            QueryFormat::T => "t",
            QueryFormat::Prod => "tg",
            QueryFormat::AbsDiff => "abs",
            QueryFormat::Diff => "sub",
            QueryFormat::Sum => "add",
            QueryFormat::CatProdT => "cat-tg-t",
            QueryFormat::CatTG => "cat-t-g",
            QueryFormat::CatAbsT => "cat-abs-t",
            QueryFormat::CatProdSum => "cat-tg-add",
            QueryFormat::CatSumT => "cat-add-t",
            QueryFormat::CatProdAbs => "cat-tg-abs",
            QueryFormat::CatProdAbsT => "cat-tg-abs-t",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::UnknownQueryFormat(s.to_string()))
    }

    /// Output width as a multiple of the embedding dim.
    pub fn dim_multiplier(&self) -> usize {
        match self {
            QueryFormat::T
            | QueryFormat::Prod
            | QueryFormat::AbsDiff
            | QueryFormat::Diff
            | QueryFormat::Sum => 1,
            QueryFormat::CatProdAbsT => 3,
            _ => 2,
        }
    }

    /// Whether the query depends on the image embedding.
    pub fn uses_image(&self) -> bool {
        !matches!(self, QueryFormat::T)
    }
}

/// Assemble the query matrix for `active` classes, in their order. `g` is the
/// image's [cls] embedding as a graph tensor so gradients can flow back into
/// the encoder.
pub fn build_queries(
    graph: &Graph,
    bank: &ClassEmbeddingBank,
    g: &Tensor,
    format: QueryFormat,
    active: &[usize],
) -> Result<Tensor> {
    for &c in active {
        if c >= bank.classes() {
            return Err(Error::LabelOutOfRange {
                label: c,
                classes: bank.classes(),
                ignore: usize::MAX,
            });
        }
    }
    let d = bank.dim();
    if g.shape() != [d] {
        return Err(Error::ShapeMismatch {
            op: "build_queries",
            lhs: g.shape(),
            rhs: vec![d],
        });
    }
    let t = graph.constant(bank.rows(active));
    let g_row = g.reshape(&[1, d])?;
    // repeat g to a full [C', d] block (ones·g), used by plain concat formats
    let ones = graph.constant(Value::full(&[active.len(), 1], 1.0));
    let g_block = || ones.matmul(&g_row);

    let prod = || t.mul(&g_row);
    let absdiff = || Ok::<_, Error>(t.sub(&g_row)?.abs());
    let sum = || t.add(&g_row);

    match format {
        QueryFormat::T => Ok(t.clone()),
        QueryFormat::Prod => prod(),
        QueryFormat::AbsDiff => absdiff(),
        QueryFormat::Diff => t.sub(&g_row),
        QueryFormat::Sum => sum(),
        QueryFormat::CatProdT => Tensor::concat(&[&prod()?, &t], 1),
        QueryFormat::CatTG => Tensor::concat(&[&t, &g_block()?], 1),
        QueryFormat::CatAbsT => Tensor::concat(&[&absdiff()?, &t], 1),
        QueryFormat::CatProdSum => Tensor::concat(&[&prod()?, &sum()?], 1),
        QueryFormat::CatSumT => Tensor::concat(&[&sum()?, &t], 1),
        QueryFormat::CatProdAbs => Tensor::concat(&[&prod()?, &absdiff()?], 1),
        QueryFormat::CatProdAbsT => Tensor::concat(&[&prod()?, &absdiff()?, &t], 1),
    }
}

/// Synthetic embedding provenance: class = (shape, color); the embedding is
/// the normalized sum of shared attribute vectors plus small per-class noise,
/// so unseen classes are novel combinations of attributes the text side
/// already encodes.
pub struct SyntheticEmbeddings {
    pub bank: ClassEmbeddingBank,
    /// `[n_shapes, dim]` attribute prototypes (unit norm).
    pub shape_protos: Value,
    /// `[n_colors, dim]` attribute prototypes (unit norm).
    pub color_protos: Value,
}

pub fn synthesize_bank(world: &WorldSpec, dim: usize) -> Result<SyntheticEmbeddings> {
    let mut rng = ChaCha8Rng::seed_from_u64(world.seed);
    rng.set_stream(0xE0B);
    let std = 1.0 / (dim as f64).sqrt();
    let mut shape_protos = Value::randn(&mut rng, &[world.shapes.len(), dim], std);
    let mut color_protos = Value::randn(&mut rng, &[world.colors.len(), dim], std);
    normalize_rows(&mut shape_protos);
    normalize_rows(&mut color_protos);
    let bg_proto = world.background_is_class.then(|| {
        let mut p = Value::randn(&mut rng, &[1, dim], std);
        normalize_rows(&mut p);
        p
    });

    let noise = Normal::new(0.0, CLASS_NOISE_STD).unwrap();
    let n = world.num_classes();
    let mut t = Vec::with_capacity(n * dim);
    let mut names = Vec::with_capacity(n);
    for id in 0..n {
        names.push(world.class_name(id));
        if Some(id) == world.background_id() {
            let p = bg_proto.as_ref().unwrap();
            for j in 0..dim {
                t.push(p.data()[j] + noise.sample(&mut rng));
            }
        } else {
            let cdef = &world.classes[id];
            for j in 0..dim {
                t.push(
                    shape_protos.at(&[cdef.shape, j])
                        + color_protos.at(&[cdef.color, j])
                        + noise.sample(&mut rng),
                );
            }
        }
    }
    let mut t = Value::new(vec![n, dim], t)?;
    normalize_rows(&mut t);
    let bank = ClassEmbeddingBank::new(t, names, world.seen.clone())?;
    Ok(SyntheticEmbeddings {
        bank,
        shape_protos,
        color_protos,
    })
}
