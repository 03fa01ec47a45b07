//! Synthetic compositional dataset: classes are (shape, color) pairs drawn on
//! small images, with seen/unseen splits chosen so every unseen class's shape
//! and color each occur in some seen class. That compositional structure is
//! what makes zero-shot transfer from text-side attributes testable at all.
//!
//! Dataset file layout (little-endian): magic `ZEGD`, version u32, header
//! length u32 + UTF-8 key=value lines (world, split, regime), sample count
//! u32, height u32, width u32, then per sample 3·H·W f32 image values and
//! H·W u8 labels.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::params::{write_atomic, Cursor};
use crate::value::Value;

pub const IGNORE_INDEX: u8 = 255;
pub const DATASET_MAGIC: &[u8; 4] = b"ZEGD";
pub const DATASET_VERSION: u32 = 1;

pub const MIN_OBJECT_SIZE: usize = 6;
pub const MAX_OBJECT_SIZE: usize = 14;
const PIXEL_NOISE_STD: f64 = 0.02;
const LAYOUT_RETRIES: usize = 200;
const PLACE_RETRIES: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Square,
        ShapeKind::Circle,
        ShapeKind::Triangle,
        ShapeKind::Cross,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown shape `{s}`")))
    }

    /// Filled-pixel mask for a size×size bounding box.
    fn mask(&self, size: usize) -> Vec<bool> {
        let c = (size as f64 - 1.0) / 2.0;
        let mut m = vec![false; size * size];
        for y in 0..size {
            for x in 0..size {
                let on = match self {
                    ShapeKind::Square => true,
                    ShapeKind::Circle => {
                        let (dx, dy) = (x as f64 - c, y as f64 - c);
                        let r = size as f64 / 2.0 - 0.1;
                        dx * dx + dy * dy <= r * r
                    }
                    ShapeKind::Triangle => (2.0 * (x as f64 - c)).abs() <= y as f64 + 0.01,
                    ShapeKind::Cross => {
                        let t = (size / 3).max(2);
                        let lo = (size - t) / 2;
                        let hi = lo + t;
                        (x >= lo && x < hi) || (y >= lo && y < hi)
                    }
                };
                m[y * size + x] = on;
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColorDef {
    pub name: String,
    pub rgb: [f64; 3],
}

const PALETTE: [(&str, [f64; 3]); 6] = [
    ("red", [0.90, 0.10, 0.10]),
    ("green", [0.10, 0.80, 0.15]),
    ("blue", [0.15, 0.20, 0.90]),
    ("yellow", [0.90, 0.85, 0.10]),
    ("magenta", [0.85, 0.10, 0.85]),
    ("cyan", [0.10, 0.85, 0.85]),
];

/// One class: a shape index and a color index into the world's lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassDef {
    pub shape: usize,
    pub color: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldSpec {
    pub shapes: Vec<ShapeKind>,
    pub colors: Vec<ColorDef>,
    /// Shape-major: class id = shape·n_colors + color. A trailing background
    /// class (no shape/color) is appended when `background_is_class` is set.
    pub classes: Vec<ClassDef>,
    /// Seen flag per class id (background, when present, is always seen).
    pub seen: Vec<bool>,
    pub seed: u64,
    pub image_size: usize,
    pub background_is_class: bool,
}

impl WorldSpec {
    pub fn num_classes(&self) -> usize {
        self.classes.len() + usize::from(self.background_is_class)
    }

    pub fn background_id(&self) -> Option<usize> {
        self.background_is_class.then_some(self.classes.len())
    }

    pub fn class_name(&self, id: usize) -> String {
        if Some(id) == self.background_id() {
            return "background".into();
        }
        let c = &self.classes[id];
        format!("{} {}", self.colors[c.color].name, self.shapes[c.shape].name())
    }

    pub fn seen_ids(&self) -> Vec<usize> {
        (0..self.num_classes()).filter(|&i| self.seen[i]).collect()
    }

    pub fn unseen_ids(&self) -> Vec<usize> {
        (0..self.num_classes()).filter(|&i| !self.seen[i]).collect()
    }

    /// Every unseen class's shape and color each appear in a seen class.
    pub fn split_is_compositional(&self) -> bool {
        for (id, c) in self.classes.iter().enumerate() {
            if self.seen[id] {
                continue;
            }
            let shape_covered = self
                .classes
                .iter()
                .enumerate()
                .any(|(j, o)| self.seen[j] && o.shape == c.shape);
            let color_covered = self
                .classes
                .iter()
                .enumerate()
                .any(|(j, o)| self.seen[j] && o.color == c.color);
            if !shape_covered || !color_covered {
                return false;
            }
        }
        true
    }
}

/// Build a world with the requested extents and a deterministic seen/unseen
/// split honoring the compositional-transferability invariant.
pub fn make_world(
    seed: u64,
    n_shapes: usize,
    n_colors: usize,
    n_unseen: usize,
    image_size: usize,
    background_is_class: bool,
) -> Result<WorldSpec> {
    if n_shapes == 0 || n_shapes > ShapeKind::ALL.len() {
        return Err(Error::Config(format!(
            "shapes must be 1..={}, got {n_shapes}",
            ShapeKind::ALL.len()
        )));
    }
    if n_colors == 0 || n_colors > PALETTE.len() {
        return Err(Error::Config(format!(
            "colors must be 1..={}, got {n_colors}",
            PALETTE.len()
        )));
    }
    if image_size < MAX_OBJECT_SIZE {
        return Err(Error::Config(format!(
            "image size must be at least {MAX_OBJECT_SIZE}, got {image_size}"
        )));
    }
    let shapes: Vec<ShapeKind> = ShapeKind::ALL[..n_shapes].to_vec();
    let colors: Vec<ColorDef> = PALETTE[..n_colors]
        .iter()
        .map(|(n, rgb)| ColorDef {
            name: (*n).to_string(),
            rgb: *rgb,
        })
        .collect();
    let mut classes = Vec::with_capacity(n_shapes * n_colors);
    for s in 0..n_shapes {
        for k in 0..n_colors {
            classes.push(ClassDef { shape: s, color: k });
        }
    }
    let mut world = WorldSpec {
        shapes,
        colors,
        classes,
        seen: vec![],
        seed,
        image_size,
        background_is_class,
    };
    world.seen = make_split(&world, n_unseen)?;
    Ok(world)
}

/// Deterministic split: shuffle candidates from the world seed, then greedily
/// mark classes unseen while the compositional invariant stays satisfiable.
pub fn make_split(world: &WorldSpec, n_unseen: usize) -> Result<Vec<bool>> {
    let n = world.classes.len();
    if n_unseen >= n {
        return Err(Error::Config(format!(
            "cannot hold out {n_unseen} of {n} classes"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(world.seed);
    rng.set_stream(0xB11D);
    // Fisher–Yates
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut seen = vec![true; world.num_classes()];
    let mut held = 0;
    for &cand in &order {
        if held == n_unseen {
            break;
        }
        seen[cand] = false;
        let trial = WorldSpec {
            seen: seen.clone(),
            ..world.clone()
        };
        if trial.split_is_compositional() {
            held += 1;
        } else {
            seen[cand] = true;
        }
    }
    if held != n_unseen {
        return Err(Error::Config(format!(
            "no compositional split with {n_unseen} unseen classes exists"
        )));
    }
    Ok(seen)
}

/// What the generator may place and how it labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenRegime {
    /// Seen-class objects only, fully labeled.
    InductiveTrain,
    /// All classes placed; unseen-class pixels relabeled to the ignore index.
    TransductiveTrain,
    /// All classes placed and labeled (test split and supervised training).
    FullyLabeled,
}

impl GenRegime {
    pub fn name(&self) -> &'static str {
        match self {
            GenRegime::InductiveTrain => "inductive",
            GenRegime::TransductiveTrain => "transductive",
            GenRegime::FullyLabeled => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "inductive" => Ok(GenRegime::InductiveTrain),
            "transductive" => Ok(GenRegime::TransductiveTrain),
            "full" => Ok(GenRegime::FullyLabeled),
            other => Err(Error::Config(format!("unknown dataset regime `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlacedObject {
    pub class_id: usize,
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    /// `[3, size, size]`, values in [0, 1], rounded through f32.
    pub image: Value,
    /// Row-major label map; `IGNORE_INDEX` where unlabeled.
    pub labels: Vec<u8>,
    /// Generator provenance; empty after loading from file.
    pub provenance: Vec<PlacedObject>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub world: WorldSpec,
    pub regime: GenRegime,
    pub seed: u64,
    pub samples: Vec<SampleRecord>,
}

/// Generate `n_samples` images deterministically from (world seed, sample
/// seed). Each sample derives its own rng stream, so generation order is
/// irrelevant.
pub fn generate(world: &WorldSpec, n_samples: usize, seed: u64, regime: GenRegime) -> Result<Dataset> {
    let samples: Result<Vec<SampleRecord>> = (0..n_samples)
        .map(|i| generate_sample(world, seed, i, regime))
        .collect();
    Ok(Dataset {
        world: world.clone(),
        regime,
        seed,
        samples: samples?,
    })
}

fn generate_sample(
    world: &WorldSpec,
    seed: u64,
    index: usize,
    regime: GenRegime,
) -> Result<SampleRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let s = world.image_size;
    let allowed: Vec<usize> = match regime {
        GenRegime::InductiveTrain => (0..world.classes.len()).filter(|&c| world.seen[c]).collect(),
        _ => (0..world.classes.len()).collect(),
    };
    let n_obj = rng.random_range(1..=4usize);

    let mut placed: Vec<PlacedObject> = Vec::new();
    let mut laid_out = false;
    'layout: for _ in 0..LAYOUT_RETRIES {
        placed.clear();
        for _ in 0..n_obj {
            let mut ok = false;
            for _ in 0..PLACE_RETRIES {
                let class_id = allowed[rng.random_range(0..allowed.len())];
                let size = rng.random_range(MIN_OBJECT_SIZE..=MAX_OBJECT_SIZE);
                let x = rng.random_range(0..=s - size);
                let y = rng.random_range(0..=s - size);
                let overlaps = placed.iter().any(|p| {
                    x < p.x + p.size && p.x < x + size && y < p.y + p.size && p.y < y + size
                });
                if !overlaps {
                    placed.push(PlacedObject { class_id, x, y, size });
                    ok = true;
                    break;
                }
            }
            if !ok {
                continue 'layout;
            }
        }
        laid_out = true;
        break;
    }
    if !laid_out {
        return Err(Error::PlacementFailed {
            retries: LAYOUT_RETRIES,
        });
    }

    let bg_label = world.background_id().map(|b| b as u8).unwrap_or(IGNORE_INDEX);
    let mut labels = vec![bg_label; s * s];
    let mut image = vec![0.0f64; 3 * s * s];
    for obj in &placed {
        let cdef = &world.classes[obj.class_id];
        let rgb = world.colors[cdef.color].rgb;
        let mask = world.shapes[cdef.shape].mask(obj.size);
        for my in 0..obj.size {
            for mx in 0..obj.size {
                if !mask[my * obj.size + mx] {
                    continue;
                }
                let (px, py) = (obj.x + mx, obj.y + my);
                labels[py * s + px] = obj.class_id as u8;
                for ch in 0..3 {
                    image[(ch * s + py) * s + px] = rgb[ch];
                }
            }
        }
    }

    if regime == GenRegime::TransductiveTrain {
        for l in &mut labels {
            if *l != IGNORE_INDEX && *l != bg_label && !world.seen[*l as usize] {
                *l = IGNORE_INDEX;
            }
        }
    }

    let noise = Normal::new(0.0, PIXEL_NOISE_STD).unwrap();
    for v in &mut image {
        *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
    }
    let mut image = Value::new(vec![3, s, s], image)?;
    image.round_to_f32();

    Ok(SampleRecord {
        image,
        labels,
        provenance: placed,
    })
}

/// One image containing a single object of the given class, used by the
/// auxiliary attribute-classification pretraining. Returns the image and the
/// class's (shape, color) attribute indices.
pub fn single_object_sample(
    world: &WorldSpec,
    class_id: usize,
    seed: u64,
) -> Result<(Value, usize, usize)> {
    if class_id >= world.classes.len() {
        return Err(Error::LabelOutOfRange {
            label: class_id,
            classes: world.classes.len(),
            ignore: IGNORE_INDEX as usize,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x51E);
    let s = world.image_size;
    let size = rng.random_range(MIN_OBJECT_SIZE..=MAX_OBJECT_SIZE);
    let ox = rng.random_range(0..=s - size);
    let oy = rng.random_range(0..=s - size);
    let cdef = &world.classes[class_id];
    let rgb = world.colors[cdef.color].rgb;
    let mask = world.shapes[cdef.shape].mask(size);
    let mut image = vec![0.0f64; 3 * s * s];
    for my in 0..size {
        for mx in 0..size {
            if !mask[my * size + mx] {
                continue;
            }
            for ch in 0..3 {
                image[(ch * s + oy + my) * s + ox + mx] = rgb[ch];
            }
        }
    }
    let noise = Normal::new(0.0, PIXEL_NOISE_STD).unwrap();
    for v in &mut image {
        *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
    }
    let mut image = Value::new(vec![3, s, s], image)?;
    image.round_to_f32();
    Ok((image, cdef.shape, cdef.color))
}

// ── World/header text form ──────────────────────────────────────────

/// Key=value text form of a world plus split, used both for the dataset
/// header block and the standalone world descriptor file.
pub fn world_to_text(world: &WorldSpec, regime: GenRegime, gen_seed: u64) -> String {
    let mut out = String::new();
    let mut kv = |k: &str, v: String| {
        out.push_str(k);
        out.push('=');
        out.push_str(&v);
        out.push('\n');
    };
    kv("world_seed", world.seed.to_string());
    kv("image_size", world.image_size.to_string());
    kv(
        "shapes",
        world
            .shapes
            .iter()
            .map(|s| s.name().to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    kv(
        "colors",
        world
            .colors
            .iter()
            .map(|c| format!("{}:{}:{}:{}", c.name, c.rgb[0], c.rgb[1], c.rgb[2]))
            .collect::<Vec<_>>()
            .join(","),
    );
    kv(
        "unseen",
        world
            .unseen_ids()
            .iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    kv(
        "background_is_class",
        (world.background_is_class as u8).to_string(),
    );
    kv("regime", regime.name().to_string());
    kv("gen_seed", gen_seed.to_string());
    out
}

pub fn world_from_text(text: &str) -> Result<(WorldSpec, GenRegime, u64)> {
    let mut map = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("bad header line `{line}`")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| -> Result<&String> {
        map.get(k)
            .ok_or_else(|| Error::Config(format!("missing header key `{k}`")))
    };
    let seed: u64 = get("world_seed")?
        .parse()
        .map_err(|_| Error::Config("bad world_seed".into()))?;
    let image_size: usize = get("image_size")?
        .parse()
        .map_err(|_| Error::Config("bad image_size".into()))?;
    let shapes: Vec<ShapeKind> = get("shapes")?
        .split(',')
        .map(ShapeKind::parse)
        .collect::<Result<_>>()?;
    let colors: Vec<ColorDef> = get("colors")?
        .split(',')
        .map(|c| {
            let parts: Vec<&str> = c.split(':').collect();
            if parts.len() != 4 {
                return Err(Error::Config(format!("bad color spec `{c}`")));
            }
            let rgb: Vec<f64> = parts[1..]
                .iter()
                .map(|p| p.parse().map_err(|_| Error::Config(format!("bad rgb in `{c}`"))))
                .collect::<Result<_>>()?;
            Ok(ColorDef {
                name: parts[0].to_string(),
                rgb: [rgb[0], rgb[1], rgb[2]],
            })
        })
        .collect::<Result<_>>()?;
    let background_is_class = get("background_is_class")? == "1";
    let mut classes = Vec::new();
    for s in 0..shapes.len() {
        for k in 0..colors.len() {
            classes.push(ClassDef { shape: s, color: k });
        }
    }
    let n_total = classes.len() + usize::from(background_is_class);
    let mut seen = vec![true; n_total];
    let unseen_txt = get("unseen")?;
    if !unseen_txt.is_empty() {
        for tok in unseen_txt.split(',') {
            let id: usize = tok
                .parse()
                .map_err(|_| Error::Config(format!("bad unseen id `{tok}`")))?;
            if id >= n_total {
                return Err(Error::Config(format!("unseen id {id} out of range")));
            }
            seen[id] = false;
        }
    }
    let regime = GenRegime::parse(get("regime")?)?;
    let gen_seed: u64 = get("gen_seed")?
        .parse()
        .map_err(|_| Error::Config("bad gen_seed".into()))?;
    Ok((
        WorldSpec {
            shapes,
            colors,
            classes,
            seen,
            seed,
            image_size,
            background_is_class,
        },
        regime,
        gen_seed,
    ))
}

// ── Persistence ─────────────────────────────────────────────────────

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let header = world_to_text(&ds.world, ds.regime, ds.seed);
    let s = ds.world.image_size;
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    buf.extend_from_slice(&(ds.samples.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(s as u32).to_le_bytes());
    buf.extend_from_slice(&(s as u32).to_le_bytes());
    for rec in &ds.samples {
        for &v in rec.image.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        buf.extend_from_slice(&rec.labels);
    }
    write_atomic(path, &buf)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    let mut rd = Cursor::new(path, &bytes);
    rd.expect_magic(DATASET_MAGIC)?;
    let version = rd.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::BadVersion {
            path: rd.path(),
            found: version,
            supported: DATASET_VERSION,
        });
    }
    let header_len = rd.u32()? as usize;
    let header = String::from_utf8(rd.bytes(header_len)?.to_vec()).map_err(|_| {
        Error::CorruptFile {
            path: rd.path(),
            reason: "header is not UTF-8".into(),
        }
    })?;
    let (world, regime, gen_seed) = world_from_text(&header)?;
    let n = rd.u32()? as usize;
    let h = rd.u32()? as usize;
    let w = rd.u32()? as usize;
    if h != world.image_size || w != world.image_size {
        return Err(Error::CorruptFile {
            path: rd.path(),
            reason: format!("image extent {h}x{w} contradicts header {}", world.image_size),
        });
    }
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let mut img = Vec::with_capacity(3 * h * w);
        for _ in 0..3 * h * w {
            img.push(rd.f32()? as f64);
        }
        let labels = rd.bytes(h * w)?.to_vec();
        samples.push(SampleRecord {
            image: Value::new(vec![3, h, w], img)?,
            labels,
            provenance: vec![],
        });
    }
    if !rd.done() {
        return Err(Error::CorruptFile {
            path: rd.path(),
            reason: "trailing bytes after payload".into(),
        });
    }
    Ok(Dataset {
        world,
        regime,
        seed: gen_seed,
        samples,
    })
}
