//! Operator surface for the zero-shot segmentation artifact: dataset
//! generation, training, evaluation, and the ablation matrix.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use zegseg_cli::plan::ExperimentPlan;
use zegseg_cli::report::{RunReport, TABLE_CSV_HEADER};
use zegseg_core::data::{
    generate, load_dataset, make_world, save_dataset, world_from_text, world_to_text, Dataset,
    GenRegime, WorldSpec,
};
use zegseg_core::params::{write_atomic, ParamStore};
use zegseg_core::text::{synthesize_bank, ClassEmbeddingBank};
use zegseg_core::trainer::{evaluate, history_to_text, train, TrainConfig, TrainMode};
use zegseg_core::SegModel;

#[derive(Parser)]
#[command(
    name = "zegseg",
    about = "Zero-shot semantic segmentation on a synthetic compositional world",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a world, its class embeddings, and train/test datasets
    GenData(GenDataArgs),
    /// Train a model, checkpoint it, and evaluate on the test split
    Train(TrainArgs),
    /// Evaluate a saved checkpoint on a dataset
    Eval(EvalArgs),
    /// Run an experiment plan across seeds and emit a comparison table
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// World seed (drives shapes/colors/split/embeddings)
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Reuse an existing world descriptor instead of sampling a new one
    #[arg(long)]
    world: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    shapes: usize,
    #[arg(long, default_value_t = 3)]
    colors: usize,
    #[arg(long, default_value_t = 3)]
    unseen: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    /// Treat background as a labeled class instead of ignore
    #[arg(long, default_value_t = false)]
    background_class: bool,
    #[arg(long, default_value_t = 512)]
    n_train: usize,
    #[arg(long, default_value_t = 128)]
    n_test: usize,
    /// Embedding dimension (must match the encoder width used for training)
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Which train files to write: inductive, transductive, supervised, all
    #[arg(long, default_value = "all")]
    regime: String,
}

/// Per-key config overrides; every flag maps onto the config file key of the
/// same name, so flags always win over `--config`.
#[derive(Args, Default, Clone)]
struct OverrideArgs {
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    regime: Option<String>,
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    query_format: Option<String>,
    #[arg(long)]
    iters: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    wd: Option<String>,
    #[arg(long)]
    lr_warmup: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    beta: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    prompt_tokens: Option<String>,
    /// 1-based inclusive range `a..b`, or `all`
    #[arg(long)]
    prompt_layers: Option<String>,
    /// Pseudo-label confidence threshold in [0,1], or `none`
    #[arg(long)]
    threshold: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    log_every: Option<String>,
    #[arg(long)]
    pretrain_iters: Option<String>,
    #[arg(long)]
    image_size: Option<String>,
    #[arg(long)]
    patch_size: Option<String>,
    #[arg(long)]
    depth: Option<String>,
    #[arg(long)]
    width: Option<String>,
    #[arg(long)]
    heads: Option<String>,
    #[arg(long)]
    mlp_ratio: Option<String>,
    #[arg(long)]
    decoder_layers: Option<String>,
    #[arg(long)]
    decoder_heads: Option<String>,
    #[arg(long)]
    self_attention: Option<String>,
    #[arg(long)]
    parallel: Option<String>,
}

impl OverrideArgs {
    fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        let pairs: [(&str, &Option<String>); 28] = [
            ("mode", &self.mode),
            ("regime", &self.regime),
            ("loss", &self.loss),
            ("query-format", &self.query_format),
            ("iters", &self.iters),
            ("batch-size", &self.batch_size),
            ("lr", &self.lr),
            ("wd", &self.wd),
            ("lr-warmup", &self.lr_warmup),
            ("alpha", &self.alpha),
            ("beta", &self.beta),
            ("gamma", &self.gamma),
            ("prompt-tokens", &self.prompt_tokens),
            ("prompt-layers", &self.prompt_layers),
            ("threshold", &self.threshold),
            ("seed", &self.seed),
            ("log-every", &self.log_every),
            ("pretrain-iters", &self.pretrain_iters),
            ("image-size", &self.image_size),
            ("patch-size", &self.patch_size),
            ("depth", &self.depth),
            ("width", &self.width),
            ("heads", &self.heads),
            ("mlp-ratio", &self.mlp_ratio),
            ("decoder-layers", &self.decoder_layers),
            ("decoder-heads", &self.decoder_heads),
            ("self-attention", &self.self_attention),
            ("parallel", &self.parallel),
        ];
        for (key, value) in pairs {
            if let Some(v) = value {
                cfg.apply_kv(key, v)?;
            }
        }
        Ok(())
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory produced by gen-data
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoint, history, and report
    #[arg(long)]
    out: PathBuf,
    /// Config file (key=value, same keys as the flags); flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Embedding file overriding <data>/embeddings.zege
    #[arg(long)]
    world: Option<PathBuf>,
    /// Run name recorded in the report
    #[arg(long, default_value = "train")]
    name: String,
    #[command(flatten)]
    overrides: OverrideArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Write report files here in addition to stdout
    #[arg(long)]
    out: Option<PathBuf>,
    /// Embedding file overriding <data>/embeddings.zege
    #[arg(long)]
    world: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Plan file; mutually exclusive with --builtin
    #[arg(long, conflicts_with = "builtin")]
    plan: Option<PathBuf>,
    /// Builtin plan: design-matrix, query-formats, prompt-count, prompt-depth
    #[arg(long)]
    builtin: Option<String>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated seeds; the table aggregates the per-seed median
    #[arg(long, default_value = "1,2,3")]
    seeds: String,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Embedding file overriding <data>/embeddings.zege
    #[arg(long)]
    world: Option<PathBuf>,
    #[command(flatten)]
    overrides: OverrideArgs,
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::GenData(args) => cmd_gen_data(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Ablate(args) => cmd_ablate(args),
    }
}

// ── gen-data ────────────────────────────────────────────────────────

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out)?;
    let world = match &args.world {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            world_from_text(&text)?.0
        }
        None => make_world(
            args.seed,
            args.shapes,
            args.colors,
            args.unseen,
            args.image_size,
            args.background_class,
        )?,
    };

    let regimes: Vec<GenRegime> = match args.regime.as_str() {
        "all" => vec![
            GenRegime::InductiveTrain,
            GenRegime::TransductiveTrain,
            GenRegime::FullyLabeled,
        ],
        other => vec![GenRegime::parse(other)?],
    };

    let world_path = args.out.join("world.txt");
    write_atomic(
        &world_path,
        world_to_text(&world, GenRegime::FullyLabeled, args.seed).as_bytes(),
    )?;

    let synth = synthesize_bank(&world, args.width)?;
    let emb_path = args.out.join("embeddings.zege");
    synth.bank.save(&emb_path)?;

    let mut written = vec![world_path.clone(), emb_path];
    for regime in regimes {
        let ds = generate(&world, args.n_train, args.seed + 1, regime)?;
        let name = match regime {
            GenRegime::InductiveTrain => "train_inductive.zegd",
            GenRegime::TransductiveTrain => "train_transductive.zegd",
            GenRegime::FullyLabeled => "train_supervised.zegd",
        };
        let p = args.out.join(name);
        save_dataset(&ds, &p)?;
        written.push(p);
    }
    let test = generate(&world, args.n_test, args.seed + 2, GenRegime::FullyLabeled)?;
    let test_path = args.out.join("test.zegd");
    save_dataset(&test, &test_path)?;
    written.push(test_path);

    println!(
        "world seed {}: {} shapes x {} colors = {} classes ({} seen / {} unseen){}",
        world.seed,
        world.shapes.len(),
        world.colors.len(),
        world.num_classes(),
        world.seen_ids().len(),
        world.unseen_ids().len(),
        if world.background_is_class {
            ", background is a class"
        } else {
            ""
        }
    );
    println!(
        "seen:   {}",
        world
            .seen_ids()
            .iter()
            .map(|&i| world.class_name(i))
            .collect::<Vec<_>>()
            .join(", ")
    );
    println!(
        "unseen: {}",
        world
            .unseen_ids()
            .iter()
            .map(|&i| world.class_name(i))
            .collect::<Vec<_>>()
            .join(", ")
    );
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

// ── shared loading ──────────────────────────────────────────────────

fn resolve_config(config: &Option<PathBuf>, overrides: &OverrideArgs) -> Result<TrainConfig> {
    let mut cfg = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            TrainConfig::from_text(&text)?
        }
        None => TrainConfig::default(),
    };
    overrides.apply(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_bank(data: &Path, world_override: &Option<PathBuf>) -> Result<ClassEmbeddingBank> {
    let path = world_override
        .clone()
        .unwrap_or_else(|| data.join("embeddings.zege"));
    ClassEmbeddingBank::load(&path).with_context(|| format!("loading {}", path.display()))
}

fn train_dataset_path(data: &Path, mode: TrainMode) -> PathBuf {
    let name = match mode {
        TrainMode::Inductive => "train_inductive.zegd",
        TrainMode::TransductiveAll | TrainMode::TransductiveUnseenOnly => {
            "train_transductive.zegd"
        }
        TrainMode::Supervised => "train_supervised.zegd",
    };
    data.join(name)
}

fn check_bank_matches(bank: &ClassEmbeddingBank, ds: &Dataset, cfg: &TrainConfig) -> Result<()> {
    if bank.classes() != ds.world.num_classes() {
        bail!(
            "embedding bank has {} classes but the dataset world has {}",
            bank.classes(),
            ds.world.num_classes()
        );
    }
    if bank.dim() != cfg.width {
        bail!(
            "embedding dim {} but encoder width {}",
            bank.dim(),
            cfg.width
        );
    }
    Ok(())
}

fn build_report(
    name: &str,
    world: &WorldSpec,
    eval: zegseg_core::EvalReport,
    cfg: &TrainConfig,
    wall: f64,
) -> RunReport {
    RunReport {
        name: name.to_string(),
        seed: cfg.seed,
        wall_seconds: wall,
        eval,
        class_names: (0..world.num_classes()).map(|i| world.class_name(i)).collect(),
        seen: world.seen.clone(),
        config_text: cfg.to_text(),
    }
}

fn write_report(dir: &Path, rep: &RunReport) -> Result<()> {
    write_atomic(&dir.join("report.txt"), rep.to_text().as_bytes())?;
    write_atomic(
        &dir.join("per_class_iou.csv"),
        rep.per_class_csv().as_bytes(),
    )?;
    Ok(())
}

fn print_metrics(rep: &RunReport) {
    println!(
        "{}: pAcc {:.1} | mIoU(S) {:.1} | mIoU(U) {:.1} | hIoU {:.1}",
        rep.name,
        rep.eval.pixel_accuracy * 100.0,
        rep.eval.miou_seen * 100.0,
        rep.eval.miou_unseen * 100.0,
        rep.eval.hiou * 100.0
    );
}

// ── train ───────────────────────────────────────────────────────────

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = resolve_config(&args.config, &args.overrides)?;
    std::fs::create_dir_all(&args.out)?;
    let ds_path = train_dataset_path(&args.data, cfg.mode);
    let ds = load_dataset(&ds_path).with_context(|| format!("loading {}", ds_path.display()))?;
    let bank = load_bank(&args.data, &args.world)?;
    check_bank_matches(&bank, &ds, &cfg)?;

    let t0 = Instant::now();
    let outcome = train(&cfg, &ds, &bank)?;
    let ckpt_path = args.out.join("checkpoint.zegw");
    outcome.model.store.save(&ckpt_path, &cfg.to_text())?;
    write_atomic(
        &args.out.join("history.txt"),
        history_to_text(&outcome.history).as_bytes(),
    )?;

    // evaluate exactly what was persisted
    let (loaded, echo) = ParamStore::load(&ckpt_path)?;
    let mut model = SegModel::new(TrainConfig::from_text(&echo)?.model_config())?;
    model.store.load_into(&loaded)?;
    let test_path = args.data.join("test.zegd");
    let test =
        load_dataset(&test_path).with_context(|| format!("loading {}", test_path.display()))?;
    let eval = evaluate(&model, &test, &bank, cfg.parallel)?;
    let wall = t0.elapsed().as_secs_f64();

    let rep = build_report(&args.name, &test.world, eval, &cfg, wall);
    write_report(&args.out, &rep)?;
    print_metrics(&rep);
    println!("wrote {}", ckpt_path.display());
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (loaded, echo) = ParamStore::load(&args.checkpoint)?;
    let cfg = TrainConfig::from_text(&echo)?;
    let mut model = SegModel::new(cfg.model_config())?;
    model.store.load_into(&loaded)?;

    let bank = load_bank(&args.data, &args.world)?;
    let test_path = args.data.join("test.zegd");
    let test =
        load_dataset(&test_path).with_context(|| format!("loading {}", test_path.display()))?;
    check_bank_matches(&bank, &test, &cfg)?;

    let t0 = Instant::now();
    let eval = evaluate(&model, &test, &bank, cfg.parallel)?;
    let rep = build_report("eval", &test.world, eval, &cfg, t0.elapsed().as_secs_f64());
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
        write_report(out, &rep)?;
    }
    print!("{}", rep.to_text());
    print_metrics(&rep);
    Ok(())
}

// ── ablate ──────────────────────────────────────────────────────────

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let base = resolve_config(&args.config, &args.overrides)?;
    let plan = match (&args.plan, &args.builtin) {
        (Some(path), None) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            ExperimentPlan::parse(&text, &base)?
        }
        (None, Some(name)) => ExperimentPlan::builtin(name, &base)?,
        _ => bail!("ablate needs exactly one of --plan or --builtin"),
    };
    let seeds: Vec<u64> = args
        .seeds
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| anyhow::anyhow!("bad seed `{s}`")))
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        bail!("need at least one seed");
    }

    std::fs::create_dir_all(args.out.join("runs"))?;
    let bank = load_bank(&args.data, &args.world)?;
    let test = load_dataset(&args.data.join("test.zegd"))?;
    let mut datasets: HashMap<&'static str, Dataset> = HashMap::new();

    struct Cell {
        name: String,
        dim: usize,
        results: Vec<RunReport>,
        failures: Vec<String>,
    }
    let mut cells: Vec<Cell> = Vec::new();
    for run in &plan.runs {
        let mut cell = Cell {
            name: run.name.clone(),
            dim: run.config.width * run.config.query_format.dim_multiplier(),
            results: Vec::new(),
            failures: Vec::new(),
        };
        for &seed in &seeds {
            let mut cfg = run.config.clone();
            cfg.seed = seed;
            let outcome = (|| -> Result<RunReport> {
                let key = match cfg.mode {
                    TrainMode::Inductive => "inductive",
                    TrainMode::TransductiveAll | TrainMode::TransductiveUnseenOnly => {
                        "transductive"
                    }
                    TrainMode::Supervised => "supervised",
                };
                if !datasets.contains_key(key) {
                    let path = train_dataset_path(&args.data, cfg.mode);
                    datasets.insert(
                        key,
                        load_dataset(&path)
                            .with_context(|| format!("loading {}", path.display()))?,
                    );
                }
                let ds = &datasets[key];
                check_bank_matches(&bank, ds, &cfg)?;
                let t0 = Instant::now();
                let out = train(&cfg, ds, &bank)?;
                let eval = evaluate(&out.model, &test, &bank, cfg.parallel)?;
                Ok(build_report(
                    &run.name,
                    &test.world,
                    eval,
                    &cfg,
                    t0.elapsed().as_secs_f64(),
                ))
            })();
            match outcome {
                Ok(rep) => {
                    let file = args
                        .out
                        .join("runs")
                        .join(format!("{}-seed{}.report.txt", run.name, seed));
                    write_atomic(&file, rep.to_text().as_bytes())?;
                    println!(
                        "[{} seed {}] pAcc {:.1} S {:.1} U {:.1} h {:.1} ({:.0}s)",
                        run.name,
                        seed,
                        rep.eval.pixel_accuracy * 100.0,
                        rep.eval.miou_seen * 100.0,
                        rep.eval.miou_unseen * 100.0,
                        rep.eval.hiou * 100.0,
                        rep.wall_seconds
                    );
                    cell.results.push(rep);
                }
                Err(e) => {
                    eprintln!("[{} seed {}] failed: {e:#}", run.name, seed);
                    cell.failures.push(format!("seed {seed}: {e:#}"));
                }
            }
        }
        cells.push(cell);
    }

    // aggregate: per-cell median across seeds
    let mut table = String::new();
    let mut csv = String::from(TABLE_CSV_HEADER);
    table.push_str(&format!(
        "{:<28} {:>5} {:>6} {:>8} {:>8} {:>8} {:>8}\n",
        "run", "dim", "seeds", "pAcc", "mIoU(S)", "mIoU(U)", "hIoU"
    ));
    let mut any_failed = false;
    for cell in &cells {
        if cell.results.is_empty() {
            any_failed = true;
            table.push_str(&format!("{:<28} {:>5} failed\n", cell.name, cell.dim));
            csv.push_str(&format!("{},{},0,,,,\n", cell.name, cell.dim));
            continue;
        }
        any_failed |= !cell.failures.is_empty();
        let agg = |f: fn(&RunReport) -> f64| -> f64 {
            median(cell.results.iter().map(f).collect()) * 100.0
        };
        let (p, s, u, h) = (
            agg(|r| r.eval.pixel_accuracy),
            agg(|r| r.eval.miou_seen),
            agg(|r| r.eval.miou_unseen),
            agg(|r| r.eval.hiou),
        );
        table.push_str(&format!(
            "{:<28} {:>5} {:>6} {:>8.1} {:>8.1} {:>8.1} {:>8.1}\n",
            cell.name,
            cell.dim,
            cell.results.len(),
            p,
            s,
            u,
            h
        ));
        csv.push_str(&format!(
            "{},{},{},{p},{s},{u},{h}\n",
            cell.name,
            cell.dim,
            cell.results.len()
        ));
    }
    write_atomic(&args.out.join("table.txt"), table.as_bytes())?;
    write_atomic(&args.out.join("table.csv"), csv.as_bytes())?;
    print!("{table}");
    println!("wrote {}", args.out.join("table.txt").display());

    if any_failed {
        let detail: Vec<String> = cells
            .iter()
            .filter(|c| !c.failures.is_empty())
            .map(|c| format!("{}: {}", c.name, c.failures.join("; ")))
            .collect();
        bail!("some runs failed:\n{}", detail.join("\n"));
    }
    Ok(())
}
