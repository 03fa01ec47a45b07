use std::time::Instant;
use zegseg_core::data::{generate, make_world, GenRegime};
use zegseg_core::text::synthesize_bank;
use zegseg_core::trainer::{evaluate, train, TrainConfig, TrainMode};
use zegseg_core::{LossMode, QueryFormat, Regime};

fn main() {
    let iters: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(800);
    let world = make_world(7, 4, 3, 3, 32, false).unwrap();
    let train_ds = generate(&world, 512, 11, GenRegime::InductiveTrain).unwrap();
    let trans_ds = generate(&world, 512, 11, GenRegime::TransductiveTrain).unwrap();
    let test_ds = generate(&world, 128, 99, GenRegime::FullyLabeled).unwrap();
    let bank = synthesize_bank(&world, 64).unwrap().bank;
    println!("unseen ids: {:?}", world.unseen_ids().iter().map(|&i| world.class_name(i)).collect::<Vec<_>>());

    let run = |name: &str, regime: Regime, loss: LossMode, fmt: QueryFormat, mode: TrainMode| {
        let mut cfg = TrainConfig::default();
        cfg.regime = regime;
        cfg.loss = loss;
        cfg.query_format = fmt;
        cfg.mode = mode;
        cfg.iters = iters;
        cfg.seed = 1;
        let ds = if mode.is_transductive() { &trans_ds } else { &train_ds };
        let t = Instant::now();
        let out = train(&cfg, ds, &bank).unwrap();
        let r = evaluate(&out.model, &test_ds, &bank, true).unwrap();
        println!(
            "{name:28} pAcc {:5.1} mIoU(S) {:5.1} mIoU(U) {:5.1} hIoU {:5.1}  [{:.0}s, last loss {:.4}]",
            100.0 * r.pixel_accuracy, 100.0 * r.miou_seen, 100.0 * r.miou_unseen, 100.0 * r.hiou,
            t.elapsed().as_secs_f64(), out.history.last().unwrap().loss
        );
    };

    run("baseline-fix (EL, t)", Regime::Fix, LossMode::Exclusive, QueryFormat::T, TrainMode::Inductive);
    run("baseline-ft (EL, t)", Regime::Ft, LossMode::Exclusive, QueryFormat::T, TrainMode::Inductive);
    run("dpt+nel (t)", Regime::Dpt, LossMode::NelPlus, QueryFormat::T, TrainMode::Inductive);
    run("dpt+nel+rd (full)", Regime::Dpt, LossMode::NelPlus, QueryFormat::CatProdT, TrainMode::Inductive);
    run("full transductive-all", Regime::Dpt, LossMode::NelPlus, QueryFormat::CatProdT, TrainMode::TransductiveAll);
}
