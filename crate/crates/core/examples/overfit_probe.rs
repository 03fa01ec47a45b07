use zegseg_core::data::{generate, make_world, GenRegime};
use zegseg_core::text::synthesize_bank;
use zegseg_core::trainer::{evaluate, train, TrainConfig, TrainMode};

fn main() {
    let iters: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(800);
    let world = make_world(7, 4, 3, 3, 32, false).unwrap();
    let tiny = generate(&world, 16, 11, GenRegime::FullyLabeled).unwrap();
    let bank = synthesize_bank(&world, 64).unwrap().bank;
    let regime = std::env::args().nth(2).unwrap_or("dpt".into());
    let loss = std::env::args().nth(3).unwrap_or("nel-plus".into());
    let mut cfg = TrainConfig::default();
    cfg.mode = TrainMode::Supervised;
    cfg.iters = iters;
    cfg.log_every = iters / 8;
    cfg.pretrain_iters = 200;
    cfg.apply_kv("regime", &regime).unwrap();
    cfg.apply_kv("loss", &loss).unwrap();
    let out = train(&cfg, &tiny, &bank).unwrap();
    for r in &out.history {
        println!("iter {:4} loss {:.4}", r.iter, r.loss);
    }
    let r = evaluate(&out.model, &tiny, &bank, true).unwrap();
    println!("{} {} -> train-set pAcc {:.3} mIoU(S) {:.3} mIoU(U) {:.3}", regime, loss, r.pixel_accuracy, r.miou_seen, r.miou_unseen);
}
