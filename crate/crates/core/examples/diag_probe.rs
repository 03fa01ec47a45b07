use zegseg_core::data::{generate, make_world, GenRegime, IGNORE_INDEX};
use zegseg_core::metrics::{compute, ConfusionMatrix};
use zegseg_core::text::synthesize_bank;
use zegseg_core::trainer::{train, TrainConfig, TrainMode};
use zegseg_core::decoder::predict;

fn main() {
    let iters: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(800);
    let world = make_world(7, 4, 3, 3, 32, false).unwrap();
    let train_ds = generate(&world, 512, 11, GenRegime::InductiveTrain).unwrap();
    let test_ds = generate(&world, 64, 99, GenRegime::FullyLabeled).unwrap();
    let bank = synthesize_bank(&world, 64).unwrap().bank;

    let mut cfg = TrainConfig::default();
    cfg.mode = TrainMode::Inductive;
    cfg.iters = iters;
    cfg.seed = 1;
    cfg.log_every = iters / 6;
    let out = train(&cfg, &train_ds, &bank).unwrap();
    for r in &out.history {
        println!("iter {:4} loss {:.4}", r.iter, r.loss);
    }
    let model = out.model;

    let eval_with = |ds: &zegseg_core::data::Dataset, active: &[usize], tag: &str| {
        let mut cm = ConfusionMatrix::new(bank.classes());
        for rec in ds.samples.iter().take(64) {
            let logits = model.infer_pixels(&bank, &rec.image, active).unwrap();
            let rows = predict(&logits).unwrap();
            let pred: Vec<usize> = rows.iter().map(|&r| active[r]).collect();
            // skip pixels whose GT is outside the active set
            let labels: Vec<u8> = rec
                .labels
                .iter()
                .map(|&l| {
                    if l != IGNORE_INDEX && !active.contains(&(l as usize)) {
                        IGNORE_INDEX
                    } else {
                        l
                    }
                })
                .collect();
            cm.accumulate(&pred, &labels, IGNORE_INDEX).unwrap();
        }
        let r = compute(&cm, bank.seen_mask()).unwrap();
        println!(
            "{tag}: pAcc {:.3} mIoU(S) {:.3} mIoU(U) {:.3}",
            r.pixel_accuracy, r.miou_seen, r.miou_unseen
        );
    };

    let seen = bank.seen_ids();
    let all: Vec<usize> = (0..bank.classes()).collect();
    eval_with(&train_ds, &seen, "train-set seen-queries ");
    eval_with(&train_ds, &all, "train-set all-queries  ");
    eval_with(&test_ds, &seen, "test-set  seen-queries ");
    eval_with(&test_ds, &all, "test-set  all-queries  ");
}
