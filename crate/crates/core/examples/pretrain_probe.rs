use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use zegseg_core::data::{make_world, single_object_sample};
use zegseg_core::model::{pretrain_backbone, SegModel};
use zegseg_core::text::synthesize_bank;
use zegseg_core::trainer::TrainConfig;
use zegseg_core::Graph;

fn main() {
    let iters: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let world = make_world(7, 4, 3, 3, 32, false).unwrap();
    let synth = synthesize_bank(&world, 64).unwrap();
    let cfg = TrainConfig::default();
    let mut model = SegModel::new(cfg.model_config()).unwrap();
    pretrain_backbone(&mut model, &world, iters, 8, 1e-3, 1).unwrap();

    // attribute accuracy on fresh single-object images
    let seen: Vec<usize> = world.seen_ids();
    let mut rng = ChaCha8Rng::seed_from_u64(12345);
    let mut shape_ok = 0;
    let mut color_ok = 0;
    let mut class_ok = 0;
    let n = 200;
    for _ in 0..n {
        let cls = seen[rng.random_range(0..seen.len())];
        let s: u64 = rng.random();
        let (img, shape_idx, color_idx) = single_object_sample(&world, cls, s).unwrap();
        let graph = Graph::new();
        let bound = model.bind(&graph);
        let enc = model.encoder.encode(&graph, &bound, &img).unwrap();
        let g = enc.g.value();
        let score = |protos: &zegseg_core::Value| -> usize {
            let d = 64;
            let rows = protos.shape()[0];
            (0..rows)
                .map(|r| (0..d).map(|j| protos.at(&[r, j]) * g.data()[j]).sum::<f64>())
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap()
                .0
        };
        let sp = score(&synth.shape_protos);
        let cp = score(&synth.color_protos);
        if sp == shape_idx { shape_ok += 1; }
        if cp == color_idx { color_ok += 1; }
        // class via bank match score
        let best_cls = (0..synth.bank.classes())
            .map(|c| {
                let row = synth.bank.row(c).to_vec();
                (c, zegseg_core::text::match_score(&row, g.data()).unwrap())
            })
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap()
            .0;
        if best_cls == cls { class_ok += 1; }
    }
    println!(
        "pretrain({iters}): shape acc {:.2} color acc {:.2} class-via-matchscore acc {:.2}",
        shape_ok as f64 / n as f64,
        color_ok as f64 / n as f64,
        class_ok as f64 / n as f64
    );
}
