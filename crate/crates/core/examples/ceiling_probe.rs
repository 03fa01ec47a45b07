use zegseg_core::data::{generate, make_world, GenRegime, IGNORE_INDEX};

fn main() {
    let world = make_world(7, 4, 3, 3, 32, false).unwrap();
    let ds = generate(&world, 512, 11, GenRegime::FullyLabeled).unwrap();
    let s = 32usize;
    let p = 8usize;
    let g = s / p;
    let mut correct = 0u64;
    let mut total = 0u64;
    for rec in &ds.samples {
        // oracle: constant prediction per patch cell = majority valid label
        for gy in 0..g {
            for gx in 0..g {
                let mut hist = [0u32; 256];
                for py in 0..p {
                    for px in 0..p {
                        let l = rec.labels[(gy * p + py) * s + gx * p + px];
                        hist[l as usize] += 1;
                    }
                }
                let maj = (0..255usize).max_by_key(|&c| hist[c]).unwrap();
                for py in 0..p {
                    for px in 0..p {
                        let l = rec.labels[(gy * p + py) * s + gx * p + px];
                        if l != IGNORE_INDEX {
                            total += 1;
                            if l as usize == maj {
                                correct += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    println!("constant-per-patch oracle pAcc ceiling: {:.4}", correct as f64 / total as f64);

    // the same with 4px cells (what a patch-4 grid could express)
    let p = 4usize;
    let g = s / p;
    let mut correct = 0u64;
    let mut total = 0u64;
    for rec in &ds.samples {
        for gy in 0..g {
            for gx in 0..g {
                let mut hist = [0u32; 256];
                for py in 0..p {
                    for px in 0..p {
                        hist[rec.labels[(gy * p + py) * s + gx * p + px] as usize] += 1;
                    }
                }
                let maj = (0..255usize).max_by_key(|&c| hist[c]).unwrap();
                for py in 0..p {
                    for px in 0..p {
                        let l = rec.labels[(gy * p + py) * s + gx * p + px];
                        if l != IGNORE_INDEX {
                            total += 1;
                            if l as usize == maj {
                                correct += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    println!("constant-per-4px-cell oracle pAcc ceiling: {:.4}", correct as f64 / total as f64);
}
