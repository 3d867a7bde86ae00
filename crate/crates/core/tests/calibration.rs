//! Scratch timing runs (ignored by default): `cargo test -p igc-core --test
//! calibration -- --ignored --nocapture`.

use igc_core::attribution::BaselineSet;
use igc_core::data::Dataset;
use igc_core::idx::load_idx;
use igc_core::model::Differentiable;
use igc_core::train::{evaluate, train_run, TrainConfig};
use igc_core::zoo;
use std::path::PathBuf;
use std::time::Instant;

fn mnist_dir() -> PathBuf {
    std::env::var("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|_| {
            PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
        })
}

fn load_mnist() -> (Dataset, Dataset) {
    let dir = mnist_dir();
    let train = load_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )
    .expect("train files");
    let test = load_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )
    .expect("test files");
    (train, test)
}

#[test]
#[ignore]
fn time_conv_epoch() {
    let (train, test) = load_mnist();
    let model = zoo::mnist_conv(0).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 128,
        seed: 0,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let run = train_run(&model, &train, &cfg).unwrap();
    let dt = t0.elapsed();
    let acc = evaluate(&run.model, &test).unwrap();
    println!(
        "conv: 1 epoch in {:.1}s, loss {:.4}, test acc {:.4}",
        dt.as_secs_f64(),
        run.epoch_losses[0],
        acc.value()
    );
}

#[test]
#[ignore]
fn time_mlp_epoch() {
    let (train, test) = load_mnist();
    let model = zoo::mnist_mlp(0).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 128,
        seed: 0,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let run = train_run(&model, &train, &cfg).unwrap();
    let dt = t0.elapsed();
    let acc = evaluate(&run.model, &test).unwrap();
    println!(
        "mlp: 1 epoch in {:.1}s, loss {:.4}, test acc {:.4}",
        dt.as_secs_f64(),
        run.epoch_losses[0],
        acc.value()
    );
}

#[test]
#[ignore]
fn time_attribution_sweep() {
    let (train, _) = load_mnist();
    let model = zoo::mnist_conv(0).unwrap();
    let baselines = BaselineSet::sample(&train, &[1, 28, 28], 8, 1, None).unwrap();
    let ks: Vec<usize> = (0..10).collect();
    let x = train.input_tensor(0, &[1, 28, 28]).unwrap();

    // one sample, 8 baselines x 32 steps, all 10 classes
    let t0 = Instant::now();
    let maps =
        igc_core::attribution::ig_random_baselines_multi(&model, &x, &baselines, 32, &ks)
            .unwrap();
    let dt = t0.elapsed();
    let rows = baselines.len() * 32;
    println!(
        "ig multi-class: {} rows ({} grad evals) in {:.3}s -> {:.1} rows/s; residual[0]={:.2e}",
        rows,
        rows * ks.len(),
        dt.as_secs_f64(),
        rows as f64 / dt.as_secs_f64(),
        maps[0].residual.unwrap()
    );

    // forward-only throughput (Shapley walks are forward-bound)
    let points: Vec<igc_core::Tensor> = (0..512).map(|_| x.clone()).collect();
    let t0 = Instant::now();
    let _ = model.outputs_batch(&points).unwrap();
    let dt = t0.elapsed();
    println!(
        "forward-only: 512 rows in {:.3}s -> {:.0} rows/s",
        dt.as_secs_f64(),
        512.0 / dt.as_secs_f64()
    );
}

#[test]
#[ignore]
fn train_and_cache_full() {
    std::fs::create_dir_all("/tmp/igc-cal").unwrap();
    let (train, test) = load_mnist();

    let conv = zoo::mnist_conv(7).unwrap();
    let cfg = TrainConfig {
        epochs: 10,
        batch_size: 128,
        seed: 7,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let run = train_run(&conv, &train, &cfg).unwrap();
    let acc = evaluate(&run.model, &test).unwrap();
    println!(
        "conv: 10 epochs in {:.0}s, losses {:?}, test acc {:.4}",
        t0.elapsed().as_secs_f64(),
        run.epoch_losses.iter().map(|l| (l * 1e4).round() / 1e4).collect::<Vec<_>>(),
        acc.value()
    );
    igc_core::checkpoint::save(
        &run.model,
        Some(&igc_core::checkpoint::TrainingMeta {
            seed: 7,
            epochs: 10,
            final_metric: Some(acc.value()),
        }),
        std::path::Path::new("/tmp/igc-cal/conv.ckpt"),
    )
    .unwrap();

    let mlp = zoo::mnist_mlp(7).unwrap();
    let cfg = TrainConfig {
        epochs: 8,
        batch_size: 128,
        seed: 7,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let run = train_run(&mlp, &train, &cfg).unwrap();
    let acc = evaluate(&run.model, &test).unwrap();
    println!(
        "mlp: 8 epochs in {:.0}s, test acc {:.4}",
        t0.elapsed().as_secs_f64(),
        acc.value()
    );
    igc_core::checkpoint::save(
        &run.model,
        Some(&igc_core::checkpoint::TrainingMeta {
            seed: 7,
            epochs: 8,
            final_metric: Some(acc.value()),
        }),
        std::path::Path::new("/tmp/igc-cal/mlp.ckpt"),
    )
    .unwrap();
}

#[test]
#[ignore]
fn conv_recipe_experiments() {
    let (train, test) = load_mnist();
    let conv = zoo::mnist_conv(7).unwrap();

    // A: longer flat schedule
    let cfg = TrainConfig {
        epochs: 18,
        batch_size: 128,
        seed: 7,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let run = train_run(&conv, &train, &cfg).unwrap();
    let acc = evaluate(&run.model, &test).unwrap();
    println!(
        "A flat 18 epochs: acc {:.4} in {:.0}s",
        acc.value(),
        t0.elapsed().as_secs_f64()
    );

    // B: 12 epochs at 1e-3 then 6 at 2e-4
    let t0 = Instant::now();
    let phase1 = train_run(
        &conv,
        &train,
        &TrainConfig {
            epochs: 12,
            batch_size: 128,
            seed: 7,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let acc1 = evaluate(&phase1.model, &test).unwrap();
    let phase2 = train_run(
        &phase1.model,
        &train,
        &TrainConfig {
            epochs: 6,
            batch_size: 128,
            learning_rate: 2e-4,
            seed: 8,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let acc2 = evaluate(&phase2.model, &test).unwrap();
    println!(
        "B two-phase: after 12 {:.4}, after +6 low-lr {:.4} in {:.0}s",
        acc1.value(),
        acc2.value(),
        t0.elapsed().as_secs_f64()
    );
    igc_core::checkpoint::save(
        &phase2.model,
        Some(&igc_core::checkpoint::TrainingMeta {
            seed: 7,
            epochs: 18,
            final_metric: Some(acc2.value()),
        }),
        std::path::Path::new("/tmp/igc-cal/conv2.ckpt"),
    )
    .unwrap();
}

#[test]
#[ignore]
fn conv_wide_two_phase() {
    let (train, test) = load_mnist();
    let conv = zoo::mnist_conv(7).unwrap();
    let t0 = Instant::now();
    let phase1 = train_run(
        &conv,
        &train,
        &TrainConfig { epochs: 12, batch_size: 128, seed: 7, ..TrainConfig::default() },
    )
    .unwrap();
    let acc1 = evaluate(&phase1.model, &test).unwrap();
    let phase2 = train_run(
        &phase1.model,
        &train,
        &TrainConfig {
            epochs: 6,
            batch_size: 128,
            learning_rate: 2e-4,
            seed: 8,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let acc2 = evaluate(&phase2.model, &test).unwrap();
    println!(
        "D wide two-phase: after 12 {:.4}, after +6 {:.4} in {:.0}s",
        acc1.value(),
        acc2.value(),
        t0.elapsed().as_secs_f64()
    );
    igc_core::checkpoint::save(
        &phase2.model,
        Some(&igc_core::checkpoint::TrainingMeta { seed: 7, epochs: 18, final_metric: Some(acc2.value()) }),
        std::path::Path::new("/tmp/igc-cal/conv-wide.ckpt"),
    )
    .unwrap();

    // MLP two-phase for margin as well
    let mlp = zoo::mnist_mlp(7).unwrap();
    let p1 = train_run(
        &mlp,
        &train,
        &TrainConfig { epochs: 8, batch_size: 128, seed: 7, ..TrainConfig::default() },
    )
    .unwrap();
    let p2 = train_run(
        &p1.model,
        &train,
        &TrainConfig {
            epochs: 4,
            batch_size: 128,
            learning_rate: 2e-4,
            seed: 8,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let acc = evaluate(&p2.model, &test).unwrap();
    println!("mlp two-phase: {:.4}", acc.value());
    igc_core::checkpoint::save(
        &p2.model,
        Some(&igc_core::checkpoint::TrainingMeta { seed: 7, epochs: 12, final_metric: Some(acc.value()) }),
        std::path::Path::new("/tmp/igc-cal/mlp2.ckpt"),
    )
    .unwrap();
}

#[test]
#[ignore]
fn agreement_preview() {
    use igc_core::igc::{bs_correlation_categorical, igc_categorical, pearson};
    let (_, test) = load_mnist();
    let conv = igc_core::checkpoint::load(std::path::Path::new("/tmp/igc-cal/conv-wide.ckpt"))
        .unwrap()
        .model;
    let mlp = igc_core::checkpoint::load(std::path::Path::new("/tmp/igc-cal/mlp2.ckpt"))
        .unwrap()
        .model;

    let subset = test.take(200).unwrap();
    let t0 = Instant::now();
    let b32 = BaselineSet::sample(&subset, &[1, 28, 28], 32, 17, None).unwrap();
    let conv_maps = igc_categorical(&conv, &subset, &b32, 32).unwrap();
    println!("conv 32/32 n=200: {:.0}s", t0.elapsed().as_secs_f64());
    for r in &conv_maps {
        println!(
            "  class {}: rho {:.4}, total {:.4}, |resid| {:.2e}",
            r.class_index.unwrap(),
            r.score,
            r.total(),
            r.residual.abs()
        );
    }

    let t0 = Instant::now();
    let b32f = BaselineSet::sample(&subset, &[784], 32, 17, None).unwrap();
    let mlp_maps = igc_categorical(&mlp, &subset, &b32f, 32).unwrap();
    println!("mlp 32/32 n=200: {:.0}s", t0.elapsed().as_secs_f64());
    let mut mean_sim = 0.0;
    for k in 0..10 {
        let sim = pearson(&conv_maps[k].values, &mlp_maps[k].values).unwrap();
        mean_sim += sim / 10.0;
        println!("  class {k}: conv-vs-mlp map pearson {sim:.4}");
    }
    println!("  mean similarity {mean_sim:.4}");

    // IG vs BS agreement, shared baselines
    let t0 = Instant::now();
    let b8 = BaselineSet::sample(&subset, &[1, 28, 28], 8, 17, None).unwrap();
    let ig8 = igc_categorical(&conv, &subset, &b8, 32).unwrap();
    println!("conv IG 32/8 n=200: {:.0}s", t0.elapsed().as_secs_f64());
    let t0 = Instant::now();
    let bs8 = bs_correlation_categorical(&conv, &subset, &b8, Some(1), 23).unwrap();
    println!("conv BS P1/8 n=200: {:.0}s", t0.elapsed().as_secs_f64());
    let mut mean_sim = 0.0;
    for k in 0..10 {
        let sim = pearson(&ig8[k].values, &bs8[k].values).unwrap();
        mean_sim += sim / 10.0;
        println!("  class {k}: ig-vs-bs pearson {sim:.4}, bs |resid| {:.2e}", bs8[k].residual.abs());
    }
    println!("  mean ig/bs similarity {mean_sim:.4}");

    // completeness residual vs steps (criterion 1 shape), 40 samples, B=4
    let b4 = BaselineSet::sample(&subset, &[1, 28, 28], 4, 19, None).unwrap();
    for steps in [32usize, 128, 512] {
        let t0 = Instant::now();
        let mut mean_abs = 0.0;
        for i in 0..40 {
            let x = subset.input_tensor(i, &[1, 28, 28]).unwrap();
            let k = subset.label(i).unwrap() as usize;
            let map =
                igc_core::attribution::ig_random_baselines(&conv, &x, &b4, steps, k).unwrap();
            mean_abs += map.residual.unwrap().abs() / 40.0;
        }
        println!(
            "steps {steps}: mean |per-sample residual| {mean_abs:.2e} ({:.0}s)",
            t0.elapsed().as_secs_f64()
        );
    }
}

fn save_maps(path: &str, maps: &[igc_core::igc::IgcReport]) {
    let vals: Vec<&Vec<f64>> = maps.iter().map(|r| &r.values).collect();
    std::fs::write(path, serde_json::to_string(&vals).unwrap()).unwrap();
}

#[test]
#[ignore]
fn reliability_diagnostics() {
    use igc_core::igc::{igc_categorical, pearson};
    let (_, test) = load_mnist();
    let conv = igc_core::checkpoint::load(std::path::Path::new("/tmp/igc-cal/conv-wide.ckpt"))
        .unwrap()
        .model;
    let mlp = igc_core::checkpoint::load(std::path::Path::new("/tmp/igc-cal/mlp2.ckpt"))
        .unwrap()
        .model;

    let n1000 = test.take(1000).unwrap();
    let half1 = n1000.subset(&(0..500).collect::<Vec<_>>()).unwrap();
    let half2 = n1000.subset(&(500..1000).collect::<Vec<_>>()).unwrap();

    let b32 = BaselineSet::sample(&n1000, &[1, 28, 28], 32, 17, None).unwrap();
    let b32f = BaselineSet::sample(&n1000, &[784], 32, 17, None).unwrap();

    let t0 = Instant::now();
    let conv_h1 = igc_categorical(&conv, &half1, &b32, 32).unwrap();
    let conv_h2 = igc_categorical(&conv, &half2, &b32, 32).unwrap();
    println!("conv halves done {:.0}s", t0.elapsed().as_secs_f64());
    let mut split_half = 0.0;
    for k in 0..10 {
        let r = pearson(&conv_h1[k].values, &conv_h2[k].values).unwrap();
        split_half += r / 10.0;
        println!("  class {k}: conv split-half pearson {r:.4}");
    }
    // Spearman-Brown step-up to the reliability of the full-size map
    let full_rel = 2.0 * split_half / (1.0 + split_half);
    println!("mean split-half {split_half:.4}; full-map reliability est {full_rel:.4}");

    let t0 = Instant::now();
    let conv_full = igc_categorical(&conv, &n1000, &b32, 32).unwrap();
    let mlp_full = igc_categorical(&mlp, &n1000, &b32f, 32).unwrap();
    println!("full maps done {:.0}s", t0.elapsed().as_secs_f64());
    save_maps("/tmp/igc-cal/conv-full.json", &conv_full);
    save_maps("/tmp/igc-cal/mlp-full.json", &mlp_full);
    save_maps("/tmp/igc-cal/conv-h1.json", &conv_h1);
    save_maps("/tmp/igc-cal/conv-h2.json", &conv_h2);

    let mut mean_sim = 0.0;
    for k in 0..10 {
        let sim = pearson(&conv_full[k].values, &mlp_full[k].values).unwrap();
        mean_sim += sim / 10.0;
        println!("  class {k}: conv-vs-mlp n=1000 pearson {sim:.4} (conv resid {:.1e})", conv_full[k].residual.abs());
    }
    println!("mean conv-vs-mlp at n=1000: {mean_sim:.4}");
}

#[test]
#[ignore]
fn seed_ceiling_and_bs_noise() {
    use igc_core::igc::{bs_correlation_categorical, igc_categorical, pearson};
    let (train, test) = load_mnist();
    let conv7 = igc_core::checkpoint::load(std::path::Path::new("/tmp/igc-cal/conv-wide.ckpt"))
        .unwrap()
        .model;

    // BS permutation-noise estimate: two sampling seeds, same baselines
    let subset200 = test.take(200).unwrap();
    let b8 = BaselineSet::sample(&subset200, &[1, 28, 28], 8, 17, None).unwrap();
    let bs_a = bs_correlation_categorical(&conv7, &subset200, &b8, Some(1), 23).unwrap();
    let bs_b = bs_correlation_categorical(&conv7, &subset200, &b8, Some(1), 24).unwrap();
    let mut self_sim = 0.0;
    for k in 0..10 {
        self_sim += pearson(&bs_a[k].values, &bs_b[k].values).unwrap() / 10.0;
    }
    println!("bs self-consistency n=200 B=8 P=1: mean {self_sim:.4}");

    // same-architecture different-seed ceiling
    let conv13 = zoo::mnist_conv(13).unwrap();
    let p1 = train_run(
        &conv13,
        &train,
        &TrainConfig { epochs: 12, batch_size: 128, seed: 13, ..TrainConfig::default() },
    )
    .unwrap();
    let p2 = train_run(
        &p1.model,
        &train,
        &TrainConfig { epochs: 6, batch_size: 128, learning_rate: 2e-4, seed: 14, ..TrainConfig::default() },
    )
    .unwrap();
    let acc = evaluate(&p2.model, &test).unwrap();
    println!("conv seed13 two-phase acc {:.4}", acc.value());

    let n1000 = test.take(1000).unwrap();
    let b32 = BaselineSet::sample(&n1000, &[1, 28, 28], 32, 17, None).unwrap();
    let maps13 = igc_categorical(&p2.model, &n1000, &b32, 32).unwrap();
    save_maps("/tmp/igc-cal/conv13-full.json", &maps13);

    let maps7: Vec<Vec<f64>> = serde_json::from_str(
        &std::fs::read_to_string("/tmp/igc-cal/conv-full.json").unwrap(),
    )
    .unwrap();
    let mut mean_sim = 0.0;
    for k in 0..10 {
        let sim = pearson(&maps7[k], &maps13[k].values).unwrap();
        mean_sim += sim / 10.0;
        println!("  class {k}: conv7-vs-conv13 pearson {sim:.4}");
    }
    println!("same-arch different-seed mean similarity: {mean_sim:.4}");
}
