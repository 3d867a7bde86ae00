use crate::pgm;
use crate::{
    ArchKind, DataArgs, IgcArgs, MethodKind, OptimizerArg, RoiArgs, SplitKind, StatisticKind,
    TaskKind, TrainArgs,
};
use igc_core::attribution::BaselineSet;
use igc_core::checkpoint::{self, TrainingMeta};
use igc_core::data::{self, Dataset, RegionStatistic};
use igc_core::idx;
use igc_core::igc::{self, IgcReport, RoiSpec};
use igc_core::train::{self, Metric, TrainConfig};
use igc_core::zoo;
use igc_core::{Error, Model, Result};
use std::fs;
use std::path::Path;

fn parse_weights(args: &DataArgs) -> Result<Vec<f64>> {
    match &args.weights {
        None => {
            let mut w = vec![0.0; args.dim];
            if let Some(first) = w.first_mut() {
                *first = 1.0;
            }
            Ok(w)
        }
        Some(s) => {
            let w: Vec<f64> = s
                .split(',')
                .map(|t| {
                    t.trim().parse::<f64>().map_err(|_| {
                        Error::InvalidArgument(format!("bad weight '{t}' in --weights"))
                    })
                })
                .collect::<Result<_>>()?;
            if w.len() != args.dim {
                return Err(Error::InvalidArgument(format!(
                    "--weights has {} entries, --dim is {}",
                    w.len(),
                    args.dim
                )));
            }
            Ok(w)
        }
    }
}

fn parse_region(args: &DataArgs) -> Result<Vec<usize>> {
    let parts: Vec<usize> = args
        .region_block
        .split(',')
        .map(|t| {
            t.trim().parse::<usize>().map_err(|_| {
                Error::InvalidArgument(format!("bad entry '{t}' in --region-block"))
            })
        })
        .collect::<Result<_>>()?;
    if parts.len() != 4 {
        return Err(Error::InvalidArgument(
            "--region-block wants row,col,height,width".into(),
        ));
    }
    let (r, c, h, w) = (parts[0], parts[1], parts[2], parts[3]);
    if r + h > args.side || c + w > args.side {
        return Err(Error::InvalidArgument(format!(
            "region {r},{c},{h},{w} exceeds the {0}x{0} grid",
            args.side
        )));
    }
    Ok(data::block_region(args.side, r, c, h, w))
}

fn statistic(kind: StatisticKind) -> RegionStatistic {
    match kind {
        StatisticKind::Mean => RegionStatistic::Mean,
        StatisticKind::Std => RegionStatistic::Std,
    }
}

fn mnist_pair(args: &DataArgs, split: SplitKind) -> Result<Dataset> {
    let dir = args.data_dir.as_ref().ok_or_else(|| {
        Error::InvalidArgument("--task mnist needs --data-dir with IDX files".into())
    })?;
    let (images, labels) = match split {
        SplitKind::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        SplitKind::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    };
    idx::load_idx(&dir.join(images), &dir.join(labels))
}

/// Dataset selected by the data flags; `seed_offset` derives held-out
/// synthetic data from the same flags.
fn load_dataset(args: &DataArgs, split: SplitKind, seed_offset: u64) -> Result<Dataset> {
    let full = match args.task {
        TaskKind::Mnist => mnist_pair(args, split)?,
        TaskKind::Linear => data::gen_linear(
            args.samples,
            args.dim,
            &parse_weights(args)?,
            args.bias,
            args.noise_std,
            args.data_seed + seed_offset,
        )?,
        TaskKind::PlantedRoi => data::gen_planted_roi(
            args.samples,
            args.side,
            &parse_region(args)?,
            statistic(args.statistic),
            args.data_seed + seed_offset,
        )?,
    };
    match args.subset {
        Some(n) => full.take(n),
        None => Ok(full),
    }
}

fn build_model(args: &TrainArgs) -> Result<Model> {
    match args.data.task {
        TaskKind::Mnist => match args.arch {
            ArchKind::Conv => zoo::mnist_conv(args.seed),
            ArchKind::Mlp => zoo::mnist_mlp(args.seed),
            ArchKind::ConvRelu => zoo::mnist_conv_relu(args.seed),
        },
        TaskKind::Linear => zoo::linear_regressor(args.dim_of_linear(), args.seed),
        TaskKind::PlantedRoi => {
            let m = args.data.side * args.data.side;
            zoo::mlp_regressor(m, &[128, 64], args.seed)
        }
    }
}

impl TrainArgs {
    fn dim_of_linear(&self) -> usize {
        self.data.dim
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let train_data = load_dataset(&args.data, SplitKind::Train, 0)?;
    let model = match &args.init_from {
        Some(path) => checkpoint::load(path)?.model,
        None => build_model(args)?,
    };

    let optimizer = match args.optimizer {
        OptimizerArg::Adam => train::OptimizerKind::adam(),
        OptimizerArg::SgdMomentum => train::OptimizerKind::sgd_momentum(),
    };
    let cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.learning_rate,
        optimizer,
        seed: args.seed,
        validation_fraction: args.validation_fraction,
    };
    let mut run = train::train_run(&model, &train_data, &cfg)?;
    if args.finetune_epochs > 0 {
        let cfg2 = TrainConfig {
            epochs: args.finetune_epochs,
            learning_rate: args.finetune_lr.unwrap_or(args.learning_rate / 5.0),
            seed: args.seed + 1,
            ..cfg
        };
        let run2 = train::train_run(&run.model, &train_data, &cfg2)?;
        run.model = run2.model;
        run.epoch_losses.extend(run2.epoch_losses);
        run.validation_metric = run2.validation_metric;
    }

    // Held-out metric: the t10k pair for MNIST, freshly generated data for
    // the synthetic tasks.
    let eval_data = match args.data.task {
        TaskKind::Mnist => load_dataset(&args.data, SplitKind::Test, 0)?,
        _ => load_dataset(&args.data, SplitKind::Test, 1000)?,
    };
    let metric = train::evaluate(&run.model, &eval_data)?;
    let (metric_kind, metric_value) = match metric {
        Metric::Accuracy(v) => ("accuracy", v),
        Metric::Correlation(v) => ("correlation", v),
    };

    checkpoint::save(
        &run.model,
        Some(&TrainingMeta {
            seed: args.seed,
            epochs: args.epochs + args.finetune_epochs,
            final_metric: Some(metric_value),
        }),
        &args.out,
    )?;

    let metrics_path = args
        .metrics
        .clone()
        .unwrap_or_else(|| args.out.with_extension("metrics.json"));
    let payload = serde_json::json!({
        "run": args,
        "epoch_losses": run.epoch_losses,
        "validation_metric": run.validation_metric.map(|m| m.value()),
        "metric_kind": metric_kind,
        "metric": metric_value,
    });
    fs::write(&metrics_path, serde_json::to_string_pretty(&payload).unwrap())?;
    println!(
        "trained: {} epochs, {metric_kind} {metric_value:.4}; checkpoint {}",
        args.epochs + args.finetune_epochs,
        args.out.display()
    );
    Ok(())
}

fn report_stem(report: &IgcReport) -> String {
    match report.class_index {
        Some(k) => format!("class-{k}"),
        None => "report".to_string(),
    }
}

fn write_report_files(
    out_dir: &Path,
    run_json: &serde_json::Value,
    report: &IgcReport,
    image_dims: Option<&[usize]>,
    pgm_wanted: bool,
    downscale: Option<usize>,
) -> Result<()> {
    let stem = report_stem(report);
    let payload = serde_json::json!({ "run": run_json, "report": report });
    fs::write(
        out_dir.join(format!("{stem}.json")),
        serde_json::to_string_pretty(&payload).unwrap(),
    )?;

    let run_compact = serde_json::to_string(run_json).unwrap();
    let mut csv = format!("# run={run_compact}\n");
    if let Some(k) = report.class_index {
        csv.push_str(&format!("# class={k}\n"));
    }
    csv.push_str(&format!(
        "# score={} total={} residual={}\n",
        report.score,
        report.total(),
        report.residual
    ));
    csv.push_str(&report.to_csv());
    fs::write(out_dir.join(format!("{stem}.csv")), csv)?;

    if pgm_wanted {
        let dims = image_dims.ok_or_else(|| {
            Error::InvalidArgument("dataset has no image dimensions for PGM export".into())
        })?;
        let (h, w) = (dims[0], dims[1]);
        let comment = format!("class={:?} run={run_compact}", report.class_index);
        let path = out_dir.join(format!("{stem}.pgm"));
        match downscale {
            None => pgm::write_pgm(&path, &report.values, w, h, &comment)?,
            Some(b) => {
                let down = pgm::block_downscale(&report.values, w, h, b)?;
                pgm::write_pgm(&path, &down, w / b, h / b, &comment)?;
            }
        }
    }
    Ok(())
}

pub fn cmd_igc(args: &IgcArgs) -> Result<()> {
    let ck = checkpoint::load(&args.checkpoint)?;
    let model = ck.model;
    let dataset = load_dataset(&args.data, args.data.split, 0)?;
    fs::create_dir_all(&args.out_dir)?;

    let baselines = BaselineSet::sample(
        &dataset,
        model.input_shape(),
        args.baselines,
        args.baseline_seed,
        None,
    )?;
    let run_json = serde_json::to_value(args).unwrap();

    let (reports, attributions) = match args.method {
        MethodKind::Ig => {
            if args.dump_attributions {
                let comp = igc::igc_detailed(&model, &dataset, &baselines, args.steps)?;
                (comp.reports, comp.attributions)
            } else if dataset.is_categorical() {
                (
                    igc::igc_categorical(&model, &dataset, &baselines, args.steps)?,
                    None,
                )
            } else {
                (
                    vec![igc::igc(&model, &dataset, &baselines, args.steps, 0)?],
                    None,
                )
            }
        }
        MethodKind::Bs => {
            let reports = if dataset.is_categorical() {
                igc::bs_correlation_categorical(
                    &model,
                    &dataset,
                    &baselines,
                    args.permutations,
                    args.sampling_seed,
                )?
            } else {
                vec![igc::bs_correlation(
                    &model,
                    &dataset,
                    &baselines,
                    0,
                    args.permutations,
                    args.sampling_seed,
                )?]
            };
            (reports, None)
        }
    };

    for report in &reports {
        write_report_files(
            &args.out_dir,
            &run_json,
            report,
            dataset.input_dims(),
            args.pgm,
            args.downscale,
        )?;
        println!(
            "{}: score {:.4}, total {:.4}, residual {:+.2e}",
            report_stem(report),
            report.score,
            report.total(),
            report.residual
        );
    }

    if let Some(matrix) = attributions {
        let m = dataset.dim();
        let k = reports.len();
        let mut out = format!(
            "# run={}\nsample,report,component,value\n",
            serde_json::to_string(&run_json).unwrap()
        );
        for (idx, v) in matrix.iter().enumerate() {
            let sample = idx / (k * m);
            let rest = idx % (k * m);
            out.push_str(&format!("{sample},{},{},{v}\n", rest / m, rest % m));
        }
        fs::write(args.out_dir.join("attributions.csv"), out)?;
    }
    Ok(())
}

/// ROI file: one `name idx idx ...` per non-empty, non-comment line.
fn parse_roi_file(path: &Path) -> Result<RoiSpec> {
    let text = fs::read_to_string(path)?;
    let mut rois = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let name = parts.next().expect("non-empty line").to_string();
        let indices: Vec<usize> = parts
            .map(|t| {
                t.parse::<usize>().map_err(|_| {
                    Error::Roi(format!("line {}: bad index '{t}'", ln + 1))
                })
            })
            .collect::<Result<_>>()?;
        rois.push((name, indices));
    }
    RoiSpec::new(rois)
}

pub fn cmd_roi(args: &RoiArgs) -> Result<()> {
    let text = fs::read_to_string(&args.report)?;
    let report: IgcReport = match serde_json::from_str::<serde_json::Value>(&text) {
        Ok(v) if v.get("report").is_some() => {
            serde_json::from_value(v["report"].clone()).map_err(|e| Error::Parse {
                section: "report".into(),
                offset: None,
                message: e.to_string(),
            })?
        }
        _ => IgcReport::from_json(&text)?,
    };
    let rois = parse_roi_file(&args.rois)?;
    let sums = igc::roi_sum(&report, &rois)?;

    let overlap = rois.has_overlap();
    if args.check_partition {
        if !rois.is_partition(report.values.len()) {
            return Err(Error::Roi(format!(
                "rois do not partition the {} components",
                report.values.len()
            )));
        }
        let total: f64 = sums.iter().map(|(_, v)| v).sum();
        if (total - report.total()).abs() > 1e-10 {
            return Err(Error::Roi(format!(
                "partition total {total} differs from report total {}",
                report.total()
            )));
        }
    }

    let run_json = serde_json::to_string(&serde_json::to_value(args).unwrap()).unwrap();
    let mut out = format!("# run={run_json}\n");
    if overlap {
        out.push_str("# note: rois overlap\n");
    }
    out.push_str("roi,value,overlapping\n");
    for (name, value) in &sums {
        let this_overlaps = overlap
            && rois
                .rois()
                .iter()
                .filter(|(n, _)| n != name)
                .any(|(_, other)| {
                    rois.rois()
                        .iter()
                        .find(|(n, _)| n == name)
                        .map(|(_, mine)| mine.iter().any(|i| other.contains(i)))
                        .unwrap_or(false)
                });
        out.push_str(&format!("{name},{value},{this_overlaps}\n"));
    }
    fs::write(&args.out, out)?;
    for (name, value) in &sums {
        println!("{name}: {value:+.6}");
    }
    Ok(())
}
