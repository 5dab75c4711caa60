use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use mist_core::datagen::{generate, read_feature_set, encode_feature_set, write_feature_csv, LabeledFeatureSet};
use mist_core::encoders::Backbone;
use mist_core::gradcheck::{check, GradCheckOptions, GradCheckReport, TinyProblem};
use mist_core::rng;
use mist_core::trainer::{
    evaluate, load_model, prototype_values, save_model, CheckpointMeta, Classifier, ParamGroup, TrainConfig,
};

use crate::args::{Cli, Command, GenDataArgs, GradcheckArgs, Grid, PlotArgs, SweepArgs, TrainArgs, TrainFlags};
use crate::harness::{run_seed, SeedRun};
use crate::output::{
    digest_file, metrics_csv, read_file, sweep_csv, write_file, MetricsRow, RunManifest,
};
use crate::plot::{bins_svg, scatter_svg, ClassPoints, Pca};
use crate::{CliError, CliResult};

pub const TRAIN_FILE: &str = "train.mfs";
pub const TEST_FILE: &str = "test.mfs";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SWEEP_FILE: &str = "sweep.csv";

pub fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Sweep(a) => sweep(&a),
        Command::Plot(a) => plot(&a),
        Command::Gradcheck(a) => gradcheck(&a),
    }
}

pub fn gen_data(args: &GenDataArgs) -> CliResult<()> {
    let start = Instant::now();
    let spec = args.spec();
    spec.validate()?;
    let data = generate(&spec)?;
    let mut manifest = RunManifest::new("gen-data", &spec, vec![spec.seed], &args.out, Vec::new())?;
    for (name, set) in [(TRAIN_FILE, &data.train), (TEST_FILE, &data.test)] {
        manifest
            .outputs
            .push(write_file(&args.out.join(name), &encode_feature_set(set))?);
        if args.csv {
            let mut bytes = Vec::new();
            write_feature_csv(set, &mut bytes)?;
            let csv_name = Path::new(name).with_extension("csv");
            manifest.outputs.push(write_file(&args.out.join(csv_name), &bytes)?);
        }
    }
    manifest.total_wall_clock_ms = start.elapsed().as_millis();
    manifest.write(&args.out.join(MANIFEST_FILE))?;
    println!(
        "wrote {} train and {} test samples ({} classes, {} modes) to {}",
        data.train.len(),
        data.test.len(),
        spec.num_classes,
        spec.modes_per_class,
        args.out.display()
    );
    Ok(())
}

fn load_set(dir: &Path, name: &str) -> CliResult<LabeledFeatureSet> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(CliError::io(
            &path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "feature set not found"),
        ));
    }
    Ok(read_feature_set(&path)?)
}

/// Loaded train pool, test set and the frozen backbone for one encoder
/// configuration.
struct Workspace {
    train: LabeledFeatureSet,
    test: LabeledFeatureSet,
    inputs: Vec<crate::output::FileDigest>,
}

impl Workspace {
    fn load(data: &Path) -> CliResult<Self> {
        let train = load_set(data, TRAIN_FILE)?;
        let test = load_set(data, TEST_FILE)?;
        if train.dim() != test.dim() {
            return Err(CliError::Core(mist_core::Error::Input(format!(
                "train dim {} differs from test dim {}",
                train.dim(),
                test.dim()
            ))));
        }
        let inputs = vec![digest_file(&data.join(TRAIN_FILE))?, digest_file(&data.join(TEST_FILE))?];
        Ok(Self { train, test, inputs })
    }
}

fn validate_flags(flags: &TrainFlags) -> CliResult<TrainConfig> {
    if flags.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    if flags.shots == 0 {
        return Err(CliError::Usage("--shots must be at least 1".into()));
    }
    let config = flags.config();
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(config)
}

fn run_seeds(
    backbone: &Backbone,
    ws: &Workspace,
    config: &TrainConfig,
    shots: usize,
    seeds: &[u64],
) -> CliResult<Vec<SeedRun>> {
    let runs: Vec<mist_core::Result<SeedRun>> = seeds
        .par_iter()
        .map(|&s| run_seed(backbone, &ws.train, &ws.test, config, shots, s))
        .collect();
    runs.into_iter().map(|r| r.map_err(CliError::from)).collect()
}

fn checkpoint_bytes(run: &SeedRun, feature_dim: usize) -> CliResult<Vec<u8>> {
    let meta = CheckpointMeta {
        config: run.config.clone(),
        feature_dim,
        class_tokens: run.support.set.class_tokens().to_vec(),
    };
    let mut bytes = Vec::new();
    save_model(&mut bytes, &run.model, &meta)?;
    Ok(bytes)
}

#[derive(Serialize)]
struct TrainManifestConfig<'a> {
    train: &'a TrainConfig,
    shots: usize,
    data: String,
}

pub fn train(args: &TrainArgs) -> CliResult<()> {
    let start = Instant::now();
    let config = validate_flags(&args.flags)?;
    let ws = Workspace::load(&args.flags.data)?;
    let backbone = Backbone::new(config.encoder.clone(), ws.train.dim())?;
    let seeds = args.flags.seed_list();
    let runs = run_seeds(&backbone, &ws, &config, args.flags.shots, &seeds)?;

    let manifest_config = TrainManifestConfig {
        train: &config,
        shots: args.flags.shots,
        data: args.flags.data.display().to_string(),
    };
    let mut manifest = RunManifest::new("train", manifest_config, seeds, &args.out, ws.inputs.clone())?;
    let rows: Vec<MetricsRow> = runs.iter().map(|r| MetricsRow::from_run(r, args.flags.shots)).collect();
    manifest
        .outputs
        .push(write_file(&args.out.join(METRICS_FILE), &metrics_csv(&rows)?)?);
    for run in &runs {
        let path = args.out.join("checkpoints").join(format!("seed-{}.ckpt", run.seed));
        manifest.outputs.push(write_file(&path, &checkpoint_bytes(run, ws.train.dim())?)?);
        manifest.wall_clock_ms.push(run.wall_clock_ms);
    }
    manifest.total_wall_clock_ms = start.elapsed().as_millis();
    manifest.write(&args.out.join(MANIFEST_FILE))?;
    for row in &rows {
        println!(
            "seed {:>3}  accuracy {:.4}  bins {:.4}/{:.4}  min prompt share {:.3}",
            row.seed, row.accuracy, row.bin_low, row.bin_high, row.min_prompt_share
        );
    }
    let accs: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
    let (mean, std) = crate::harness::mean_std(&accs);
    println!("accuracy {mean:.4} ± {std:.4} over {} seeds", rows.len());
    Ok(())
}

#[derive(Serialize)]
struct SweepManifestConfig<'a> {
    key: &'a str,
    values: &'a [String],
    base: &'a TrainConfig,
    shots: usize,
    data: String,
}

pub fn sweep(args: &SweepArgs) -> CliResult<()> {
    let start = Instant::now();
    let grid = Grid::parse(&args.sweep).map_err(CliError::Usage)?;
    validate_flags(&args.flags)?;
    let points: Vec<(String, TrainFlags, TrainConfig)> = grid
        .values
        .iter()
        .map(|v| {
            let flags = grid.apply(&args.flags, v).map_err(CliError::Usage)?;
            let config = validate_flags(&flags)?;
            Ok((v.clone(), flags, config))
        })
        .collect::<CliResult<_>>()?;
    let ws = Workspace::load(&args.flags.data)?;
    let seeds = args.flags.seed_list();

    let jobs: Vec<(usize, u64)> = (0..points.len())
        .flat_map(|p| seeds.iter().map(move |&s| (p, s)))
        .collect();
    let results: Vec<CliResult<(String, MetricsRow, u128)>> = jobs
        .par_iter()
        .map(|&(p, seed)| {
            let (value, flags, config) = &points[p];
            let backbone = Backbone::new(config.encoder.clone(), ws.train.dim())?;
            let run = run_seed(&backbone, &ws.train, &ws.test, config, flags.shots, seed)?;
            Ok((value.clone(), MetricsRow::from_run(&run, flags.shots), run.wall_clock_ms))
        })
        .collect();
    let mut rows = Vec::with_capacity(results.len());
    let mut timings = Vec::with_capacity(results.len());
    for r in results {
        let (value, row, ms) = r?;
        rows.push((value, row));
        timings.push(ms);
    }

    let base = args.flags.config();
    let manifest_config = SweepManifestConfig {
        key: &grid.key,
        values: &grid.values,
        base: &base,
        shots: args.flags.shots,
        data: args.flags.data.display().to_string(),
    };
    let mut manifest = RunManifest::new("sweep", manifest_config, seeds, &args.out, ws.inputs.clone())?;
    manifest
        .outputs
        .push(write_file(&args.out.join(SWEEP_FILE), &sweep_csv(&grid.key, &rows)?)?);
    manifest.wall_clock_ms = timings;
    manifest.total_wall_clock_ms = start.elapsed().as_millis();
    manifest.write(&args.out.join(MANIFEST_FILE))?;
    for (value, row) in &rows {
        println!("{}={value}  seed {:>3}  accuracy {:.4}", grid.key, row.seed, row.accuracy);
    }
    Ok(())
}

pub fn plot(args: &PlotArgs) -> CliResult<()> {
    let bytes = read_file(&args.ckpt)?;
    let (backbone, model, meta) = load_model(bytes.as_slice())?;
    let test = load_set(&args.data, TEST_FILE)?;
    let mean_config = TrainConfig {
        infer_samples: 0,
        ..meta.config.clone()
    };
    let classifier = Classifier::new(&backbone, &model, &mean_config)?;
    let mut embeddings = Vec::with_capacity(test.len());
    for i in 0..test.len() {
        embeddings.push(classifier.embed_image(test.feature(i), 0)?.into_data());
    }
    let draws = if args.samples == 0 {
        classifier.draws().to_vec()
    } else {
        let mut r = rng::stream(rng::derive_seed(meta.config.seeds.eps, "plot"));
        (0..args.samples)
            .map(|_| prototype_values(&backbone, &model, &model.draw_noise(Some(&mut r))))
            .collect::<mist_core::Result<Vec<_>>>()?
    };

    let pca = Pca::fit(&embeddings);
    let mut classes: Vec<ClassPoints> = (0..model.num_classes())
        .map(|c| ClassPoints {
            images: Vec::new(),
            prototypes: (0..model.prompt_count())
                .map(|i| draws.iter().map(|d| pca.project(d.text[c][i].data())).collect())
                .collect(),
        })
        .collect();
    for (i, e) in embeddings.iter().enumerate() {
        classes[test.label(i)].images.push(pca.project(e));
    }
    let title = format!("test embeddings and prototypes ({} mode)", model.stochastic.as_str());
    write_file(&args.out.join("embeddings.svg"), scatter_svg(&classes, &title).as_bytes())?;

    let metrics = evaluate(&test, &backbone, &model, &mean_config)?;
    let mut sorted: Vec<(usize, f64)> = metrics
        .per_class_accuracy
        .iter()
        .enumerate()
        .filter_map(|(c, a)| a.map(|a| (c, a)))
        .collect();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    write_file(&args.out.join("bins.svg"), bins_svg(&sorted, metrics.bins).as_bytes())?;
    println!(
        "accuracy {:.4}, bins {:.4}/{:.4}; wrote {}",
        metrics.accuracy,
        metrics.bins.0,
        metrics.bins.1,
        args.out.display()
    );
    Ok(())
}

fn parse_group(name: &str) -> CliResult<ParamGroup> {
    [
        ParamGroup::Means,
        ParamGroup::LogScales,
        ParamGroup::Projections,
        ParamGroup::DeepPrompts,
    ]
    .into_iter()
    .find(|g| g.as_str() == name)
    .ok_or_else(|| CliError::Usage(format!("unknown parameter group {name:?}")))
}

/// Checks both deep prompt layouts and keeps the worst entry per group.
pub fn gradcheck_report(args: &GradcheckArgs) -> CliResult<GradCheckReport> {
    let options = GradCheckOptions {
        step: args.step,
        threshold: args.threshold,
        seed: args.seed,
        corrupt: args.corrupt.as_deref().map(parse_group).transpose()?,
        ..GradCheckOptions::default()
    };
    let mut merged: Option<GradCheckReport> = None;
    for stochastic_deep in [false, true] {
        let problem = TinyProblem::new(args.seed, stochastic_deep)?;
        let report = check(&problem, &options)?;
        merged = Some(match merged {
            None => report,
            Some(mut acc) => {
                for g in report.groups {
                    match acc.groups.iter_mut().find(|a| a.group == g.group) {
                        Some(a) => {
                            a.entries += g.entries;
                            if g.max_rel_error > a.max_rel_error {
                                a.max_rel_error = g.max_rel_error;
                                a.worst_param = g.worst_param;
                            }
                            a.passed &= g.passed;
                        }
                        None => acc.groups.push(g),
                    }
                }
                acc
            }
        });
    }
    Ok(merged.expect("two problems checked"))
}

pub fn gradcheck(args: &GradcheckArgs) -> CliResult<()> {
    let start = Instant::now();
    let report = gradcheck_report(args)?;
    println!("{:<14} {:>8} {:>14}  {}", "group", "entries", "max rel err", "status");
    for g in &report.groups {
        println!(
            "{:<14} {:>8} {:>14.3e}  {}",
            g.group.as_str(),
            g.entries,
            g.max_rel_error,
            if g.passed { "pass" } else { "FAIL" }
        );
    }
    println!("threshold {:.1e}, {} ms", report.threshold, start.elapsed().as_millis());
    if report.passed() {
        return Ok(());
    }
    let failures: Vec<String> = report
        .failures()
        .map(|g| format!("{} (worst {}, {:.3e})", g.group.as_str(), g.worst_param, g.max_rel_error))
        .collect();
    Err(CliError::Threshold(format!("gradient check failed: {}", failures.join(", "))))
}
