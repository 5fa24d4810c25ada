//! Command implementations.

use std::path::{Path, PathBuf};

use clap::Args;

use fovealseg::data::{
    gaze_to_ioi, generate_synthetic_corpus, generate_synthetic_sequence,
    list_dataset, load_annotated_scene, sample_gaze, ClassBalancer, Dataset,
    FovealSample,
};
use fovealseg::flops::{count_flops, Component, CostModel};
use fovealseg::fsnet::{load_checkpoint, save_checkpoint, FsNet, GridMode};
use fovealseg::rng::SeedSplitter;
use fovealseg::scheduler::run_trace;
use fovealseg::trace_analysis::{compute_segment_diffs, gaze_stats, partition_segments, stats_table};
use fovealseg::trainer::{alternate_train, evaluate as eval_model, pretrain_backbone, TrainLogger};

use crate::artifacts::{
    load_corpus, load_sequence, read_manifest, write_corpus, write_sequence, CorpusManifest,
};
use crate::config::RunConfig;
use crate::CliError;

fn require_out(out: Option<PathBuf>) -> Result<PathBuf, CliError> {
    out.ok_or_else(|| CliError::usage("--out DIR is required"))
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::runtime(e.to_string())
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct SynthArgs {
    /// Generate the training/validation corpus.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    corpus: bool,
    /// Generate a frame sequence fixture.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    sequence: bool,
    /// Additionally emit this many annotated scenes (images/ + annotations/)
    /// as a dataset for `preprocess`.
    #[arg(long, default_value_t = 0)]
    scenes: usize,
}

pub fn synth(args: SynthArgs, cfg: &RunConfig, out: Option<PathBuf>) -> Result<(), CliError> {
    let out = require_out(out)?;
    cfg.write_echo(&out)?;
    let seed = cfg.get_u64("seed")?;

    if args.corpus {
        let spec = cfg.synthetic_spec()?;
        let train_count = cfg.get_usize("train_count")?;
        let val_count = cfg.get_usize("val_count")?;
        let samples = generate_synthetic_corpus::<f32>(&spec, seed, train_count + val_count)?;
        let mut per_class = vec![0usize; spec.num_classes()];
        for s in &samples {
            per_class[s.class_id] += 1;
        }
        let manifest = CorpusManifest {
            seed,
            spec: spec.clone(),
            train_count,
            val_count,
            per_class_counts: per_class.clone(),
        };
        let corpus_dir = out.join("corpus");
        write_corpus(&corpus_dir, &samples, &manifest, None)?;
        println!("corpus: {} samples -> {}", samples.len(), corpus_dir.display());
        for (class, count) in per_class.iter().enumerate() {
            println!("  class {class}: {count}");
        }
    }

    if args.sequence {
        let spec = cfg.sequence_spec()?;
        let frames = cfg.get_usize("frames")?;
        let seq = generate_synthetic_sequence::<f32>(&spec, seed, frames)?;
        let seq_dir = out.join("sequence");
        write_sequence(&seq_dir, &seq, &spec)?;
        println!(
            "sequence: {} frames, {} segments, {} saccades -> {}",
            frames,
            seq.truth.segment_starts.len(),
            seq.truth.saccade_frames.len(),
            seq_dir.display()
        );
    }

    if args.scenes > 0 {
        let spec = cfg.synthetic_spec()?;
        let splitter = SeedSplitter::new(seed);
        let scenes_dir = out.join("scenes");
        for i in 0..args.scenes {
            let scene = fovealseg::data::generate_synthetic_scene::<f32>(
                &spec,
                splitter.seed("dataset-scene", i as u64),
            )?;
            fovealseg::data::write_annotated_scene(&scene.scene, &scenes_dir, &format!("{i:04}"))?;
        }
        println!("scenes: {} annotated scenes -> {}", args.scenes, scenes_dir.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// preprocess
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct PreprocessArgs {
    /// Dataset directory with images/ and annotations/.
    #[arg(long)]
    dataset: PathBuf,
    /// Optional gaze trace whose points seed the gaze sampling.
    #[arg(long)]
    traces: Option<PathBuf>,
    /// Enforce class-balanced gaze sampling.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    balance: bool,
}

pub fn preprocess(args: PreprocessArgs, cfg: &RunConfig, out: Option<PathBuf>) -> Result<(), CliError> {
    let out = require_out(out)?;
    let seed = cfg.get_u64("seed")?;
    let num_classes = cfg.get_usize("num_classes")?;
    let annotations = list_dataset(&args.dataset)?;
    if annotations.is_empty() {
        return Err(CliError::usage(format!(
            "no annotation files under {}",
            args.dataset.join("annotations").display()
        )));
    }
    let trace_points: Option<Vec<_>> = match &args.traces {
        Some(path) => {
            let trace = fovealseg::data::load_trace::<f32>(path)?;
            Some(trace.points().collect())
        }
        None => None,
    };

    let splitter = SeedSplitter::new(seed);
    let scenes: Vec<_> = annotations
        .iter()
        .map(|a| load_annotated_scene::<f32>(a))
        .collect::<Result<_, _>>()?;
    for scene in &scenes {
        scene.validate(num_classes)?;
    }

    // Per-scene class assignment. Balanced mode walks class quotas
    // round-robin and claims the first unassigned scene containing the
    // needed class, so per-class counts end within one of each other
    // whenever the dataset allows it.
    let mut assignment: Vec<Option<usize>> = vec![None; scenes.len()];
    if args.balance {
        let mut counts = vec![0usize; num_classes];
        let mut remaining = scenes.len();
        while remaining > 0 {
            let mut order: Vec<usize> = (0..num_classes).collect();
            order.sort_by_key(|&c| (counts[c], c));
            let mut assigned = false;
            for &class in &order {
                if let Some(i) = (0..scenes.len()).find(|&i| {
                    assignment[i].is_none()
                        && scenes[i].instances.iter().any(|inst| inst.class_id == class)
                }) {
                    assignment[i] = Some(class);
                    counts[class] += 1;
                    remaining -= 1;
                    assigned = true;
                    break;
                }
            }
            if !assigned {
                return Err(CliError::usage("a scene has no instances to sample from"));
            }
        }
    } else {
        let mut balance = ClassBalancer::new(num_classes);
        for (i, scene) in scenes.iter().enumerate() {
            let mut rng = splitter.rng("preprocess-assign", i as u64);
            let gaze = sample_gaze(scene, &mut rng, &mut balance)?;
            assignment[i] = Some(gaze_to_ioi(scene, gaze)?.class_id);
        }
    }

    let mut samples = Vec::new();
    let mut trace_cursor = 0usize;
    for (idx, (scene, annotation)) in scenes.iter().zip(&annotations).enumerate() {
        let class = assignment[idx].expect("assigned above");
        let mut rng = splitter.rng("preprocess", idx as u64);
        // Prefer gaze points from the supplied trace that land on an
        // instance of the assigned class; fall back to interior sampling.
        let mut chosen = None;
        if let Some(points) = &trace_points {
            for _ in 0..points.len() {
                let g = points[trace_cursor % points.len()];
                trace_cursor += 1;
                if let Ok(sample) = gaze_to_ioi(scene, g) {
                    if sample.class_id == class {
                        chosen = Some(sample);
                        break;
                    }
                }
            }
        }
        if chosen.is_none() {
            let gaze = fovealseg::data::sample_gaze_in_class(scene, class, &mut rng)?;
            chosen = Some(gaze_to_ioi(scene, gaze)?);
        }
        let mut sample = chosen.expect("sample selected");
        sample.source = annotation.display().to_string();
        samples.push(sample);
    }

    // Reference the dataset's own images rather than copying them.
    let image_refs: Vec<PathBuf> = annotations
        .iter()
        .map(|a| {
            let text = std::fs::read_to_string(a).expect("annotation readable above");
            let parsed: serde_json::Value = serde_json::from_str(&text).expect("valid json above");
            let rel = parsed["image"].as_str().unwrap_or_default().to_string();
            a.parent().unwrap_or(Path::new(".")).join(rel)
        })
        .collect();

    let mut per_class = vec![0usize; num_classes];
    for s in &samples {
        per_class[s.class_id] += 1;
    }
    let manifest = CorpusManifest {
        seed,
        spec: cfg.synthetic_spec()?,
        train_count: samples.len(),
        val_count: 0,
        per_class_counts: per_class.clone(),
    };
    write_corpus(&out, &samples, &manifest, Some(&image_refs))?;
    cfg.write_echo(&out)?;
    println!("preprocessed {} scenes -> {}", samples.len(), out.display());
    for (class, count) in per_class.iter().enumerate() {
        println!("  class {class}: {count}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct TrainArgs {
    /// Corpus directory (from `synth` or `preprocess`).
    #[arg(long)]
    corpus: PathBuf,
    /// Train the uniform-grid baseline instead of the saliency model.
    #[arg(long)]
    uniform_baseline: bool,
    /// Skip head pretraining (heads start from random weights).
    #[arg(long)]
    no_pretrain: bool,
}

fn split_corpus(dir: &Path) -> Result<Dataset<f32>, CliError> {
    let samples = load_corpus(dir)?;
    let manifest = read_manifest(dir)?;
    let n_train = if manifest.val_count == 0 {
        // Preprocessed datasets carry no split; hold out a fifth.
        samples.len() - samples.len() / 5
    } else {
        manifest.train_count
    };
    Ok(Dataset::from_split(samples, n_train))
}

pub fn train(args: TrainArgs, cfg: &RunConfig, out: Option<PathBuf>) -> Result<(), CliError> {
    let out = require_out(out)?;
    cfg.write_echo(&out)?;
    let data = split_corpus(&args.corpus)?;
    let (_, h, w) = data.train[0].image.dim();
    let mut model_cfg = cfg.model_config((h, w))?;
    if args.uniform_baseline {
        model_cfg = model_cfg.with_grid_mode(GridMode::Uniform);
    }
    let train_cfg = cfg.train_config()?;
    let mut rng = SeedSplitter::new(train_cfg.seed).rng("model-init", 0);
    let mut model = FsNet::new_toy(model_cfg, &mut rng)?;

    let mut logger = TrainLogger::to_file(&out.join("training_log.csv"))?;
    if !args.no_pretrain {
        let report = pretrain_backbone(&mut model, &data, &train_cfg, &cfg.pretrain_stage()?, &mut logger)?;
        println!(
            "pretrain: {} epochs, val loss {:.4} -> {:.4}",
            report.epochs_run, report.initial_val_loss, report.best_val_loss
        );
    }
    let summary = alternate_train(&mut model, &data, &train_cfg, &mut logger, Some(&out.join("checkpoints")))?;
    for report in &summary.stage_reports {
        println!(
            "{}: {} epochs, val loss {:.4} -> {:.4}",
            report.stage, report.epochs_run, report.initial_val_loss, report.best_val_loss
        );
    }
    let final_dir = out.join("model");
    save_checkpoint(&model, &final_dir)?;
    let result = eval_model(&model, &data.val)?;
    std::fs::write(
        out.join("eval.json"),
        serde_json::to_string_pretty(&result).map_err(runtime)?,
    )
    .map_err(runtime)?;
    println!(
        "final: IoU {:.4}, IoU' {:.4} ({} validation samples) -> {}",
        result.iou,
        result.iou_prime,
        result.samples,
        final_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Evaluate the validation split only (default) or everything.
    #[arg(long)]
    full: bool,
}

pub fn evaluate(args: EvaluateArgs, cfg: &RunConfig, out: Option<PathBuf>) -> Result<(), CliError> {
    let model = load_checkpoint::<f32>(&args.checkpoint)?;
    let data = split_corpus(&args.corpus)?;
    let samples: Vec<FovealSample<f32>> = if args.full {
        data.train.into_iter().chain(data.val).collect()
    } else {
        data.val
    };
    let result = eval_model(&model, &samples)?;
    let json = serde_json::to_string_pretty(&result).map_err(runtime)?;
    println!("{json}");
    if let Some(out) = out {
        cfg.write_echo(&out)?;
        std::fs::write(out.join("eval.json"), json).map_err(runtime)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// schedule
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct ScheduleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sequence directory (frames/ + trace.csv).
    #[arg(long)]
    sequence: PathBuf,
    /// Trace file overriding the sequence's own trace.csv.
    #[arg(long)]
    trace: Option<PathBuf>,
}

pub fn schedule(args: ScheduleArgs, cfg: &RunConfig, out: Option<PathBuf>) -> Result<(), CliError> {
    let model = load_checkpoint::<f32>(&args.checkpoint)?;
    let seq = load_sequence(&args.sequence, args.trace.as_deref())?;
    if seq.frames.len() != seq.trace.len() {
        return Err(CliError::usage(format!(
            "sequence has {} frames but trace has {} entries",
            seq.frames.len(),
            seq.trace.len()
        )));
    }
    let sched_cfg = cfg.scheduler_config()?;
    let report = run_trace(&seq.frames, &seq.trace, &model, &sched_cfg)?;

    println!("decision          count");
    let c = &report.decision_counts;
    println!("run-initial       {}", c.run_initial);
    println!("skip-saccade      {}", c.skip_saccade);
    println!("run-new-segment   {}", c.run_new_segment);
    println!("reuse             {}", c.reuse);
    println!("run-new-gaze      {}", c.run_new_gaze);
    println!();
    println!("scheduled FLOPs   {}", report.total_flops);
    println!("no-skip FLOPs     {} ({:.2}x)", report.no_skip_flops, report.no_skip_ratio);
    println!("no-downsample     {} ({:.2}x)", report.no_downsample_flops, report.no_downsample_ratio);

    if let Some(out) = out {
        cfg.write_echo(&out)?;
        std::fs::write(
            out.join("schedule.json"),
            serde_json::to_string_pretty(&report).map_err(runtime)?,
        )
        .map_err(runtime)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// analyze-trace
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct AnalyzeTraceArgs {
    /// Sequence directory (frames/ + trace.csv).
    #[arg(long)]
    sequence: PathBuf,
    /// Trace file overriding the sequence's own trace.csv.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Write a histogram plot image.
    #[arg(long)]
    plot: Option<PathBuf>,
}

pub fn analyze_trace(args: AnalyzeTraceArgs, cfg: &RunConfig, out: Option<PathBuf>) -> Result<(), CliError> {
    let seq = load_sequence(&args.sequence, args.trace.as_deref())?;
    let beta = cfg.get_f32("beta")?;
    let gaze_threshold = cfg.get_f32("alpha")?.sqrt();
    let diffs = compute_segment_diffs(&seq.frames, beta)?;
    let partition = partition_segments(&diffs, beta)?;
    let stats = gaze_stats(&seq.trace, &partition, gaze_threshold)?;

    println!("segments: {}", partition.segment_count());
    print!("{}", stats_table(&stats));
    if let Some(truth) = &seq.truth {
        let matches = partition.boundaries() == truth.segment_starts.as_slice();
        println!("generator boundaries reproduced: {matches}");
    }

    if let Some(plot_path) = &args.plot {
        render_histogram(&stats.histogram, plot_path)?;
        println!("histogram plot -> {}", plot_path.display());
    }
    if let Some(out) = out {
        cfg.write_echo(&out)?;
        std::fs::write(
            out.join("trace_stats.json"),
            serde_json::to_string_pretty(&stats).map_err(runtime)?,
        )
        .map_err(runtime)?;
        std::fs::write(
            out.join("segments.json"),
            serde_json::to_string_pretty(&partition).map_err(runtime)?,
        )
        .map_err(runtime)?;
    }
    Ok(())
}

/// Minimal bar-chart rendering of the displacement histogram.
fn render_histogram(histogram: &[f64], path: &Path) -> Result<(), CliError> {
    let (w, h) = (4 * histogram.len() as u32 + 20, 220u32);
    let mut img = image::RgbImage::from_pixel(w, h, image::Rgb([255, 255, 255]));
    let peak = histogram.iter().cloned().fold(0.0f64, f64::max).max(1e-9);
    for (i, &mass) in histogram.iter().enumerate() {
        let bar = ((mass / peak) * 200.0).round() as u32;
        for dx in 0..3u32 {
            let x = 10 + i as u32 * 4 + dx;
            for y in 0..bar {
                img.put_pixel(x, h - 11 - y, image::Rgb([40, 90, 200]));
            }
        }
    }
    img.save(path).map_err(runtime)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// flops
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct FlopsArgs {}

pub fn flops(_args: FlopsArgs, cfg: &RunConfig, out: Option<PathBuf>) -> Result<(), CliError> {
    let classes = cfg.get_usize("cost_classes")?;
    let sigma = cfg.get_usize("cost_sigma")?;
    let radius = cfg.get_usize("gaze_tolerance_radius")?;
    let kernel_size = 2 * sigma + 1;
    let rows: Vec<(String, u64)> = vec![
        (
            "saliency-net 64x64".into(),
            count_flops(Component::SaliencyNet { h: 64, w: 64 })?,
        ),
        (
            format!("grid 64x64 size {kernel_size}"),
            count_flops(Component::GridComputation { h: 64, w: 64, kernel_size })?,
        ),
        (
            "warp 64x64 (nearest, 4ch)".into(),
            count_flops(Component::Warp { h: 64, w: 64, channels: 4, bilinear: false })?,
        ),
        ("seg-head 64x64".into(), count_flops(Component::SegHead { h: 64, w: 64 })?),
        (
            "cls-head 64x64".into(),
            count_flops(Component::ClsHead { h: 64, w: 64, classes })?,
        ),
        (
            "unwarp 64x64 -> 640x640".into(),
            count_flops(Component::Unwarp { h: 64, w: 64, source_h: 640, source_w: 640, channels: 1 })?,
        ),
        (
            format!("reuse check (radius {radius})"),
            count_flops(Component::ReuseCheck { radius })?,
        ),
        ("displacement check".into(), count_flops(Component::DisplacementCheck)?),
        (
            "full-res backbone 640x640".into(),
            count_flops(Component::FullResBackbone { h: 640, w: 640, classes })?,
        ),
    ];
    println!("{:<32} FLOPs", "component");
    for (name, flops) in &rows {
        println!("{name:<32} {flops}");
    }
    let cost = CostModel::reference(classes, sigma, radius)?;
    println!();
    println!("fsnet run (64x64 pipeline)       {}", cost.fsnet_run);
    println!("per-frame ND/FSNet ratio         {:.1}", cost.nd_run as f64 / cost.fsnet_run as f64);

    if let Some(out) = out {
        cfg.write_echo(&out)?;
        let json: serde_json::Value = serde_json::json!({
            "components": rows.iter().map(|(n, f)| serde_json::json!({"component": n, "flops": f})).collect::<Vec<_>>(),
            "cost_model": cost,
        });
        std::fs::write(out.join("flops.json"), serde_json::to_string_pretty(&json).map_err(runtime)?)
            .map_err(runtime)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate-kernel
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct AblateKernelArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint evaluated with each kernel swapped in. Without it, a model
    /// is trained from scratch per sigma (slow).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

pub fn ablate_kernel(args: AblateKernelArgs, cfg: &RunConfig, out: Option<PathBuf>) -> Result<(), CliError> {
    let out = require_out(out)?;
    cfg.write_echo(&out)?;
    let sigmas = cfg.get_usize_list("ablate_sigmas")?;
    let data = split_corpus(&args.corpus)?;

    let mut csv = String::from("sigma,kernel_size,iou,iou_prime,grid_flops\n");
    for &sigma in &sigmas {
        let kernel = fovealseg::sampler::KernelSpec::new(sigma)?;
        let mut model = match &args.checkpoint {
            Some(dir) => load_checkpoint::<f32>(dir)?,
            None => {
                let (_, h, w) = data.train[0].image.dim();
                let mut model_cfg = cfg.model_config((h, w))?;
                model_cfg.kernel = kernel;
                let train_cfg = cfg.train_config()?;
                let mut rng = SeedSplitter::new(train_cfg.seed).rng("ablate-init", sigma as u64);
                let mut model = FsNet::new_toy(model_cfg, &mut rng)?;
                let mut logger = TrainLogger::in_memory();
                pretrain_backbone(&mut model, &data, &train_cfg, &cfg.pretrain_stage()?, &mut logger)?;
                alternate_train(&mut model, &data, &train_cfg, &mut logger, None)?;
                model
            }
        };
        model.config.kernel = kernel;
        let result = eval_model(&model, &data.val)?;
        let grid_flops = count_flops(Component::GridComputation {
            h: model.config.target_h,
            w: model.config.target_w,
            kernel_size: kernel.size(),
        })?;
        csv.push_str(&format!(
            "{sigma},{},{:.4},{:.4},{grid_flops}\n",
            kernel.size(),
            result.iou,
            result.iou_prime
        ));
    }
    std::fs::write(out.join("kernel_ablation.csv"), &csv).map_err(runtime)?;
    print!("{csv}");
    Ok(())
}

