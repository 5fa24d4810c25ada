//! On-disk layouts produced and consumed by the commands.
//!
//! Corpus directory:
//!   images/NNNN.png, annotations/NNNN.json, masks/NNNN.png,
//!   samples.csv (id,image,u,v,class_id,mask), manifest.json
//!
//! Sequence directory:
//!   frames/NNNNN.png, trace.csv, truth.json, sequence.json

use std::path::{Path, PathBuf};

use fovealseg::data::{
    read_image, read_mask, write_image, write_mask, FovealSample, SequenceSpec, SequenceTruth,
    SyntheticSpec, SyntheticSequence,
};
use fovealseg::gaze::{GazePoint, GazeTrace};

use crate::CliError;

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::runtime(e.to_string())
}

#[derive(serde::Serialize, serde::Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub spec: SyntheticSpec,
    pub train_count: usize,
    pub val_count: usize,
    pub per_class_counts: Vec<usize>,
}

/// Write foveal samples plus a manifest; `existing_images` maps sample index
/// to an already-on-disk image path (used by `preprocess`, which must not
/// duplicate dataset images).
pub fn write_corpus(
    dir: &Path,
    samples: &[FovealSample<f32>],
    manifest: &CorpusManifest,
    existing_images: Option<&[PathBuf]>,
) -> Result<(), CliError> {
    std::fs::create_dir_all(dir.join("masks")).map_err(runtime)?;
    if existing_images.is_none() {
        std::fs::create_dir_all(dir.join("images")).map_err(runtime)?;
    }
    let mut csv = String::from("id,image,u,v,class_id,mask\n");
    for (i, s) in samples.iter().enumerate() {
        let id = format!("{i:05}");
        let image_ref = match existing_images {
            Some(paths) => paths[i].to_string_lossy().into_owned(),
            None => {
                let rel = format!("images/{id}.png");
                write_image(&s.image, &dir.join(&rel)).map_err(runtime)?;
                rel
            }
        };
        let mask_rel = format!("masks/{id}.png");
        write_mask(&s.y_binary, &dir.join(&mask_rel)).map_err(runtime)?;
        csv.push_str(&format!(
            "{id},{image_ref},{},{},{},{mask_rel}\n",
            s.gaze.u(),
            s.gaze.v(),
            s.class_id
        ));
    }
    std::fs::write(dir.join("samples.csv"), csv).map_err(runtime)?;
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(manifest).map_err(runtime)?,
    )
    .map_err(runtime)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<CorpusManifest, CliError> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::usage(format!("bad manifest: {e}")))
}

/// Load all samples of a corpus directory, in csv order.
pub fn load_corpus(dir: &Path) -> Result<Vec<FovealSample<f32>>, CliError> {
    let csv_path = dir.join("samples.csv");
    let text = std::fs::read_to_string(&csv_path)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", csv_path.display())))?;
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(CliError::usage(format!(
                "{} line {}: expected 6 fields",
                csv_path.display(),
                lineno + 1
            )));
        }
        let parse_f = |s: &str, what: &str| -> Result<f32, CliError> {
            s.parse()
                .map_err(|e| CliError::usage(format!("{} line {}: bad {what}: {e}", csv_path.display(), lineno + 1)))
        };
        let image_path = resolve(dir, fields[1]);
        let image = read_image::<f32>(&image_path)
            .map_err(|e| CliError::usage(format!("cannot read image {}: {e}", image_path.display())))?;
        let u = parse_f(fields[2], "u")?;
        let v = parse_f(fields[3], "v")?;
        let class_id: usize = fields[4]
            .parse()
            .map_err(|e| CliError::usage(format!("{} line {}: bad class: {e}", csv_path.display(), lineno + 1)))?;
        let mask_path = resolve(dir, fields[5]);
        let mask = read_mask(&mask_path)
            .map_err(|e| CliError::usage(format!("cannot read mask {}: {e}", mask_path.display())))?;
        let gaze = GazePoint::new(u, v).map_err(|e| CliError::usage(e.to_string()))?;
        let sample = FovealSample::new(image, gaze, mask, class_id, format!("corpus:{}", fields[0]))
            .map_err(|e| CliError::usage(e.to_string()))?;
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(CliError::usage(format!("{} contains no samples", csv_path.display())));
    }
    Ok(samples)
}

fn resolve(dir: &Path, reference: &str) -> PathBuf {
    let p = Path::new(reference);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}

pub fn write_sequence(dir: &Path, seq: &SyntheticSequence<f32>, spec: &SequenceSpec) -> Result<(), CliError> {
    std::fs::create_dir_all(dir.join("frames")).map_err(runtime)?;
    for (t, frame) in seq.frames.iter().enumerate() {
        write_image(frame, &dir.join(format!("frames/{t:05}.png"))).map_err(runtime)?;
    }
    std::fs::write(dir.join("trace.csv"), seq.trace.to_csv()).map_err(runtime)?;
    std::fs::write(
        dir.join("truth.json"),
        serde_json::to_string_pretty(&seq.truth).map_err(runtime)?,
    )
    .map_err(runtime)?;
    std::fs::write(
        dir.join("sequence.json"),
        serde_json::to_string_pretty(spec).map_err(runtime)?,
    )
    .map_err(runtime)?;
    Ok(())
}

pub struct LoadedSequence {
    pub frames: Vec<ndarray::Array3<f32>>,
    pub trace: GazeTrace<f32>,
    pub truth: Option<SequenceTruth>,
}

pub fn load_sequence(dir: &Path, trace_override: Option<&Path>) -> Result<LoadedSequence, CliError> {
    let frames_dir = dir.join("frames");
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&frames_dir)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", frames_dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == "png").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::usage(format!("{} contains no frames", frames_dir.display())));
    }
    let mut frames = Vec::with_capacity(paths.len());
    for p in &paths {
        frames.push(read_image::<f32>(p).map_err(|e| CliError::usage(format!("cannot read {}: {e}", p.display())))?);
    }
    let trace_path = trace_override.map(|p| p.to_path_buf()).unwrap_or_else(|| dir.join("trace.csv"));
    let trace_text = std::fs::read_to_string(&trace_path)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", trace_path.display())))?;
    let trace = GazeTrace::parse_csv(&trace_text).map_err(|e| CliError::usage(e.to_string()))?;
    let truth = match std::fs::read_to_string(dir.join("truth.json")) {
        Ok(text) => Some(serde_json::from_str(&text).map_err(|e| CliError::usage(format!("bad truth.json: {e}")))?),
        Err(_) => None,
    };
    Ok(LoadedSequence { frames, trace, truth })
}
