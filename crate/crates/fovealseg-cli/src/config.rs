//! Flat `key=value` run configuration: file plus command-line overrides,
//! unknown keys rejected, resolved values echoed into every output directory.

use std::collections::BTreeMap;
use std::path::Path;

use fovealseg::data::{SequenceSpec, SyntheticSpec};
use fovealseg::fsnet::FsNetConfig;
use fovealseg::losses::LossConfig;
use fovealseg::sampler::KernelSpec;
use fovealseg::scheduler::SchedulerConfig;
use fovealseg::trainer::{StageConfig, TrainConfig};
use fovealseg::flops::CostModel;

use crate::CliError;

/// Every key the configuration understands, with its default.
const KNOWN_KEYS: &[(&str, &str)] = &[
    ("seed", "42"),
    // Synthetic scenes.
    ("canvas_h", "32"),
    ("canvas_w", "32"),
    ("min_shapes", "2"),
    ("max_shapes", "5"),
    // Corpus sizes.
    ("train_count", "300"),
    ("val_count", "60"),
    // Model geometry.
    ("target_h", "16"),
    ("target_w", "16"),
    ("sigma", "4"),
    ("num_classes", "3"),
    // Pretraining (stands in for pretrained segmentation weights).
    ("pretrain_lr", "0.02"),
    ("pretrain_iterations", "80"),
    ("pretrain_patience", "20"),
    // Alternating stages.
    ("stage1_lr", "0.05"),
    ("stage1_weight_decay", "1e-5"),
    ("stage1_iterations", "30"),
    ("stage1_patience", "20"),
    ("stage1_plateau_factor", "0.9"),
    ("stage1_plateau_patience", "10"),
    ("stage2_lr", "5e-3"),
    ("stage2_weight_decay", "1e-5"),
    ("stage2_iterations", "50"),
    ("stage2_patience", "20"),
    ("stage2_plateau_factor", "0.9"),
    ("stage2_plateau_patience", "10"),
    ("rounds", "1"),
    ("batch_size", "16"),
    ("threads", "0"), // 0 = use FOVEALSEG_THREADS or single-threaded
    // Loss.
    ("lambda", "1.0"),
    ("gamma", "2.0"),
    ("epsilon", "1e-6"),
    // Scheduler.
    ("alpha", "0.01"),
    ("beta", "0.037"),
    ("gaze_tolerance_radius", "2"),
    ("cost_classes", "19"),
    ("cost_sigma", "16"),
    // Sequence generation.
    ("fps", "30"),
    ("frames", "300"),
    ("saccade_rate", "2.0"),
    ("scene_change_prob", "0.65"),
    ("gaze_jitter", "0.01"),
    ("frame_noise", "0.008"),
    // Kernel ablation.
    ("ablate_sigmas", "8,12,16,20"),
];

/// Resolved configuration: defaults, overlaid by a config file, overlaid by
/// command-line overrides.
#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn resolve(config_file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut values: BTreeMap<String, String> =
            KNOWN_KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        if let Some(path) = config_file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    CliError::usage(format!(
                        "config {} line {}: expected key=value, got `{line}`",
                        path.display(),
                        lineno + 1
                    ))
                })?;
                let key = key.trim();
                if !values.contains_key(key) {
                    return Err(CliError::usage(format!(
                        "config {} line {}: unknown key `{key}`",
                        path.display(),
                        lineno + 1
                    )));
                }
                values.insert(key.to_string(), value.trim().to_string());
            }
        }
        for (key, value) in overrides {
            if !values.contains_key(key.as_str()) {
                return Err(CliError::usage(format!("unknown config key `{key}`")));
            }
            values.insert(key.clone(), value.clone());
        }
        Ok(Self { values })
    }

    fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(|s| s.as_str()).unwrap_or_else(|| panic!("key {key} registered"))
    }


    pub fn get_u64(&self, key: &str) -> Result<u64, CliError> {
        self.raw(key)
            .parse()
            .map_err(|e| CliError::usage(format!("config key `{key}`: {e}")))
    }

    pub fn get_usize(&self, key: &str) -> Result<usize, CliError> {
        self.raw(key)
            .parse()
            .map_err(|e| CliError::usage(format!("config key `{key}`: {e}")))
    }

    pub fn get_f64(&self, key: &str) -> Result<f64, CliError> {
        self.raw(key)
            .parse()
            .map_err(|e| CliError::usage(format!("config key `{key}`: {e}")))
    }

    pub fn get_f32(&self, key: &str) -> Result<f32, CliError> {
        self.raw(key)
            .parse()
            .map_err(|e| CliError::usage(format!("config key `{key}`: {e}")))
    }

    pub fn get_usize_list(&self, key: &str) -> Result<Vec<usize>, CliError> {
        self.raw(key)
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e| CliError::usage(format!("config key `{key}` entry `{s}`: {e}")))
            })
            .collect()
    }

    /// Serialize the fully resolved configuration, sorted by key.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    /// Write the resolved configuration into an output directory.
    pub fn write_echo(&self, out_dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(out_dir)
            .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", out_dir.display())))?;
        std::fs::write(out_dir.join("config.txt"), self.echo())
            .map_err(|e| CliError::runtime(format!("cannot write config echo: {e}")))?;
        Ok(())
    }

    // -- typed views ---------------------------------------------------------

    pub fn synthetic_spec(&self) -> Result<SyntheticSpec, CliError> {
        Ok(SyntheticSpec {
            canvas_h: self.get_usize("canvas_h")?,
            canvas_w: self.get_usize("canvas_w")?,
            min_shapes: self.get_usize("min_shapes")?,
            max_shapes: self.get_usize("max_shapes")?,
        })
    }

    pub fn sequence_spec(&self) -> Result<SequenceSpec, CliError> {
        Ok(SequenceSpec {
            scene: self.synthetic_spec()?,
            fps: self.get_f64("fps")?,
            saccade_rate: self.get_f64("saccade_rate")?,
            scene_change_prob: self.get_f64("scene_change_prob")?,
            gaze_jitter: self.get_f64("gaze_jitter")?,
            frame_noise: self.get_f64("frame_noise")?,
        })
    }

    pub fn model_config(&self, input: (usize, usize)) -> Result<FsNetConfig, CliError> {
        let kernel = KernelSpec::new(self.get_usize("sigma")?)
            .map_err(|e| CliError::usage(e.to_string()))?;
        FsNetConfig::new(
            input,
            (self.get_usize("target_h")?, self.get_usize("target_w")?),
            kernel,
            self.get_usize("num_classes")?,
        )
        .map_err(|e| CliError::usage(e.to_string()))
    }

    pub fn train_config(&self) -> Result<TrainConfig<f32>, CliError> {
        let stage = |p: &str| -> Result<StageConfig<f32>, CliError> {
            Ok(StageConfig {
                lr: self.get_f32(&format!("{p}_lr"))?,
                weight_decay: self.get_f32(&format!("{p}_weight_decay"))?,
                iterations: self.get_usize(&format!("{p}_iterations"))?,
                early_stop_patience: self.get_usize(&format!("{p}_patience"))?,
                plateau_factor: self.get_f32(&format!("{p}_plateau_factor"))?,
                plateau_patience: self.get_usize(&format!("{p}_plateau_patience"))?,
            })
        };
        let threads = match self.get_usize("threads")? {
            0 => worker_threads_from_env(),
            n => n,
        };
        Ok(TrainConfig {
            stage1: stage("stage1")?,
            stage2: stage("stage2")?,
            rounds: self.get_usize("rounds")?,
            batch_size: self.get_usize("batch_size")?,
            seed: self.get_u64("seed")?,
            loss: LossConfig {
                lambda: self.get_f32("lambda")?,
                gamma: self.get_f32("gamma")?,
                epsilon: self.get_f32("epsilon")?,
            },
            threads,
        })
    }

    pub fn pretrain_stage(&self) -> Result<StageConfig<f32>, CliError> {
        Ok(StageConfig {
            lr: self.get_f32("pretrain_lr")?,
            weight_decay: self.get_f32("stage2_weight_decay")?,
            iterations: self.get_usize("pretrain_iterations")?,
            early_stop_patience: self.get_usize("pretrain_patience")?,
            plateau_factor: self.get_f32("stage2_plateau_factor")?,
            plateau_patience: self.get_usize("stage2_plateau_patience")?,
        })
    }

    pub fn scheduler_config(&self) -> Result<SchedulerConfig<f32>, CliError> {
        let cost = CostModel::reference(
            self.get_usize("cost_classes")?,
            self.get_usize("cost_sigma")?,
            self.get_usize("gaze_tolerance_radius")?,
        )
        .map_err(|e| CliError::usage(e.to_string()))?;
        Ok(SchedulerConfig {
            alpha: self.get_f32("alpha")?,
            beta: self.get_f32("beta")?,
            gaze_tolerance_radius: self.get_usize("gaze_tolerance_radius")?,
            cost,
        })
    }
}

/// Worker-thread cap from the environment; defaults to a single worker.
pub fn worker_threads_from_env() -> usize {
    std::env::var("FOVEALSEG_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}
