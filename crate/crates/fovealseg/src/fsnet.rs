//! The gaze-aware model: gaze map -> saliency network -> sampling grid ->
//! warped input -> two-branch segmentation (binary instance mask + class),
//! composed by outer product, with full-resolution prediction via the
//! reverse sampler.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::gaze::{build_gaze_map, GazePoint};
use crate::nn::backbone::{Backbone, BackboneOut, ToyBackbone, ToyBackboneGrads};
use crate::nn::layers::{bilinear_resize, bilinear_resize_backward, sigmoid, sigmoid_backward, softmax, softmax_backward};
use crate::nn::unet::{SaliencyNet, SaliencyNetCache, SaliencyNetGrads};
use crate::nn::ParamSet;
use crate::sampler::{
    compute_grid_backward, compute_grid_with_cache, normalize_saliency, normalize_saliency_backward,
    unwarp, uniform_downsample, warp, warp_backward, GridCache, KernelSpec, SaliencyMap,
    SaliencyNormCache, SamplingGrid, WarpMode,
};
use crate::scalar::Real;

/// How the sampling grid is produced: the learned saliency-guided grid, or
/// the uniform grid of the "Avg" baseline (everything else identical).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum GridMode {
    Saliency,
    Uniform,
}

/// Model geometry and sampler settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FsNetConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub target_h: usize,
    pub target_w: usize,
    pub saliency_h: usize,
    pub saliency_w: usize,
    pub kernel: KernelSpec,
    pub num_classes: usize,
    pub grid_mode: GridMode,
}

impl FsNetConfig {
    /// Saliency-net input size defaults to the warp target size.
    pub fn new(
        input: (usize, usize),
        target: (usize, usize),
        kernel: KernelSpec,
        num_classes: usize,
    ) -> Result<Self> {
        let cfg = Self {
            input_h: input.0,
            input_w: input.1,
            target_h: target.0,
            target_w: target.1,
            saliency_h: target.0,
            saliency_w: target.1,
            kernel,
            num_classes,
            grid_mode: GridMode::Saliency,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_grid_mode(mut self, mode: GridMode) -> Self {
        self.grid_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_h == 0 || self.input_w == 0 {
            return Err(Error::Config("input dims must be positive".into()));
        }
        if self.target_h > self.input_h || self.target_w > self.input_w || self.target_h == 0 || self.target_w == 0 {
            return Err(Error::Config(format!(
                "target {}x{} must be positive and no larger than input {}x{}",
                self.target_h, self.target_w, self.input_h, self.input_w
            )));
        }
        if self.saliency_h % 4 != 0 || self.saliency_w % 4 != 0 || self.saliency_h == 0 || self.saliency_w == 0 {
            return Err(Error::Config(format!(
                "saliency input {}x{} must be divisible by 4",
                self.saliency_h, self.saliency_w
            )));
        }
        if self.saliency_h > self.input_h || self.saliency_w > self.input_w {
            return Err(Error::Config(format!(
                "saliency input {}x{} exceeds image {}x{}",
                self.saliency_h, self.saliency_w, self.input_h, self.input_w
            )));
        }
        if self.target_h % 2 != 0 || self.target_w % 2 != 0 {
            return Err(Error::Config(format!(
                "target {}x{} must be even for the class head",
                self.target_h, self.target_w
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("at least one class required".into()));
        }
        Ok(())
    }

    /// Synthetic-suite default: 32x32 scenes warped to 16x16, sigma 4.
    pub fn synthetic(num_classes: usize) -> Self {
        Self {
            input_h: 32,
            input_w: 32,
            target_h: 16,
            target_w: 16,
            saliency_h: 16,
            saliency_w: 16,
            kernel: KernelSpec::new(4).expect("sigma 4 valid"),
            num_classes,
            grid_mode: GridMode::Saliency,
        }
    }
}

/// Inference vs training forward: training uses the differentiable bilinear
/// warp, inference the rounding warp.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Inference,
    Training,
}

/// Model output: downsampled-space probabilities, the composed per-class
/// mask, and the sampler state needed for full-resolution reconstruction.
#[derive(Debug, Clone)]
pub struct FsNetOutput<T> {
    pub y_bm: Array3<T>,  // [1, h, w]
    pub y_cls: Array1<T>, // [C]
    pub y_cm: Array3<T>,  // [C, h, w]
    pub grid: SamplingGrid<T>,
    pub saliency: SaliencyMap<T>,
}

/// Outer product of the class vector and the binary mask.
pub fn compose_mask<T: Real>(y_bm: &Array3<T>, y_cls: &Array1<T>) -> Result<Array3<T>> {
    let (one, h, w) = y_bm.dim();
    if one != 1 {
        return Err(Error::shape("[1, h, w]", format!("{:?}", y_bm.dim()), "binary mask"));
    }
    let c = y_cls.len();
    Ok(Array3::from_shape_fn((c, h, w), |(k, i, j)| y_cls[k] * y_bm[[0, i, j]]))
}

/// Backward of [`compose_mask`].
pub fn compose_mask_backward<T: Real>(
    y_bm: &Array3<T>,
    y_cls: &Array1<T>,
    d_y_cm: &Array3<T>,
) -> (Array3<T>, Array1<T>) {
    let (_, h, w) = y_bm.dim();
    let c = y_cls.len();
    let mut d_bm = Array3::zeros((1, h, w));
    let mut d_cls = Array1::zeros(c);
    for k in 0..c {
        for i in 0..h {
            for j in 0..w {
                let g = d_y_cm[[k, i, j]];
                d_bm[[0, i, j]] += g * y_cls[k];
                d_cls[k] += g * y_bm[[0, i, j]];
            }
        }
    }
    (d_bm, d_cls)
}

/// Gaze-conditioned segmentation model, generic over the backbone behind the
/// sampler.
#[derive(Debug, Clone)]
pub struct FsNet<T, B> {
    pub config: FsNetConfig,
    pub saliency: SaliencyNet<T>,
    pub backbone: B,
}

/// Sampler-side forward state, absent when the uniform grid is used.
struct SamplerTrainCache<T> {
    saliency_cache: SaliencyNetCache<T>,
    raw_density: Array2<T>,
    norm_cache: SaliencyNormCache<T>,
    grid_cache: GridCache<T>,
}

/// Everything the training backward pass needs from a forward pass.
pub struct FsNetTrainCache<T> {
    pub stack: Array3<T>,
    sampler: Option<SamplerTrainCache<T>>,
    backbone_cache: crate::nn::backbone::ToyBackboneCache<T>,
    pub output: FsNetOutput<T>,
}

impl<T: Real> FsNet<T, ToyBackbone<T>> {
    pub fn new_toy(config: FsNetConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            saliency: SaliencyNet::new(4, 16, rng),
            backbone: ToyBackbone::new(4, config.num_classes, rng),
            config,
        })
    }
}

impl<T: Real, B: Backbone<T>> FsNet<T, B> {
    /// Gaze map + channel concat + uniform downsample: the shared stem.
    fn build_stack(&self, image: &Array3<T>, gaze: GazePoint<T>) -> Result<Array3<T>> {
        let (c, h, w) = image.dim();
        if c != 3 || h != self.config.input_h || w != self.config.input_w {
            return Err(Error::shape(
                format!("[3, {}, {}]", self.config.input_h, self.config.input_w),
                format!("{:?}", image.dim()),
                "model input image",
            ));
        }
        for &v in image.iter() {
            if !(v >= T::zero() && v <= T::one()) {
                return Err(Error::Validation(format!("image values must lie in [0,1], got {v}")));
            }
        }
        let gaze_map = build_gaze_map(h, w, gaze)?;
        let mut stack = Array3::zeros((4, h, w));
        stack.slice_mut(ndarray::s![..3, .., ..]).assign(image);
        stack
            .slice_mut(ndarray::s![3, .., ..])
            .assign(gaze_map.values());
        Ok(stack)
    }

    /// The all-ones density paired with the uniform grid (baseline mode).
    fn uniform_sampler_state(&self) -> (SaliencyMap<T>, SamplingGrid<T>) {
        let cfg = &self.config;
        let density = SaliencyMap::new(Array2::from_elem((cfg.input_h, cfg.input_w), T::one()))
            .expect("constant positive density");
        let grid = SamplingGrid::uniform(cfg.target_h, cfg.target_w, cfg.input_h, cfg.input_w);
        (density, grid)
    }

    /// Run the saliency half: density at full resolution plus the grid.
    fn density_and_grid(
        &self,
        stack: &Array3<T>,
        with_caches: bool,
    ) -> Result<(
        Array2<T>,
        Option<SaliencyNetCache<T>>,
        SaliencyMap<T>,
        SaliencyNormCache<T>,
        SamplingGrid<T>,
        GridCache<T>,
    )> {
        let cfg = &self.config;
        let small = uniform_downsample(stack, cfg.saliency_h, cfg.saliency_w)?;
        let (d_small, sal_cache) = if with_caches {
            let (y, c) = self.saliency.forward_cached(&small)?;
            (y, Some(c))
        } else {
            (self.saliency.forward(&small)?, None)
        };
        let d_full = bilinear_resize(&d_small, cfg.input_h, cfg.input_w);
        let raw_density = d_full.index_axis(ndarray::Axis(0), 0).to_owned();
        let (prepared, norm_cache) = normalize_saliency(&raw_density);
        let (grid_out, grid_cache) =
            compute_grid_with_cache(&prepared, cfg.target_h, cfg.target_w, cfg.kernel)?;
        Ok((raw_density, sal_cache, prepared, norm_cache, grid_out.grid, grid_cache))
    }

    fn heads(&self, warped: &Array3<T>) -> Result<(Array3<T>, Array1<T>, Array3<T>)> {
        let BackboneOut { seg_logits, cls_logits } = self.backbone.forward(warped)?;
        let y_bm = sigmoid(&seg_logits);
        let y_cls = softmax(&cls_logits);
        let y_cm = compose_mask(&y_bm, &y_cls)?;
        Ok((y_bm, y_cls, y_cm))
    }

    pub fn forward(&self, image: &Array3<T>, gaze: GazePoint<T>, mode: ForwardMode) -> Result<FsNetOutput<T>> {
        let stack = self.build_stack(image, gaze)?;
        let (prepared, grid) = match self.config.grid_mode {
            GridMode::Saliency => {
                let (_, _, prepared, _, grid, _) = self.density_and_grid(&stack, false)?;
                (prepared, grid)
            }
            GridMode::Uniform => self.uniform_sampler_state(),
        };
        let warp_mode = match mode {
            ForwardMode::Inference => WarpMode::Nearest,
            ForwardMode::Training => WarpMode::Bilinear,
        };
        let warped = warp(&stack, &grid, warp_mode)?;
        let (y_bm, y_cls, y_cm) = self.heads(&warped)?;
        Ok(FsNetOutput { y_bm, y_cls, y_cm, grid, saliency: prepared })
    }
}

impl<T: Real> FsNet<T, ToyBackbone<T>> {
    /// Training forward with all caches needed for the backward pass; always
    /// uses the bilinear warp.
    pub fn forward_train(&self, image: &Array3<T>, gaze: GazePoint<T>) -> Result<FsNetTrainCache<T>> {
        let stack = self.build_stack(image, gaze)?;
        let (sampler, prepared, grid) = match self.config.grid_mode {
            GridMode::Saliency => {
                let (raw_density, sal_cache, prepared, norm_cache, grid, grid_cache) =
                    self.density_and_grid(&stack, true)?;
                let state = SamplerTrainCache {
                    saliency_cache: sal_cache.expect("cached forward"),
                    raw_density,
                    norm_cache,
                    grid_cache,
                };
                (Some(state), prepared, grid)
            }
            GridMode::Uniform => {
                let (prepared, grid) = self.uniform_sampler_state();
                (None, prepared, grid)
            }
        };
        let warped = warp(&stack, &grid, WarpMode::Bilinear)?;
        let (backbone_out, backbone_cache) = self.backbone.forward_cached(&warped)?;
        let y_bm = sigmoid(&backbone_out.seg_logits);
        let y_cls = softmax(&backbone_out.cls_logits);
        let y_cm = compose_mask(&y_bm, &y_cls)?;
        Ok(FsNetTrainCache {
            stack,
            sampler,
            backbone_cache,
            output: FsNetOutput { y_bm, y_cls, y_cm, grid, saliency: prepared },
        })
    }

    /// Backpropagate `d L / d y_cm` into parameter gradients. The saliency
    /// and backbone gradient accumulators are optional so each training stage
    /// can freeze the other half.
    pub fn backward(
        &self,
        cache: &FsNetTrainCache<T>,
        d_y_cm: &Array3<T>,
        saliency_grads: Option<&mut SaliencyNetGrads<T>>,
        backbone_grads: Option<&mut ToyBackboneGrads<T>>,
    ) -> Result<()> {
        let out = &cache.output;
        let (d_bm, d_cls) = compose_mask_backward(&out.y_bm, &out.y_cls, d_y_cm);
        self.backward_from_probs(cache, &d_bm, &d_cls, saliency_grads, backbone_grads)
    }

    /// Backpropagate gradients given directly on the mask and class
    /// probabilities, bypassing the outer-product composition.
    pub fn backward_from_probs(
        &self,
        cache: &FsNetTrainCache<T>,
        d_bm: &Array3<T>,
        d_cls: &Array1<T>,
        saliency_grads: Option<&mut SaliencyNetGrads<T>>,
        backbone_grads: Option<&mut ToyBackboneGrads<T>>,
    ) -> Result<()> {
        let out = &cache.output;
        let d_seg_logits = sigmoid_backward(&out.y_bm, d_bm);
        let d_cls_logits = softmax_backward(&out.y_cls, d_cls);

        let mut scratch = self.backbone.zero_grads();
        let want_saliency = saliency_grads.is_some();
        let bb_grads = match backbone_grads {
            Some(g) => g,
            None => &mut scratch,
        };
        let d_warped = self
            .backbone
            .backward(&cache.backbone_cache, &d_seg_logits, &d_cls_logits, bb_grads)?;

        if let (Some(sal_grads), Some(sampler)) = (saliency_grads, cache.sampler.as_ref()) {
            let _ = want_saliency;
            let (d_gh, d_gw, _) = warp_backward(&cache.stack, &out.grid, &d_warped)?;
            let d_prepared = compute_grid_backward(
                &out.saliency,
                self.config.kernel,
                &out.grid,
                &sampler.grid_cache,
                &d_gh,
                &d_gw,
            );
            let d_raw =
                normalize_saliency_backward(&sampler.raw_density, &sampler.norm_cache, &d_prepared);
            let d_full = d_raw.insert_axis(ndarray::Axis(0));
            let d_small = bilinear_resize_backward((1, self.config.saliency_h, self.config.saliency_w), &d_full);
            self.saliency.backward(&sampler.saliency_cache, &d_small, sal_grads)?;
        }
        Ok(())
    }
}

/// Full-resolution prediction: reverse-sample the binary mask, threshold at
/// 0.5, and pick the argmax class (ties toward the lower index).
pub fn predict_fullres<T: Real>(out: &FsNetOutput<T>) -> Result<(Array2<bool>, usize)> {
    let up = unwarp(&out.y_bm, &out.grid)?;
    let (sh, sw) = out.grid.source_dims();
    let mut mask = Array2::from_elem((sh, sw), false);
    for p in 0..sh {
        for q in 0..sw {
            mask[[p, q]] = up.values[[0, p, q]] > T::half();
        }
    }
    let mut label = 0usize;
    for (k, &v) in out.y_cls.iter().enumerate() {
        if v > out.y_cls[label] {
            label = k;
        }
    }
    Ok((mask, label))
}

const CHECKPOINT_SCHEMA: u32 = 1;

/// Save weights plus a plain-text manifest into a directory.
pub fn save_checkpoint<T: Real>(model: &FsNet<T, ToyBackbone<T>>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    let cfg = &model.config;
    let _ = writeln!(manifest, "schema_version={CHECKPOINT_SCHEMA}");
    let _ = writeln!(manifest, "input_h={}", cfg.input_h);
    let _ = writeln!(manifest, "input_w={}", cfg.input_w);
    let _ = writeln!(manifest, "target_h={}", cfg.target_h);
    let _ = writeln!(manifest, "target_w={}", cfg.target_w);
    let _ = writeln!(manifest, "saliency_h={}", cfg.saliency_h);
    let _ = writeln!(manifest, "saliency_w={}", cfg.saliency_w);
    let _ = writeln!(manifest, "sigma={}", cfg.kernel.sigma());
    let _ = writeln!(manifest, "num_classes={}", cfg.num_classes);
    let _ = writeln!(
        manifest,
        "grid_mode={}",
        match cfg.grid_mode {
            GridMode::Saliency => "saliency",
            GridMode::Uniform => "uniform",
        }
    );

    let mut tensors: Vec<(&'static str, Vec<T>)> = Vec::new();
    for (name, slice) in model.saliency.param_slices() {
        tensors.push((name, slice.to_vec()));
    }
    for (name, slice) in model.backbone.param_slices() {
        tensors.push((name, slice.to_vec()));
    }
    for (name, data) in &tensors {
        let _ = writeln!(manifest, "tensor.{name}={}", data.len());
        let mut bytes = Vec::with_capacity(data.len() * 4);
        for &x in data {
            bytes.extend_from_slice(&(x.to_f64_lit() as f32).to_le_bytes());
        }
        std::fs::write(dir.join(format!("{name}.bin")), bytes)?;
    }
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Load a checkpoint saved by [`save_checkpoint`].
pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<FsNet<T, ToyBackbone<T>>> {
    let manifest = std::fs::read_to_string(dir.join("manifest.txt"))
        .map_err(|e| Error::Checkpoint(format!("missing manifest in {}: {e}", dir.display())))?;
    let mut keys = std::collections::BTreeMap::new();
    for line in manifest.lines() {
        if let Some((k, v)) = line.split_once('=') {
            keys.insert(k.to_string(), v.to_string());
        }
    }
    let get = |k: &str| -> Result<usize> {
        keys.get(k)
            .ok_or_else(|| Error::Checkpoint(format!("manifest missing key {k}")))?
            .parse::<usize>()
            .map_err(|e| Error::Checkpoint(format!("bad value for {k}: {e}")))
    };
    if get("schema_version")? != CHECKPOINT_SCHEMA as usize {
        return Err(Error::Checkpoint(format!(
            "unsupported schema version {}",
            keys["schema_version"]
        )));
    }
    let grid_mode = match keys.get("grid_mode").map(|s| s.as_str()) {
        Some("saliency") | None => GridMode::Saliency,
        Some("uniform") => GridMode::Uniform,
        Some(other) => {
            return Err(Error::Checkpoint(format!("unknown grid mode `{other}`")));
        }
    };
    let config = FsNetConfig {
        input_h: get("input_h")?,
        input_w: get("input_w")?,
        target_h: get("target_h")?,
        target_w: get("target_w")?,
        saliency_h: get("saliency_h")?,
        saliency_w: get("saliency_w")?,
        kernel: KernelSpec::new(get("sigma")?)?,
        num_classes: get("num_classes")?,
        grid_mode,
    };
    config.validate()?;
    let mut rng = rand::rngs::mock::StepRng::new(1, 1);
    let mut model = FsNet::<T, ToyBackbone<T>>::new_toy(config, &mut rng)?;
    let load_into = |slices: Vec<(&'static str, &mut [T])>| -> Result<()> {
        for (name, slice) in slices {
            let expected = get(&format!("tensor.{name}"))?;
            if expected != slice.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} length {expected} does not match model ({})",
                    slice.len()
                )));
            }
            let bytes = std::fs::read(dir.join(format!("{name}.bin")))?;
            if bytes.len() != 4 * slice.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor file {name}.bin has {} bytes, expected {}",
                    bytes.len(),
                    4 * slice.len()
                )));
            }
            for (i, chunk) in bytes.chunks_exact(4).enumerate() {
                let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
                slice[i] = T::from_f64_lit(v as f64);
            }
        }
        Ok(())
    };
    load_into(model.saliency.param_slices_mut())?;
    load_into(model.backbone.param_slices_mut())?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn toy_model(seed: u64) -> FsNet<f64, ToyBackbone<f64>> {
        let mut rng = StdRng::seed_from_u64(seed);
        let cfg = FsNetConfig::new((32, 32), (16, 16), KernelSpec::new(4).unwrap(), 3).unwrap();
        FsNet::new_toy(cfg, &mut rng).unwrap()
    }

    fn random_image(rng: &mut StdRng) -> Array3<f64> {
        Array3::from_shape_fn((3, 32, 32), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn forward_shapes_and_composition_identity() {
        let model = toy_model(1);
        let mut rng = StdRng::seed_from_u64(2);
        let image = random_image(&mut rng);
        let gaze = GazePoint::new(0.4, 0.6).unwrap();
        let out = model.forward(&image, gaze, ForwardMode::Inference).unwrap();
        assert_eq!(out.y_bm.dim(), (1, 16, 16));
        assert_eq!(out.y_cls.len(), 3);
        assert_eq!(out.y_cm.dim(), (3, 16, 16));
        assert_abs_diff_eq!(out.y_cls.sum(), 1.0, epsilon = 1e-9);
        for ((c, i, j), &v) in out.y_cm.indexed_iter() {
            assert_abs_diff_eq!(v, out.y_cls[c] * out.y_bm[[0, i, j]], epsilon = 1e-15);
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn forward_is_deterministic_in_inference_mode() {
        let model = toy_model(3);
        let mut rng = StdRng::seed_from_u64(4);
        let image = random_image(&mut rng);
        let gaze = GazePoint::new(0.25, 0.75).unwrap();
        let a = model.forward(&image, gaze, ForwardMode::Inference).unwrap();
        let b = model.forward(&image, gaze, ForwardMode::Inference).unwrap();
        assert_eq!(a.y_bm, b.y_bm);
        assert_eq!(a.y_cls, b.y_cls);
        assert_eq!(a.y_cm, b.y_cm);
        assert_eq!(a.grid, b.grid);
    }

    #[test]
    fn compose_mask_examples() {
        let mut y_bm = Array3::<f64>::zeros((1, 2, 2));
        y_bm[[0, 0, 0]] = 0.8;
        y_bm[[0, 1, 1]] = 0.3;
        // One-hot class 2.
        let y_cls = ndarray::arr1(&[0.0, 0.0, 1.0]);
        let y_cm = compose_mask(&y_bm, &y_cls).unwrap();
        assert_eq!(y_cm.index_axis(ndarray::Axis(0), 2).to_owned(), y_bm.index_axis(ndarray::Axis(0), 0).to_owned());
        assert!(y_cm.slice(ndarray::s![..2, .., ..]).iter().all(|&v| v == 0.0));

        // Uniform classes on an all-ones mask: every channel 1/C.
        let ones = Array3::<f64>::from_elem((1, 2, 2), 1.0);
        let uniform = ndarray::arr1(&[0.25, 0.25, 0.25, 0.25]);
        let y_cm = compose_mask(&ones, &uniform).unwrap();
        assert!(y_cm.iter().all(|&v| (v - 0.25).abs() < 1e-15));

        // Channel sums reproduce the binary mask when classes sum to 1.
        let y_cls = ndarray::arr1(&[0.2, 0.5, 0.3]);
        let y_cm = compose_mask(&y_bm, &y_cls).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let s: f64 = (0..3).map(|c| y_cm[[c, i, j]]).sum();
                assert_abs_diff_eq!(s, y_bm[[0, i, j]], epsilon = 1e-12);
            }
        }

        assert!(compose_mask(&Array3::<f64>::zeros((2, 2, 2)), &y_cls).is_err());
    }

    /// Backbone stub pinning the mask logits to -inf: the composed mask must
    /// vanish identically.
    struct NegInfSeg {
        classes: usize,
    }

    impl Backbone<f64> for NegInfSeg {
        fn num_classes(&self) -> usize {
            self.classes
        }
        fn forward(&self, x: &Array3<f64>) -> crate::error::Result<BackboneOut<f64>> {
            let (_, h, w) = x.dim();
            Ok(BackboneOut {
                seg_logits: Array3::from_elem((1, h, w), -1e30),
                cls_logits: Array1::zeros(self.classes),
            })
        }
    }

    #[test]
    fn zero_mask_annihilates_composition() {
        let donor = toy_model(5);
        let model = FsNet {
            config: donor.config,
            saliency: donor.saliency,
            backbone: NegInfSeg { classes: 3 },
        };
        let mut rng = StdRng::seed_from_u64(6);
        let image = random_image(&mut rng);
        let out = model
            .forward(&image, GazePoint::new(0.5, 0.5).unwrap(), ForwardMode::Inference)
            .unwrap();
        assert!(out.y_bm.iter().all(|&v| v == 0.0));
        assert!(out.y_cm.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grid_is_invariant_to_density_rescaling() {
        // Scaling the raw saliency output leaves the normalized map, and so
        // the grid, unchanged.
        let mut rng = StdRng::seed_from_u64(7);
        let raw: Array2<f64> = Array2::from_shape_fn((32, 32), |_| rng.gen_range(0.1..3.0));
        let (norm_a, _) = normalize_saliency(&raw);
        let (norm_b, _) = normalize_saliency(&raw.mapv(|x| x * 10.0));
        let spec = KernelSpec::new(4).unwrap();
        let ga = crate::sampler::compute_grid(&norm_a, 16, 16, spec).unwrap();
        let gb = crate::sampler::compute_grid(&norm_b, 16, 16, spec).unwrap();
        let mut drift = 0.0f64;
        for (a, b) in ga.grid.gh().iter().zip(gb.grid.gh().iter()) {
            drift = drift.max((a - b).abs());
        }
        for (a, b) in ga.grid.gw().iter().zip(gb.grid.gw().iter()) {
            drift = drift.max((a - b).abs());
        }
        assert!(drift <= 1e-4, "grid drift {drift}");
    }

    #[test]
    fn predict_fullres_semantics() {
        let grid = SamplingGrid::<f64>::uniform(4, 4, 8, 8);
        let out = FsNetOutput {
            y_bm: Array3::from_elem((1, 4, 4), 1.0),
            y_cls: ndarray::arr1(&[0.2, 0.5, 0.3]),
            y_cm: Array3::zeros((3, 4, 4)),
            grid: grid.clone(),
            saliency: SaliencyMap::new(Array2::from_elem((8, 8), 1.0)).unwrap(),
        };
        let (mask, label) = predict_fullres(&out).unwrap();
        assert!(mask.iter().all(|&m| m));
        assert_eq!(label, 1);

        // Tie-break toward the lower class index.
        let out = FsNetOutput {
            y_cls: ndarray::arr1(&[0.5, 0.5]),
            ..FsNetOutput {
                y_bm: Array3::zeros((1, 4, 4)),
                y_cls: ndarray::arr1(&[0.5, 0.5]),
                y_cm: Array3::zeros((2, 4, 4)),
                grid,
                saliency: SaliencyMap::new(Array2::from_elem((8, 8), 1.0)).unwrap(),
            }
        };
        let (_, label) = predict_fullres(&out).unwrap();
        assert_eq!(label, 0);
    }

    #[test]
    fn stage1_gradient_chain_matches_finite_differences() {
        // End-to-end check through heads, warp, grid, normalization, resize
        // and the saliency net, probing a handful of saliency parameters.
        let model = toy_model(11);
        let mut rng = StdRng::seed_from_u64(12);
        let image = random_image(&mut rng);
        let gaze = GazePoint::new(0.5, 0.5).unwrap();
        let probe = Array3::from_shape_fn((3, 16, 16), |_| rng.gen_range(-1.0..1.0));

        let cache = model.forward_train(&image, gaze).unwrap();
        let mut sal_grads = model.saliency.zero_grads();
        model.backward(&cache, &probe, Some(&mut sal_grads), None).unwrap();
        let analytic = SaliencyNet::grad_slices(&sal_grads);

        let objective = |m: &FsNet<f64, ToyBackbone<f64>>| {
            let c = m.forward_train(&image, gaze).unwrap();
            (&c.output.y_cm * &probe).sum()
        };
        let step = 1e-5;
        let mut checked = 0;
        for trial in 0..40 {
            let slot = trial % analytic.len();
            if analytic[slot].is_empty() {
                continue;
            }
            let idx = rng.gen_range(0..analytic[slot].len());
            let a = analytic[slot][idx];
            if a.abs() < 1e-7 {
                continue;
            }
            let mut plus = model.clone();
            plus.saliency.param_slices_mut()[slot].1[idx] += step;
            let mut minus = model.clone();
            minus.saliency.param_slices_mut()[slot].1[idx] -= step;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * step);
            let denom = a.abs().max(numeric.abs());
            assert!(
                (a - numeric).abs() / denom < 1e-3,
                "saliency grad mismatch slot {slot} idx {idx}: {a} vs {numeric}"
            );
            checked += 1;
        }
        assert!(checked >= 10, "too few informative parameters checked ({checked})");
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = toy_model(21);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model, dir.path()).unwrap();
        let loaded: FsNet<f64, ToyBackbone<f64>> = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded.config, model.config);

        let mut rng = StdRng::seed_from_u64(22);
        let image = random_image(&mut rng);
        let gaze = GazePoint::new(0.3, 0.3).unwrap();
        let a = model.forward(&image, gaze, ForwardMode::Inference).unwrap();
        let b = loaded.forward(&image, gaze, ForwardMode::Inference).unwrap();
        // Weights round-trip through f32 storage; f64 inference differs only
        // by that quantization.
        for (x, y) in a.y_cm.iter().zip(b.y_cm.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-5);
        }
    }

    use rand::Rng;
}
