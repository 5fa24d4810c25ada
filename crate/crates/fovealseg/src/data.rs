//! Gaze-aware dataset preprocessing, class-balanced gaze sampling, synthetic
//! scene and sequence generation, and trace ingestion.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gaze::{gaze_displacement_sq, GazePoint, GazeTrace};
use crate::rng::SeedSplitter;
use crate::scalar::Real;

/// An instance region: a simple polygon in pixel coordinates (x right,
/// y down) or an explicit bitmap.
#[derive(Debug, Clone, PartialEq)]
pub enum Region {
    Polygon(Vec<(f64, f64)>),
    Bitmap(Array2<bool>),
}

impl Region {
    /// Pixel membership on an `H x W` canvas; polygon membership is tested at
    /// pixel centers with the even-odd rule via scanline filling.
    pub fn rasterize(&self, height: usize, width: usize) -> Result<Array2<bool>> {
        match self {
            Region::Bitmap(b) => {
                if b.dim() != (height, width) {
                    return Err(Error::shape(
                        format!("{height}x{width}"),
                        format!("{:?}", b.dim()),
                        "bitmap region",
                    ));
                }
                Ok(b.clone())
            }
            Region::Polygon(pts) => {
                if pts.len() < 3 {
                    return Err(Error::Validation("polygon needs at least 3 vertices".into()));
                }
                let mut mask = Array2::from_elem((height, width), false);
                let n = pts.len();
                let mut crossings: Vec<f64> = Vec::with_capacity(8);
                for row in 0..height {
                    let y = row as f64 + 0.5;
                    crossings.clear();
                    for e in 0..n {
                        let (x1, y1) = pts[e];
                        let (x2, y2) = pts[(e + 1) % n];
                        // Half-open rule avoids double counting at vertices.
                        if (y1 <= y && y2 > y) || (y2 <= y && y1 > y) {
                            let t = (y - y1) / (y2 - y1);
                            crossings.push(x1 + t * (x2 - x1));
                        }
                    }
                    crossings.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    for pair in crossings.chunks_exact(2) {
                        let (lo, hi) = (pair[0], pair[1]);
                        let q_lo = (lo - 0.5).ceil().max(0.0) as usize;
                        let q_hi = (hi - 0.5).floor().min(width as f64 - 1.0);
                        if q_hi < 0.0 {
                            continue;
                        }
                        for q in q_lo..=(q_hi as usize) {
                            // Pixel center q+0.5 inside [lo, hi).
                            if (q as f64 + 0.5) >= lo && (q as f64 + 0.5) < hi {
                                mask[[row, q]] = true;
                            }
                        }
                    }
                }
                Ok(mask)
            }
        }
    }

    /// Simplicity check for polygons: no two non-adjacent edges intersect.
    pub fn validate_simple(&self) -> Result<()> {
        let pts = match self {
            Region::Bitmap(_) => return Ok(()),
            Region::Polygon(p) => p,
        };
        let n = pts.len();
        if n < 3 {
            return Err(Error::Validation("polygon needs at least 3 vertices".into()));
        }
        for i in 0..n {
            for j in i + 1..n {
                // Skip adjacent edges (they share a vertex).
                if j == i || (j + 1) % n == i || (i + 1) % n == j {
                    continue;
                }
                let (a, b) = (pts[i], pts[(i + 1) % n]);
                let (c, d) = (pts[j], pts[(j + 1) % n]);
                if segments_intersect(a, b, c, d) {
                    return Err(Error::Validation(format!(
                        "polygon self-intersects between edges {i} and {j}"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn segments_intersect(a: (f64, f64), b: (f64, f64), c: (f64, f64), d: (f64, f64)) -> bool {
    let cross = |o: (f64, f64), p: (f64, f64), q: (f64, f64)| {
        (p.0 - o.0) * (q.1 - o.1) - (p.1 - o.1) * (q.0 - o.0)
    };
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
}

/// One annotated object instance.
#[derive(Debug, Clone)]
pub struct Instance {
    pub class_id: usize,
    pub region: Region,
}

/// A scene with overlapping instances; later list entries are in front.
#[derive(Debug, Clone)]
pub struct AnnotatedScene<T> {
    pub image: Array3<T>, // [3, H, W] in [0, 1]
    pub instances: Vec<Instance>,
}

impl<T: Real> AnnotatedScene<T> {
    pub fn dims(&self) -> (usize, usize) {
        let (_, h, w) = self.image.dim();
        (h, w)
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for inst in &self.instances {
            if inst.class_id >= num_classes {
                return Err(Error::Validation(format!(
                    "class id {} out of range [0,{num_classes})",
                    inst.class_id
                )));
            }
            inst.region.validate_simple()?;
        }
        Ok(())
    }
}

/// One supervised unit: image, gaze, the binary instance-of-interest mask
/// and its class.
#[derive(Debug, Clone)]
pub struct FovealSample<T> {
    pub image: Array3<T>,
    pub gaze: GazePoint<T>,
    pub y_binary: Array2<bool>,
    pub class_id: usize,
    pub source: String,
}

impl<T: Real> FovealSample<T> {
    pub fn new(
        image: Array3<T>,
        gaze: GazePoint<T>,
        y_binary: Array2<bool>,
        class_id: usize,
        source: String,
    ) -> Result<Self> {
        let (_, h, w) = image.dim();
        if y_binary.dim() != (h, w) {
            return Err(Error::shape(
                format!("{h}x{w}"),
                format!("{:?}", y_binary.dim()),
                "sample mask",
            ));
        }
        let (r, c) = gaze.to_pixel(h, w);
        if !y_binary[[r, c]] {
            return Err(Error::Validation(format!(
                "gaze pixel ({r},{c}) lies outside the instance mask"
            )));
        }
        Ok(Self { image, gaze, y_binary, class_id, source })
    }

    /// One-hot label map over `num_classes + 1` channels; channel 0 is
    /// background, instance classes follow.
    pub fn one_hot(&self, num_classes: usize) -> Array3<T> {
        let (h, w) = self.y_binary.dim();
        let mut out = Array3::zeros((num_classes + 1, h, w));
        for i in 0..h {
            for j in 0..w {
                if self.y_binary[[i, j]] {
                    out[[self.class_id + 1, i, j]] = T::one();
                } else {
                    out[[0, i, j]] = T::one();
                }
            }
        }
        out
    }
}

/// Train/validation split of foveal samples.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub train: Vec<FovealSample<T>>,
    pub val: Vec<FovealSample<T>>,
}

impl<T: Real> Dataset<T> {
    /// First `n_train` samples train, the rest validate.
    pub fn from_split(mut samples: Vec<FovealSample<T>>, n_train: usize) -> Self {
        let val = samples.split_off(n_train.min(samples.len()));
        Self { train: samples, val }
    }
}

/// Reduce a scene to the instance the gaze rests on: the front-most instance
/// containing the gaze pixel becomes the binary ground truth.
pub fn gaze_to_ioi<T: Real>(scene: &AnnotatedScene<T>, gaze: GazePoint<T>) -> Result<FovealSample<T>> {
    let (h, w) = scene.dims();
    let (r, c) = gaze.to_pixel(h, w);
    for inst in scene.instances.iter().rev() {
        let mask = inst.region.rasterize(h, w)?;
        if mask[[r, c]] {
            return FovealSample::new(scene.image.clone(), gaze, mask, inst.class_id, "scene".into());
        }
    }
    Err(Error::NoInstanceAtGaze)
}

/// Per-class draw counts used to keep gaze sampling balanced.
#[derive(Debug, Clone)]
pub struct ClassBalancer {
    counts: Vec<u64>,
}

impl ClassBalancer {
    pub fn new(num_classes: usize) -> Self {
        Self { counts: vec![0; num_classes] }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn record(&mut self, class_id: usize) {
        self.counts[class_id] += 1;
    }

    /// Classes present in the scene whose draw count is minimal.
    fn most_under_quota(&self, present: &[usize]) -> Option<usize> {
        present.iter().copied().min_by_key(|&c| (self.counts[c], c))
    }
}

/// Sample a gaze point uniformly from the interior of an instance whose
/// class is most under quota, and update the tracker.
pub fn sample_gaze<T: Real>(
    scene: &AnnotatedScene<T>,
    rng: &mut impl Rng,
    balance: &mut ClassBalancer,
) -> Result<GazePoint<T>> {
    let (h, w) = scene.dims();
    let present: Vec<usize> = scene.instances.iter().map(|i| i.class_id).collect();
    let class = balance.most_under_quota(&present).ok_or(Error::NoInstanceAtGaze)?;
    let candidates: Vec<usize> = scene
        .instances
        .iter()
        .enumerate()
        .filter(|(_, inst)| inst.class_id == class)
        .map(|(idx, _)| idx)
        .collect();
    let pick = candidates[rng.gen_range(0..candidates.len())];
    let mask = scene.instances[pick].region.rasterize(h, w)?;
    let interior: Vec<(usize, usize)> = mask
        .indexed_iter()
        .filter(|(_, &m)| m)
        .map(|(idx, _)| idx)
        .collect();
    if interior.is_empty() {
        return Err(Error::NoInstanceAtGaze);
    }
    let (r, c) = interior[rng.gen_range(0..interior.len())];
    balance.record(class);
    GazePoint::from_pixel(r, c, h, w)
}

/// Uniformly sample an interior pixel of an instance of the given class.
pub fn sample_gaze_in_class<T: Real>(
    scene: &AnnotatedScene<T>,
    class_id: usize,
    rng: &mut impl Rng,
) -> Result<GazePoint<T>> {
    let (h, w) = scene.dims();
    let candidates: Vec<usize> = scene
        .instances
        .iter()
        .enumerate()
        .filter(|(_, inst)| inst.class_id == class_id)
        .map(|(i, _)| i)
        .collect();
    if candidates.is_empty() {
        return Err(Error::NoInstanceAtGaze);
    }
    let inst = &scene.instances[candidates[rng.gen_range(0..candidates.len())]];
    let mask = inst.region.rasterize(h, w)?;
    let interior: Vec<(usize, usize)> =
        mask.indexed_iter().filter(|(_, &m)| m).map(|(idx, _)| idx).collect();
    if interior.is_empty() {
        return Err(Error::NoInstanceAtGaze);
    }
    let (r, c) = interior[rng.gen_range(0..interior.len())];
    GazePoint::from_pixel(r, c, h, w)
}

/// Shape vocabulary; the variant index is the class id.
pub const SHAPE_CLASSES: [&str; 3] = ["rectangle", "disk", "triangle"];

/// Synthetic scene generator settings.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SyntheticSpec {
    pub canvas_h: usize,
    pub canvas_w: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { canvas_h: 32, canvas_w: 32, min_shapes: 2, max_shapes: 5 }
    }
}

impl SyntheticSpec {
    pub fn num_classes(&self) -> usize {
        SHAPE_CLASSES.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.canvas_h < 16 || self.canvas_w < 16 {
            return Err(Error::Config("canvas must be at least 16x16".into()));
        }
        if self.min_shapes < 1 || self.max_shapes < self.min_shapes {
            return Err(Error::Config("shape count range invalid".into()));
        }
        Ok(())
    }
}

/// Scene plus generation diagnostics.
#[derive(Debug, Clone)]
pub struct SceneOutput<T> {
    pub scene: AnnotatedScene<T>,
    /// Set when rejection sampling could not place all requested shapes.
    pub placement_reduced: bool,
}

fn shape_polygon(class: usize, cy: f64, cx: f64, size: f64, rng: &mut impl Rng) -> Vec<(f64, f64)> {
    match class {
        0 => {
            // Axis-aligned rectangle, side ratio in [0.6, 1.6].
            let ratio = rng.gen_range(0.6..1.6);
            let hw = (size * ratio / 2.0).max(1.5);
            let hh = (size / ratio / 2.0).max(1.5);
            vec![
                (cx - hw, cy - hh),
                (cx + hw, cy - hh),
                (cx + hw, cy + hh),
                (cx - hw, cy + hh),
            ]
        }
        1 => {
            // Disk as a regular 24-gon.
            let r = (size / 2.0).max(2.0);
            (0..24)
                .map(|k| {
                    let a = k as f64 * std::f64::consts::TAU / 24.0;
                    (cx + r * a.cos(), cy + r * a.sin())
                })
                .collect()
        }
        _ => {
            // Upright isosceles triangle.
            let half = (size / 2.0).max(2.2);
            vec![(cx, cy - half), (cx + half, cy + half), (cx - half, cy + half)]
        }
    }
}

/// Deterministic scene for `(spec, seed)`: shapes are mutually
/// non-overlapping, each at least 9 pixels, on a noisy background.
pub fn generate_synthetic_scene<T: Real>(spec: &SyntheticSpec, seed: u64) -> Result<SceneOutput<T>> {
    spec.validate()?;
    let split = SeedSplitter::new(seed);
    let mut rng: ChaCha8Rng = split.rng("scene", 0);
    let (h, w) = (spec.canvas_h, spec.canvas_w);

    let base: f64 = rng.gen_range(0.35..0.65);
    let mut image = Array3::from_shape_fn((3, h, w), |_| {
        T::from_f64_lit((base + rng.gen_range(-0.03..0.03)).clamp(0.0, 1.0))
    });

    let want = rng.gen_range(spec.min_shapes..=spec.max_shapes);
    let mut occupied = Array2::from_elem((h, w), false);
    let mut instances = Vec::new();
    let mut placement_reduced = false;
    // Per-class color families keep classes learnable by a small model:
    // reddish rectangles, greenish disks, bluish triangles.
    for _ in 0..want {
        let class = rng.gen_range(0..SHAPE_CLASSES.len());
        let mut placed = false;
        for _attempt in 0..100 {
            let size = rng.gen_range(3.5..7.5);
            let margin = size / 2.0 + 1.0;
            if 2.0 * margin + 2.0 >= h.min(w) as f64 {
                continue;
            }
            let cy = rng.gen_range(margin..h as f64 - margin);
            let cx = rng.gen_range(margin..w as f64 - margin);
            let poly = shape_polygon(class, cy, cx, size, &mut rng);
            let region = Region::Polygon(poly);
            let mask = region.rasterize(h, w)?;
            let area = mask.iter().filter(|&&m| m).count();
            if area < 9 {
                continue;
            }
            // Require a one-pixel gap to the other shapes.
            let mut clash = false;
            'scan: for i in 0..h {
                for j in 0..w {
                    if mask[[i, j]] {
                        for di in -1isize..=1 {
                            for dj in -1isize..=1 {
                                let (p, q) = (i as isize + di, j as isize + dj);
                                if p >= 0 && q >= 0 && (p as usize) < h && (q as usize) < w
                                    && occupied[[p as usize, q as usize]]
                                {
                                    clash = true;
                                    break 'scan;
                                }
                            }
                        }
                    }
                }
            }
            if clash {
                continue;
            }
            // Paint the shape with a class-family color.
            let color: [f64; 3] = match class {
                0 => [rng.gen_range(0.65..0.95), rng.gen_range(0.05..0.3), rng.gen_range(0.05..0.3)],
                1 => [rng.gen_range(0.05..0.3), rng.gen_range(0.65..0.95), rng.gen_range(0.05..0.3)],
                _ => [rng.gen_range(0.05..0.3), rng.gen_range(0.05..0.3), rng.gen_range(0.65..0.95)],
            };
            for i in 0..h {
                for j in 0..w {
                    if mask[[i, j]] {
                        occupied[[i, j]] = true;
                        for (ch, &col) in color.iter().enumerate() {
                            let jitter = rng.gen_range(-0.02..0.02);
                            image[[ch, i, j]] = T::from_f64_lit((col + jitter).clamp(0.0, 1.0));
                        }
                    }
                }
            }
            instances.push(Instance { class_id: class, region });
            placed = true;
            break;
        }
        if !placed {
            placement_reduced = true;
        }
    }
    if instances.is_empty() {
        return Err(Error::Validation("no shapes could be placed".into()));
    }
    Ok(SceneOutput {
        scene: AnnotatedScene { image, instances },
        placement_reduced,
    })
}

/// Build a class-balanced synthetic corpus of foveal samples.
pub fn generate_synthetic_corpus<T: Real>(
    spec: &SyntheticSpec,
    seed: u64,
    count: usize,
) -> Result<Vec<FovealSample<T>>> {
    let split = SeedSplitter::new(seed);
    let mut balance = ClassBalancer::new(spec.num_classes());
    let mut samples = Vec::with_capacity(count);
    let mut scene_idx = 0u64;
    while samples.len() < count {
        let out = generate_synthetic_scene::<T>(spec, split.seed("corpus-scene", scene_idx))?;
        let mut rng = split.rng("corpus-gaze", scene_idx);
        scene_idx += 1;
        let gaze = match sample_gaze(&out.scene, &mut rng, &mut balance) {
            Ok(g) => g,
            Err(Error::NoInstanceAtGaze) => continue,
            Err(e) => return Err(e),
        };
        let mut sample = gaze_to_ioi(&out.scene, gaze)?;
        sample.source = format!("synthetic:{}", scene_idx - 1);
        samples.push(sample);
    }
    Ok(samples)
}

/// Settings for multi-frame synthetic sequences.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SequenceSpec {
    pub scene: SyntheticSpec,
    pub fps: f64,
    /// Expected saccades per second during fixation (gaze jumps between
    /// instances of the same scene).
    pub saccade_rate: f64,
    /// Per-frame probability of an abrupt scene shift (head movement).
    pub scene_change_prob: f64,
    /// Uniform per-axis gaze jitter amplitude during fixation, normalized.
    pub gaze_jitter: f64,
    /// Uniform per-pixel frame noise amplitude.
    pub frame_noise: f64,
}

impl Default for SequenceSpec {
    fn default() -> Self {
        Self {
            scene: SyntheticSpec::default(),
            fps: 30.0,
            saccade_rate: 2.0,
            scene_change_prob: 0.05,
            gaze_jitter: 0.01,
            frame_noise: 0.008,
        }
    }
}

impl SequenceSpec {
    /// Preset matching the reference gaze-behavior statistic: roughly 35% of
    /// consecutive frame pairs fall below the 0.037 frame-difference
    /// threshold, i.e. frequent head movement.
    pub fn busy_reference() -> Self {
        Self { scene_change_prob: 0.65, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if !(self.fps > 0.0) {
            return Err(Error::Config("fps must be positive".into()));
        }
        if self.saccade_rate < 0.0 || !(0.0..=1.0).contains(&self.scene_change_prob) {
            return Err(Error::Config("invalid sequence rates".into()));
        }
        if self.saccade_rate / self.fps > 1.0 {
            return Err(Error::Config("saccade rate exceeds one per frame".into()));
        }
        Ok(())
    }
}

/// Generator ground truth for a sequence.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SequenceTruth {
    /// Frame indices opening each segment (first is always 0).
    pub segment_starts: Vec<usize>,
    /// Frames on which the gaze jumped (saccade), including jumps that
    /// accompany scene shifts.
    pub saccade_frames: Vec<usize>,
    /// Of the within-segment consecutive gaze pairs, the fraction that are
    /// fixation jitter rather than saccade jumps.
    pub fixation_fraction: f64,
}

/// A generated sequence: frames, the gaze trace, and the ground truth.
pub struct SyntheticSequence<T> {
    pub frames: Vec<Array3<T>>,
    pub trace: GazeTrace<T>,
    pub truth: SequenceTruth,
    /// The scene active on each frame, for mask oracles.
    pub scenes: Vec<AnnotatedScene<T>>,
}

const MIN_SACCADE_DIST: f64 = 0.15;

fn frame_mean_abs_diff<T: Real>(a: &Array3<T>, b: &Array3<T>) -> f64 {
    let mut acc = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        acc += (x.to_f64_lit() - y.to_f64_lit()).abs();
    }
    acc / a.len() as f64
}

/// Generate `frames` frames of piecewise-static scenes with gaze fixations,
/// in-scene saccades and abrupt scene shifts.
pub fn generate_synthetic_sequence<T: Real>(
    spec: &SequenceSpec,
    seed: u64,
    frames: usize,
) -> Result<SyntheticSequence<T>> {
    spec.validate()?;
    if frames == 0 {
        return Err(Error::Config("sequence needs at least one frame".into()));
    }
    let split = SeedSplitter::new(seed);
    let mut rng = split.rng("sequence", 0);
    let beta_guard = 0.037;

    let mut scene_counter = 0u64;
    let new_scene = |counter: &mut u64| -> Result<AnnotatedScene<T>> {
        let s = generate_synthetic_scene::<T>(&spec.scene, split.seed("seq-scene", *counter))?;
        *counter += 1;
        Ok(s.scene)
    };

    let noisy = |scene: &AnnotatedScene<T>, rng: &mut ChaCha8Rng, amp: f64| -> Array3<T> {
        scene.image.mapv(|v| {
            T::from_f64_lit((v.to_f64_lit() + rng.gen_range(-amp..amp)).clamp(0.0, 1.0))
        })
    };

    // Uniform gaze point inside a random instance, at least `min_dist` from
    // `away_from` when possible.
    let pick_gaze = |scene: &AnnotatedScene<T>,
                     rng: &mut ChaCha8Rng,
                     away_from: Option<GazePoint<T>>|
     -> Result<GazePoint<T>> {
        let (h, w) = scene.dims();
        let mut fallback = None;
        for _ in 0..60 {
            let inst = &scene.instances[rng.gen_range(0..scene.instances.len())];
            let mask = inst.region.rasterize(h, w)?;
            let interior: Vec<(usize, usize)> =
                mask.indexed_iter().filter(|(_, &m)| m).map(|(i, _)| i).collect();
            if interior.is_empty() {
                continue;
            }
            let (r, c) = interior[rng.gen_range(0..interior.len())];
            let g = GazePoint::from_pixel(r, c, h, w)?;
            match away_from {
                Some(prev) => {
                    let dist = gaze_displacement_sq(g, prev).to_f64_lit().sqrt();
                    if dist >= MIN_SACCADE_DIST {
                        return Ok(g);
                    }
                    fallback = Some(g);
                }
                None => return Ok(g),
            }
        }
        fallback.ok_or(Error::NoInstanceAtGaze)
    };

    let mut scene = new_scene(&mut scene_counter)?;
    let mut fix_point = pick_gaze(&scene, &mut rng, None)?;
    let mut segment_starts = vec![0usize];
    let mut saccade_frames = Vec::new();
    let mut out_frames = Vec::with_capacity(frames);
    let mut scenes = Vec::with_capacity(frames);
    let mut entries = Vec::with_capacity(frames);
    let mut segment_init: Option<Array3<T>> = None;
    // Pair bookkeeping for the fixation fraction.
    let mut in_segment_pairs = 0usize;
    let mut in_segment_jitter_pairs = 0usize;

    for t in 0..frames {
        let mut opened_segment = false;
        let mut saccade = false;
        if t > 0 {
            if rng.gen_bool(spec.scene_change_prob) {
                // Head movement: new scene, gaze jumps with it.
                scene = new_scene(&mut scene_counter)?;
                fix_point = pick_gaze(&scene, &mut rng, Some(fix_point))?;
                opened_segment = true;
                saccade = true;
            } else if scene.instances.len() > 1 && rng.gen_bool(spec.saccade_rate / spec.fps) {
                // In-scene saccade to another instance.
                fix_point = pick_gaze(&scene, &mut rng, Some(fix_point))?;
                saccade = true;
            }
        }

        // Frame pixels: scene plus per-frame noise; regenerate a scene-shift
        // frame until the difference against the old segment is decisive.
        let frame = if opened_segment {
            let init = segment_init.as_ref().expect("segment initialized");
            let mut candidate = noisy(&scene, &mut rng, spec.frame_noise);
            let mut guard = 0;
            while frame_mean_abs_diff(&candidate, init) <= beta_guard * 1.3 && guard < 25 {
                scene = new_scene(&mut scene_counter)?;
                fix_point = pick_gaze(&scene, &mut rng, Some(fix_point))?;
                candidate = noisy(&scene, &mut rng, spec.frame_noise);
                guard += 1;
            }
            candidate
        } else {
            noisy(&scene, &mut rng, spec.frame_noise)
        };

        if opened_segment {
            segment_starts.push(t);
            segment_init = Some(frame.clone());
        } else if t == 0 {
            segment_init = Some(frame.clone());
        }
        if saccade {
            saccade_frames.push(t);
        }
        if t > 0 && !opened_segment {
            in_segment_pairs += 1;
            if !saccade {
                in_segment_jitter_pairs += 1;
            }
        }

        // Gaze: fixation jitter around the fixation point.
        let gaze = if saccade {
            fix_point
        } else {
            let jitter = spec.gaze_jitter;
            let u = (fix_point.u().to_f64_lit() + rng.gen_range(-jitter..jitter)).clamp(0.0, 1.0);
            let v = (fix_point.v().to_f64_lit() + rng.gen_range(-jitter..jitter)).clamp(0.0, 1.0);
            GazePoint::new(T::from_f64_lit(u), T::from_f64_lit(v))?
        };

        entries.push((t as f64 / spec.fps, gaze));
        out_frames.push(frame);
        scenes.push(scene.clone());
    }

    let fixation_fraction = if in_segment_pairs == 0 {
        1.0
    } else {
        in_segment_jitter_pairs as f64 / in_segment_pairs as f64
    };
    Ok(SyntheticSequence {
        frames: out_frames,
        trace: GazeTrace::new(entries)?,
        truth: SequenceTruth { segment_starts, saccade_frames, fixation_fraction },
        scenes,
    })
}

/// Parse a gaze trace file (`timestamp,u,v` rows after a header line).
pub fn load_trace<T: Real>(path: &Path) -> Result<GazeTrace<T>> {
    let text = std::fs::read_to_string(path)?;
    GazeTrace::parse_csv(&text)
}

// ---------------------------------------------------------------------------
// Reference dataset adapter: images/ + annotations/ with polygon JSON.
// ---------------------------------------------------------------------------

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct InstanceJson {
    class: usize,
    polygon: Vec<[f64; 2]>,
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct SceneJson {
    image: String,
    instances: Vec<InstanceJson>,
}

/// Load one scene from an annotation JSON; the image path is resolved
/// relative to the annotation file.
pub fn load_annotated_scene<T: Real>(annotation: &Path) -> Result<AnnotatedScene<T>> {
    let text = std::fs::read_to_string(annotation)?;
    let parsed: SceneJson = serde_json::from_str(&text)?;
    let image_path = annotation
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&parsed.image);
    let image = read_image(&image_path)?;
    let instances = parsed
        .instances
        .into_iter()
        .map(|inst| Instance {
            class_id: inst.class,
            region: Region::Polygon(inst.polygon.into_iter().map(|p| (p[0], p[1])).collect()),
        })
        .collect();
    let scene = AnnotatedScene { image, instances };
    for inst in &scene.instances {
        inst.region.validate_simple()?;
    }
    Ok(scene)
}

/// Write a scene as `images/<stem>.png` + `annotations/<stem>.json`.
pub fn write_annotated_scene<T: Real>(scene: &AnnotatedScene<T>, dir: &Path, stem: &str) -> Result<()> {
    let images = dir.join("images");
    let annotations = dir.join("annotations");
    std::fs::create_dir_all(&images)?;
    std::fs::create_dir_all(&annotations)?;
    write_image(&scene.image, &images.join(format!("{stem}.png")))?;
    let json = SceneJson {
        image: format!("../images/{stem}.png"),
        instances: scene
            .instances
            .iter()
            .map(|inst| {
                let polygon = match &inst.region {
                    Region::Polygon(p) => p.iter().map(|&(x, y)| [x, y]).collect(),
                    Region::Bitmap(_) => Vec::new(),
                };
                InstanceJson { class: inst.class_id, polygon }
            })
            .collect(),
    };
    std::fs::write(
        annotations.join(format!("{stem}.json")),
        serde_json::to_string_pretty(&json)?,
    )?;
    Ok(())
}

/// Scenes of a dataset directory (`annotations/*.json`), sorted by stem.
pub fn list_dataset(dir: &Path) -> Result<Vec<PathBuf>> {
    let annotations = dir.join("annotations");
    let mut out = Vec::new();
    for entry in std::fs::read_dir(&annotations).map_err(|e| {
        Error::Config(format!("cannot read {}: {e}", annotations.display()))
    })? {
        let path = entry?.path();
        if path.extension().map(|e| e == "json").unwrap_or(false) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Read an RGB PNG into a `[3, H, W]` array in `[0, 1]`.
pub fn read_image<T: Real>(path: &Path) -> Result<Array3<T>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, pixel) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = T::from_f64_lit(pixel[c] as f64 / 255.0);
        }
    }
    Ok(out)
}

/// Write a `[3, H, W]` array in `[0, 1]` as an RGB PNG.
pub fn write_image<T: Real>(image: &Array3<T>, path: &Path) -> Result<()> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::shape("[3, H, W]", format!("{:?}", image.dim()), "png write"));
    }
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for (x, y, pixel) in img.enumerate_pixels_mut() {
        for ch in 0..3 {
            let v = image[[ch, y as usize, x as usize]].to_f64_lit();
            pixel[ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    img.save(path)?;
    Ok(())
}

/// Write a boolean mask as a grayscale PNG (255 inside the instance).
pub fn write_mask(mask: &Array2<bool>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for (x, y, pixel) in img.enumerate_pixels_mut() {
        pixel[0] = if mask[[y as usize, x as usize]] { 255 } else { 0 };
    }
    img.save(path)?;
    Ok(())
}

/// Read a grayscale mask PNG (nonzero means inside).
pub fn read_mask(path: &Path) -> Result<Array2<bool>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let mut out = Array2::from_elem((h as usize, w as usize), false);
    for (x, y, pixel) in img.enumerate_pixels() {
        out[[y as usize, x as usize]] = pixel[0] > 0;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn flat_scene(instances: Vec<Instance>) -> AnnotatedScene<f64> {
        AnnotatedScene {
            image: Array3::from_elem((3, 16, 16), 0.5),
            instances,
        }
    }

    fn square(x0: f64, y0: f64, side: f64) -> Region {
        Region::Polygon(vec![
            (x0, y0),
            (x0 + side, y0),
            (x0 + side, y0 + side),
            (x0, y0 + side),
        ])
    }

    /// Brute-force even-odd point-in-polygon test at pixel centers.
    fn point_in_polygon(pts: &[(f64, f64)], x: f64, y: f64) -> bool {
        let mut inside = false;
        let n = pts.len();
        for e in 0..n {
            let (x1, y1) = pts[e];
            let (x2, y2) = pts[(e + 1) % n];
            if (y1 <= y && y2 > y) || (y2 <= y && y1 > y) {
                let t = (y - y1) / (y2 - y1);
                if x < x1 + t * (x2 - x1) {
                    inside = !inside;
                }
            }
        }
        inside
    }

    #[test]
    fn square_rasterizes_to_exact_pixel_count() {
        let region = square(2.0, 3.0, 4.0);
        let mask = region.rasterize(16, 16).unwrap();
        assert_eq!(mask.iter().filter(|&&m| m).count(), 16);
        assert!(mask[[3, 2]] && mask[[6, 5]]);
        assert!(!mask[[2, 2]] && !mask[[7, 6]]);
    }

    #[test]
    fn scanline_matches_bruteforce_on_random_polygons() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut tested = 0;
        while tested < 50 {
            // Random star-shaped polygon around a center: always simple.
            let cx = rng.gen_range(5.0..11.0);
            let cy = rng.gen_range(5.0..11.0);
            let verts = rng.gen_range(3..9);
            let pts: Vec<(f64, f64)> = (0..verts)
                .map(|k| {
                    let angle = k as f64 / verts as f64 * std::f64::consts::TAU
                        + rng.gen_range(0.0..0.4);
                    let r = rng.gen_range(1.5..4.5);
                    (cx + r * angle.cos(), cy + r * angle.sin())
                })
                .collect();
            let region = Region::Polygon(pts.clone());
            if region.validate_simple().is_err() {
                continue;
            }
            tested += 1;
            let mask = region.rasterize(16, 16).unwrap();
            for i in 0..16 {
                for j in 0..16 {
                    let expect = point_in_polygon(&pts, j as f64 + 0.5, i as f64 + 0.5);
                    assert_eq!(mask[[i, j]], expect, "pixel ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn self_intersecting_polygon_rejected() {
        let bow_tie = Region::Polygon(vec![(0.0, 0.0), (4.0, 4.0), (4.0, 0.0), (0.0, 4.0)]);
        assert!(bow_tie.validate_simple().is_err());
        assert!(square(1.0, 1.0, 3.0).validate_simple().is_ok());
    }

    #[test]
    fn gaze_to_ioi_single_square() {
        let scene = flat_scene(vec![Instance { class_id: 1, region: square(4.0, 4.0, 4.0) }]);
        let gaze = GazePoint::from_pixel(6, 6, 16, 16).unwrap();
        let sample = gaze_to_ioi(&scene, gaze).unwrap();
        assert_eq!(sample.class_id, 1);
        assert_eq!(sample.y_binary.iter().filter(|&&m| m).count(), 16);
        assert!(sample.y_binary[[6, 6]]);
    }

    #[test]
    fn gaze_to_ioi_disjoint_and_overlapping() {
        // Disjoint: gaze in B picks B only.
        let scene = flat_scene(vec![
            Instance { class_id: 0, region: square(1.0, 1.0, 3.0) },
            Instance { class_id: 2, region: square(9.0, 9.0, 4.0) },
        ]);
        let gaze = GazePoint::from_pixel(10, 10, 16, 16).unwrap();
        let sample = gaze_to_ioi(&scene, gaze).unwrap();
        assert_eq!(sample.class_id, 2);
        assert_eq!(sample.y_binary.iter().filter(|&&m| m).count(), 16);
        assert!(!sample.y_binary[[2, 2]]);

        // Overlapping: the later (front-most) instance wins in the overlap,
        // and its whole region becomes the mask.
        let scene = flat_scene(vec![
            Instance { class_id: 0, region: square(2.0, 2.0, 6.0) },
            Instance { class_id: 1, region: square(5.0, 5.0, 6.0) },
        ]);
        let gaze = GazePoint::from_pixel(6, 6, 16, 16).unwrap(); // in the overlap
        let sample = gaze_to_ioi(&scene, gaze).unwrap();
        assert_eq!(sample.class_id, 1);
        // Brute-force oracle: exactly the front square's 36 pixels.
        let front = square(5.0, 5.0, 6.0).rasterize(16, 16).unwrap();
        assert_eq!(sample.y_binary, front);

        // Gaze on background is an error.
        let gaze = GazePoint::from_pixel(15, 0, 16, 16).unwrap();
        assert!(matches!(gaze_to_ioi(&scene, gaze), Err(Error::NoInstanceAtGaze)));
    }

    #[test]
    fn preprocessing_is_idempotent() {
        let scene = flat_scene(vec![Instance { class_id: 0, region: square(3.0, 3.0, 5.0) }]);
        let gaze = GazePoint::from_pixel(5, 5, 16, 16).unwrap();
        let a = gaze_to_ioi(&scene, gaze).unwrap();
        let b = gaze_to_ioi(&scene, gaze).unwrap();
        assert_eq!(a.y_binary, b.y_binary);
        assert_eq!(a.class_id, b.class_id);
    }

    #[test]
    fn balanced_sampling_keeps_counts_close() {
        let scene = flat_scene(vec![
            Instance { class_id: 0, region: square(1.0, 1.0, 4.0) },
            Instance { class_id: 1, region: square(9.0, 9.0, 4.0) },
        ]);
        let mut balance = ClassBalancer::new(2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 1..=40 {
            let gaze = sample_gaze(&scene, &mut rng, &mut balance).unwrap();
            let sample = gaze_to_ioi(&scene, gaze).unwrap();
            let _ = sample;
            let diff = (balance.counts()[0] as i64 - balance.counts()[1] as i64).abs();
            assert!(diff <= 1, "counts diverged after {n} draws: {:?}", balance.counts());
        }
    }

    #[test]
    fn corpus_class_frequencies_near_uniform() {
        let spec = SyntheticSpec::default();
        let samples = generate_synthetic_corpus::<f32>(&spec, 99, 1000).unwrap();
        let mut counts = [0usize; 3];
        for s in &samples {
            counts[s.class_id] += 1;
        }
        for &c in &counts {
            let freq = c as f64 / 1000.0;
            assert!((freq - 1.0 / 3.0).abs() < 0.05, "class frequency {freq}");
        }
    }

    #[test]
    fn synthetic_scene_is_deterministic_and_disjoint() {
        let spec = SyntheticSpec::default();
        let a = generate_synthetic_scene::<f64>(&spec, 1234).unwrap();
        let b = generate_synthetic_scene::<f64>(&spec, 1234).unwrap();
        assert_eq!(a.scene.image, b.scene.image);
        assert_eq!(a.scene.instances.len(), b.scene.instances.len());

        let n = a.scene.instances.len();
        assert!((spec.min_shapes..=spec.max_shapes).contains(&n) || a.placement_reduced);
        let masks: Vec<Array2<bool>> = a
            .scene
            .instances
            .iter()
            .map(|i| i.region.rasterize(32, 32).unwrap())
            .collect();
        for (i, m) in masks.iter().enumerate() {
            let area = m.iter().filter(|&&x| x).count();
            assert!(area >= 9, "instance {i} area {area}");
            for m2 in masks.iter().skip(i + 1) {
                let overlap = m.iter().zip(m2.iter()).filter(|(&a, &b)| a && b).count();
                assert_eq!(overlap, 0, "instances overlap");
            }
        }
    }

    #[test]
    fn sequence_without_saccades_has_stable_gaze() {
        let spec = SequenceSpec {
            saccade_rate: 0.0,
            scene_change_prob: 0.0,
            ..SequenceSpec::default()
        };
        let seq = generate_synthetic_sequence::<f32>(&spec, 7, 60).unwrap();
        assert_eq!(seq.truth.segment_starts, vec![0]);
        assert!(seq.truth.saccade_frames.is_empty());
        let pts: Vec<_> = seq.trace.points().collect();
        for w in pts.windows(2) {
            let d = gaze_displacement_sq(w[0], w[1]).sqrt();
            assert!(d < 0.1, "fixation displacement {d}");
        }
    }

    #[test]
    fn sequence_saccade_count_near_expectation() {
        let spec = SequenceSpec {
            saccade_rate: 2.0,
            scene_change_prob: 0.0,
            ..SequenceSpec::default()
        };
        let seq = generate_synthetic_sequence::<f32>(&spec, 11, 300).unwrap();
        // 300 frames at 30 fps = 10 s, expectation 2/s -> 20 saccades.
        let count = seq.truth.saccade_frames.len() as f64;
        assert!((14.0..=26.0).contains(&count), "saccade count {count}");
    }

    #[test]
    fn sequence_segments_have_decisive_boundaries() {
        let spec = SequenceSpec { scene_change_prob: 0.2, ..SequenceSpec::default() };
        let seq = generate_synthetic_sequence::<f32>(&spec, 21, 80).unwrap();
        assert!(seq.truth.segment_starts.len() > 1);
        // Within-segment diffs against the segment head stay far below the
        // threshold; boundary frames exceed it.
        let mut init = seq.frames[0].clone();
        for t in 1..80 {
            let diff = frame_mean_abs_diff(&seq.frames[t], &init);
            if seq.truth.segment_starts.contains(&t) {
                assert!(diff > 0.037, "boundary frame {t} diff {diff}");
                init = seq.frames[t].clone();
            } else {
                assert!(diff < 0.037 * 0.7, "in-segment frame {t} diff {diff}");
            }
        }
    }

    #[test]
    fn trace_file_round_trip_and_dataset_adapter() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec::default();
        let out = generate_synthetic_scene::<f32>(&spec, 5).unwrap();
        write_annotated_scene(&out.scene, dir.path(), "0000").unwrap();
        let loaded =
            load_annotated_scene::<f32>(&dir.path().join("annotations/0000.json")).unwrap();
        assert_eq!(loaded.instances.len(), out.scene.instances.len());
        // PNG round trip quantizes to 1/255.
        for (a, b) in loaded.image.iter().zip(out.scene.image.iter()) {
            assert!((a - b).abs() < 1.0 / 255.0 + 1e-6);
        }
        let files = list_dataset(dir.path()).unwrap();
        assert_eq!(files.len(), 1);

        let trace_path = dir.path().join("trace.csv");
        std::fs::write(&trace_path, "timestamp,u,v\n0.0,0.5,0.5\n0.1,0.6,0.5\n").unwrap();
        let trace = load_trace::<f64>(&trace_path).unwrap();
        assert_eq!(trace.len(), 2);
    }

    use rand::Rng;
}
