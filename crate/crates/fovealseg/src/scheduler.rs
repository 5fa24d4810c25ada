//! Per-frame scheduling: skip on saccade, recompute on scene change, reuse
//! the buffered mask while the gaze stays on the instance, recompute on gaze
//! leaving it. Charges analytic FLOPs per decision and reports totals
//! against the no-skip and no-downsample baselines.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::CostModel;
use crate::fsnet::{predict_fullres, ForwardMode, FsNet};
use crate::gaze::{gaze_displacement_sq, GazePoint, GazeTrace};
use crate::nn::backbone::Backbone;
use crate::scalar::Real;

/// Scheduler thresholds and the cost model handles.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchedulerConfig<T> {
    /// Saccade threshold on the squared normalized gaze displacement.
    pub alpha: T,
    /// Scene-change threshold on the mean absolute per-pixel difference.
    pub beta: T,
    /// Tolerance radius (pixels) when testing whether the gaze still lies on
    /// the buffered instance; 0 recovers the strict reading.
    pub gaze_tolerance_radius: usize,
    pub cost: CostModel,
}

impl<T: Real> Default for SchedulerConfig<T> {
    fn default() -> Self {
        Self {
            alpha: T::from_f64_lit(0.01),
            beta: T::from_f64_lit(0.037),
            gaze_tolerance_radius: 2,
            cost: CostModel::default(),
        }
    }
}

impl<T: Real> SchedulerConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > T::zero()) {
            return Err(Error::InvalidThreshold(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.beta > T::zero()) {
            return Err(Error::InvalidThreshold(format!("beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }
}

/// A buffered full-resolution mask with its class.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferedMask {
    pub mask: Array2<bool>,
    pub class_id: usize,
}

/// Scheduler buffers: the current segment's initial frame, the last gaze,
/// and the last mask. A buffered mask implies a buffered gaze.
#[derive(Debug, Clone, Default)]
pub struct SchedulerState<T> {
    f_init: Option<Array3<T>>,
    g_last: Option<GazePoint<T>>,
    m_last: Option<BufferedMask>,
}

impl<T: Real> SchedulerState<T> {
    pub fn new() -> Self {
        Self { f_init: None, g_last: None, m_last: None }
    }

    pub fn invariant_holds(&self) -> bool {
        self.m_last.is_none() || self.g_last.is_some()
    }

    pub fn f_init(&self) -> Option<&Array3<T>> {
        self.f_init.as_ref()
    }

    pub fn g_last(&self) -> Option<GazePoint<T>> {
        self.g_last
    }

    pub fn m_last(&self) -> Option<&BufferedMask> {
        self.m_last.as_ref()
    }
}

/// What the scheduler decided for a frame and what it charged for it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecisionKind {
    /// Cold start: no buffers yet, the model must run.
    RunInitial,
    /// Saccade detected: halt everything, update the gaze buffer only.
    SkipSaccade,
    /// Scene changed: rerun and rebase the segment.
    RunNewSegment,
    /// Gaze still on the buffered instance: return the buffered mask.
    Reuse,
    /// Gaze moved to a new instance inside the segment: rerun without
    /// rebasing the segment frame.
    RunNewGaze,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameDecision {
    pub kind: DecisionKind,
    pub flops_charged: u64,
}

/// Mean absolute per-pixel (and per-channel) difference between frames, so
/// the threshold is resolution independent.
pub fn frame_difference<T: Real>(a: &Array3<T>, b: &Array3<T>) -> Result<T> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            format!("{:?}", a.dim()),
            format!("{:?}", b.dim()),
            "frame difference",
        ));
    }
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        acc += (x - y).abs();
    }
    Ok(acc / T::from_usize_lit(a.len()))
}

/// True when the buffered mask is set at the gaze pixel or anywhere within
/// the tolerance radius around it.
pub fn gaze_in_mask<T: Real>(gaze: GazePoint<T>, mask: &Array2<bool>, radius: usize) -> bool {
    let (h, w) = mask.dim();
    let (r, c) = gaze.to_pixel(h, w);
    let rr = radius as isize;
    for dr in -rr..=rr {
        for dc in -rr..=rr {
            let (p, q) = (r as isize + dr, c as isize + dc);
            if p >= 0 && q >= 0 && (p as usize) < h && (q as usize) < w && mask[[p as usize, q as usize]]
            {
                return true;
            }
        }
    }
    false
}

fn run_model<T: Real, B: Backbone<T>>(
    model: &FsNet<T, B>,
    frame: &Array3<T>,
    gaze: GazePoint<T>,
) -> Result<BufferedMask> {
    let out = model.forward(frame, gaze, ForwardMode::Inference)?;
    let (mask, class_id) = predict_fullres(&out)?;
    Ok(BufferedMask { mask, class_id })
}

/// One scheduling step. The state is only committed after the model call
/// succeeds, so errors never leave it partially updated.
pub fn step<T: Real, B: Backbone<T>>(
    state: &mut SchedulerState<T>,
    frame: &Array3<T>,
    gaze: GazePoint<T>,
    model: &FsNet<T, B>,
    cfg: &SchedulerConfig<T>,
) -> Result<(FrameDecision, Option<BufferedMask>)> {
    cfg.validate()?;
    debug_assert!(state.invariant_holds());

    let (f_init, g_last, m_last) = match (&state.f_init, state.g_last, &state.m_last) {
        (Some(f), Some(g), Some(m)) => (f, g, m),
        _ => {
            // Cold start: every buffer is set from the first frame.
            let mask = run_model(model, frame, gaze)?;
            state.f_init = Some(frame.clone());
            state.g_last = Some(gaze);
            state.m_last = Some(mask.clone());
            return Ok((
                FrameDecision { kind: DecisionKind::RunInitial, flops_charged: cfg.cost.fsnet_run },
                Some(mask),
            ));
        }
    };

    if gaze_displacement_sq(gaze, g_last) > cfg.alpha {
        // Saccade: halt the rest, remember the new gaze.
        state.g_last = Some(gaze);
        return Ok((
            FrameDecision {
                kind: DecisionKind::SkipSaccade,
                flops_charged: cfg.cost.displacement_check,
            },
            None,
        ));
    }

    if frame_difference(frame, f_init)? > cfg.beta {
        // Scene change: rerun and rebase the segment on this frame.
        let mask = run_model(model, frame, gaze)?;
        state.f_init = Some(frame.clone());
        state.g_last = Some(gaze);
        state.m_last = Some(mask.clone());
        return Ok((
            FrameDecision { kind: DecisionKind::RunNewSegment, flops_charged: cfg.cost.fsnet_run },
            Some(mask),
        ));
    }

    if gaze_in_mask(gaze, &m_last.mask, cfg.gaze_tolerance_radius) {
        let mask = m_last.clone();
        return Ok((
            FrameDecision { kind: DecisionKind::Reuse, flops_charged: cfg.cost.reuse_check },
            Some(mask),
        ));
    }

    // Gaze left the instance: rerun, keep the segment's initial frame.
    let mask = run_model(model, frame, gaze)?;
    state.g_last = Some(gaze);
    state.m_last = Some(mask.clone());
    Ok((
        FrameDecision { kind: DecisionKind::RunNewGaze, flops_charged: cfg.cost.fsnet_run },
        Some(mask),
    ))
}

/// Per-frame record in a schedule report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameRecord {
    pub t: usize,
    pub decision: DecisionKind,
    pub flops: u64,
}

/// Scheduling outcome over a whole sequence with baseline comparisons: the
/// no-skip baseline runs the model every frame; the no-downsample baseline
/// runs a full-resolution backbone every frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleReport {
    pub frames: Vec<FrameRecord>,
    pub total_flops: u64,
    pub no_skip_flops: u64,
    pub no_downsample_flops: u64,
    pub no_skip_ratio: f64,
    pub no_downsample_ratio: f64,
    pub decision_counts: DecisionCounts,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DecisionCounts {
    pub run_initial: usize,
    pub skip_saccade: usize,
    pub run_new_segment: usize,
    pub reuse: usize,
    pub run_new_gaze: usize,
}

impl DecisionCounts {
    fn add(&mut self, kind: DecisionKind) {
        match kind {
            DecisionKind::RunInitial => self.run_initial += 1,
            DecisionKind::SkipSaccade => self.skip_saccade += 1,
            DecisionKind::RunNewSegment => self.run_new_segment += 1,
            DecisionKind::Reuse => self.reuse += 1,
            DecisionKind::RunNewGaze => self.run_new_gaze += 1,
        }
    }

    pub fn model_runs(&self) -> usize {
        self.run_initial + self.run_new_segment + self.run_new_gaze
    }
}

/// Fold [`step`] over an aligned frame/gaze sequence.
pub fn run_trace<T: Real, B: Backbone<T>>(
    frames: &[Array3<T>],
    trace: &GazeTrace<T>,
    model: &FsNet<T, B>,
    cfg: &SchedulerConfig<T>,
) -> Result<ScheduleReport> {
    if frames.len() != trace.len() {
        return Err(Error::shape(
            format!("{} frames", frames.len()),
            format!("{} trace entries", trace.len()),
            "scheduler inputs",
        ));
    }
    let mut state = SchedulerState::new();
    let mut records = Vec::with_capacity(frames.len());
    let mut counts = DecisionCounts::default();
    let mut total = 0u64;
    for (t, (frame, (_, gaze))) in frames.iter().zip(trace.entries()).enumerate() {
        let (decision, _) = step(&mut state, frame, *gaze, model, cfg)?;
        debug_assert!(state.invariant_holds());
        counts.add(decision.kind);
        total += decision.flops_charged;
        records.push(FrameRecord { t, decision: decision.kind, flops: decision.flops_charged });
    }
    let n = frames.len() as u64;
    let no_skip = cfg.cost.fsnet_run * n;
    let no_downsample = cfg.cost.nd_run * n;
    Ok(ScheduleReport {
        total_flops: total,
        no_skip_flops: no_skip,
        no_downsample_flops: no_downsample,
        no_skip_ratio: no_skip as f64 / total as f64,
        no_downsample_ratio: no_downsample as f64 / total as f64,
        frames: records,
        decision_counts: counts,
    })
}
