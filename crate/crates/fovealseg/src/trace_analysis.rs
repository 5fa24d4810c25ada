//! Gaze-behavior study over frame sequences: segment frames by pixel
//! difference against the segment's initial frame, then pool within-segment
//! gaze displacements into quantiles and histograms.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaze::{gaze_displacement_sq, GazeTrace};
use crate::scalar::Real;
use crate::scheduler::frame_difference;

/// Frame indices opening each segment; segments tile the sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentPartition {
    boundaries: Vec<usize>,
    len: usize,
}

impl SegmentPartition {
    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn segment_count(&self) -> usize {
        self.boundaries.len()
    }

    /// Half-open frame ranges, one per segment.
    pub fn ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::with_capacity(self.boundaries.len());
        for (i, &start) in self.boundaries.iter().enumerate() {
            let end = self.boundaries.get(i + 1).copied().unwrap_or(self.len);
            out.push(start..end);
        }
        out
    }
}

/// Partition by thresholding per-frame differences: a new segment opens at
/// every index whose difference (against the current segment's initial
/// frame, as supplied by the caller) exceeds `beta`.
pub fn partition_segments<T: Real>(frame_diffs: &[T], beta: T) -> Result<SegmentPartition> {
    if frame_diffs.is_empty() {
        return Err(Error::EmptyData("frame difference sequence".into()));
    }
    if !(beta > T::zero()) {
        return Err(Error::InvalidThreshold(format!("beta must be positive, got {beta}")));
    }
    let mut boundaries = vec![0usize];
    for (t, &d) in frame_diffs.iter().enumerate().skip(1) {
        if d > beta {
            boundaries.push(t);
        }
    }
    Ok(SegmentPartition { boundaries, len: frame_diffs.len() })
}

/// Walk a frame sequence maintaining the segment-initial frame: returns the
/// per-frame differences consistent with [`partition_segments`] (the first
/// difference is zero by convention).
pub fn compute_segment_diffs<T: Real>(frames: &[Array3<T>], beta: T) -> Result<Vec<T>> {
    if frames.is_empty() {
        return Err(Error::EmptyData("frame sequence".into()));
    }
    let mut diffs = Vec::with_capacity(frames.len());
    diffs.push(T::zero());
    let mut init = &frames[0];
    for frame in &frames[1..] {
        let d = frame_difference(frame, init)?;
        if d > beta {
            init = frame;
        }
        diffs.push(d);
    }
    Ok(diffs)
}

pub const HISTOGRAM_BINS: usize = 50;

/// Pooled within-segment gaze statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceStats {
    /// Normalized 50-bin histogram of within-segment consecutive gaze
    /// displacement distances on `[0, sqrt(2)]`; sums to 1 when any pair
    /// exists.
    pub histogram: Vec<f64>,
    /// Nearest-rank 95th percentile of the pooled displacement distances.
    pub q95: f64,
    /// Fraction of pooled displacements below the gaze threshold.
    pub fraction_below_gaze_threshold: f64,
    /// Fraction of consecutive frame pairs lying within one segment, i.e.
    /// pairs whose difference stayed below the segmentation threshold.
    pub fraction_of_pairs_below_beta: f64,
    /// Number of pooled within-segment gaze pairs.
    pub pair_count: usize,
}

/// Pool consecutive gaze displacements within each segment. Length-1
/// segments contribute nothing.
pub fn gaze_stats<T: Real>(
    trace: &GazeTrace<T>,
    partition: &SegmentPartition,
    gaze_threshold: T,
) -> Result<TraceStats> {
    if trace.len() != partition.len() {
        return Err(Error::shape(
            format!("{} frames", partition.len()),
            format!("{} trace entries", trace.len()),
            "trace vs partition",
        ));
    }
    if !(gaze_threshold > T::zero()) {
        return Err(Error::InvalidThreshold(format!(
            "gaze threshold must be positive, got {gaze_threshold}"
        )));
    }
    let points: Vec<_> = trace.points().collect();
    let mut distances: Vec<f64> = Vec::new();
    for range in partition.ranges() {
        for t in range.start + 1..range.end {
            let d = gaze_displacement_sq(points[t - 1], points[t]).to_f64_lit().sqrt();
            distances.push(d);
        }
    }

    let mut histogram = vec![0.0; HISTOGRAM_BINS];
    let mut below = 0usize;
    let max_dist = std::f64::consts::SQRT_2;
    for &d in &distances {
        if d < gaze_threshold.to_f64_lit() {
            below += 1;
        }
        let bin = ((d / max_dist) * HISTOGRAM_BINS as f64).floor() as usize;
        histogram[bin.min(HISTOGRAM_BINS - 1)] += 1.0;
    }
    let n = distances.len();
    if n > 0 {
        for h in &mut histogram {
            *h /= n as f64;
        }
    }

    let q95 = if n == 0 {
        0.0
    } else {
        let mut sorted = distances.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rank = ((0.95 * n as f64).ceil() as usize).max(1);
        sorted[rank - 1]
    };

    let total_pairs = partition.len().saturating_sub(1);
    let boundary_pairs = partition.segment_count().saturating_sub(1);
    let fraction_of_pairs_below_beta = if total_pairs == 0 {
        0.0
    } else {
        (total_pairs - boundary_pairs) as f64 / total_pairs as f64
    };

    Ok(TraceStats {
        histogram,
        q95,
        fraction_below_gaze_threshold: if n == 0 { 0.0 } else { below as f64 / n as f64 },
        fraction_of_pairs_below_beta,
        pair_count: n,
    })
}

/// Plain-text rendering of the statistics.
pub fn stats_table(stats: &TraceStats) -> String {
    let mut out = String::new();
    out.push_str("metric                          value\n");
    out.push_str(&format!("within-segment gaze pairs       {}\n", stats.pair_count));
    out.push_str(&format!("fraction below gaze threshold   {:.4}\n", stats.fraction_below_gaze_threshold));
    out.push_str(&format!("q95 gaze displacement           {:.4}\n", stats.q95));
    out.push_str(&format!("frame pairs below beta          {:.4}\n", stats.fraction_of_pairs_below_beta));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaze::GazePoint;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn gp(u: f64, v: f64) -> GazePoint<f64> {
        GazePoint::new(u, v).unwrap()
    }

    #[test]
    fn partition_examples() {
        // All zeros: one segment covering everything.
        let p = partition_segments(&[0.0f64; 6], 0.037).unwrap();
        assert_eq!(p.boundaries(), &[0]);
        assert_eq!(p.ranges(), vec![0..6]);

        // Hand-traced rule: a spike at t=1 opens a second segment.
        let p = partition_segments(&[0.0, 0.05, 0.0, 0.0], 0.037).unwrap();
        assert_eq!(p.boundaries(), &[0, 1]);
        assert_eq!(p.ranges(), vec![0..1, 1..4]);

        // Every diff above beta: all singleton segments.
        let p = partition_segments(&[0.0, 0.9, 0.9, 0.9], 0.037).unwrap();
        assert_eq!(p.boundaries(), &[0, 1, 2, 3]);
        assert!(p.ranges().iter().skip(1).all(|r| r.len() == 1));

        assert!(partition_segments::<f64>(&[], 0.037).is_err());
        assert!(partition_segments(&[0.0f64], 0.0).is_err());
    }

    #[test]
    fn segment_diffs_follow_initial_frame_convention() {
        use ndarray::Array3;
        let mk = |v: f64| Array3::<f64>::from_elem((1, 4, 4), v);
        // Frames: 0.0, 0.01 (join), 0.5 (new segment), 0.52 (join vs 0.5).
        let frames = vec![mk(0.0), mk(0.01), mk(0.5), mk(0.52)];
        let diffs = compute_segment_diffs(&frames, 0.037).unwrap();
        assert!((diffs[1] - 0.01).abs() < 1e-12);
        assert!((diffs[2] - 0.5).abs() < 1e-12);
        assert!((diffs[3] - 0.02).abs() < 1e-12, "diff vs new segment head");
        let p = partition_segments(&diffs, 0.037).unwrap();
        assert_eq!(p.boundaries(), &[0, 2]);
    }

    #[test]
    fn static_gaze_statistics() {
        let entries: Vec<_> = (0..10).map(|t| (t as f64, gp(0.4, 0.4))).collect();
        let trace = GazeTrace::new(entries).unwrap();
        let p = partition_segments(&[0.0f64; 10], 0.037).unwrap();
        let stats = gaze_stats(&trace, &p, 0.1).unwrap();
        assert_eq!(stats.fraction_below_gaze_threshold, 1.0);
        assert_eq!(stats.q95, 0.0);
        assert_eq!(stats.pair_count, 9);
        let mass: f64 = stats.histogram.iter().sum();
        assert!((mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn alternating_gaze_is_all_above_threshold() {
        let entries: Vec<_> = (0..8)
            .map(|t| (t as f64, if t % 2 == 0 { gp(0.0, 0.0) } else { gp(1.0, 1.0) }))
            .collect();
        let trace = GazeTrace::new(entries).unwrap();
        let p = partition_segments(&[0.0f64; 8], 0.037).unwrap();
        let stats = gaze_stats(&trace, &p, 0.1).unwrap();
        assert_eq!(stats.fraction_below_gaze_threshold, 0.0);
        assert!((stats.q95 - std::f64::consts::SQRT_2).abs() < 1e-12);
        // All mass lands in the top bin.
        assert!((stats.histogram[HISTOGRAM_BINS - 1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nearest_rank_quantile_of_constant_sequence() {
        let entries: Vec<_> = (0..20)
            .map(|t| {
                let u = if t % 2 == 0 { 0.3 } else { 0.34 };
                (t as f64, gp(u, 0.5))
            })
            .collect();
        let trace = GazeTrace::new(entries).unwrap();
        let p = partition_segments(&[0.0f64; 20], 0.037).unwrap();
        let stats = gaze_stats(&trace, &p, 0.1).unwrap();
        // Every displacement is exactly 0.04.
        assert!((stats.q95 - 0.04).abs() < 1e-12);
    }

    #[test]
    fn fraction_below_is_monotone_in_threshold() {
        let mut rng = StdRng::seed_from_u64(3);
        let entries: Vec<_> = (0..60)
            .map(|t| (t as f64, gp(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0))))
            .collect();
        let trace = GazeTrace::new(entries).unwrap();
        let p = partition_segments(&vec![0.0f64; 60], 0.037).unwrap();
        let mut prev = 0.0;
        for thr in [0.05, 0.1, 0.3, 0.8, 1.5] {
            let s = gaze_stats(&trace, &p, thr).unwrap();
            assert!(s.fraction_below_gaze_threshold >= prev);
            prev = s.fraction_below_gaze_threshold;
        }
    }

    #[test]
    fn singleton_segments_contribute_nothing() {
        let entries: Vec<_> = (0..4).map(|t| (t as f64, gp(0.1 * t as f64, 0.5))).collect();
        let trace = GazeTrace::new(entries).unwrap();
        let p = partition_segments(&[0.0, 0.9, 0.9, 0.9f64], 0.037).unwrap();
        let stats = gaze_stats(&trace, &p, 0.1).unwrap();
        assert_eq!(stats.pair_count, 0);
        assert_eq!(stats.fraction_of_pairs_below_beta, 0.0);
    }

    #[test]
    fn boundaries_invariant_to_subthreshold_noise() {
        use ndarray::Array3;
        let mut rng = StdRng::seed_from_u64(11);
        let base_a = Array3::<f64>::from_elem((1, 6, 6), 0.2);
        let base_b = Array3::<f64>::from_elem((1, 6, 6), 0.8);
        let noisy = |base: &Array3<f64>, rng: &mut StdRng| {
            base.mapv(|v| v + rng.gen_range(-0.005..0.005))
        };
        // Two segments with in-segment noise; permuting the non-initial
        // frames inside each segment keeps the boundaries.
        let mut frames = vec![noisy(&base_a, &mut rng)];
        let mut seg1: Vec<_> = (0..4).map(|_| noisy(&base_a, &mut rng)).collect();
        frames.extend(seg1.clone());
        let head_b = noisy(&base_b, &mut rng);
        let mut seg2: Vec<_> = (0..3).map(|_| noisy(&base_b, &mut rng)).collect();
        frames.push(head_b.clone());
        frames.extend(seg2.clone());

        let p1 = partition_segments(&compute_segment_diffs(&frames, 0.037).unwrap(), 0.037).unwrap();

        seg1.reverse();
        seg2.reverse();
        let mut permuted = vec![frames[0].clone()];
        permuted.extend(seg1);
        permuted.push(head_b);
        permuted.extend(seg2);
        let p2 =
            partition_segments(&compute_segment_diffs(&permuted, 0.037).unwrap(), 0.037).unwrap();
        assert_eq!(p1.boundaries(), p2.boundaries());
    }

    #[test]
    fn generator_truth_round_trip() {
        use crate::data::{generate_synthetic_sequence, SequenceSpec};
        let spec = SequenceSpec { scene_change_prob: 0.15, ..SequenceSpec::default() };
        let seq = generate_synthetic_sequence::<f32>(&spec, 31, 90).unwrap();
        let diffs = compute_segment_diffs(&seq.frames, 0.037f32).unwrap();
        let p = partition_segments(&diffs, 0.037f32).unwrap();
        assert_eq!(p.boundaries(), seq.truth.segment_starts.as_slice());

        let stats = gaze_stats(&seq.trace, &p, 0.1f32).unwrap();
        assert!(
            (stats.fraction_below_gaze_threshold - seq.truth.fixation_fraction).abs() <= 0.02,
            "fixation fraction {} vs truth {}",
            stats.fraction_below_gaze_threshold,
            seq.truth.fixation_fraction
        );
    }
}
