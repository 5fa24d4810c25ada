//! Saliency-guided image downsampling: a truncated-Gaussian sampling grid
//! computed from a per-pixel density map, forward warps (nearest and
//! bilinear), the uniform-downsampling baseline, the reverse sampler that
//! projects downsampled predictions back to full resolution, and label
//! subsampling.
//!
//! Backward passes for the grid computation and the bilinear warp are
//! provided so the density network can be trained through the sampler.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Per-pixel nonnegative sampling density over the source image.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap<T> {
    values: Array2<T>,
}

impl<T: Real> SaliencyMap<T> {
    /// All entries must be nonnegative and at least one strictly positive,
    /// otherwise every grid denominator could vanish.
    pub fn new(values: Array2<T>) -> Result<Self> {
        let mut any_positive = false;
        for &x in values.iter() {
            if !(x >= T::zero()) {
                return Err(Error::Validation(format!(
                    "saliency density must be nonnegative, got {x}"
                )));
            }
            if x > T::zero() {
                any_positive = true;
            }
        }
        if !any_positive {
            return Err(Error::Validation(
                "saliency map must contain at least one positive density".into(),
            ));
        }
        if values.is_empty() {
            return Err(Error::InvalidDimension("saliency map must be non-empty".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array2<T> {
        &self.values
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }
}

/// Min-max normalize a raw density map to `[0,1]` and add a small offset so
/// the grid denominators never vanish. The grid equations are invariant to a
/// positive rescaling of the density, so this changes the grid only through
/// the additive offset.
pub fn normalize_saliency<T: Real>(raw: &Array2<T>) -> (SaliencyMap<T>, SaliencyNormCache<T>) {
    let offset = T::from_f64_lit(1e-6);
    let mut lo = T::infinity();
    let mut hi = T::neg_infinity();
    for &x in raw.iter() {
        if x < lo {
            lo = x;
        }
        if x > hi {
            hi = x;
        }
    }
    let span = hi - lo;
    let degenerate = !(span > T::zero());
    let values = if degenerate {
        Array2::from_elem(raw.dim(), offset)
    } else {
        raw.mapv(|x| (x - lo) / span + offset)
    };
    let cache = SaliencyNormCache { lo, span, degenerate };
    (
        SaliencyMap { values },
        cache,
    )
}

/// Forward cache for [`normalize_saliency`].
#[derive(Debug, Clone)]
pub struct SaliencyNormCache<T> {
    lo: T,
    span: T,
    degenerate: bool,
}

/// Gradient of a scalar loss through [`normalize_saliency`].
///
/// `raw` is the input that was normalized, `d_norm` the gradient with respect
/// to the normalized map. The min/max picks are differentiated exactly
/// (first occurrence in row-major order breaks ties).
pub fn normalize_saliency_backward<T: Real>(
    raw: &Array2<T>,
    cache: &SaliencyNormCache<T>,
    d_norm: &Array2<T>,
) -> Array2<T> {
    let mut d_raw = Array2::zeros(raw.dim());
    if cache.degenerate {
        return d_raw;
    }
    let inv = T::one() / cache.span;
    let mut argmin = (0, 0);
    let mut argmax = (0, 0);
    for (idx, &x) in raw.indexed_iter() {
        if x < raw[argmin] {
            argmin = idx;
        }
        if x > raw[argmax] {
            argmax = idx;
        }
    }
    let g_sum: T = d_norm.iter().copied().sum();
    // sum_y g[y] * (raw[y] - lo) / span^2
    let mut g_weighted = T::zero();
    for (idx, &g) in d_norm.indexed_iter() {
        g_weighted += g * (raw[idx] - cache.lo) * inv * inv;
    }
    for (idx, &g) in d_norm.indexed_iter() {
        d_raw[idx] += g * inv;
        let _ = idx;
    }
    // d/d raw[argmin]: each N[y] loses via both -lo and the span shrink.
    d_raw[argmin] += -g_sum * inv + g_weighted;
    d_raw[argmax] += -g_weighted;
    d_raw
}

/// Truncated Gaussian kernel: integer standard deviation and square support
/// of side `2*sigma + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct KernelSpec {
    sigma: usize,
}

impl KernelSpec {
    pub fn new(sigma: usize) -> Result<Self> {
        if sigma < 1 {
            return Err(Error::InvalidKernel(format!(
                "sigma must be a positive integer, got {sigma}"
            )));
        }
        Ok(Self { sigma })
    }

    pub fn sigma(&self) -> usize {
        self.sigma
    }

    /// Side length of the square support.
    pub fn size(&self) -> usize {
        2 * self.sigma + 1
    }
}

impl Default for KernelSpec {
    /// sigma 16, support 33.
    fn default() -> Self {
        Self { sigma: 16 }
    }
}

/// Evaluate the kernel on its support: `k[a,b] = exp(-((a-c)^2+(b-c)^2) / (2 sigma^2))`
/// with `c` the center index. Not normalized; the grid equations
/// self-normalize.
pub fn gaussian_kernel<T: Real>(spec: KernelSpec) -> Array2<T> {
    let size = spec.size();
    let c = spec.sigma as f64;
    let two_sigma_sq = 2.0 * (spec.sigma as f64) * (spec.sigma as f64);
    Array2::from_shape_fn((size, size), |(a, b)| {
        let da = a as f64 - c;
        let db = b as f64 - c;
        T::from_f64_lit((-(da * da + db * db) / two_sigma_sq).exp())
    })
}

/// Normalized source-coordinate field mapping each target pixel to a location
/// in the source image. Entries live in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingGrid<T> {
    gh: Array2<T>,
    gw: Array2<T>,
    source_h: usize,
    source_w: usize,
}

impl<T: Real> SamplingGrid<T> {
    pub fn new(gh: Array2<T>, gw: Array2<T>, source_h: usize, source_w: usize) -> Result<Self> {
        if gh.dim() != gw.dim() {
            return Err(Error::shape(
                format!("{:?}", gh.dim()),
                format!("{:?}", gw.dim()),
                "grid component shapes",
            ));
        }
        for &x in gh.iter().chain(gw.iter()) {
            if !(x >= T::zero() && x <= T::one()) {
                return Err(Error::Validation(format!(
                    "grid coordinates must lie in [0,1], got {x}"
                )));
            }
        }
        Ok(Self { gh, gw, source_h, source_w })
    }

    /// The uniform grid of Eq-style downsampling: `gh[i,j] = i/h`, `gw[i,j] = j/w`.
    pub fn uniform(target_h: usize, target_w: usize, source_h: usize, source_w: usize) -> Self {
        let gh = Array2::from_shape_fn((target_h, target_w), |(i, _)| {
            T::from_usize_lit(i) / T::from_usize_lit(target_h)
        });
        let gw = Array2::from_shape_fn((target_h, target_w), |(_, j)| {
            T::from_usize_lit(j) / T::from_usize_lit(target_w)
        });
        Self { gh, gw, source_h, source_w }
    }

    pub fn gh(&self) -> &Array2<T> {
        &self.gh
    }

    pub fn gw(&self) -> &Array2<T> {
        &self.gw
    }

    pub fn target_dims(&self) -> (usize, usize) {
        self.gh.dim()
    }

    pub fn source_dims(&self) -> (usize, usize) {
        (self.source_h, self.source_w)
    }

    /// Flat binary debugging dump: row-major `gh` then `gw` as little-endian f32.
    pub fn to_flat_f32(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.gh.len() * 8);
        for &x in self.gh.iter().chain(self.gw.iter()) {
            out.extend_from_slice(&(x.to_f64_lit() as f32).to_le_bytes());
        }
        out
    }

    pub fn from_flat_f32(
        bytes: &[u8],
        target_h: usize,
        target_w: usize,
        source_h: usize,
        source_w: usize,
    ) -> Result<Self> {
        let n = target_h * target_w;
        if bytes.len() != 2 * n * 4 {
            return Err(Error::shape(
                format!("{} bytes", 2 * n * 4),
                format!("{} bytes", bytes.len()),
                "flat grid dump",
            ));
        }
        let read = |i: usize| -> T {
            let b = [bytes[4 * i], bytes[4 * i + 1], bytes[4 * i + 2], bytes[4 * i + 3]];
            T::from_f64_lit(f32::from_le_bytes(b) as f64)
        };
        let gh = Array2::from_shape_fn((target_h, target_w), |(i, j)| read(i * target_w + j));
        let gw = Array2::from_shape_fn((target_h, target_w), |(i, j)| read(n + i * target_w + j));
        SamplingGrid::new(gh, gw, source_h, source_w)
    }
}

/// Result of a grid computation: the grid plus the number of target pixels
/// whose kernel window saw only zero saliency and fell back to the uniform
/// coordinate.
#[derive(Debug, Clone)]
pub struct GridOutput<T> {
    pub grid: SamplingGrid<T>,
    pub zero_saliency_fallbacks: usize,
}

/// Forward cache for [`compute_grid_backward`]: per-target-pixel kernel-sum
/// denominators and the fallback mask.
#[derive(Debug, Clone)]
pub struct GridCache<T> {
    den: Array2<T>,
    fallback: Array2<bool>,
}

fn round_half_away(x: f64) -> isize {
    x.round() as isize
}

/// Source-space window center for target pixel `(i, j)`.
fn window_center(i: usize, j: usize, th: usize, tw: usize, sh: usize, sw: usize) -> (f64, f64) {
    (
        i as f64 * sh as f64 / th as f64,
        j as f64 * sw as f64 / tw as f64,
    )
}

/// Compute the sampling grid from a saliency map.
///
/// For each target pixel the kernel is centered at the (rounded) source
/// location `(i*H/h, j*W/w)`; the grid coordinate is the kernel- and
/// saliency-weighted mean of the normalized source coordinates inside the
/// kernel support. Windows crossing the image border are truncated and
/// renormalized by the in-bounds weight sum.
pub fn compute_grid<T: Real>(
    density: &SaliencyMap<T>,
    target_h: usize,
    target_w: usize,
    spec: KernelSpec,
) -> Result<GridOutput<T>> {
    let (out, _) = compute_grid_with_cache(density, target_h, target_w, spec)?;
    Ok(out)
}

/// As [`compute_grid`], additionally returning the cache needed by
/// [`compute_grid_backward`].
pub fn compute_grid_with_cache<T: Real>(
    density: &SaliencyMap<T>,
    target_h: usize,
    target_w: usize,
    spec: KernelSpec,
) -> Result<(GridOutput<T>, GridCache<T>)> {
    let (sh, sw) = (density.height(), density.width());
    if target_h == 0 || target_w == 0 {
        return Err(Error::InvalidDimension("target dims must be positive".into()));
    }
    if target_h > sh || target_w > sw {
        return Err(Error::InvalidDimension(format!(
            "target {target_h}x{target_w} exceeds source {sh}x{sw}"
        )));
    }
    let kernel = gaussian_kernel::<T>(spec);
    let sigma = spec.sigma as isize;
    let d = density.values();

    let mut gh = Array2::zeros((target_h, target_w));
    let mut gw = Array2::zeros((target_h, target_w));
    let mut den = Array2::zeros((target_h, target_w));
    let mut fallback = Array2::from_elem((target_h, target_w), false);
    let mut fallbacks = 0usize;

    let inv_h = T::one() / T::from_usize_lit(sh);
    let inv_w = T::one() / T::from_usize_lit(sw);

    for i in 0..target_h {
        for j in 0..target_w {
            let (ci, cj) = window_center(i, j, target_h, target_w, sh, sw);
            let ri = round_half_away(ci).clamp(0, sh as isize - 1);
            let rj = round_half_away(cj).clamp(0, sw as isize - 1);

            let mut num_h = T::zero();
            let mut num_w = T::zero();
            let mut sum = T::zero();
            for a in -sigma..=sigma {
                let p = ri + a;
                if p < 0 || p >= sh as isize {
                    continue;
                }
                let krow = kernel.row((a + sigma) as usize);
                let drow = d.row(p as usize);
                let pc = T::from_usize_lit(p as usize) * inv_h;
                for b in -sigma..=sigma {
                    let q = rj + b;
                    if q < 0 || q >= sw as isize {
                        continue;
                    }
                    let w = drow[q as usize] * krow[(b + sigma) as usize];
                    sum += w;
                    num_h += w * pc;
                    num_w += w * T::from_usize_lit(q as usize) * inv_w;
                }
            }

            if sum > T::zero() {
                gh[[i, j]] = (num_h / sum).min(T::one()).max(T::zero());
                gw[[i, j]] = (num_w / sum).min(T::one()).max(T::zero());
            } else {
                // All-zero saliency in the window: fall back to the uniform
                // coordinate and count the event instead of failing.
                gh[[i, j]] = T::from_usize_lit(i) / T::from_usize_lit(target_h);
                gw[[i, j]] = T::from_usize_lit(j) / T::from_usize_lit(target_w);
                fallback[[i, j]] = true;
                fallbacks += 1;
            }
            den[[i, j]] = sum;
        }
    }

    let grid = SamplingGrid { gh, gw, source_h: sh, source_w: sw };
    Ok((
        GridOutput { grid, zero_saliency_fallbacks: fallbacks },
        GridCache { den, fallback },
    ))
}

/// Gradient of a scalar loss through [`compute_grid`] with respect to the
/// saliency densities. Fallback pixels contribute no gradient.
pub fn compute_grid_backward<T: Real>(
    density: &SaliencyMap<T>,
    spec: KernelSpec,
    grid: &SamplingGrid<T>,
    cache: &GridCache<T>,
    d_gh: &Array2<T>,
    d_gw: &Array2<T>,
) -> Array2<T> {
    let (sh, sw) = (density.height(), density.width());
    let (th, tw) = grid.target_dims();
    let kernel = gaussian_kernel::<T>(spec);
    let sigma = spec.sigma as isize;
    let d = density.values();
    let inv_h = T::one() / T::from_usize_lit(sh);
    let inv_w = T::one() / T::from_usize_lit(sw);

    let mut grad = Array2::zeros((sh, sw));
    for i in 0..th {
        for j in 0..tw {
            if cache.fallback[[i, j]] {
                continue;
            }
            let gh_ij = grid.gh[[i, j]];
            let gw_ij = grid.gw[[i, j]];
            let inv_den = T::one() / cache.den[[i, j]];
            let gi = d_gh[[i, j]];
            let gj = d_gw[[i, j]];
            if gi == T::zero() && gj == T::zero() {
                continue;
            }
            let (ci, cj) = window_center(i, j, th, tw, sh, sw);
            let ri = round_half_away(ci).clamp(0, sh as isize - 1);
            let rj = round_half_away(cj).clamp(0, sw as isize - 1);
            for a in -sigma..=sigma {
                let p = ri + a;
                if p < 0 || p >= sh as isize {
                    continue;
                }
                let krow = kernel.row((a + sigma) as usize);
                let pc = T::from_usize_lit(p as usize) * inv_h;
                for b in -sigma..=sigma {
                    let q = rj + b;
                    if q < 0 || q >= sw as isize {
                        continue;
                    }
                    let k = krow[(b + sigma) as usize];
                    let qc = T::from_usize_lit(q as usize) * inv_w;
                    // d gh / d D[p,q] = k * (p/H - gh) / den
                    grad[[p as usize, q as usize]] +=
                        k * inv_den * (gi * (pc - gh_ij) + gj * (qc - gw_ij));
                    let _ = d;
                }
            }
        }
    }
    grad
}

/// Interpolation mode for [`warp`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarpMode {
    /// Rounding sampler; zero gradient, inference only.
    Nearest,
    /// Differentiable relaxation used during training.
    Bilinear,
}

fn check_grid_matches<T: Real>(grid: &SamplingGrid<T>, sh: usize, sw: usize) -> Result<()> {
    if grid.source_dims() != (sh, sw) {
        return Err(Error::shape(
            format!("{:?}", grid.source_dims()),
            format!("{:?}", (sh, sw)),
            "grid source dims vs image",
        ));
    }
    Ok(())
}

/// Nearest-mode source indices for every target pixel: `round(g*S)` clamped to
/// the valid range.
pub fn nearest_indices<T: Real>(grid: &SamplingGrid<T>) -> (Array2<usize>, Array2<usize>) {
    let (sh, sw) = grid.source_dims();
    let rows = grid.gh.mapv(|g| {
        (round_half_away(g.to_f64_lit() * sh as f64).max(0) as usize).min(sh - 1)
    });
    let cols = grid.gw.mapv(|g| {
        (round_half_away(g.to_f64_lit() * sw as f64).max(0) as usize).min(sw - 1)
    });
    (rows, cols)
}

/// Warp a `[C, H, W]` source image onto the grid, producing `[C, h, w]`.
pub fn warp<T: Real>(source: &Array3<T>, grid: &SamplingGrid<T>, mode: WarpMode) -> Result<Array3<T>> {
    let (channels, sh, sw) = source.dim();
    check_grid_matches(grid, sh, sw)?;
    let (th, tw) = grid.target_dims();
    let mut out = Array3::zeros((channels, th, tw));
    match mode {
        WarpMode::Nearest => {
            let (rows, cols) = nearest_indices(grid);
            for c in 0..channels {
                for i in 0..th {
                    for j in 0..tw {
                        out[[c, i, j]] = source[[c, rows[[i, j]], cols[[i, j]]]];
                    }
                }
            }
        }
        WarpMode::Bilinear => {
            for i in 0..th {
                for j in 0..tw {
                    let (y0, y1, fy) = bilinear_axis(grid.gh[[i, j]], sh);
                    let (x0, x1, fx) = bilinear_axis(grid.gw[[i, j]], sw);
                    let w00 = (T::one() - fy) * (T::one() - fx);
                    let w01 = (T::one() - fy) * fx;
                    let w10 = fy * (T::one() - fx);
                    let w11 = fy * fx;
                    for c in 0..channels {
                        out[[c, i, j]] = w00 * source[[c, y0, x0]]
                            + w01 * source[[c, y0, x1]]
                            + w10 * source[[c, y1, x0]]
                            + w11 * source[[c, y1, x1]];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Map a normalized coordinate to bilinear taps: sample position `g*(S-1)`.
fn bilinear_axis<T: Real>(g: T, extent: usize) -> (usize, usize, T) {
    if extent == 1 {
        return (0, 0, T::zero());
    }
    let pos = g * T::from_usize_lit(extent - 1);
    let mut lo = pos.floor().to_f64_lit() as isize;
    lo = lo.clamp(0, extent as isize - 2);
    let frac = pos - T::from_usize_lit(lo as usize);
    (lo as usize, lo as usize + 1, frac)
}

/// Gradients of a scalar loss through the bilinear warp: with respect to the
/// grid coordinates and to the source image.
pub fn warp_backward<T: Real>(
    source: &Array3<T>,
    grid: &SamplingGrid<T>,
    d_out: &Array3<T>,
) -> Result<(Array2<T>, Array2<T>, Array3<T>)> {
    let (channels, sh, sw) = source.dim();
    check_grid_matches(grid, sh, sw)?;
    let (th, tw) = grid.target_dims();
    if d_out.dim() != (channels, th, tw) {
        return Err(Error::shape(
            format!("{:?}", (channels, th, tw)),
            format!("{:?}", d_out.dim()),
            "warp output gradient",
        ));
    }
    let mut d_gh = Array2::zeros((th, tw));
    let mut d_gw = Array2::zeros((th, tw));
    let mut d_src = Array3::zeros((channels, sh, sw));
    let scale_y = T::from_usize_lit(sh.saturating_sub(1));
    let scale_x = T::from_usize_lit(sw.saturating_sub(1));
    for i in 0..th {
        for j in 0..tw {
            let (y0, y1, fy) = bilinear_axis(grid.gh[[i, j]], sh);
            let (x0, x1, fx) = bilinear_axis(grid.gw[[i, j]], sw);
            let mut dy = T::zero();
            let mut dx = T::zero();
            for c in 0..channels {
                let g = d_out[[c, i, j]];
                if g == T::zero() {
                    continue;
                }
                let f00 = source[[c, y0, x0]];
                let f01 = source[[c, y0, x1]];
                let f10 = source[[c, y1, x0]];
                let f11 = source[[c, y1, x1]];
                // d out / d fy and d out / d fx
                dy += g * ((T::one() - fx) * (f10 - f00) + fx * (f11 - f01));
                dx += g * ((T::one() - fy) * (f01 - f00) + fy * (f11 - f10));
                d_src[[c, y0, x0]] += g * (T::one() - fy) * (T::one() - fx);
                d_src[[c, y0, x1]] += g * (T::one() - fy) * fx;
                d_src[[c, y1, x0]] += g * fy * (T::one() - fx);
                d_src[[c, y1, x1]] += g * fy * fx;
            }
            d_gh[[i, j]] = dy * scale_y;
            d_gw[[i, j]] = dx * scale_x;
        }
    }
    Ok((d_gh, d_gw, d_src))
}

/// Uniform downsampling: `out[i,j] = src[round(i*H/h), round(j*W/w)]`, indices
/// clamped to the valid range.
pub fn uniform_downsample<T: Real>(source: &Array3<T>, target_h: usize, target_w: usize) -> Result<Array3<T>> {
    let (channels, sh, sw) = source.dim();
    if target_h == 0 || target_w == 0 || target_h > sh || target_w > sw {
        return Err(Error::InvalidDimension(format!(
            "uniform downsample {sh}x{sw} -> {target_h}x{target_w}"
        )));
    }
    let rows: Vec<usize> = (0..target_h)
        .map(|i| (round_half_away(i as f64 * sh as f64 / target_h as f64).max(0) as usize).min(sh - 1))
        .collect();
    let cols: Vec<usize> = (0..target_w)
        .map(|j| (round_half_away(j as f64 * sw as f64 / target_w as f64).max(0) as usize).min(sw - 1))
        .collect();
    let mut out = Array3::zeros((channels, target_h, target_w));
    for c in 0..channels {
        for (i, &p) in rows.iter().enumerate() {
            for (j, &q) in cols.iter().enumerate() {
                out[[c, i, j]] = source[[c, p, q]];
            }
        }
    }
    Ok(out)
}

/// Result of the reverse sampler, with the number of source pixels that were
/// not covered by any scattered value and had to be filled from the nearest
/// scatter point.
#[derive(Debug, Clone)]
pub struct UnwarpOutput<T> {
    pub values: Array3<T>,
    pub uncovered: usize,
}

/// Reverse sampler: project a `[K, h, w]` downsampled prediction back to the
/// full `[K, H, W]` source space.
///
/// Each target value is scattered bilinearly at its grid location; source
/// pixels then take the weight-normalized accumulated value. Pixels no
/// scatter touched are filled from the Euclidean-nearest scatter point, ties
/// broken toward the lowest target index in row-major order.
pub fn unwarp<T: Real>(yhat: &Array3<T>, grid: &SamplingGrid<T>) -> Result<UnwarpOutput<T>> {
    let (k, th, tw) = yhat.dim();
    if grid.target_dims() != (th, tw) {
        return Err(Error::shape(
            format!("{:?}", grid.target_dims()),
            format!("{:?}", (th, tw)),
            "unwarp input vs grid",
        ));
    }
    let (sh, sw) = grid.source_dims();
    let mut acc = Array3::<T>::zeros((k, sh, sw));
    let mut wsum = Array2::<T>::zeros((sh, sw));
    // Snap scatter positions to a 1e-4-pixel quantum. Grid coordinates carry
    // accumulation noise in the last ulps; without snapping that noise decides
    // which side of an integer boundary a splat lands on and coverage becomes
    // seed-dependent.
    let snap = |pos: T| -> T {
        let q = 1e4;
        T::from_f64_lit((pos.to_f64_lit() * q).round() / q)
    };
    // Scatter positions in source pixel units, kept for the fill pass.
    let mut positions = Vec::with_capacity(th * tw);
    for i in 0..th {
        for j in 0..tw {
            let y = snap((grid.gh[[i, j]] * T::from_usize_lit(sh)).min(T::from_usize_lit(sh - 1)));
            let x = snap((grid.gw[[i, j]] * T::from_usize_lit(sw)).min(T::from_usize_lit(sw - 1)));
            positions.push((y, x));
            let y0 = y.floor().to_f64_lit() as usize;
            let x0 = x.floor().to_f64_lit() as usize;
            let fy = y - T::from_usize_lit(y0);
            let fx = x - T::from_usize_lit(x0);
            let mut splat = |p: usize, q: usize, w: T| {
                if w > T::zero() {
                    wsum[[p, q]] += w;
                    for c in 0..k {
                        acc[[c, p, q]] += w * yhat[[c, i, j]];
                    }
                }
            };
            splat(y0, x0, (T::one() - fy) * (T::one() - fx));
            if x0 + 1 < sw {
                splat(y0, x0 + 1, (T::one() - fy) * fx);
            }
            if y0 + 1 < sh {
                splat(y0 + 1, x0, fy * (T::one() - fx));
                if x0 + 1 < sw {
                    splat(y0 + 1, x0 + 1, fy * fx);
                }
            }
        }
    }

    let mut out = Array3::<T>::zeros((k, sh, sw));
    let mut uncovered = 0usize;
    for p in 0..sh {
        for q in 0..sw {
            if wsum[[p, q]] > T::zero() {
                for c in 0..k {
                    out[[c, p, q]] = acc[[c, p, q]] / wsum[[p, q]];
                }
            } else {
                uncovered += 1;
                let mut best = T::infinity();
                let mut best_idx = 0usize;
                for (idx, &(y, x)) in positions.iter().enumerate() {
                    let dy = y - T::from_usize_lit(p);
                    let dx = x - T::from_usize_lit(q);
                    let dist = dy * dy + dx * dx;
                    if dist < best {
                        best = dist;
                        best_idx = idx;
                    }
                }
                let (i, j) = (best_idx / tw, best_idx % tw);
                for c in 0..k {
                    out[[c, p, q]] = yhat[[c, i, j]];
                }
            }
        }
    }
    Ok(UnwarpOutput { values: out, uncovered })
}

/// Subsample a one-hot label map with the nearest-mode sampler, so labels are
/// never blended. Input is `[K, H, W]` one-hot per pixel.
pub fn subsample_labels<T: Real>(labels: &Array3<T>, grid: &SamplingGrid<T>) -> Result<Array3<T>> {
    let (k, sh, sw) = labels.dim();
    check_grid_matches(grid, sh, sw)?;
    for p in 0..sh {
        for q in 0..sw {
            let mut ones = 0usize;
            for c in 0..k {
                let x = labels[[c, p, q]];
                if x == T::one() {
                    ones += 1;
                } else if x != T::zero() {
                    return Err(Error::Validation(format!(
                        "label map must be one-hot, found {x} at ({p},{q})"
                    )));
                }
            }
            if ones != 1 {
                return Err(Error::Validation(format!(
                    "label map must be one-hot, found {ones} ones at ({p},{q})"
                )));
            }
        }
    }
    warp(labels, grid, WarpMode::Nearest)
}
