//! Gaze representations: normalized gaze points, timestamped traces, the
//! inverse-distance gaze map used as a conditioning channel, and the saccade
//! predicate used by the frame scheduler.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// A gaze location in normalized image coordinates.
///
/// `u` is the vertical (row) coordinate, `v` the horizontal (column)
/// coordinate, both in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GazePoint<T> {
    u: T,
    v: T,
}

impl<T: Real> GazePoint<T> {
    pub fn new(u: T, v: T) -> Result<Self> {
        let in_unit = |x: T| x >= T::zero() && x <= T::one() && x.is_finite();
        if !in_unit(u) || !in_unit(v) {
            return Err(Error::Validation(format!(
                "gaze coordinates must lie in [0,1], got ({u}, {v})"
            )));
        }
        Ok(Self { u, v })
    }

    pub fn u(&self) -> T {
        self.u
    }

    pub fn v(&self) -> T {
        self.v
    }

    /// Pixel coordinates on an `H x W` image: `(round(u*(H-1)), round(v*(W-1)))`,
    /// rounding half away from zero.
    pub fn to_pixel(&self, height: usize, width: usize) -> (usize, usize) {
        let r = (self.u * T::from_usize_lit(height - 1)).round();
        let c = (self.v * T::from_usize_lit(width - 1)).round();
        (
            (r.to_f64_lit() as usize).min(height - 1),
            (c.to_f64_lit() as usize).min(width - 1),
        )
    }

    /// The gaze point whose `to_pixel` lands exactly on `(row, col)`.
    pub fn from_pixel(row: usize, col: usize, height: usize, width: usize) -> Result<Self> {
        if row >= height || col >= width {
            return Err(Error::Validation(format!(
                "pixel ({row}, {col}) outside {height}x{width} image"
            )));
        }
        let u = if height == 1 {
            T::zero()
        } else {
            T::from_usize_lit(row) / T::from_usize_lit(height - 1)
        };
        let v = if width == 1 {
            T::zero()
        } else {
            T::from_usize_lit(col) / T::from_usize_lit(width - 1)
        };
        Ok(Self { u, v })
    }
}

/// Squared displacement between two gaze points, in squared normalized units.
pub fn gaze_displacement_sq<T: Real>(a: GazePoint<T>, b: GazePoint<T>) -> T {
    let du = a.u - b.u;
    let dv = a.v - b.v;
    du * du + dv * dv
}

/// Saccade predicate: true iff the squared displacement exceeds `alpha`.
pub fn is_saccade<T: Real>(g_t: GazePoint<T>, g_last: GazePoint<T>, alpha: T) -> Result<bool> {
    if !(alpha > T::zero()) {
        return Err(Error::InvalidThreshold(format!(
            "saccade threshold must be positive, got {alpha}"
        )));
    }
    Ok(gaze_displacement_sq(g_t, g_last) > alpha)
}

/// Ordered sequence of timestamped gaze points.
#[derive(Debug, Clone, PartialEq)]
pub struct GazeTrace<T> {
    entries: Vec<(f64, GazePoint<T>)>,
}

impl<T: Real> GazeTrace<T> {
    /// Timestamps must be strictly increasing; the trace must be non-empty.
    pub fn new(entries: Vec<(f64, GazePoint<T>)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Validation("gaze trace must be non-empty".into()));
        }
        for w in entries.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Validation(format!(
                    "gaze trace timestamps must be strictly increasing ({} then {})",
                    w[0].0, w[1].0
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(f64, GazePoint<T>)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        false // enforced non-empty at construction
    }

    pub fn points(&self) -> impl Iterator<Item = GazePoint<T>> + '_ {
        self.entries.iter().map(|(_, g)| *g)
    }

    /// Parse the plain-text trace format: one `timestamp,u,v` row per line
    /// after a single header line.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Parse { line: 1, message: "empty trace file".into() })?;
        if header.split(',').count() != 3 {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header `timestamp,u,v`, got `{header}`"),
            });
        }
        for (idx, raw) in lines {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected 3 comma-separated fields, got {}", fields.len()),
                });
            }
            let parse = |s: &str, name: &str| -> Result<f64> {
                s.trim().parse::<f64>().map_err(|e| Error::Parse {
                    line: line_no,
                    message: format!("bad {name} value `{s}`: {e}"),
                })
            };
            let t = parse(fields[0], "timestamp")?;
            let u = parse(fields[1], "u")?;
            let v = parse(fields[2], "v")?;
            let gaze = GazePoint::new(T::from_f64_lit(u), T::from_f64_lit(v)).map_err(|e| {
                Error::Parse { line: line_no, message: e.to_string() }
            })?;
            if let Some(&(prev, _)) = entries.last() {
                if t <= prev {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("timestamp {t} not increasing (previous {prev})"),
                    });
                }
            }
            entries.push((t, gaze));
        }
        GazeTrace::new(entries)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("timestamp,u,v\n");
        for (t, g) in &self.entries {
            out.push_str(&format!("{},{},{}\n", t, g.u().to_f64_lit(), g.v().to_f64_lit()));
        }
        out
    }
}

/// Per-pixel normalized inverse distance to the gaze point. The value is 1 at
/// the gaze pixel and decays with Euclidean pixel distance, normalized by
/// `d_max = sqrt(H^2 + W^2)` so every entry stays strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct GazeMap<T> {
    values: Array2<T>,
}

impl<T: Real> GazeMap<T> {
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

/// Build the gaze map `N[i,j] = 1 - sqrt((i-u_px)^2 + (j-v_px)^2) / d_max`.
pub fn build_gaze_map<T: Real>(height: usize, width: usize, gaze: GazePoint<T>) -> Result<GazeMap<T>> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidDimension(format!(
            "gaze map dimensions must be positive, got {height}x{width}"
        )));
    }
    let (u_px, v_px) = gaze.to_pixel(height, width);
    let d_max = ((height * height + width * width) as f64).sqrt();
    let values = Array2::from_shape_fn((height, width), |(i, j)| {
        let di = i as f64 - u_px as f64;
        let dj = j as f64 - v_px as f64;
        T::from_f64_lit(1.0 - (di * di + dj * dj).sqrt() / d_max)
    });
    Ok(GazeMap { values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn gp(u: f64, v: f64) -> GazePoint<f64> {
        GazePoint::new(u, v).unwrap()
    }

    #[test]
    fn gaze_point_rejects_out_of_range() {
        assert!(GazePoint::new(1.5f64, 0.0).is_err());
        assert!(GazePoint::new(-0.1f64, 0.0).is_err());
        assert!(GazePoint::new(0.0f64, 1.0000001).is_err());
        assert!(GazePoint::new(f64::NAN, 0.5).is_err());
    }

    #[test]
    fn pixel_conversion_rounds_half_away_from_zero() {
        // u = 0.5 on a 4-row image: 0.5*3 = 1.5 rounds to 2.
        assert_eq!(gp(0.5, 0.5).to_pixel(4, 4), (2, 2));
        assert_eq!(gp(0.0, 1.0).to_pixel(10, 10), (0, 9));
        assert_eq!(gp(1.0, 0.0).to_pixel(1, 1), (0, 0));
    }

    #[test]
    fn gaze_map_peak_and_corner_values() {
        let n = build_gaze_map(100, 100, gp(0.0, 0.0)).unwrap();
        assert_eq!(n.values()[[0, 0]], 1.0);
        // 1 - sqrt(99^2 + 99^2)/sqrt(100^2 + 100^2) = 1 - 99/100
        assert_abs_diff_eq!(n.values()[[99, 99]], 0.01, epsilon = 1e-12);
        assert!(n.values()[[0, 1]] > n.values()[[0, 2]]);
    }

    #[test]
    fn gaze_map_values_strictly_positive_and_peak_unique() {
        let n = build_gaze_map::<f64>(17, 31, gp(0.3, 0.7)).unwrap();
        let (u_px, v_px) = gp(0.3, 0.7).to_pixel(17, 31);
        let mut ones = 0;
        for ((i, j), &x) in n.values().indexed_iter() {
            assert!(x > 0.0 && x <= 1.0, "value {x} at ({i},{j}) out of range");
            if x == 1.0 {
                ones += 1;
                assert_eq!((i, j), (u_px, v_px));
            }
        }
        assert_eq!(ones, 1);
    }

    #[test]
    fn gaze_map_transpose_symmetry_on_square_images() {
        let g = gp(0.25, 0.6);
        let gt = gp(0.6, 0.25);
        let n = build_gaze_map(33, 33, g).unwrap();
        let nt = build_gaze_map(33, 33, gt).unwrap();
        assert_eq!(n.values().t().to_owned(), nt.values().clone());
    }

    #[test]
    fn gaze_map_rejects_zero_dims() {
        assert!(build_gaze_map(0, 5, gp(0.0, 0.0)).is_err());
        assert!(build_gaze_map(5, 0, gp(0.0, 0.0)).is_err());
    }

    #[test]
    fn displacement_examples() {
        assert_eq!(gaze_displacement_sq(gp(0.5, 0.5), gp(0.5, 0.5)), 0.0);
        assert_abs_diff_eq!(gaze_displacement_sq(gp(0.0, 0.0), gp(1.0, 1.0)), 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(gaze_displacement_sq(gp(0.3, 0.4), gp(0.0, 0.0)), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn saccade_threshold_semantics() {
        assert!(is_saccade(gp(0.2, 0.0), gp(0.0, 0.0), 0.01).unwrap());
        assert!(!is_saccade(gp(0.05, 0.0), gp(0.0, 0.0), 0.01).unwrap());
        assert!(!is_saccade(gp(0.4, 0.4), gp(0.4, 0.4), 0.5).unwrap());
        assert!(is_saccade(gp(0.0, 0.0), gp(0.0, 0.0), 0.0).is_err());
        assert!(is_saccade(gp(0.0, 0.0), gp(0.0, 0.0), -1.0).is_err());
    }

    #[test]
    fn saccade_is_symmetric() {
        let a = gp(0.1, 0.9);
        let b = gp(0.8, 0.2);
        for alpha in [1e-3, 0.3, 1.9] {
            assert_eq!(
                is_saccade(a, b, alpha).unwrap(),
                is_saccade(b, a, alpha).unwrap()
            );
        }
    }

    #[test]
    fn trace_csv_round_trip_and_errors() {
        let text = "timestamp,u,v\n0.0,0.5,0.5\n0.033,0.52,0.5\n0.066,0.5,0.48\n";
        let trace: GazeTrace<f64> = GazeTrace::parse_csv(text).unwrap();
        assert_eq!(trace.len(), 3);
        let back = GazeTrace::<f64>::parse_csv(&trace.to_csv()).unwrap();
        assert_eq!(back, trace);

        // Decreasing timestamp names the offending line.
        let bad = "timestamp,u,v\n0.0,0.5,0.5\n0.0,0.5,0.5\n";
        match GazeTrace::<f64>::parse_csv(bad) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }

        // Out-of-range coordinate.
        let bad = "timestamp,u,v\n0.0,1.5,0.5\n";
        assert!(GazeTrace::<f64>::parse_csv(bad).is_err());

        // Empty trace.
        assert!(GazeTrace::<f64>::parse_csv("timestamp,u,v\n").is_err());
    }
}
