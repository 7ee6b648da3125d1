//! Chamfer and Hausdorff distances between point sets, accelerated by a
//! uniform voxel grid.

use rayon::prelude::*;
use thiserror::Error;

use crate::abe::{Sealer, SecureRng};
use crate::codec::{encrypt_frame_with, zero_fill, CodecError};
use crate::pattern::{Granularity, Pattern};
use crate::ply::{parse_ply, write_ply, PointCloud};

pub type Point = [f64; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("point set is empty")]
    EmptySet,
    #[error("point {0} has a non-finite coordinate")]
    NonFinite(usize),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    points: Vec<Point>,
    min: Point,
    max: Point,
}

impl PointSet {
    pub fn new(points: Vec<Point>) -> Result<Self, MetricsError> {
        if points.is_empty() {
            return Err(MetricsError::EmptySet);
        }
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for (i, p) in points.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(MetricsError::NonFinite(i));
            }
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        Ok(PointSet { points, min, max })
    }

    pub fn from_cloud(cloud: &PointCloud) -> Result<Self, MetricsError> {
        Self::new(cloud.positions().collect())
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn bounds(&self) -> (Point, Point) {
        (self.min, self.max)
    }
}

#[inline]
fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Dense voxel grid in compressed row form: the points of cell `c` are
/// `points[starts[c]..starts[c + 1]]`. Coincident points are stored once.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    origin: Point,
    edge: f64,
    dims: [usize; 3],
    starts: Vec<u32>,
    points: Vec<Point>,
}

/// Upper bound on grid cells per stored point.
const MAX_CELLS_PER_POINT: usize = 4;

impl SpatialIndex {
    pub fn build(set: &PointSet) -> Self {
        let mut unique = set.points.clone();
        unique.sort_unstable_by(|a, b| {
            a.iter()
                .zip(b)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        unique.dedup();
        let n = unique.len();

        let extent: Vec<f64> = (0..3).map(|a| set.max[a] - set.min[a]).collect();
        let live: Vec<f64> = extent.iter().copied().filter(|e| *e > 0.0).collect();
        let mut edge = if live.is_empty() {
            1.0
        } else {
            (live.iter().product::<f64>() / n as f64).powf(1.0 / live.len() as f64)
        };
        if !(edge.is_finite() && edge > 0.0) {
            edge = live.iter().cloned().fold(1.0, f64::max);
        }
        let dims_for = |edge: f64| -> [usize; 3] {
            let mut d = [1usize; 3];
            for a in 0..3 {
                d[a] = ((extent[a] / edge).floor() as usize).saturating_add(1);
            }
            d
        };
        let mut dims = dims_for(edge);
        let budget = n.saturating_mul(MAX_CELLS_PER_POINT).max(64);
        while dims.iter().try_fold(1usize, |acc, d| acc.checked_mul(*d)).is_none_or(|c| c > budget) {
            edge *= 1.5;
            dims = dims_for(edge);
        }

        let mut index = SpatialIndex {
            origin: set.min,
            edge,
            dims,
            starts: Vec::new(),
            points: Vec::new(),
        };
        let cells = dims[0] * dims[1] * dims[2];
        let keys: Vec<usize> = unique.iter().map(|p| index.flat(index.cell_of(p))).collect();
        let mut counts = vec![0u32; cells + 1];
        for &k in &keys {
            counts[k + 1] += 1;
        }
        for c in 0..cells {
            counts[c + 1] += counts[c];
        }
        let mut fill = counts.clone();
        let mut ordered = vec![[0.0; 3]; n];
        for (p, &k) in unique.iter().zip(&keys) {
            ordered[fill[k] as usize] = *p;
            fill[k] += 1;
        }
        index.starts = counts;
        index.points = ordered;
        index
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn cell_edge(&self) -> f64 {
        self.edge
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    /// Cell containing `p`, clamped onto the grid for outside points.
    fn cell_of(&self, p: &Point) -> [usize; 3] {
        let mut c = [0usize; 3];
        for a in 0..3 {
            let t = ((p[a] - self.origin[a]) / self.edge).floor();
            c[a] = if t <= 0.0 { 0 } else { (t as usize).min(self.dims[a] - 1) };
        }
        c
    }

    #[inline]
    fn flat(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    fn cell_points(&self, c: [usize; 3]) -> &[Point] {
        let k = self.flat(c);
        &self.points[self.starts[k] as usize..self.starts[k + 1] as usize]
    }

    fn scan_cell(&self, c: [usize; 3], q: &Point, best: &mut (f64, Point)) {
        for p in self.cell_points(c) {
            let d = dist2(p, q);
            if d < best.0 {
                *best = (d, *p);
            }
        }
    }

    /// Scans every cell at Chebyshev distance exactly `r` from `c`.
    fn scan_shell(&self, c: [usize; 3], r: usize, q: &Point, best: &mut (f64, Point)) {
        let range = |a: usize| {
            let lo = c[a].saturating_sub(r);
            let hi = (c[a] + r).min(self.dims[a] - 1);
            (lo, hi)
        };
        let (x0, x1) = range(0);
        let (y0, y1) = range(1);
        let (z0, z1) = range(2);
        for x in x0..=x1 {
            let on_x = x.abs_diff(c[0]) == r;
            for y in y0..=y1 {
                if on_x || y.abs_diff(c[1]) == r {
                    for z in z0..=z1 {
                        self.scan_cell([x, y, z], q, best);
                    }
                } else {
                    if c[2] >= r {
                        self.scan_cell([x, y, c[2] - r], q, best);
                    }
                    if r > 0 && c[2] + r < self.dims[2] {
                        self.scan_cell([x, y, c[2] + r], q, best);
                    }
                }
            }
        }
    }

    /// Exact nearest stored point to `q` and its distance.
    ///
    /// Shells grow around the cell of `q` projected onto the grid box. After
    /// shell `r`, every unscanned point lies at least `r` edges from the
    /// projection, so the search stops once the best candidate is no
    /// farther than that bound.
    pub fn nearest(&self, q: &Point) -> (Point, f64) {
        assert!(!self.points.is_empty(), "nearest on an empty index");
        let c = self.cell_of(q);
        let mut outside2 = 0.0;
        for a in 0..3 {
            let hi = self.origin[a] + self.edge * self.dims[a] as f64;
            let p = q[a].clamp(self.origin[a], hi);
            outside2 += (q[a] - p) * (q[a] - p);
        }
        let max_r = self.dims.iter().max().copied().unwrap_or(1);
        let mut best = (f64::INFINITY, [0.0; 3]);
        for r in 0..=max_r {
            self.scan_shell(c, r, q, &mut best);
            let reach = r as f64 * self.edge;
            if best.0 <= outside2 + reach * reach {
                break;
            }
        }
        (best.1, best.0.sqrt())
    }
}

/// Nearest-neighbour distance sum and maximum for every point of `from`.
fn directional(from: &PointSet, to: &SpatialIndex) -> (f64, f64) {
    const CHUNK: usize = 2048;
    let partials: Vec<(f64, f64)> = from
        .points
        .par_chunks(CHUNK)
        .map(|chunk| {
            chunk.iter().fold((0.0, 0.0f64), |(sum, max), q| {
                let d = to.nearest(q).1;
                (sum + d, max.max(d))
            })
        })
        .collect();
    partials
        .into_iter()
        .fold((0.0, 0.0f64), |(s, m), (cs, cm)| (s + cs, m.max(cm)))
}

/// Chamfer and Hausdorff distances computed from one pair of index passes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Distances {
    pub chamfer: f64,
    pub hausdorff: f64,
}

pub fn distances(a: &PointSet, b: &PointSet) -> Distances {
    let ia = SpatialIndex::build(a);
    let ib = SpatialIndex::build(b);
    let (sum_ab, max_ab) = directional(a, &ib);
    let (sum_ba, max_ba) = directional(b, &ia);
    Distances {
        chamfer: 0.5 * (sum_ab / a.len() as f64 + sum_ba / b.len() as f64),
        hausdorff: max_ab.max(max_ba),
    }
}

pub fn chamfer(a: &PointSet, b: &PointSet) -> Result<f64, MetricsError> {
    Ok(distances(a, b).chamfer)
}

pub fn hausdorff(a: &PointSet, b: &PointSet) -> Result<f64, MetricsError> {
    Ok(distances(a, b).hausdorff)
}

pub fn nearest_neighbor(index: &SpatialIndex, p: &Point) -> (Point, f64) {
    index.nearest(p)
}

/// Quadratic reference implementations.
pub mod brute {
    use super::{dist2, Point, PointSet};

    pub fn nearest(set: &[Point], q: &Point) -> (Point, f64) {
        let best = set
            .iter()
            .map(|p| (dist2(p, q), *p))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .expect("non-empty set");
        (best.1, best.0.sqrt())
    }

    fn directional(from: &PointSet, to: &PointSet) -> (f64, f64) {
        from.points().iter().fold((0.0, 0.0f64), |(s, m), q| {
            let d = nearest(to.points(), q).1;
            (s + d, m.max(d))
        })
    }

    pub fn chamfer(a: &PointSet, b: &PointSet) -> f64 {
        0.5 * (directional(a, b).0 / a.len() as f64 + directional(b, a).0 / b.len() as f64)
    }

    pub fn hausdorff(a: &PointSet, b: &PointSet) -> f64 {
        directional(a, b).1.max(directional(b, a).1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub pattern: Pattern,
    pub chamfer: f64,
    pub hausdorff: f64,
}

pub const REPORT_HEADER: &str = "pattern,chamfer,hausdorff";

/// Distances between `original` and its zero-filled view under each pattern.
pub fn obfuscation_report(
    original: &PointCloud,
    patterns: &[Pattern],
    sealer: &dyn Sealer,
    rng: &mut dyn SecureRng,
) -> Result<Vec<ReportRow>, MetricsError> {
    let reference = PointSet::from_cloud(original)?;
    let reference_index = SpatialIndex::build(&reference);
    let bytes = write_ply(original, None);
    let mut rows = Vec::with_capacity(patterns.len());
    for &pattern in patterns {
        let enc = encrypt_frame_with(&bytes, Granularity::Selective(pattern), sealer, rng)?;
        let filled = zero_fill(&enc)?;
        let (view, _) = parse_ply(&filled).map_err(CodecError::from)?;
        let view = PointSet::from_cloud(&view)?;
        let view_index = SpatialIndex::build(&view);
        let (sum_ab, max_ab) = directional(&reference, &view_index);
        let (sum_ba, max_ba) = directional(&view, &reference_index);
        rows.push(ReportRow {
            pattern,
            chamfer: 0.5 * (sum_ab / reference.len() as f64 + sum_ba / view.len() as f64),
            hausdorff: max_ab.max(max_ba),
        });
    }
    Ok(rows)
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{:.12e},{:.12e}\n", r.pattern, r.chamfer, r.hausdorff));
    }
    out
}

pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_HEADER) {
        return Err("missing report header".into());
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let [p, c, h] = f[..] else {
                return Err(format!("bad row `{line}`"));
            };
            Ok(ReportRow {
                pattern: p.parse().map_err(|e| format!("{e}"))?,
                chamfer: c.parse().map_err(|e| format!("{e}"))?,
                hausdorff: h.parse().map_err(|e| format!("{e}"))?,
            })
        })
        .collect()
}
