//! Convex polygon arithmetic for the coverage arena: Voronoi tessellation by
//! incremental halfplane clipping, Pontryagin erosion by a disk, membership
//! tests, and time-indexed partition sequences.
//!
//! Conventions
//! - Polygons store a counter-clockwise vertex loop and the matching halfplane
//!   list `{q : n·q <= b}` with unit outward normals. Both always describe the
//!   same set; the halfplanes are rebuilt from the vertex loop after every
//!   clipping operation.
//! - An over-eroded polygon collapses to the EMPTY polygon (zero vertices).
//!   EMPTY is a valid value, not an error; callers decide what it means.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point = Vector2<f64>;

/// Tolerance used for vertex deduplication.
pub const VERTEX_TOL: f64 = 1e-12;
/// Default tolerance for geometric predicates.
pub const GEOM_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("two generators coincide within 1e-9 m (indices {0} and {1})")]
    CoincidentGenerators(usize, usize),
    #[error("generator {0} lies outside the arena")]
    OutsideArena(usize),
    #[error("operation on an EMPTY polygon")]
    EmptyPolygon,
    #[error("need at least two agents, got {0}")]
    TooFewAgents(usize),
    #[error("vertex loop is not convex and counter-clockwise")]
    NotConvexCcw,
}

/// Closed halfplane `{q : n·q <= b}` with unit normal `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Halfplane {
    pub normal: Point,
    pub offset: f64,
}

impl Halfplane {
    pub fn new(normal: Point, offset: f64) -> Self {
        let len = normal.norm();
        Self {
            normal: normal / len,
            offset: offset / len,
        }
    }

    /// Signed distance of `q` to the boundary; negative inside.
    #[inline]
    pub fn signed_distance(&self, q: &Point) -> f64 {
        self.normal.dot(q) - self.offset
    }

    /// Perpendicular bisector halfplane containing `a`: points closer to `a`
    /// than to `b`.
    pub fn bisector(a: &Point, b: &Point) -> Self {
        let u = (b - a).normalize();
        let mid = (a + b) * 0.5;
        Halfplane {
            normal: u,
            offset: u.dot(&mid),
        }
    }
}

/// Convex region as an ordered CCW vertex loop plus the equivalent halfplane
/// list. Zero vertices flags the EMPTY polygon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 2]>", into = "Vec<[f64; 2]>")]
pub struct ConvexPolygon {
    vertices: Vec<Point>,
    halfplanes: Vec<Halfplane>,
}

impl TryFrom<Vec<[f64; 2]>> for ConvexPolygon {
    type Error = GeometryError;
    fn try_from(v: Vec<[f64; 2]>) -> Result<Self, GeometryError> {
        if v.is_empty() {
            return Ok(ConvexPolygon::empty());
        }
        ConvexPolygon::from_ccw_vertices(v.into_iter().map(|p| Point::new(p[0], p[1])).collect())
    }
}

impl From<ConvexPolygon> for Vec<[f64; 2]> {
    fn from(p: ConvexPolygon) -> Self {
        p.vertices.iter().map(|v| [v.x, v.y]).collect()
    }
}

impl ConvexPolygon {
    pub fn empty() -> Self {
        Self {
            vertices: Vec::new(),
            halfplanes: Vec::new(),
        }
    }

    /// Build from a counter-clockwise convex vertex loop. Consecutive
    /// duplicates within `VERTEX_TOL` are merged.
    pub fn from_ccw_vertices(mut vertices: Vec<Point>) -> Result<Self, GeometryError> {
        dedup_loop(&mut vertices);
        if vertices.len() < 3 {
            return Ok(Self::empty());
        }
        // Convexity and orientation: all cross products of consecutive edges
        // must be non-negative and the signed area positive.
        let n = vertices.len();
        let mut area2 = 0.0;
        for i in 0..n {
            let a = vertices[i];
            let b = vertices[(i + 1) % n];
            let c = vertices[(i + 2) % n];
            let cross = (b - a).perp(&(c - b));
            if cross < -1e-9 {
                return Err(GeometryError::NotConvexCcw);
            }
            area2 += a.perp(&b);
        }
        if area2 <= 0.0 {
            return Err(GeometryError::NotConvexCcw);
        }
        let halfplanes = edges_to_halfplanes(&vertices);
        Ok(Self {
            vertices,
            halfplanes,
        })
    }

    /// Axis-aligned rectangle `[x0, x1] x [y0, y1]`.
    pub fn rect(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        Self::from_ccw_vertices(vec![
            Point::new(x0, y0),
            Point::new(x1, y0),
            Point::new(x1, y1),
            Point::new(x0, y1),
        ])
        .expect("rectangle is convex")
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn halfplanes(&self) -> &[Halfplane] {
        &self.halfplanes
    }

    /// True iff `n·q <= b + tol` for every halfplane.
    pub fn contains(&self, q: &Point, tol: f64) -> Result<bool, GeometryError> {
        if self.is_empty() {
            return Err(GeometryError::EmptyPolygon);
        }
        Ok(self.covers(q, tol))
    }

    /// Infallible membership test; EMPTY covers nothing.
    #[inline]
    pub fn covers(&self, q: &Point, tol: f64) -> bool {
        !self.is_empty() && self.halfplanes.iter().all(|h| h.signed_distance(q) <= tol)
    }

    /// Clip against one halfplane (Sutherland-Hodgman step).
    pub fn clip(&self, hp: &Halfplane) -> Self {
        if self.is_empty() {
            return Self::empty();
        }
        let n = self.vertices.len();
        let mut out: Vec<Point> = Vec::with_capacity(n + 1);
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            let da = hp.signed_distance(&a);
            let db = hp.signed_distance(&b);
            if da <= 0.0 {
                out.push(a);
            }
            if (da < 0.0 && db > 0.0) || (da > 0.0 && db <= 0.0) {
                let t = da / (da - db);
                out.push(a + (b - a) * t);
            }
        }
        dedup_loop(&mut out);
        if out.len() < 3 {
            return Self::empty();
        }
        let halfplanes = edges_to_halfplanes(&out);
        Self {
            vertices: out,
            halfplanes,
        }
    }

    /// Pontryagin difference with the Euclidean disk of `radius`: each
    /// halfplane offset moves inward by `radius`. Exact for convex polygons.
    /// Returns EMPTY when the erosion is infeasible.
    pub fn erode(&self, radius: f64) -> Self {
        assert!(radius >= 0.0, "erosion radius must be non-negative");
        if self.is_empty() || radius == 0.0 {
            return self.clone();
        }
        let mut result = self.clone();
        for hp in &self.halfplanes {
            result = result.clip(&Halfplane {
                normal: hp.normal,
                offset: hp.offset - radius,
            });
            if result.is_empty() {
                return result;
            }
        }
        result
    }

    /// Polygon area by the shoelace formula; 0 for EMPTY.
    pub fn area(&self) -> f64 {
        let n = self.vertices.len();
        if n < 3 {
            return 0.0;
        }
        let mut a2 = 0.0;
        for i in 0..n {
            a2 += self.vertices[i].perp(&self.vertices[(i + 1) % n]);
        }
        a2 * 0.5
    }

    /// Area centroid (uniform density).
    pub fn area_centroid(&self) -> Result<Point, GeometryError> {
        if self.is_empty() {
            return Err(GeometryError::EmptyPolygon);
        }
        let n = self.vertices.len();
        let mut cx = 0.0;
        let mut cy = 0.0;
        let mut a2 = 0.0;
        for i in 0..n {
            let p = self.vertices[i];
            let q = self.vertices[(i + 1) % n];
            let w = p.perp(&q);
            a2 += w;
            cx += (p.x + q.x) * w;
            cy += (p.y + q.y) * w;
        }
        Ok(Point::new(cx / (3.0 * a2), cy / (3.0 * a2)))
    }

    /// Mean of the vertex loop; used as the fan-triangulation apex.
    pub fn vertex_centroid(&self) -> Result<Point, GeometryError> {
        if self.is_empty() {
            return Err(GeometryError::EmptyPolygon);
        }
        Ok(self.vertices.iter().sum::<Point>() / self.vertices.len() as f64)
    }

    /// Euclidean distance from `q` to the polygon boundary (non-negative,
    /// whether `q` is inside or outside).
    pub fn boundary_distance(&self, q: &Point) -> f64 {
        let n = self.vertices.len();
        let mut best = f64::INFINITY;
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            best = best.min(segment_distance(q, &a, &b));
        }
        best
    }
}

fn segment_distance(q: &Point, a: &Point, b: &Point) -> f64 {
    let ab = b - a;
    let t = ((q - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
    (q - (a + ab * t)).norm()
}

fn dedup_loop(vertices: &mut Vec<Point>) {
    vertices.dedup_by(|a, b| (*a - *b).norm() <= VERTEX_TOL);
    while vertices.len() >= 2 {
        let first = vertices[0];
        let last = *vertices.last().unwrap();
        if (first - last).norm() <= VERTEX_TOL {
            vertices.pop();
        } else {
            break;
        }
    }
}

fn edges_to_halfplanes(vertices: &[Point]) -> Vec<Halfplane> {
    let n = vertices.len();
    (0..n)
        .map(|i| {
            let a = vertices[i];
            let b = vertices[(i + 1) % n];
            let d = b - a;
            // Outward normal of a CCW loop: rotate the edge direction by -90 degrees.
            let normal = Point::new(d.y, -d.x).normalize();
            Halfplane {
                normal,
                offset: normal.dot(&a),
            }
        })
        .collect()
}

/// Voronoi tessellation of `arena` with the given generators: cell `i` is the
/// arena clipped by the M-1 perpendicular-bisector halfplanes toward the other
/// generators.
pub fn voronoi_partition(
    positions: &[Point],
    arena: &ConvexPolygon,
) -> Result<Vec<ConvexPolygon>, GeometryError> {
    for (i, p) in positions.iter().enumerate() {
        if !arena.covers(p, GEOM_TOL) {
            return Err(GeometryError::OutsideArena(i));
        }
        for (j, q) in positions.iter().enumerate().skip(i + 1) {
            if (p - q).norm() <= GEOM_TOL {
                return Err(GeometryError::CoincidentGenerators(i, j));
            }
        }
    }
    Ok(positions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut cell = arena.clone();
            for (j, q) in positions.iter().enumerate() {
                if j == i {
                    continue;
                }
                cell = cell.clip(&Halfplane::bisector(p, q));
                if cell.is_empty() {
                    break;
                }
            }
            cell
        })
        .collect())
}

/// Minimum Euclidean distance over all agent pairs.
pub fn min_pairwise_distance(positions: &[Point]) -> Result<f64, GeometryError> {
    if positions.len() < 2 {
        return Err(GeometryError::TooFewAgents(positions.len()));
    }
    let mut best = f64::INFINITY;
    for i in 0..positions.len() {
        for j in (i + 1)..positions.len() {
            best = best.min((positions[i] - positions[j]).norm());
        }
    }
    Ok(best)
}

/// Time-indexed Voronoi cells over one horizon: the raw cells, the cells
/// eroded by the agent radius, and the eroded cells further shrunk by the
/// interior margin. Indexed `[k][agent]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionSequence {
    pub cells: Vec<Vec<ConvexPolygon>>,
    pub eroded: Vec<Vec<ConvexPolygon>>,
    pub interior: Vec<Vec<ConvexPolygon>>,
}

/// Per-agent slice of a `PartitionSequence`, indexed by horizon step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentCells {
    pub cells: Vec<ConvexPolygon>,
    pub eroded: Vec<ConvexPolygon>,
    pub interior: Vec<ConvexPolygon>,
}

impl AgentCells {
    pub fn horizon(&self) -> usize {
        self.cells.len()
    }

    /// Cyclic rotation by `n` (periodic shifting).
    pub fn shift_periodic(&self, n: usize) -> Self {
        Self {
            cells: rotate(&self.cells, n),
            eroded: rotate(&self.eroded, n),
            interior: rotate(&self.interior, n),
        }
    }

    /// Drop the first `n` entries and repeat the last one (nonperiodic shifting).
    pub fn shift_nonperiodic(&self, n: usize) -> Self {
        Self {
            cells: repeat_tail(&self.cells, n),
            eroded: repeat_tail(&self.eroded, n),
            interior: repeat_tail(&self.interior, n),
        }
    }

    /// Cell triple at step `k`, cyclically extended.
    pub fn at_cyclic(&self, k: usize) -> (&ConvexPolygon, &ConvexPolygon, &ConvexPolygon) {
        let k = k % self.cells.len();
        (&self.cells[k], &self.eroded[k], &self.interior[k])
    }

    /// Cell triple at step `k`, clamped at the final entry.
    pub fn at_clamped(&self, k: usize) -> (&ConvexPolygon, &ConvexPolygon, &ConvexPolygon) {
        let k = k.min(self.cells.len() - 1);
        (&self.cells[k], &self.eroded[k], &self.interior[k])
    }
}

pub(crate) fn rotate<T: Clone>(v: &[T], n: usize) -> Vec<T> {
    let len = v.len();
    let n = n % len;
    v[n..].iter().chain(v[..n].iter()).cloned().collect()
}

pub(crate) fn repeat_tail<T: Clone>(v: &[T], n: usize) -> Vec<T> {
    let len = v.len();
    let n = n.min(len);
    let mut out: Vec<T> = v[n..].to_vec();
    let last = v[len - 1].clone();
    out.extend(std::iter::repeat_n(last, n));
    out
}

impl PartitionSequence {
    /// Build the sequence from per-step generator rows (`rows[k]` holds the M
    /// positions at horizon step `k`).
    pub fn from_position_rows(
        rows: &[Vec<Point>],
        arena: &ConvexPolygon,
        r_max: f64,
        epsilon: f64,
    ) -> Result<Self, GeometryError> {
        let mut cells = Vec::with_capacity(rows.len());
        let mut eroded = Vec::with_capacity(rows.len());
        let mut interior = Vec::with_capacity(rows.len());
        for row in rows {
            let cs = voronoi_partition(row, arena)?;
            let es: Vec<_> = cs.iter().map(|c| c.erode(r_max)).collect();
            let is: Vec<_> = es.iter().map(|c| c.erode(epsilon)).collect();
            cells.push(cs);
            eroded.push(es);
            interior.push(is);
        }
        Ok(Self {
            cells,
            eroded,
            interior,
        })
    }

    pub fn horizon(&self) -> usize {
        self.cells.len()
    }

    pub fn agents(&self) -> usize {
        self.cells.first().map_or(0, |row| row.len())
    }

    pub fn agent_cells(&self, agent: usize) -> AgentCells {
        AgentCells {
            cells: self.cells.iter().map(|row| row[agent].clone()).collect(),
            eroded: self.eroded.iter().map(|row| row[agent].clone()).collect(),
            interior: self
                .interior
                .iter()
                .map(|row| row[agent].clone())
                .collect(),
        }
    }

    pub fn shift_periodic(&self, n: usize) -> Self {
        Self {
            cells: rotate(&self.cells, n),
            eroded: rotate(&self.eroded, n),
            interior: rotate(&self.interior, n),
        }
    }

    pub fn shift_nonperiodic(&self, n: usize) -> Self {
        Self {
            cells: repeat_tail(&self.cells, n),
            eroded: repeat_tail(&self.eroded, n),
            interior: repeat_tail(&self.interior, n),
        }
    }
}
