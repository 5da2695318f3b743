//! Time-varying density fields and the integral quantities built on them:
//! cell mass, density-weighted centroid, the locational cost, and the horizon
//! coverage cost in both its integral and decomposed forms.
//!
//! Integrals are computed by fan-triangulating the polygon from its vertex
//! centroid and applying a degree-6 symmetric Gauss rule per triangle, with
//! recursive 4-way refinement until the triangle diameter drops below half the
//! density length scale.

use crate::geometry::{AgentCells, ConvexPolygon, Point};
use std::sync::Arc;
use thiserror::Error;

/// Masses below this are treated as zero and the centroid falls back to the
/// polygon area-centroid; the centroid formula divides by the mass.
pub const MASS_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DensityError {
    #[error("operation on an EMPTY polygon")]
    EmptyPolygon,
    #[error("positions ({positions}) and partition ({cells}) lengths differ")]
    ShapeMismatch { positions: usize, cells: usize },
}

/// Evaluatable nonnegative density `phi(q, t)` with an optional period in
/// steps.
#[derive(Clone)]
pub enum DensityField {
    /// `phi == 1` everywhere.
    Uniform,
    /// Unnormalized Gaussian whose mean moves on a circle, one revolution per
    /// `period_steps`.
    GaussianCircular {
        sigma: f64,
        center: Point,
        radius: f64,
        period_steps: usize,
    },
    /// Unnormalized Gaussian whose mean linearly interpolates a waypoint list
    /// of `(step, position)` pairs, clamped outside the list.
    GaussianWaypoints {
        sigma: f64,
        waypoints: Vec<(f64, Point)>,
    },
    /// Arbitrary callable; `length_scale` controls quadrature refinement.
    Custom {
        f: Arc<dyn Fn(&Point, usize) -> f64 + Send + Sync>,
        period: Option<usize>,
        length_scale: Option<f64>,
    },
}

impl std::fmt::Debug for DensityField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Uniform => write!(f, "Uniform"),
            Self::GaussianCircular {
                sigma,
                center,
                radius,
                period_steps,
            } => write!(
                f,
                "GaussianCircular(sigma={sigma}, center=({}, {}), radius={radius}, period={period_steps})",
                center.x, center.y
            ),
            Self::GaussianWaypoints { sigma, waypoints } => {
                write!(f, "GaussianWaypoints(sigma={sigma}, {} waypoints)", waypoints.len())
            }
            Self::Custom { period, .. } => write!(f, "Custom(period={period:?})"),
        }
    }
}

impl DensityField {
    /// Static Gaussian (single-waypoint path).
    pub fn gaussian_static(sigma: f64, mean: Point) -> Self {
        Self::GaussianWaypoints {
            sigma,
            waypoints: vec![(0.0, mean)],
        }
    }

    pub fn period(&self) -> Option<usize> {
        match self {
            Self::GaussianCircular { period_steps, .. } => Some(*period_steps),
            Self::Custom { period, .. } => *period,
            _ => None,
        }
    }

    /// Gaussian mean at step `t`; `None` for Uniform/Custom.
    pub fn mean(&self, t: usize) -> Option<Point> {
        match self {
            Self::GaussianCircular {
                center,
                radius,
                period_steps,
                ..
            } => {
                let theta = 2.0 * std::f64::consts::PI * (t % period_steps) as f64
                    / *period_steps as f64;
                Some(center + Point::new(radius * theta.cos(), radius * theta.sin()))
            }
            Self::GaussianWaypoints { waypoints, .. } => {
                Some(interpolate_waypoints(waypoints, t as f64))
            }
            _ => None,
        }
    }

    /// Characteristic length scale used to size quadrature triangles.
    pub fn length_scale(&self) -> Option<f64> {
        match self {
            Self::Uniform => None,
            Self::GaussianCircular { sigma, .. } | Self::GaussianWaypoints { sigma, .. } => {
                Some(*sigma)
            }
            Self::Custom { length_scale, .. } => *length_scale,
        }
    }

    /// Evaluate `phi(q, t)`.
    pub fn eval(&self, q: &Point, t: usize) -> f64 {
        match self {
            Self::Uniform => 1.0,
            Self::GaussianCircular { sigma, .. } | Self::GaussianWaypoints { sigma, .. } => {
                let mu = self.mean(t).unwrap();
                let d2 = (q - mu).norm_squared();
                (-d2 / (2.0 * sigma * sigma)).exp()
            }
            Self::Custom { f, .. } => f(q, t),
        }
    }
}

fn interpolate_waypoints(waypoints: &[(f64, Point)], t: f64) -> Point {
    match waypoints {
        [] => Point::new(0.0, 0.0),
        [(_, p)] => *p,
        _ => {
            if t <= waypoints[0].0 {
                return waypoints[0].1;
            }
            for w in waypoints.windows(2) {
                let (t0, p0) = w[0];
                let (t1, p1) = w[1];
                if t <= t1 {
                    let s = (t - t0) / (t1 - t0);
                    return p0 + (p1 - p0) * s;
                }
            }
            waypoints.last().unwrap().1
        }
    }
}

/// Cell mass and density-weighted centroid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MassCentroid {
    pub mass: f64,
    pub centroid: Point,
}

/// Raw density moments over one cell: mass, first moment, and the scalar
/// second moment `integral of |q|^2 phi`.
#[derive(Debug, Clone, Copy, Default)]
pub struct CellMoments {
    pub mass: f64,
    pub first: [f64; 2],
    pub second: f64,
}

/// Quadrature resolution knobs. `threshold` overrides the density-derived
/// triangle diameter bound; `max_depth` caps the recursive refinement.
#[derive(Debug, Clone, Copy)]
pub struct QuadratureConfig {
    pub threshold: Option<f64>,
    pub max_depth: usize,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self {
            threshold: None,
            max_depth: 7,
        }
    }
}

// Degree-6 symmetric Gauss rule on the reference triangle (12 points),
// weights normalized to sum to 1 over the triangle area.
const TRI_RULE: [([f64; 3], f64); 12] = {
    const A1: f64 = 0.063089014491502;
    const W1: f64 = 0.050844906370207;
    const A2: f64 = 0.249286745170910;
    const W2: f64 = 0.116786275726379;
    const A3: f64 = 0.053145049844816;
    const B3: f64 = 0.310352451033785;
    const C3: f64 = 1.0 - A3 - B3;
    const W3: f64 = 0.082851075618374;
    [
        ([A1, A1, 1.0 - 2.0 * A1], W1),
        ([A1, 1.0 - 2.0 * A1, A1], W1),
        ([1.0 - 2.0 * A1, A1, A1], W1),
        ([A2, A2, 1.0 - 2.0 * A2], W2),
        ([A2, 1.0 - 2.0 * A2, A2], W2),
        ([1.0 - 2.0 * A2, A2, A2], W2),
        ([A3, B3, C3], W3),
        ([A3, C3, B3], W3),
        ([B3, A3, C3], W3),
        ([B3, C3, A3], W3),
        ([C3, A3, B3], W3),
        ([C3, B3, A3], W3),
    ]
};

fn tri_diameter(a: &Point, b: &Point, c: &Point) -> f64 {
    (a - b).norm().max((b - c).norm()).max((c - a).norm())
}

fn tri_area(a: &Point, b: &Point, c: &Point) -> f64 {
    0.5 * (b - a).perp(&(c - a))
}

fn integrate_triangle<F: FnMut(&Point, f64)>(
    a: &Point,
    b: &Point,
    c: &Point,
    threshold: f64,
    depth: usize,
    visit: &mut F,
) {
    if depth > 0 && tri_diameter(a, b, c) > threshold {
        let ab = (a + b) * 0.5;
        let bc = (b + c) * 0.5;
        let ca = (c + a) * 0.5;
        integrate_triangle(a, &ab, &ca, threshold, depth - 1, visit);
        integrate_triangle(&ab, b, &bc, threshold, depth - 1, visit);
        integrate_triangle(&ca, &bc, c, threshold, depth - 1, visit);
        integrate_triangle(&ab, &bc, &ca, threshold, depth - 1, visit);
        return;
    }
    let area = tri_area(a, b, c);
    for (bary, w) in TRI_RULE.iter() {
        let q = a * bary[0] + b * bary[1] + c * bary[2];
        visit(&q, w * area);
    }
}

/// Visit all quadrature nodes of `poly` with their weights.
fn for_each_node<F: FnMut(&Point, f64)>(poly: &ConvexPolygon, cfg: &QuadratureConfig, scale: Option<f64>, mut visit: F) {
    if poly.is_empty() {
        return;
    }
    let apex = poly.vertex_centroid().unwrap();
    let threshold = cfg
        .threshold
        .or(scale.map(|s| 0.5 * s))
        .unwrap_or(f64::INFINITY);
    let verts = poly.vertices();
    let n = verts.len();
    for i in 0..n {
        integrate_triangle(
            &apex,
            &verts[i],
            &verts[(i + 1) % n],
            threshold,
            cfg.max_depth,
            &mut visit,
        );
    }
}

/// Quadrature of an arbitrary scalar integrand over the polygon.
pub fn integrate_scalar<F: Fn(&Point) -> f64>(
    poly: &ConvexPolygon,
    field: &DensityField,
    cfg: &QuadratureConfig,
    f: F,
) -> f64 {
    let mut acc = 0.0;
    for_each_node(poly, cfg, field.length_scale(), |q, w| acc += w * f(q));
    acc
}

/// One-pass density moments over a cell.
pub fn cell_moments(
    field: &DensityField,
    poly: &ConvexPolygon,
    t: usize,
    cfg: &QuadratureConfig,
) -> CellMoments {
    let mut m = CellMoments::default();
    for_each_node(poly, cfg, field.length_scale(), |q, w| {
        let phi = field.eval(q, t);
        let wphi = w * phi;
        m.mass += wphi;
        m.first[0] += wphi * q.x;
        m.first[1] += wphi * q.y;
        m.second += wphi * q.norm_squared();
    });
    m
}

/// Mass and density-weighted centroid of `poly` at step `t`. Negligible mass
/// falls back to the polygon area-centroid.
pub fn mass_centroid(
    field: &DensityField,
    poly: &ConvexPolygon,
    t: usize,
    cfg: &QuadratureConfig,
) -> Result<MassCentroid, DensityError> {
    if poly.is_empty() {
        return Err(DensityError::EmptyPolygon);
    }
    let m = cell_moments(field, poly, t, cfg);
    if m.mass < MASS_FLOOR {
        return Ok(MassCentroid {
            mass: 0.0,
            centroid: poly.area_centroid().map_err(|_| DensityError::EmptyPolygon)?,
        });
    }
    Ok(MassCentroid {
        mass: m.mass,
        centroid: Point::new(m.first[0] / m.mass, m.first[1] / m.mass),
    })
}

/// Locational cost `sum_i integral over W_i of |q - p_i|^2 phi(q, t)`.
/// EMPTY cells contribute zero.
pub fn locational_cost(
    field: &DensityField,
    positions: &[Point],
    partition: &[ConvexPolygon],
    t: usize,
    cfg: &QuadratureConfig,
) -> Result<f64, DensityError> {
    if positions.len() != partition.len() {
        return Err(DensityError::ShapeMismatch {
            positions: positions.len(),
            cells: partition.len(),
        });
    }
    Ok(positions
        .iter()
        .zip(partition)
        .map(|(p, cell)| {
            integrate_scalar(cell, field, cfg, |q| (q - p).norm_squared() * field.eval(q, t))
        })
        .sum())
}

/// Per-agent horizon coverage cost, full integral form:
/// `sum_k integral over W_k of |q - p_k|^2 phi(q, t0 + k)`.
pub fn horizon_cost(
    field: &DensityField,
    positions: &[Point],
    cells: &AgentCells,
    t0: usize,
    cfg: &QuadratureConfig,
) -> Result<f64, DensityError> {
    if positions.len() != cells.horizon() {
        return Err(DensityError::ShapeMismatch {
            positions: positions.len(),
            cells: cells.horizon(),
        });
    }
    let mut total = 0.0;
    for (k, (p, cell)) in positions.iter().zip(&cells.cells).enumerate() {
        if cell.is_empty() {
            return Err(DensityError::EmptyPolygon);
        }
        let t = t0 + k;
        total += integrate_scalar(cell, field, cfg, |q| {
            (q - p).norm_squared() * field.eval(q, t)
        });
    }
    Ok(total)
}

/// Decomposed horizon cost: the position-dependent moment term
/// `sum_k m_k |p_k - c_k|^2` and the residual `d` (second moment about the
/// centroids, independent of the positions).
pub fn horizon_cost_parts(
    field: &DensityField,
    positions: &[Point],
    cells: &AgentCells,
    t0: usize,
    cfg: &QuadratureConfig,
) -> Result<(f64, f64), DensityError> {
    if positions.len() != cells.horizon() {
        return Err(DensityError::ShapeMismatch {
            positions: positions.len(),
            cells: cells.horizon(),
        });
    }
    let mut moment = 0.0;
    let mut d = 0.0;
    for (k, (p, cell)) in positions.iter().zip(&cells.cells).enumerate() {
        if cell.is_empty() {
            return Err(DensityError::EmptyPolygon);
        }
        let t = t0 + k;
        let m = cell_moments(field, cell, t, cfg);
        if m.mass < MASS_FLOOR {
            continue;
        }
        let c = Point::new(m.first[0] / m.mass, m.first[1] / m.mass);
        moment += m.mass * (p - c).norm_squared();
        // integral |q - c|^2 phi = I2 - m |c|^2
        d += m.second - m.mass * c.norm_squared();
    }
    Ok((moment, d))
}
