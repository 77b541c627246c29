//! Field geometry: surveyed rows, boundary polygon, the GPS-to-local
//! transform, and grid construction.

use std::fmt;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::kv::{fmt_f64, KvDoc, KvError};

/// Mean Earth radius in meters, used by the tangent-plane projection.
const EARTH_RADIUS_M: f64 = 6_371_008.8;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("at least 3 correspondence pairs are required, got {0}")]
    TooFewPoints(usize),
    #[error("control points are collinear; affine fit is rank deficient")]
    CollinearControlPoints,
    #[error("grid resolution must be positive, got {0}")]
    NonPositiveResolution(f64),
    #[error("field has no rows")]
    NoRows,
    #[error("row x-coordinates must be strictly increasing")]
    RowsNotIncreasing,
    #[error("row spacing varies by more than 1% of nominal ({0} m)")]
    IrregularRowSpacing(f64),
    #[error("boundary polygon must have at least 3 vertices")]
    DegenerateBoundary,
    #[error("boundary polygon is self-intersecting")]
    SelfIntersectingBoundary,
    #[error("row segment for row {0} leaves the boundary polygon")]
    RowOutsideBoundary(usize),
    #[error("field file {path}: {source}")]
    FileFormat {
        path: String,
        #[source]
        source: KvError,
    },
    #[error("cannot read field file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A WGS-84 position in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl fmt::Display for GeoPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.lat, self.lon)
    }
}

/// Simple closed polygon in local field coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    vertices: Vec<(f64, f64)>,
}

impl Polygon {
    pub fn new(vertices: Vec<(f64, f64)>) -> Result<Self, FieldError> {
        if vertices.len() < 3 {
            return Err(FieldError::DegenerateBoundary);
        }
        let poly = Self { vertices };
        if !poly.is_simple() {
            return Err(FieldError::SelfIntersectingBoundary);
        }
        Ok(poly)
    }

    pub fn vertices(&self) -> &[(f64, f64)] {
        &self.vertices
    }

    pub fn bounding_box(&self) -> ((f64, f64), (f64, f64)) {
        let mut min = (f64::INFINITY, f64::INFINITY);
        let mut max = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &(x, y) in &self.vertices {
            min.0 = min.0.min(x);
            min.1 = min.1.min(y);
            max.0 = max.0.max(x);
            max.1 = max.1.max(y);
        }
        (min, max)
    }

    /// Boundary-inclusive point-in-polygon test (ray casting plus an
    /// explicit on-edge check).
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let n = self.vertices.len();
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            if point_on_segment((x, y), a, b) {
                return true;
            }
        }
        let mut inside = false;
        for i in 0..n {
            let (x1, y1) = self.vertices[i];
            let (x2, y2) = self.vertices[(i + 1) % n];
            if (y1 > y) != (y2 > y) {
                let x_cross = x1 + (y - y1) / (y2 - y1) * (x2 - x1);
                if x < x_cross {
                    inside = !inside;
                }
            }
        }
        inside
    }

    fn is_simple(&self) -> bool {
        let n = self.vertices.len();
        for i in 0..n {
            let a1 = self.vertices[i];
            let a2 = self.vertices[(i + 1) % n];
            for j in (i + 1)..n {
                // skip segments sharing a vertex
                if j == i || (j + 1) % n == i || j == (i + 1) % n {
                    continue;
                }
                let b1 = self.vertices[j];
                let b2 = self.vertices[(j + 1) % n];
                if segments_intersect(a1, a2, b1, b2) {
                    return false;
                }
            }
        }
        true
    }
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

fn point_on_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> bool {
    let eps = 1e-9;
    if cross(a, b, p).abs() > eps * (1.0 + (b.0 - a.0).abs() + (b.1 - a.1).abs()) {
        return false;
    }
    p.0 >= a.0.min(b.0) - eps
        && p.0 <= a.0.max(b.0) + eps
        && p.1 >= a.1.min(b.1) - eps
        && p.1 <= a.1.max(b.1) + eps
}

fn segments_intersect(a1: (f64, f64), a2: (f64, f64), b1: (f64, f64), b2: (f64, f64)) -> bool {
    let d1 = cross(b1, b2, a1);
    let d2 = cross(b1, b2, a2);
    let d3 = cross(a1, a2, b1);
    let d4 = cross(a1, a2, b2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    false
}

/// Equirectangular tangent-plane projection about a reference point.
/// Projected coordinates are in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TangentPlane {
    pub lat0: f64,
    pub lon0: f64,
}

impl TangentPlane {
    pub fn new(center: GeoPoint) -> Self {
        Self {
            lat0: center.lat,
            lon0: center.lon,
        }
    }

    pub fn project(&self, p: GeoPoint) -> (f64, f64) {
        let k = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        let x = k * self.lat0.to_radians().cos() * (p.lon - self.lon0);
        let y = k * (p.lat - self.lat0);
        (x, y)
    }

    pub fn unproject(&self, x: f64, y: f64) -> GeoPoint {
        let k = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        GeoPoint {
            lat: self.lat0 + y / k,
            lon: self.lon0 + x / (k * self.lat0.to_radians().cos()),
        }
    }
}

/// Affine map between tangent-plane GPS coordinates and the local field
/// frame, fitted by least squares from surveyed bed-center correspondences.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldTransform {
    plane: TangentPlane,
    /// Row-major 2x3: [a b c; d e f], local = A * [u v 1]^T
    forward: [f64; 6],
    inverse: [f64; 6],
    rms_fit_error: f64,
}

impl FieldTransform {
    pub fn rms_fit_error(&self) -> f64 {
        self.rms_fit_error
    }

    pub fn forward_matrix(&self) -> [f64; 6] {
        self.forward
    }

    pub fn to_local(&self, p: GeoPoint) -> (f64, f64) {
        let (u, v) = self.plane.project(p);
        apply_affine(&self.forward, u, v)
    }

    pub fn to_geo(&self, x: f64, y: f64) -> GeoPoint {
        let (u, v) = apply_affine(&self.inverse, x, y);
        self.plane.unproject(u, v)
    }
}

fn apply_affine(m: &[f64; 6], x: f64, y: f64) -> (f64, f64) {
    (m[0] * x + m[1] * y + m[2], m[3] * x + m[4] * y + m[5])
}

fn invert_affine(m: &[f64; 6]) -> [f64; 6] {
    let det = m[0] * m[4] - m[1] * m[3];
    let ia = m[4] / det;
    let ib = -m[1] / det;
    let id = -m[3] / det;
    let ie = m[0] / det;
    [
        ia,
        ib,
        -(ia * m[2] + ib * m[5]),
        id,
        ie,
        -(id * m[2] + ie * m[5]),
    ]
}

/// Solve a symmetric 3x3 linear system by Gaussian elimination with
/// partial pivoting. Returns `None` when singular.
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| {
            a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap()
        })?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in (col + 1)..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let mut sum = b[row];
        for k in (row + 1)..3 {
            sum -= a[row][k] * x[k];
        }
        x[row] = sum / a[row][row];
    }
    Some(x)
}

/// Fit the GPS-to-local affine transform from surveyed bed-center pairs.
///
/// Geo points are first projected onto a tangent plane about their
/// centroid, then a 2D affine map is fitted by ordinary least squares.
pub fn fit_field_transform(
    surveyed_geo: &[GeoPoint],
    surveyed_local: &[(f64, f64)],
) -> Result<FieldTransform, FieldError> {
    let n = surveyed_geo.len();
    if n < 3 || surveyed_local.len() < 3 {
        return Err(FieldError::TooFewPoints(n.min(surveyed_local.len())));
    }
    assert_eq!(n, surveyed_local.len(), "correspondence lists must match");

    let centroid = GeoPoint {
        lat: surveyed_geo.iter().map(|p| p.lat).sum::<f64>() / n as f64,
        lon: surveyed_geo.iter().map(|p| p.lon).sum::<f64>() / n as f64,
    };
    let plane = TangentPlane::new(centroid);
    let projected: Vec<(f64, f64)> = surveyed_geo.iter().map(|&p| plane.project(p)).collect();

    // rank check on the projected source points
    let mean_u = projected.iter().map(|p| p.0).sum::<f64>() / n as f64;
    let mean_v = projected.iter().map(|p| p.1).sum::<f64>() / n as f64;
    let (mut suu, mut svv, mut suv) = (0.0, 0.0, 0.0);
    for &(u, v) in &projected {
        suu += (u - mean_u) * (u - mean_u);
        svv += (v - mean_v) * (v - mean_v);
        suv += (u - mean_u) * (v - mean_v);
    }
    let scale = (suu + svv).max(1e-30);
    if (suu * svv - suv * suv) / (scale * scale) < 1e-12 {
        return Err(FieldError::CollinearControlPoints);
    }

    // two independent 3-parameter least-squares problems
    let mut m = [[0.0f64; 3]; 3];
    let mut bx = [0.0f64; 3];
    let mut by = [0.0f64; 3];
    for (&(u, v), &(x, y)) in projected.iter().zip(surveyed_local) {
        let row = [u, v, 1.0];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += row[i] * row[j];
            }
            bx[i] += row[i] * x;
            by[i] += row[i] * y;
        }
    }
    let sol_x = solve3(m, bx).ok_or(FieldError::CollinearControlPoints)?;
    let sol_y = solve3(m, by).ok_or(FieldError::CollinearControlPoints)?;
    let forward = [
        sol_x[0], sol_x[1], sol_x[2], sol_y[0], sol_y[1], sol_y[2],
    ];

    let mut ss = 0.0;
    for (&(u, v), &(x, y)) in projected.iter().zip(surveyed_local) {
        let (px, py) = apply_affine(&forward, u, v);
        ss += (px - x) * (px - x) + (py - y) * (py - y);
    }
    let rms = (ss / n as f64).sqrt();

    Ok(FieldTransform {
        plane,
        inverse: invert_affine(&forward),
        forward,
        rms_fit_error: rms,
    })
}

/// Uniform grid over the field bounding box. The last cell along each axis
/// may be truncated at the field maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub resolution: f64,
    pub x_edges: Vec<f64>,
    pub y_edges: Vec<f64>,
    pub x_mid: Vec<f64>,
    pub y_mid: Vec<f64>,
}

impl GridSpec {
    pub fn n_cells(&self) -> usize {
        self.x_mid.len() * self.y_mid.len()
    }
}

fn edges_from(min: f64, max: f64, r: f64) -> Vec<f64> {
    let mut edges = Vec::new();
    let mut e = min;
    let tiny = 1e-9 * r.max(1.0);
    while e < max - tiny {
        edges.push(e);
        e += r;
    }
    edges.push(max);
    edges
}

fn midpoints(edges: &[f64]) -> Vec<f64> {
    edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
}

/// Field geometry plus the surveyed correspondences needed to fit the
/// GPS transform.
#[derive(Debug, Clone)]
pub struct FieldModel {
    rows: Vec<f64>,
    row_spacing: f64,
    boundary: Polygon,
    y_extent: (f64, f64),
    origin_geo: GeoPoint,
    /// surveyed bed-center correspondences: (geo, local)
    control_points: Vec<(GeoPoint, (f64, f64))>,
}

impl FieldModel {
    pub fn new(
        rows: Vec<f64>,
        row_spacing: f64,
        boundary: Polygon,
        y_extent: (f64, f64),
        origin_geo: GeoPoint,
        control_points: Vec<(GeoPoint, (f64, f64))>,
    ) -> Result<Self, FieldError> {
        if rows.is_empty() {
            return Err(FieldError::NoRows);
        }
        for w in rows.windows(2) {
            if w[1] <= w[0] {
                return Err(FieldError::RowsNotIncreasing);
            }
            if (w[1] - w[0] - row_spacing).abs() > 0.01 * row_spacing {
                return Err(FieldError::IrregularRowSpacing(row_spacing));
            }
        }
        let model = Self {
            rows,
            row_spacing,
            boundary,
            y_extent,
            origin_geo,
            control_points,
        };
        for (j, &rx) in model.rows.iter().enumerate() {
            for frac in [0.0, 0.5, 1.0] {
                let y = model.y_extent.0 + frac * (model.y_extent.1 - model.y_extent.0);
                if !model.boundary.contains(rx, y) {
                    return Err(FieldError::RowOutsideBoundary(j));
                }
            }
        }
        Ok(model)
    }

    pub fn rows(&self) -> &[f64] {
        &self.rows
    }

    pub fn row_spacing(&self) -> f64 {
        self.row_spacing
    }

    pub fn boundary(&self) -> &Polygon {
        &self.boundary
    }

    pub fn y_extent(&self) -> (f64, f64) {
        self.y_extent
    }

    pub fn origin_geo(&self) -> GeoPoint {
        self.origin_geo
    }

    pub fn control_points(&self) -> &[(GeoPoint, (f64, f64))] {
        &self.control_points
    }

    /// Fit the GPS transform from this field's correspondence table.
    pub fn fit_transform(&self) -> Result<FieldTransform, FieldError> {
        let geo: Vec<GeoPoint> = self.control_points.iter().map(|c| c.0).collect();
        let local: Vec<(f64, f64)> = self.control_points.iter().map(|c| c.1).collect();
        fit_field_transform(&geo, &local)
    }

    /// Index of the row center nearest to `x`. Ties break toward the
    /// lower index.
    pub fn nearest_row(&self, x: f64) -> usize {
        nearest_row(&self.rows, x)
    }

    pub fn make_grid(&self, r: f64) -> Result<GridSpec, FieldError> {
        if r <= 0.0 {
            return Err(FieldError::NonPositiveResolution(r));
        }
        let ((x_min, y_min), (x_max, y_max)) = self.boundary.bounding_box();
        let x_edges = edges_from(x_min, x_max, r);
        let y_edges = edges_from(y_min, y_max, r);
        Ok(GridSpec {
            resolution: r,
            x_mid: midpoints(&x_edges),
            y_mid: midpoints(&y_edges),
            x_edges,
            y_edges,
        })
    }

    // ---- field definition file -------------------------------------

    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set(
            "rows",
            self.rows
                .iter()
                .map(|v| fmt_f64(*v))
                .collect::<Vec<_>>()
                .join(","),
        );
        doc.set("row_spacing_m", fmt_f64(self.row_spacing));
        doc.set(
            "boundary",
            self.boundary
                .vertices
                .iter()
                .map(|(x, y)| format!("{} {}", fmt_f64(*x), fmt_f64(*y)))
                .collect::<Vec<_>>()
                .join("; "),
        );
        doc.set("y_min", fmt_f64(self.y_extent.0));
        doc.set("y_max", fmt_f64(self.y_extent.1));
        doc.set("origin_lat", fmt_f64(self.origin_geo.lat));
        doc.set("origin_lon", fmt_f64(self.origin_geo.lon));
        doc.set(
            "control_points",
            self.control_points
                .iter()
                .map(|(g, (x, y))| {
                    format!(
                        "{} {} {} {}",
                        fmt_f64(g.lat),
                        fmt_f64(g.lon),
                        fmt_f64(*x),
                        fmt_f64(*y)
                    )
                })
                .collect::<Vec<_>>()
                .join("; "),
        );
        doc
    }

    pub fn from_kv(doc: &KvDoc) -> Result<Self, KvError> {
        let rows = doc.require_f64_list("rows")?;
        let row_spacing = doc.require_f64("row_spacing_m")?;
        let boundary_raw = doc.require("boundary")?;
        let mut vertices = Vec::new();
        for part in boundary_raw.split(';') {
            if part.trim().is_empty() {
                continue;
            }
            let nums: Vec<&str> = part.split_whitespace().collect();
            if nums.len() != 2 {
                return Err(KvError::BadValue {
                    key: "boundary".into(),
                    value: part.trim().into(),
                    ty: "x y pair",
                });
            }
            vertices.push((
                parse_f64_field("boundary", nums[0])?,
                parse_f64_field("boundary", nums[1])?,
            ));
        }
        let y_extent = (doc.require_f64("y_min")?, doc.require_f64("y_max")?);
        let origin_geo = GeoPoint {
            lat: doc.require_f64("origin_lat")?,
            lon: doc.require_f64("origin_lon")?,
        };
        let mut control_points = Vec::new();
        if let Some(raw) = doc.get("control_points") {
            for part in raw.split(';') {
                if part.trim().is_empty() {
                    continue;
                }
                let nums: Vec<&str> = part.split_whitespace().collect();
                if nums.len() != 4 {
                    return Err(KvError::BadValue {
                        key: "control_points".into(),
                        value: part.trim().into(),
                        ty: "lat lon x y quadruple",
                    });
                }
                control_points.push((
                    GeoPoint {
                        lat: parse_f64_field("control_points", nums[0])?,
                        lon: parse_f64_field("control_points", nums[1])?,
                    },
                    (
                        parse_f64_field("control_points", nums[2])?,
                        parse_f64_field("control_points", nums[3])?,
                    ),
                ));
            }
        }
        let boundary = Polygon::new(vertices).map_err(|e| KvError::BadValue {
            key: "boundary".into(),
            value: e.to_string(),
            ty: "simple polygon",
        })?;
        FieldModel::new(
            rows,
            row_spacing,
            boundary,
            y_extent,
            origin_geo,
            control_points,
        )
        .map_err(|e| KvError::BadValue {
            key: "field".into(),
            value: e.to_string(),
            ty: "field model",
        })
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, self.to_kv().render())
    }

    pub fn load(path: &Path) -> Result<Self, FieldError> {
        let text = fs::read_to_string(path).map_err(|source| FieldError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let doc = KvDoc::parse(&text).map_err(|source| FieldError::FileFormat {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_kv(&doc).map_err(|source| FieldError::FileFormat {
            path: path.display().to_string(),
            source,
        })
    }
}

fn parse_f64_field(key: &str, v: &str) -> Result<f64, KvError> {
    v.parse::<f64>().map_err(|_| KvError::BadValue {
        key: key.to_string(),
        value: v.to_string(),
        ty: "f64",
    })
}

/// Index minimizing `|x - rows[j]|`, ties toward the lower index.
pub fn nearest_row(rows: &[f64], x: f64) -> usize {
    assert!(!rows.is_empty(), "rows must be non-empty");
    let mut best = 0;
    let mut best_d = (x - rows[0]).abs();
    for (j, &r) in rows.iter().enumerate().skip(1) {
        let d = (x - r).abs();
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rect_boundary(x0: f64, y0: f64, x1: f64, y1: f64) -> Polygon {
        Polygon::new(vec![(x0, y0), (x1, y0), (x1, y1), (x0, y1)]).unwrap()
    }

    fn santa_maria_field() -> FieldModel {
        let spacing = 1.63;
        let rows: Vec<f64> = (0..10).map(|i| 1.0 + i as f64 * spacing).collect();
        let boundary = rect_boundary(0.0, 0.0, 16.0, 100.0);
        FieldModel::new(
            rows,
            spacing,
            boundary,
            (0.0, 100.0),
            GeoPoint {
                lat: 34.9,
                lon: -120.47,
            },
            Vec::new(),
        )
        .unwrap()
    }

    #[test]
    fn identity_correspondences_give_identity_affine() {
        // feed local points through the tangent plane as "geo" data
        let origin = GeoPoint { lat: 36.6, lon: -121.5 };
        let plane = TangentPlane::new(origin);
        let locals = [(0.0, 0.0), (30.0, 0.0), (0.0, 50.0), (30.0, 50.0)];
        let geo: Vec<GeoPoint> = locals.iter().map(|&(x, y)| plane.unproject(x, y)).collect();
        let t = fit_field_transform(&geo, &locals).unwrap();
        assert!(t.rms_fit_error() < 1e-6);
        for (&g, &(x, y)) in geo.iter().zip(&locals) {
            let (lx, ly) = t.to_local(g);
            assert_abs_diff_eq!(lx, x, epsilon = 1e-6);
            assert_abs_diff_eq!(ly, y, epsilon = 1e-6);
        }
    }

    #[test]
    fn recovers_constructed_rotation_translation() {
        // construct a pure 90 degree rotation + translation in the plane,
        // generate correspondences from it, and compare the recovered map
        let origin = GeoPoint { lat: 36.6, lon: -121.5 };
        let plane = TangentPlane::new(origin);
        let truth = |u: f64, v: f64| (-v + 12.0, u + 7.0);
        let sources = [(0.0, 0.0), (40.0, 0.0), (0.0, 60.0), (40.0, 60.0)];
        let geo: Vec<GeoPoint> = sources.iter().map(|&(u, v)| plane.unproject(u, v)).collect();
        let locals: Vec<(f64, f64)> = sources.iter().map(|&(u, v)| truth(u, v)).collect();
        let t = fit_field_transform(&geo, &locals).unwrap();
        assert!(t.rms_fit_error() < 1e-9);
        for (&g, &(x, y)) in geo.iter().zip(&locals) {
            let (lx, ly) = t.to_local(g);
            assert_abs_diff_eq!(lx, x, epsilon = 1e-9);
            assert_abs_diff_eq!(ly, y, epsilon = 1e-9);
        }
    }

    #[test]
    fn collinear_points_rejected() {
        let origin = GeoPoint { lat: 36.6, lon: -121.5 };
        let plane = TangentPlane::new(origin);
        let sources = [(0.0, 0.0), (10.0, 10.0), (20.0, 20.0)];
        let geo: Vec<GeoPoint> = sources.iter().map(|&(u, v)| plane.unproject(u, v)).collect();
        let locals: Vec<(f64, f64)> = sources.to_vec();
        match fit_field_transform(&geo, &locals) {
            Err(FieldError::CollinearControlPoints) => {}
            other => panic!("expected CollinearControlPoints, got {other:?}"),
        }
    }

    #[test]
    fn too_few_points_rejected() {
        let g = [GeoPoint { lat: 0.0, lon: 0.0 }, GeoPoint { lat: 1.0, lon: 1.0 }];
        let l = [(0.0, 0.0), (1.0, 1.0)];
        match fit_field_transform(&g, &l) {
            Err(FieldError::TooFewPoints(2)) => {}
            other => panic!("expected TooFewPoints, got {other:?}"),
        }
    }

    #[test]
    fn geo_round_trip_on_random_in_field_points() {
        let origin = GeoPoint { lat: 34.9, lon: -120.47 };
        let plane = TangentPlane::new(origin);
        let corners = [(0.0, 0.0), (16.0, 0.0), (0.0, 100.0), (16.0, 100.0), (8.0, 50.0)];
        let geo: Vec<GeoPoint> = corners.iter().map(|&(x, y)| plane.unproject(x, y)).collect();
        let locals: Vec<(f64, f64)> = corners.to_vec();
        let t = fit_field_transform(&geo, &locals).unwrap();

        let mut state = 42u64;
        for _ in 0..100 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            let fx = ((state >> 33) % 1000) as f64 / 1000.0;
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            let fy = ((state >> 33) % 1000) as f64 / 1000.0;
            let p = plane.unproject(fx * 16.0, fy * 100.0);
            let (x, y) = t.to_local(p);
            let back = t.to_geo(x, y);
            assert_abs_diff_eq!(back.lat, p.lat, epsilon = 1e-7);
            assert_abs_diff_eq!(back.lon, p.lon, epsilon = 1e-7);
        }
    }

    #[test]
    fn affine_inverse_is_exact() {
        let m = [1.2, -0.3, 5.0, 0.4, 0.9, -2.0];
        let inv = invert_affine(&m);
        for &(x, y) in &[(0.0, 0.0), (13.0, -7.5), (100.0, 42.0)] {
            let (u, v) = apply_affine(&m, x, y);
            let (bx, by) = apply_affine(&inv, u, v);
            assert_abs_diff_eq!(bx, x, epsilon = 1e-9);
            assert_abs_diff_eq!(by, y, epsilon = 1e-9);
        }
    }

    /// Least-squares optimality: the affine fit residual never exceeds the
    /// residual of any rigid transform candidate on a brute-force grid.
    #[test]
    fn affine_fit_beats_rigid_grid_search() {
        let origin = GeoPoint { lat: 36.6, lon: -121.5 };
        let plane = TangentPlane::new(origin);
        // slightly noisy correspondences
        let sources = [(0.0, 0.0), (30.0, 0.0), (0.0, 60.0), (30.0, 60.0), (15.0, 30.0)];
        let locals: Vec<(f64, f64)> = sources
            .iter()
            .enumerate()
            .map(|(i, &(u, v))| (u + 2.0 + 0.02 * i as f64, v - 1.0 - 0.015 * i as f64))
            .collect();
        let geo: Vec<GeoPoint> = sources.iter().map(|&(u, v)| plane.unproject(u, v)).collect();
        let t = fit_field_transform(&geo, &locals).unwrap();
        let affine_ss = t.rms_fit_error().powi(2) * sources.len() as f64;

        let mut best_rigid = f64::INFINITY;
        for ti in -3..=3 {
            let theta = ti as f64 * 0.002;
            for dx_i in 0..=40 {
                for dy_i in -20..=0 {
                    let dx = dx_i as f64 * 0.1;
                    let dy = dy_i as f64 * 0.1;
                    let mut ss = 0.0;
                    for (&(u, v), &(x, y)) in sources.iter().zip(&locals) {
                        let px = theta.cos() * u - theta.sin() * v + dx;
                        let py = theta.sin() * u + theta.cos() * v + dy;
                        ss += (px - x) * (px - x) + (py - y) * (py - y);
                    }
                    best_rigid = best_rigid.min(ss);
                }
            }
        }
        assert!(affine_ss <= best_rigid + 1e-9);
    }

    #[test]
    fn nearest_row_basics() {
        let rows = [0.0, 1.63, 3.26];
        assert_eq!(nearest_row(&rows, 1.63), 1); // exact hit
        assert_eq!(nearest_row(&rows, 1.70), 1); // brute-force scan agrees
        assert_eq!(nearest_row(&rows, 0.815), 0); // equidistant tie -> lower
    }

    #[test]
    fn nearest_row_snapping_is_idempotent() {
        let field = santa_maria_field();
        for i in 0..200 {
            let x = -2.0 + i as f64 * 0.1;
            let j = field.nearest_row(x);
            assert_eq!(field.nearest_row(field.rows()[j]), j);
        }
    }

    #[test]
    fn grid_single_cell() {
        let field = FieldModel::new(
            vec![5.0],
            1.0,
            rect_boundary(0.0, 0.0, 10.0, 10.0),
            (0.0, 10.0),
            GeoPoint { lat: 0.0, lon: 0.0 },
            Vec::new(),
        )
        .unwrap();
        let g = field.make_grid(10.0).unwrap();
        assert_eq!(g.x_edges, vec![0.0, 10.0]);
        assert_eq!(g.y_edges, vec![0.0, 10.0]);
        assert_eq!(g.x_mid, vec![5.0]);
        assert_eq!(g.y_mid, vec![5.0]);
    }

    #[test]
    fn grid_truncated_last_cell() {
        let field = FieldModel::new(
            vec![2.5],
            1.0,
            rect_boundary(0.0, 0.0, 5.0, 4.0),
            (0.0, 4.0),
            GeoPoint { lat: 0.0, lon: 0.0 },
            Vec::new(),
        )
        .unwrap();
        let g = field.make_grid(2.0).unwrap();
        assert_eq!(g.x_edges, vec![0.0, 2.0, 4.0, 5.0]);
        assert_eq!(g.x_mid, vec![1.0, 3.0, 4.5]);
    }

    #[test]
    fn zero_resolution_rejected() {
        let field = santa_maria_field();
        match field.make_grid(0.0) {
            Err(FieldError::NonPositiveResolution(_)) => {}
            other => panic!("expected NonPositiveResolution, got {other:?}"),
        }
    }

    #[test]
    fn grid_midpoints_inside_cells() {
        let field = santa_maria_field();
        for r in [0.5, 1.22, 1.63, 7.0] {
            let g = field.make_grid(r).unwrap();
            for (i, &m) in g.x_mid.iter().enumerate() {
                assert!(g.x_edges[i] < m && m < g.x_edges[i + 1]);
            }
            for (i, &m) in g.y_mid.iter().enumerate() {
                assert!(g.y_edges[i] < m && m < g.y_edges[i + 1]);
            }
        }
    }

    #[test]
    fn polygon_contains_is_boundary_inclusive() {
        let p = rect_boundary(0.0, 0.0, 10.0, 10.0);
        assert!(p.contains(5.0, 5.0));
        assert!(p.contains(0.0, 0.0)); // vertex
        assert!(p.contains(5.0, 0.0)); // edge
        assert!(!p.contains(10.5, 5.0));
    }

    #[test]
    fn self_intersecting_polygon_rejected() {
        match Polygon::new(vec![(0.0, 0.0), (10.0, 10.0), (10.0, 0.0), (0.0, 10.0)]) {
            Err(FieldError::SelfIntersectingBoundary) => {}
            other => panic!("expected SelfIntersectingBoundary, got {other:?}"),
        }
    }

    #[test]
    fn field_file_round_trip() {
        let field = santa_maria_field();
        let doc = field.to_kv();
        let again = FieldModel::from_kv(&doc).unwrap();
        assert_eq!(again.rows(), field.rows());
        assert_eq!(again.row_spacing(), field.row_spacing());
        assert_eq!(again.y_extent(), field.y_extent());
        assert_eq!(again.boundary(), field.boundary());
    }
}
