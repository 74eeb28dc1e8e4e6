//! Point-cloud primitives: farthest-point sampling, rigid transforms, pinhole
//! projection, bilinear feature sampling, and the plain-text cloud format.
//!
//! Everything here is double precision and pure.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub type Point3 = Vector3<f64>;

const ORTHONORMAL_TOL: f64 = 1e-9;

/// An ordered, nonempty list of finite 3D points in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("point cloud must contain at least one point"));
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::invalid(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
        }
    }

    pub fn centroid(&self) -> Point3 {
        self.points.iter().sum::<Point3>() / self.points.len() as f64
    }
}

/// Rigid motion `p ↦ R·p + t` with `R ∈ SO(3)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidTransform {
    /// Validates `RᵀR = I` and `det R = +1` to within 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !(ortho <= ORTHONORMAL_TOL) {
            return Err(Error::invalid(format!(
                "rotation is not orthonormal (max |RᵀR − I| = {ortho:e})"
            )));
        }
        let det = rotation.determinant();
        if !((det - 1.0).abs() <= ORTHONORMAL_TOL) {
            return Err(Error::invalid(format!("rotation determinant {det} is not +1")));
        }
        if !translation.iter().all(|c| c.is_finite()) {
            return Err(Error::invalid("translation must be finite"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation by `angle` radians about `axis`, followed by translation `t`.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, t: Vector3<f64>) -> Self {
        let rot = if axis.norm() == 0.0 {
            Rotation3::identity()
        } else {
            Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle)
        };
        Self {
            rotation: *rot.matrix(),
            translation: t,
        }
    }

    /// Planar pose: yaw about +z and an xy translation at height `z`.
    pub fn planar(x: f64, y: f64, yaw: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        Self {
            rotation: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
            translation: Vector3::new(x, y, 0.0),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply_point(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    pub fn apply(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud {
            points: self.apply_points(cloud.points()),
        }
    }

    pub fn apply_points(&self, points: &[Point3]) -> Vec<Point3> {
        points.iter().map(|p| self.apply_point(p)).collect()
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Yaw of the rotated +x axis projected on the xy plane.
    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }

    /// 9-dim encoding: first two rotation columns followed by the translation.
    pub fn encoding(&self) -> [f64; 9] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(1, 0)],
            r[(2, 0)],
            r[(0, 1)],
            r[(1, 1)],
            r[(2, 1)],
            t[0],
            t[1],
            t[2],
        ]
    }
}

/// Result of projecting a point through a pinhole camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// Pinhole intrinsics plus extrinsics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    world_to_camera: RigidTransform,
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        world_to_camera: RigidTransform,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if width < 2 || height < 2 {
            return Err(Error::invalid("image must be at least 2x2 pixels"));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::invalid("principal point must be finite"));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            world_to_camera,
        })
    }

    /// Camera at height `height_m` above the origin looking straight down
    /// (-z in world), image rows increasing toward -y.
    pub fn top_down(
        height_m: f64,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let flip = Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
        let pose = RigidTransform::new(flip, Vector3::new(0.0, 0.0, height_m))?;
        Self::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
            pose,
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn world_to_camera(&self) -> &RigidTransform {
        &self.world_to_camera
    }

    pub fn intrinsics(&self) -> (f64, f64, f64, f64) {
        (self.fx, self.fy, self.cx, self.cy)
    }

    pub fn project_point(&self, p: &Point3) -> Result<Projection> {
        let pc = self.world_to_camera.apply_point(p);
        let z = pc.z;
        if !(z > 1e-9) {
            return Err(Error::BehindCamera {
                index: None,
                depth: z,
            });
        }
        Ok(Projection {
            u: self.fx * pc.x / z + self.cx,
            v: self.fy * pc.y / z + self.cy,
            depth: z,
        })
    }

    /// Camera-frame point seen at pixel `(u, v)` with the given depth.
    pub fn unproject_camera(&self, u: f64, v: f64, depth: f64) -> Point3 {
        Point3::new(
            (u - self.cx) * depth / self.fx,
            (v - self.cy) * depth / self.fy,
            depth,
        )
    }

    pub fn unproject_world(&self, u: f64, v: f64, depth: f64) -> Point3 {
        self.world_to_camera
            .inverse()
            .apply_point(&self.unproject_camera(u, v, depth))
    }
}

/// `height × width × dim` grid of feature values, row-major with the feature
/// axis innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f64>,
}

/// A bilinearly interpolated feature and whether the query had to be clamped.
#[derive(Clone, Debug, PartialEq)]
pub struct Sampled {
    pub value: Vec<f64>,
    pub clamped: bool,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || dim == 0 {
            return Err(Error::invalid("feature map dimensions must be positive"));
        }
        if data.len() != height * width * dim {
            return Err(Error::invalid(format!(
                "feature map data has {} values, expected {height}x{width}x{dim}",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("feature map contains non-finite values"));
        }
        Ok(Self {
            height,
            width,
            dim,
            data,
        })
    }

    pub fn constant(height: usize, width: usize, value: &[f64]) -> Result<Self> {
        let data = value
            .iter()
            .copied()
            .cycle()
            .take(height * width * value.len())
            .collect();
        Self::new(height, width, value.len(), data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Feature at image row `v`, column `u`.
    pub fn at(&self, v: usize, u: usize) -> &[f64] {
        let off = (v * self.width + u) * self.dim;
        &self.data[off..off + self.dim]
    }

    /// Pixels as rows of an `(H·W) × dim` matrix.
    pub fn as_pixel_matrix(&self) -> Matrix {
        Matrix::new(self.height * self.width, self.dim, self.data.clone())
    }

    pub fn from_pixel_matrix(height: usize, width: usize, m: Matrix) -> Result<Self> {
        if m.rows() != height * width {
            return Err(Error::invalid("pixel matrix row count does not match image size"));
        }
        let dim = m.cols();
        Self::new(height, width, dim, m.into_data())
    }

    /// Bilinear blend of the four grid cells around `(u, v)`.
    ///
    /// Queries outside `[0, W−1] × [0, H−1]` are clamped to the border and
    /// reported through [`Sampled::clamped`].
    pub fn bilinear_sample(&self, u: f64, v: f64) -> Result<Sampled> {
        if !(u.is_finite() && v.is_finite()) {
            return Err(Error::invalid("sample coordinates must be finite"));
        }
        let umax = (self.width - 1) as f64;
        let vmax = (self.height - 1) as f64;
        let uc = u.clamp(0.0, umax);
        let vc = v.clamp(0.0, vmax);
        let clamped = uc != u || vc != v;

        let u0 = (uc.floor() as usize).min(self.width.saturating_sub(2));
        let v0 = (vc.floor() as usize).min(self.height.saturating_sub(2));
        let u1 = (u0 + 1).min(self.width - 1);
        let v1 = (v0 + 1).min(self.height - 1);
        let fu = uc - u0 as f64;
        let fv = vc - v0 as f64;

        let (a, b, c, d) = (self.at(v0, u0), self.at(v0, u1), self.at(v1, u0), self.at(v1, u1));
        let value = (0..self.dim)
            .map(|k| {
                (1.0 - fu) * (1.0 - fv) * a[k]
                    + fu * (1.0 - fv) * b[k]
                    + (1.0 - fu) * fv * c[k]
                    + fu * fv * d[k]
            })
            .collect();
        Ok(Sampled { value, clamped })
    }
}

/// Greedy max-min subsampling.
///
/// The first index is `seed mod |cloud|`; each following pick maximizes the
/// Euclidean distance to the already selected set, ties going to the lowest
/// index.
pub fn farthest_point_sample(cloud: &PointCloud, n: usize, seed: u64) -> Result<Vec<usize>> {
    let len = cloud.len();
    if n < 1 || n > len {
        return Err(Error::invalid(format!(
            "cannot sample {n} points from a cloud of {len}"
        )));
    }
    let pts = cloud.points();
    let mut selected = vec![false; len];
    let mut min_d2 = vec![f64::INFINITY; len];
    let mut order = Vec::with_capacity(n);
    let mut current = (seed % len as u64) as usize;
    loop {
        selected[current] = true;
        order.push(current);
        if order.len() == n {
            break;
        }
        let c = pts[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in pts.iter().enumerate() {
            if selected[i] {
                continue;
            }
            let d2 = (p - c).norm_squared();
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
            if min_d2[i] > best_d {
                best_d = min_d2[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(order)
}

/// Writes `N d` then one `x y z f_1 … f_d` line per point.
///
/// Values use the shortest decimal representation that round-trips exactly.
pub fn write_cloud_text(
    path: &Path,
    points: &[Point3],
    features: Option<&Matrix>,
) -> Result<()> {
    let d = features.map_or(0, Matrix::cols);
    if let Some(f) = features {
        if f.rows() != points.len() {
            return Err(Error::invalid("feature rows must match point count"));
        }
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{} {}", points.len(), d).map_err(io)?;
    let mut line = String::new();
    for (i, p) in points.iter().enumerate() {
        line.clear();
        use std::fmt::Write as _;
        let _ = write!(line, "{} {} {}", p.x, p.y, p.z);
        if let Some(f) = features {
            for v in f.row(i) {
                let _ = write!(line, " {v}");
            }
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_cloud_text(path: &Path) -> Result<(Vec<Point3>, Matrix)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format(path, "missing header"))?
        .map_err(|e| Error::io(path, e))?;
    let mut it = header.split_whitespace();
    let parse_usize = |s: Option<&str>| -> Result<usize> {
        s.and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::format(path, format!("bad header `{header}`")))
    };
    let n = parse_usize(it.next())?;
    let d = parse_usize(it.next())?;
    let mut points = Vec::with_capacity(n);
    let mut feats = Vec::with_capacity(n * d);
    for row in 0..n {
        let line = lines
            .next()
            .ok_or_else(|| Error::format(path, format!("expected {n} rows, found {row}")))?
            .map_err(|e| Error::io(path, e))?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(path, format!("row {row}: {e}")))?;
        if vals.len() != 3 + d {
            return Err(Error::format(
                path,
                format!("row {row} has {} values, expected {}", vals.len(), 3 + d),
            ));
        }
        points.push(Point3::new(vals[0], vals[1], vals[2]));
        feats.extend_from_slice(&vals[3..]);
    }
    Ok((points, Matrix::new(n, d, feats)))
}
