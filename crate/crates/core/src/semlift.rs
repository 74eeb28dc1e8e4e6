//! Dense semantic lifting: 2D feature extraction, PCA reduction, weighted
//! fusion, projection of fused features onto 3D points, and rigid temporal
//! propagation of the resulting semantic field.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    read_cloud_text, write_cloud_text, CameraModel, FeatureMap, Point3, PointCloud,
    RigidTransform,
};
use crate::linalg::Matrix;

/// 8-bit RGB frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[u8; 3]>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::invalid(format!(
                "image buffer of {} pixels does not match {width}x{height}",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, px: [u8; 3]) -> Self {
        Self {
            width,
            height,
            pixels: vec![px; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel(&self, u: usize, v: usize) -> [u8; 3] {
        self.pixels[v * self.width + u]
    }

    pub fn set_pixel(&mut self, u: usize, v: usize, px: [u8; 3]) {
        self.pixels[v * self.width + u] = px;
    }

    pub fn pixels(&self) -> &[[u8; 3]] {
        &self.pixels
    }
}

/// Produces a dense feature map for a frame.
///
/// Implementations must be deterministic for a fixed input.
pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;
    fn output_dim(&self) -> usize;
    fn extract(&self, image: &RgbImage, frame_index: usize) -> Result<FeatureMap>;
}

pub fn extract_features(
    extractor: &dyn FeatureExtractor,
    image: &RgbImage,
    frame_index: usize,
) -> Result<FeatureMap> {
    let map = extractor.extract(image, frame_index)?;
    if map.dim() != extractor.output_dim() {
        return Err(Error::invalid(format!(
            "extractor `{}` produced dim {} but declares {}",
            extractor.name(),
            map.dim(),
            extractor.output_dim()
        )));
    }
    Ok(map)
}

fn pixel_label(image: &RgbImage, u: usize, v: usize, num_labels: usize) -> Result<usize> {
    let k = image.pixel(u, v)[0] as usize;
    if k >= num_labels {
        return Err(Error::invalid(format!(
            "pixel ({u}, {v}) encodes label {k}, extractor knows {num_labels}"
        )));
    }
    Ok(k)
}

fn normalized_uv(u: usize, v: usize, width: usize, height: usize) -> [f64; 2] {
    let nu = if width > 1 { u as f64 / (width - 1) as f64 } else { 0.0 };
    let nv = if height > 1 { v as f64 / (height - 1) as f64 } else { 0.0 };
    [nu, nv]
}

/// Synthetic stand-in for a discriminative backbone: the red channel carries
/// the part label `k`, and the feature is `one_hot(k) ⊕ (u/(W−1), v/(H−1))`.
#[derive(Clone, Debug)]
pub struct OracleExtractor {
    num_labels: usize,
}

impl OracleExtractor {
    pub fn new(num_labels: usize) -> Self {
        Self { num_labels }
    }
}

impl FeatureExtractor for OracleExtractor {
    fn name(&self) -> &str {
        "oracle"
    }

    fn output_dim(&self) -> usize {
        self.num_labels + 2
    }

    fn extract(&self, image: &RgbImage, _frame_index: usize) -> Result<FeatureMap> {
        let (w, h) = (image.width(), image.height());
        let dim = self.output_dim();
        let mut data = vec![0.0; w * h * dim];
        for v in 0..h {
            for u in 0..w {
                let k = pixel_label(image, u, v, self.num_labels)?;
                let cell = &mut data[(v * w + u) * dim..(v * w + u + 1) * dim];
                cell[k] = 1.0;
                cell[self.num_labels..].copy_from_slice(&normalized_uv(u, v, w, h));
            }
        }
        FeatureMap::new(h, w, dim, data)
    }
}

/// Synthetic stand-in for a smooth, globally coherent backbone: the one-hot
/// label averaged over a `(2r+1)²` window (clipped at the border) followed by
/// normalized pixel coordinates.
#[derive(Clone, Debug)]
pub struct SmoothOracleExtractor {
    num_labels: usize,
    radius: usize,
}

impl SmoothOracleExtractor {
    pub fn new(num_labels: usize, radius: usize) -> Self {
        Self { num_labels, radius }
    }
}

impl FeatureExtractor for SmoothOracleExtractor {
    fn name(&self) -> &str {
        "smooth-oracle"
    }

    fn output_dim(&self) -> usize {
        self.num_labels + 2
    }

    fn extract(&self, image: &RgbImage, _frame_index: usize) -> Result<FeatureMap> {
        let (w, h) = (image.width(), image.height());
        let nl = self.num_labels;
        let mut labels = Vec::with_capacity(w * h);
        for v in 0..h {
            for u in 0..w {
                labels.push(pixel_label(image, u, v, nl)?);
            }
        }
        // integral image per label
        let mut integral = vec![0u32; (w + 1) * (h + 1) * nl];
        let idx = |u: usize, v: usize, k: usize| (v * (w + 1) + u) * nl + k;
        for v in 0..h {
            for u in 0..w {
                for k in 0..nl {
                    let here = u32::from(labels[v * w + u] == k);
                    integral[idx(u + 1, v + 1, k)] = here + integral[idx(u, v + 1, k)]
                        + integral[idx(u + 1, v, k)]
                        - integral[idx(u, v, k)];
                }
            }
        }
        let r = self.radius;
        let dim = self.output_dim();
        let mut data = vec![0.0; w * h * dim];
        for v in 0..h {
            for u in 0..w {
                let (u0, u1) = (u.saturating_sub(r), (u + r + 1).min(w));
                let (v0, v1) = (v.saturating_sub(r), (v + r + 1).min(h));
                let area = ((u1 - u0) * (v1 - v0)) as f64;
                let cell = &mut data[(v * w + u) * dim..(v * w + u + 1) * dim];
                for (k, c) in cell.iter_mut().take(nl).enumerate() {
                    let s = integral[idx(u1, v1, k)] + integral[idx(u0, v0, k)]
                        - integral[idx(u0, v1, k)]
                        - integral[idx(u1, v0, k)];
                    *c = f64::from(s) / area;
                }
                cell[nl..].copy_from_slice(&normalized_uv(u, v, w, h));
            }
        }
        FeatureMap::new(h, w, dim, data)
    }
}

/// JSON sidecar describing one raw feature array on disk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSidecar {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub extractor: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<u32>>,
}

/// Stable-Diffusion feature recipe: intermediate layers concatenated.
pub const SD_FEATURE_LAYERS: [u32; 3] = [2, 5, 8];

pub fn feature_file_paths(dir: &Path, frame_index: usize) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("frame_{frame_index:04}.f64")),
        dir.join(format!("frame_{frame_index:04}.json")),
    )
}

/// Writes `map` as little-endian `f64` values (row-major `H×W×d`) plus sidecar.
pub fn write_feature_file(
    dir: &Path,
    frame_index: usize,
    map: &FeatureMap,
    extractor: &str,
    layers: Option<Vec<u32>>,
) -> Result<()> {
    let (raw, json) = feature_file_paths(dir, frame_index);
    let bytes: Vec<u8> = map.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))?;
    let sidecar = FeatureSidecar {
        height: map.height(),
        width: map.width(),
        dim: map.dim(),
        extractor: extractor.to_string(),
        layers,
    };
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    std::fs::write(&json, text).map_err(|e| Error::io(&json, e))
}

/// Loads features computed offline (one raw array plus sidecar per frame).
#[derive(Clone, Debug)]
pub struct FileFeatureLoader {
    dir: PathBuf,
    name: String,
    dim: usize,
}

impl FileFeatureLoader {
    pub fn new(dir: impl Into<PathBuf>, name: impl Into<String>, dim: usize) -> Self {
        Self {
            dir: dir.into(),
            name: name.into(),
            dim,
        }
    }

    fn ingest_err(path: &Path, reason: impl Into<String>) -> Error {
        Error::Ingestion {
            path: path.to_path_buf(),
            reason: reason.into(),
        }
    }
}

impl FeatureExtractor for FileFeatureLoader {
    fn name(&self) -> &str {
        &self.name
    }

    fn output_dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, image: &RgbImage, frame_index: usize) -> Result<FeatureMap> {
        let (raw, json) = feature_file_paths(&self.dir, frame_index);
        let text = std::fs::read_to_string(&json)
            .map_err(|e| Self::ingest_err(&json, e.to_string()))?;
        let sidecar: FeatureSidecar =
            serde_json::from_str(&text).map_err(|e| Self::ingest_err(&json, e.to_string()))?;
        if sidecar.height != image.height() || sidecar.width != image.width() {
            return Err(Self::ingest_err(
                &json,
                format!(
                    "features are {}x{} but frame is {}x{}",
                    sidecar.height,
                    sidecar.width,
                    image.height(),
                    image.width()
                ),
            ));
        }
        if sidecar.dim != self.dim {
            return Err(Self::ingest_err(
                &json,
                format!("dim {} does not match expected {}", sidecar.dim, self.dim),
            ));
        }
        let bytes = std::fs::read(&raw).map_err(|e| Self::ingest_err(&raw, e.to_string()))?;
        let expected = sidecar.height * sidecar.width * sidecar.dim * 8;
        if bytes.len() != expected {
            return Err(Self::ingest_err(
                &raw,
                format!("{} bytes on disk, sidecar implies {expected}", bytes.len()),
            ));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        FeatureMap::new(sidecar.height, sidecar.width, sidecar.dim, data)
            .map_err(|e| Self::ingest_err(&raw, e.to_string()))
    }
}

/// Linear projection onto the leading principal directions of a pixel set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaProjector {
    mean: Vec<f64>,
    /// `d_in × d`, orthonormal columns.
    basis: Matrix,
    /// All covariance eigenvalues, descending.
    eigenvalues: Vec<f64>,
    samples: usize,
}

impl PcaProjector {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.basis.cols()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn basis(&self) -> &Matrix {
        &self.basis
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn explained_variance_ratio(&self) -> f64 {
        let total: f64 = self.eigenvalues.iter().map(|v| v.max(0.0)).sum();
        if total == 0.0 {
            return 1.0;
        }
        let kept: f64 = self.eigenvalues[..self.output_dim()]
            .iter()
            .map(|v| v.max(0.0))
            .sum();
        kept / total
    }

    fn centered(&self, rows: &Matrix) -> Matrix {
        let mut c = rows.clone();
        for i in 0..c.rows() {
            for (x, m) in c.row_mut(i).iter_mut().zip(&self.mean) {
                *x -= m;
            }
        }
        c
    }

    /// Projects each row of an `n × d_in` matrix.
    pub fn project_rows(&self, rows: &Matrix) -> Matrix {
        self.centered(rows).matmul(&self.basis)
    }

    pub fn project(&self, map: &FeatureMap) -> Result<FeatureMap> {
        if map.dim() != self.input_dim() {
            return Err(Error::invalid(format!(
                "projector expects dim {}, map has {}",
                self.input_dim(),
                map.dim()
            )));
        }
        let reduced = self.project_rows(&map.as_pixel_matrix());
        FeatureMap::from_pixel_matrix(map.height(), map.width(), reduced)
    }

    /// Mean squared reconstruction error per pixel.
    pub fn reconstruction_error(&self, map: &FeatureMap) -> f64 {
        let x = map.as_pixel_matrix();
        let c = self.centered(&x);
        let recon = c.matmul(&self.basis).matmul_t(&self.basis);
        c.sub(&recon).sum_sq() / x.rows() as f64
    }
}

/// Fits a `d`-dimensional PCA on all pixels of `map`.
///
/// Eigenvectors are oriented so their largest-magnitude entry is positive.
pub fn fit_pca(map: &FeatureMap, d: usize) -> Result<PcaProjector> {
    fit_pca_rows(&map.as_pixel_matrix(), d)
}

pub fn fit_pca_rows(x: &Matrix, d: usize) -> Result<PcaProjector> {
    let (n, d_in) = x.shape();
    if d == 0 {
        return Err(Error::invalid("PCA target dimension must be at least 1"));
    }
    if d > d_in {
        return Err(Error::invalid(format!(
            "PCA target dimension {d} exceeds input dimension {d_in}"
        )));
    }
    if n < d {
        return Err(Error::invalid(format!("PCA needs at least {d} samples, got {n}")));
    }
    let mean = x.col_means();
    let mut cov = DMatrix::<f64>::zeros(d_in, d_in);
    for row in x.iter_rows() {
        for i in 0..d_in {
            let di = row[i] - mean[i];
            for j in i..d_in {
                cov[(i, j)] += di * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..d_in {
        for j in i..d_in {
            let v = cov[(i, j)] / n as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let (values, vectors) = sorted_eigen(cov);
    let basis = Matrix::from_fn(d_in, d, |i, j| vectors[j][i]);
    Ok(PcaProjector {
        mean,
        basis,
        eigenvalues: values,
        samples: n,
    })
}

/// Eigenpairs of a symmetric matrix, descending by eigenvalue, each vector
/// oriented with its largest-magnitude entry positive.
pub(crate) fn sorted_eigen(cov: DMatrix<f64>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = cov.nrows();
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = order
        .iter()
        .map(|&i| orient(eig.eigenvectors.column(i).iter().copied().collect()))
        .collect();
    (values, vectors)
}

/// Flips `v` so its largest-magnitude entry (first on ties) is positive.
pub(crate) fn orient(mut v: Vec<f64>) -> Vec<f64> {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    v
}

/// Scalar fusion weights `(α, β)` for `α·A + β·B`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
        }
    }
}

pub fn fuse(a: &FeatureMap, b: &FeatureMap, w: FusionWeights) -> Result<FeatureMap> {
    if (a.height(), a.width(), a.dim()) != (b.height(), b.width(), b.dim()) {
        return Err(Error::invalid(format!(
            "cannot fuse {}x{}x{} with {}x{}x{}",
            a.height(),
            a.width(),
            a.dim(),
            b.height(),
            b.width(),
            b.dim()
        )));
    }
    if !(w.alpha.is_finite() && w.beta.is_finite()) {
        return Err(Error::invalid("fusion weights must be finite"));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| w.alpha * x + w.beta * y)
        .collect();
    FeatureMap::new(a.height(), a.width(), a.dim(), data)
}

/// Gradient of a scalar loss w.r.t. `(α, β)` given `∂loss/∂fused`.
pub fn fuse_backward(grad_fused: &FeatureMap, a: &FeatureMap, b: &FeatureMap) -> (f64, f64) {
    let dot = |x: &FeatureMap| -> f64 {
        grad_fused.data().iter().zip(x.data()).map(|(g, v)| g * v).sum()
    };
    (dot(a), dot(b))
}

/// Points paired with per-point features at a timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticField {
    points: Vec<Point3>,
    features: Matrix,
    timestep: usize,
}

impl SemanticField {
    pub fn new(points: Vec<Point3>, features: Matrix, timestep: usize) -> Result<Self> {
        if points.len() != features.rows() {
            return Err(Error::invalid(format!(
                "{} points but {} feature rows",
                points.len(),
                features.rows()
            )));
        }
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) || !features.is_finite() {
            return Err(Error::invalid("semantic field values must be finite"));
        }
        Ok(Self {
            points,
            features,
            timestep,
        })
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn timestep(&self) -> usize {
        self.timestep
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn cloud(&self) -> Result<PointCloud> {
        PointCloud::new(self.points.clone())
    }

    pub fn select(&self, indices: &[usize]) -> SemanticField {
        SemanticField {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            features: self.features.select_rows(indices),
            timestep: self.timestep,
        }
    }

    pub fn with_features(&self, features: Matrix) -> Result<SemanticField> {
        SemanticField::new(self.points.clone(), features, self.timestep)
    }

    /// `N × (3 + d)` rows `[x y z f…]`.
    pub fn augmented(&self) -> Matrix {
        let d = self.feature_dim();
        Matrix::from_fn(self.len(), 3 + d, |i, j| {
            if j < 3 {
                self.points[i][j]
            } else {
                self.features[(i, j - 3)]
            }
        })
    }

    pub fn write_text(&self, path: &Path) -> Result<()> {
        write_cloud_text(path, &self.points, Some(&self.features))
    }

    pub fn read_text(path: &Path, timestep: usize) -> Result<SemanticField> {
        let (points, features) = read_cloud_text(path)?;
        SemanticField::new(points, features, timestep)
            .map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Lifts `fused` onto `cloud`, also reporting which points were clamped to
/// the image border.
pub fn lift_with_flags(
    cloud: &PointCloud,
    cam: &CameraModel,
    fused: &FeatureMap,
) -> Result<(SemanticField, Vec<bool>)> {
    let mut feats = Vec::with_capacity(cloud.len() * fused.dim());
    let mut flags = Vec::with_capacity(cloud.len());
    for (i, p) in cloud.points().iter().enumerate() {
        let proj = cam.project_point(p).map_err(|e| match e {
            Error::BehindCamera { depth, .. } => Error::BehindCamera {
                index: Some(i),
                depth,
            },
            other => other,
        })?;
        let s = fused.bilinear_sample(proj.u, proj.v)?;
        feats.extend(s.value);
        flags.push(s.clamped);
    }
    let features = Matrix::new(cloud.len(), fused.dim(), feats);
    let field = SemanticField::new(cloud.points().to_vec(), features, 0)?;
    Ok((field, flags))
}

pub fn lift(cloud: &PointCloud, cam: &CameraModel, fused: &FeatureMap) -> Result<SemanticField> {
    lift_with_flags(cloud, cam, fused).map(|(f, _)| f)
}

/// Moves positions rigidly; features are carried over untouched.
pub fn propagate(field: &SemanticField, pose: &RigidTransform) -> SemanticField {
    SemanticField {
        points: pose.apply_points(&field.points),
        features: field.features.clone(),
        timestep: field.timestep + 1,
    }
}

/// `poses[t-1]` maps the t=0 configuration to timestep `t`.
pub fn build_field_sequence(
    initial: &SemanticField,
    poses: &[RigidTransform],
) -> Vec<SemanticField> {
    let mut seq = Vec::with_capacity(poses.len() + 1);
    seq.push(initial.clone());
    for (i, pose) in poses.iter().enumerate() {
        seq.push(SemanticField {
            points: pose.apply_points(&initial.points),
            features: initial.features.clone(),
            timestep: initial.timestep + i + 1,
        });
    }
    seq
}

pub fn field_file_name(t: usize) -> String {
    format!("field_t{t:04}.txt")
}

pub fn write_field_sequence(dir: &Path, seq: &[SemanticField]) -> Result<Vec<PathBuf>> {
    seq.iter()
        .map(|f| {
            let path = dir.join(field_file_name(f.timestep()));
            f.write_text(&path).map(|()| path)
        })
        .collect()
}
