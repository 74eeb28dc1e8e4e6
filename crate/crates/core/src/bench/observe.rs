//! Turns environment states into policy observations: label rendering,
//! feature extraction, PCA reduction, lifting, downsampling and partitioning
//! at the first frame, then rigid propagation for later frames.

use serde::{Deserialize, Serialize};

use crate::bench::task::{EnvState, PlanarPose, ToyObject, NUM_LABELS};
use crate::condition::{LiftedSources, Observation};
use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, CameraModel, PointCloud, RigidTransform};
use crate::partition::{partition_pca, LocalFieldSet};
use crate::semlift::{
    extract_features, fit_pca, lift, FeatureExtractor, FusionWeights, OracleExtractor, RgbImage,
    SemanticField, SmoothOracleExtractor,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObservationConfig {
    /// Points kept by farthest-point sampling.
    pub num_points: usize,
    /// Local parts per object.
    pub num_parts: usize,
    /// Common reduced feature dimension of both extractors.
    pub pca_dim: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub camera_height: f64,
    pub focal: f64,
    /// Box-blur radius of the second (smooth) extractor.
    pub smooth_radius: usize,
    pub fps_seed: u64,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        Self {
            num_points: 64,
            num_parts: 8,
            pca_dim: 5,
            image_width: 64,
            image_height: 48,
            camera_height: 0.5,
            focal: 60.0,
            smooth_radius: 1,
            fps_seed: 0,
        }
    }
}

impl ObservationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_points == 0 || self.num_parts == 0 || self.num_parts > self.num_points {
            return Err(Error::Config("need 1 <= num_parts <= num_points".into()));
        }
        if self.pca_dim == 0 || self.pca_dim > NUM_LABELS + 2 {
            return Err(Error::Config(format!(
                "pca_dim must lie in 1..={}",
                NUM_LABELS + 2
            )));
        }
        if self.image_width < 2 || self.image_height < 2 {
            return Err(Error::Config("image must be at least 2x2".into()));
        }
        if !(self.camera_height > 0.0 && self.focal > 0.0) {
            return Err(Error::Config("camera height and focal must be positive".into()));
        }
        Ok(())
    }

    pub fn camera(&self) -> Result<CameraModel> {
        CameraModel::top_down(self.camera_height, self.focal, self.image_width, self.image_height)
    }
}

/// Top-down label image: the red channel holds the part label (0 background).
pub fn render_labels(obj: &ToyObject, pose: &PlanarPose, cam: &CameraModel) -> RgbImage {
    let (w, h) = (cam.width(), cam.height());
    let mut img = RgbImage::filled(w, h, [0, 0, 0]);
    let inv = pose.transform().inverse();
    let depth = cam.world_to_camera().inverse().translation()[2] - obj.height;
    for v in 0..h {
        for u in 0..w {
            let world = cam.unproject_world(u as f64, v as f64, depth);
            let local = inv.apply_point(&world);
            if let Some(l) = obj.label_at(local.x, local.y) {
                img.set_pixel(u, v, [l, 0, 0]);
            }
        }
    }
    img
}

/// Everything fixed at the first frame of an episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeScene {
    /// Downsampled points at `t = 0` with both reduced feature sources.
    pub sources: LiftedSources,
    pub partition: LocalFieldSet,
    pub initial_pose: PlanarPose,
}

/// Fixed fusion used for partitioning and for persisted field files.
pub const PARTITION_FUSION: FusionWeights = FusionWeights {
    alpha: 0.5,
    beta: 0.5,
};

pub fn extractors(cfg: &ObservationConfig) -> (OracleExtractor, SmoothOracleExtractor) {
    (
        OracleExtractor::new(NUM_LABELS),
        SmoothOracleExtractor::new(NUM_LABELS, cfg.smooth_radius),
    )
}

/// Renders and lifts the first frame, downsamples and partitions it.
pub fn build_episode_scene(
    obj: &ToyObject,
    pose: &PlanarPose,
    cfg: &ObservationConfig,
) -> Result<EpisodeScene> {
    let cam = cfg.camera()?;
    let image = render_labels(obj, pose, &cam);
    let (ea, eb) = extractors(cfg);
    let reduce = |e: &dyn FeatureExtractor| -> Result<_> {
        let map = extract_features(e, &image, 0)?;
        let pca = fit_pca(&map, cfg.pca_dim)?;
        pca.project(&map)
    };
    let map_a = reduce(&ea)?;
    let map_b = reduce(&eb)?;

    let t0 = pose.transform();
    let dense: Vec<_> = obj.surface_points().iter().map(|(p, _)| t0.apply_point(p)).collect();
    let dense = PointCloud::new(dense)?;
    if dense.len() < cfg.num_points {
        return Err(Error::Config(format!(
            "object yields {} points, fewer than num_points = {}",
            dense.len(),
            cfg.num_points
        )));
    }
    let idx = farthest_point_sample(&dense, cfg.num_points, cfg.fps_seed)?;
    let cloud = dense.select(&idx);
    let la = lift(&cloud, &cam, &map_a)?;
    let lb = lift(&cloud, &cam, &map_b)?;
    let sources = LiftedSources::new(
        cloud.into_points(),
        la.features().clone(),
        lb.features().clone(),
    )?;
    let fused = sources.fused_field(PARTITION_FUSION, 0)?;
    let partition = partition_pca(&fused, cfg.num_parts)?;
    Ok(EpisodeScene {
        sources,
        partition,
        initial_pose: *pose,
    })
}

impl EpisodeScene {
    /// Pose mapping the first-frame configuration to `pose`.
    pub fn relative_pose(&self, pose: &PlanarPose) -> RigidTransform {
        pose.transform().compose(&self.initial_pose.transform().inverse())
    }

    /// The observation at `state`, with positions carried rigidly from `t = 0`.
    pub fn observe(&self, state: &EnvState) -> Result<Observation> {
        let phi = self.relative_pose(&state.pose);
        let points = phi.apply_points(&self.sources.points);
        Ok(Observation {
            scene: self.sources.with_points(points)?,
            part_indices: self.partition.parent_indices().to_vec(),
            part_pose: phi,
            robot: state.robot_state().to_vec(),
        })
    }

    /// Fixed-fusion semantic field at `state` (for persistence and plots).
    pub fn field(&self, state: &EnvState, timestep: usize) -> Result<SemanticField> {
        let phi = self.relative_pose(&state.pose);
        let f0 = self.sources.fused_field(PARTITION_FUSION, timestep)?;
        SemanticField::new(phi.apply_points(f0.points()), f0.features().clone(), timestep)
    }
}
