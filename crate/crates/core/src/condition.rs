//! Hierarchical conditioning: point-set encoders for the scene and its parts,
//! the robot-state encoder, global condition assembly, and the
//! permutation-invariant part refine / cross-attention pathway.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point3, RigidTransform};
use crate::linalg::{order_free_sum, Matrix};
use crate::nn::{Activation, Graph, Init, Linear, Mlp, ParamStore, Var};
use crate::partition::LocalFieldSet;
use crate::semlift::{FusionWeights, SemanticField};

/// Length of [`RigidTransform::encoding`].
pub const POSE_ENCODING_DIM: usize = 9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConditionConfig {
    /// Reduced feature dimension of each lifted source (and of the fused field).
    pub feature_dim: usize,
    /// Robot state length.
    pub robot_dim: usize,
    pub point_hidden: usize,
    pub scene_dim: usize,
    pub robot_hidden: usize,
    pub robot_embed_dim: usize,
    /// Part embedding width, shared by the aggregated part vector.
    pub part_dim: usize,
    pub attn_dim: usize,
    pub heads: usize,
    pub refine_residual: bool,
    /// Zero-initialize the output projections of attention blocks.
    pub zero_init_output: bool,
    /// Positions are multiplied by this before entering the encoders.
    pub position_scale: f64,
}

impl Default for ConditionConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            robot_dim: 3,
            point_hidden: 64,
            scene_dim: 64,
            robot_hidden: 32,
            robot_embed_dim: 16,
            part_dim: 32,
            attn_dim: 32,
            heads: 1,
            refine_residual: true,
            zero_init_output: true,
            position_scale: 1.0,
        }
    }
}

impl ConditionConfig {
    pub fn global_dim(&self) -> usize {
        self.scene_dim + self.robot_embed_dim + self.part_dim
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feature_dim", self.feature_dim),
            ("robot_dim", self.robot_dim),
            ("point_hidden", self.point_hidden),
            ("scene_dim", self.scene_dim),
            ("robot_hidden", self.robot_hidden),
            ("robot_embed_dim", self.robot_embed_dim),
            ("part_dim", self.part_dim),
            ("attn_dim", self.attn_dim),
            ("heads", self.heads),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.attn_dim % self.heads != 0 {
            return Err(Error::invalid("attn_dim must be divisible by heads"));
        }
        if !(self.position_scale.is_finite() && self.position_scale > 0.0) {
            return Err(Error::invalid("position_scale must be positive"));
        }
        Ok(())
    }
}

/// Component switches for ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    /// Use lifted semantic features; when off every feature is zero.
    pub dense_semantic: bool,
    /// Include the pose-aware aggregated part vector in the global condition.
    pub global_pose_condition: bool,
    /// Refine the part set with self-attention and inject it into the denoiser.
    pub part_refine: bool,
}

impl Toggles {
    pub const ALL: Toggles = Toggles {
        dense_semantic: true,
        global_pose_condition: true,
        part_refine: true,
    };
    pub const NONE: Toggles = Toggles {
        dense_semantic: false,
        global_pose_condition: false,
        part_refine: false,
    };
}

impl Default for Toggles {
    fn default() -> Self {
        Self::ALL
    }
}

/// Per-point MLP followed by a max over the set.
#[derive(Clone, Debug)]
pub struct SetEncoder {
    pub mlp: Mlp,
}

impl SetEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden: usize,
        output_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            mlp: Mlp::new(
                store,
                name,
                &[input_dim, hidden, output_dim],
                Activation::Relu,
                Init::FanIn,
                rng,
            ),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    /// Encodes consecutive row segments of `x` as independent sets.
    pub fn forward(&self, g: &mut Graph, x: Var, lens: &[usize]) -> Var {
        let h = self.mlp.forward(g, x);
        g.segment_max(h, lens)
    }
}

/// Multi-head scaled dot-product attention projections.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl AttentionBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        query_dim: usize,
        key_dim: usize,
        attn_dim: usize,
        output_dim: usize,
        heads: usize,
        zero_init_output: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let out_init = if zero_init_output {
            Init::Zeros
        } else {
            Init::FanIn
        };
        Self {
            wq: Linear::new(store, &format!("{name}.q"), query_dim, attn_dim, Init::FanIn, rng),
            // A key bias only shifts every score of a query equally, so it is omitted.
            wk: Linear::without_bias(store, &format!("{name}.k"), key_dim, attn_dim, Init::FanIn, rng),
            wv: Linear::new(store, &format!("{name}.v"), key_dim, attn_dim, Init::FanIn, rng),
            wo: Linear::new(store, &format!("{name}.o"), attn_dim, output_dim, out_init, rng),
            heads,
        }
    }

    /// Attention output (before any residual), block-diagonal over samples.
    pub fn forward(
        &self,
        g: &mut Graph,
        queries: Var,
        keys: Var,
        q_lens: &[usize],
        k_lens: &[usize],
    ) -> Var {
        let q = self.wq.forward(g, queries);
        let k = self.wk.forward(g, keys);
        let v = self.wv.forward(g, keys);
        let width = self.wq.output_dim / self.heads;
        let scale = 1.0 / (width as f64).sqrt();
        let head_outputs: Vec<Var> = (0..self.heads)
            .map(|h| {
                let (qh, kh, vh) = if self.heads == 1 {
                    (q, k, v)
                } else {
                    (
                        g.slice_cols(q, h * width, width),
                        g.slice_cols(k, h * width, width),
                        g.slice_cols(v, h * width, width),
                    )
                };
                g.block_attention(qh, kh, vh, q_lens, k_lens, scale)
            })
            .collect();
        let joined = if head_outputs.len() == 1 {
            head_outputs[0]
        } else {
            g.concat_cols(&head_outputs)
        };
        self.wo.forward(g, joined)
    }
}

/// Self-attention over the part set with optional pre-norm residual; no
/// positional information enters, so it is permutation equivariant.
#[derive(Clone, Debug)]
pub struct RefineBlock {
    pub attn: AttentionBlock,
    pub residual: bool,
}

impl RefineBlock {
    pub fn forward(&self, g: &mut Graph, parts: Var, lens: &[usize]) -> Var {
        let h = if self.residual { g.layer_norm(parts) } else { parts };
        let a = self.attn.forward(g, h, h, lens, lens);
        if self.residual {
            g.add(parts, a)
        } else {
            a
        }
    }
}

/// `z + Attn(z, parts)`: denoiser activations query the part set.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub attn: AttentionBlock,
}

impl CrossAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        activation_dim: usize,
        part_dim: usize,
        config: &ConditionConfig,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            attn: AttentionBlock::new(
                store,
                name,
                activation_dim,
                part_dim,
                config.attn_dim,
                activation_dim,
                config.heads,
                config.zero_init_output,
                rng,
            ),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        z: Var,
        parts: Var,
        z_lens: &[usize],
        part_lens: &[usize],
    ) -> Var {
        let a = self.attn.forward(g, z, parts, z_lens, part_lens);
        g.add(z, a)
    }
}

/// Points plus the two reduced feature sources, before fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct LiftedSources {
    pub points: Vec<Point3>,
    pub source_a: Matrix,
    pub source_b: Matrix,
}

impl LiftedSources {
    pub fn new(points: Vec<Point3>, source_a: Matrix, source_b: Matrix) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("lifted sources need at least one point"));
        }
        if source_a.rows() != points.len() || source_b.rows() != points.len() {
            return Err(Error::invalid("source rows must match point count"));
        }
        if source_a.cols() != source_b.cols() {
            return Err(Error::invalid("sources must share a feature dimension"));
        }
        Ok(Self {
            points,
            source_a,
            source_b,
        })
    }

    /// Same sources at new positions.
    pub fn with_points(&self, points: Vec<Point3>) -> Result<Self> {
        Self::new(points, self.source_a.clone(), self.source_b.clone())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.source_a.cols()
    }

    /// The field obtained with fixed fusion weights.
    pub fn fused_field(&self, w: FusionWeights, timestep: usize) -> Result<SemanticField> {
        let f = self
            .source_a
            .scale(w.alpha)
            .add(&self.source_b.scale(w.beta));
        SemanticField::new(self.points.clone(), f, timestep)
    }

    /// Rows `[s·p | a | b]` for the given point indices.
    fn rows(&self, indices: &[usize], position_scale: f64) -> Vec<Vec<f64>> {
        indices
            .iter()
            .map(|&i| {
                let p = self.points[i] * position_scale;
                let mut r = vec![p.x, p.y, p.z];
                r.extend_from_slice(self.source_a.row(i));
                r.extend_from_slice(self.source_b.row(i));
                r
            })
            .collect()
    }
}

/// Everything the policy conditions on at one timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub scene: LiftedSources,
    /// Indices into `scene` per local part (a disjoint cover).
    pub part_indices: Vec<Vec<usize>>,
    /// Pose encoding attached to every part embedding.
    pub part_pose: RigidTransform,
    pub robot: Vec<f64>,
}

impl Observation {
    pub fn num_parts(&self) -> usize {
        self.part_indices.len()
    }

    /// Reorders the part set.
    pub fn with_part_order(&self, order: &[usize]) -> Self {
        let mut o = self.clone();
        o.part_indices = order.iter().map(|&i| self.part_indices[i].clone()).collect();
        o
    }
}

/// The condition for a batch: one global row per sample and, when the part
/// pathway is active, the refined part rows grouped per sample.
#[derive(Clone, Debug)]
pub struct CondOutput {
    pub global: Var,
    pub parts: Option<Var>,
    pub part_counts: Vec<usize>,
}

/// Global condition vector with fixed segment layout (scene, robot, part).
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalCondition {
    pub vector: Vec<f64>,
    pub dims: (usize, usize, usize),
}

impl GlobalCondition {
    pub fn scene(&self) -> &[f64] {
        &self.vector[..self.dims.0]
    }

    pub fn robot(&self) -> &[f64] {
        &self.vector[self.dims.0..self.dims.0 + self.dims.1]
    }

    pub fn part(&self) -> &[f64] {
        &self.vector[self.dims.0 + self.dims.1..]
    }
}

/// Concatenates the three segments in order, checking their widths.
pub fn build_global_condition(
    scene: &[f64],
    robot: &[f64],
    part: &[f64],
    dims: (usize, usize, usize),
) -> Result<GlobalCondition> {
    if (scene.len(), robot.len(), part.len()) != dims {
        return Err(Error::invalid(format!(
            "condition segments have widths ({}, {}, {}), expected {dims:?}",
            scene.len(),
            robot.len(),
            part.len()
        )));
    }
    let mut vector = scene.to_vec();
    vector.extend_from_slice(robot);
    vector.extend_from_slice(part);
    Ok(GlobalCondition { vector, dims })
}

/// Order-independent mean over the rows of a part embedding set.
pub fn aggregate_parts(parts: &Matrix) -> Vec<f64> {
    assert!(parts.rows() > 0, "cannot aggregate an empty part set");
    let mut buf = vec![0.0; parts.rows()];
    (0..parts.cols())
        .map(|j| {
            for (i, b) in buf.iter_mut().enumerate() {
                *b = parts[(i, j)];
            }
            order_free_sum(&mut buf) / parts.rows() as f64
        })
        .collect()
}

/// All conditioning encoders. Parameter values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Conditioner {
    pub config: ConditionConfig,
    pub toggles: Toggles,
    pub alpha: crate::nn::ParamId,
    pub beta: crate::nn::ParamId,
    pub scene: SetEncoder,
    pub robot: Mlp,
    pub part_set: SetEncoder,
    pub part_proj: Linear,
    pub refine: RefineBlock,
}

impl Conditioner {
    pub fn new(
        store: &mut ParamStore,
        config: ConditionConfig,
        toggles: Toggles,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let point_in = 3 + c.feature_dim;
        let fw = FusionWeights::default();
        let alpha = store.add("fusion.alpha", Matrix::scalar(fw.alpha));
        let beta = store.add("fusion.beta", Matrix::scalar(fw.beta));
        let scene = SetEncoder::new(store, "scene", point_in, c.point_hidden, c.scene_dim, rng);
        let robot = Mlp::new(
            store,
            "robot",
            &[c.robot_dim, c.robot_hidden, c.robot_embed_dim],
            Activation::Silu,
            Init::FanIn,
            rng,
        );
        let part_set = SetEncoder::new(store, "part.set", point_in, c.point_hidden, c.part_dim, rng);
        let part_proj = Linear::new(
            store,
            "part.proj",
            c.part_dim + POSE_ENCODING_DIM,
            c.part_dim,
            Init::FanIn,
            rng,
        );
        let refine = RefineBlock {
            attn: AttentionBlock::new(
                store,
                "refine",
                c.part_dim,
                c.part_dim,
                c.attn_dim,
                c.part_dim,
                c.heads,
                c.zero_init_output && c.refine_residual,
                rng,
            ),
            residual: c.refine_residual,
        };
        Ok(Self {
            config,
            toggles,
            alpha,
            beta,
            scene,
            robot,
            part_set,
            part_proj,
            refine,
        })
    }

    pub fn global_dims(&self) -> (usize, usize, usize) {
        let c = &self.config;
        (c.scene_dim, c.robot_embed_dim, c.part_dim)
    }

    pub fn fusion_weights(&self, store: &ParamStore) -> FusionWeights {
        FusionWeights {
            alpha: store.get(self.alpha)[(0, 0)],
            beta: store.get(self.beta)[(0, 0)],
        }
    }

    fn check_observation(&self, o: &Observation) -> Result<()> {
        if o.scene.feature_dim() != self.config.feature_dim {
            return Err(Error::invalid(format!(
                "observation features have dim {}, encoder expects {}",
                o.scene.feature_dim(),
                self.config.feature_dim
            )));
        }
        if o.robot.len() != self.config.robot_dim {
            return Err(Error::invalid(format!(
                "robot state has {} entries, encoder expects {}",
                o.robot.len(),
                self.config.robot_dim
            )));
        }
        if o.part_indices.is_empty() || o.part_indices.iter().any(Vec::is_empty) {
            return Err(Error::invalid("every observation needs nonempty parts"));
        }
        if o.part_indices.iter().flatten().any(|&i| i >= o.scene.len()) {
            return Err(Error::invalid("part index outside the scene"));
        }
        Ok(())
    }

    /// `[p | αa + βb]` (or `[p | 0]` with semantics disabled) from `[p | a | b]` rows.
    fn fuse_rows(&self, g: &mut Graph, raw: Var) -> Var {
        let d = self.config.feature_dim;
        let rows = g.shape(raw).0;
        let pos = g.slice_cols(raw, 0, 3);
        let f = if self.toggles.dense_semantic {
            let a = g.slice_cols(raw, 3, d);
            let b = g.slice_cols(raw, 3 + d, d);
            let alpha = g.param(self.alpha);
            let beta = g.param(self.beta);
            let a = g.scalar_mul(a, alpha);
            let b = g.scalar_mul(b, beta);
            g.add(a, b)
        } else {
            g.constant(Matrix::zeros(rows, d))
        };
        g.concat_cols(&[pos, f])
    }

    /// Builds the condition for a batch of observations inside `g`.
    pub fn forward(&self, g: &mut Graph, batch: &[&Observation]) -> Result<CondOutput> {
        if batch.is_empty() {
            return Err(Error::invalid("empty observation batch"));
        }
        for o in batch {
            self.check_observation(o)?;
        }
        let s = self.config.position_scale;

        let mut scene_rows = Vec::new();
        let mut scene_lens = Vec::with_capacity(batch.len());
        for o in batch {
            let all: Vec<usize> = (0..o.scene.len()).collect();
            scene_rows.extend(o.scene.rows(&all, s));
            scene_lens.push(o.scene.len());
        }
        let scene_raw = g.constant(Matrix::from_rows(&scene_rows));
        let scene_in = self.fuse_rows(g, scene_raw);
        let scene = self.scene.forward(g, scene_in, &scene_lens);

        let robot_rows: Vec<&[f64]> = batch.iter().map(|o| o.robot.as_slice()).collect();
        let robot_in = g.constant(Matrix::from_rows(&robot_rows));
        let robot = self.robot.forward(g, robot_in);

        let part_counts: Vec<usize> = batch.iter().map(|o| o.num_parts()).collect();
        let need_parts = self.toggles.global_pose_condition || self.toggles.part_refine;
        let part_rows = if need_parts {
            Some(self.part_rows(g, batch)?)
        } else {
            None
        };

        let part_vec = match part_rows {
            Some(rows) if self.toggles.global_pose_condition => g.segment_mean(rows, &part_counts),
            _ => g.constant(Matrix::zeros(batch.len(), self.config.part_dim)),
        };
        let global = g.concat_cols(&[scene, robot, part_vec]);
        let parts = match part_rows {
            Some(rows) if self.toggles.part_refine => Some(self.refine.forward(g, rows, &part_counts)),
            _ => None,
        };
        Ok(CondOutput {
            global,
            parts,
            part_counts,
        })
    }

    /// Unrefined part embeddings for every part of every observation.
    fn part_rows(&self, g: &mut Graph, batch: &[&Observation]) -> Result<Var> {
        let s = self.config.position_scale;
        let mut rows = Vec::new();
        let mut lens = Vec::new();
        let mut poses = Vec::new();
        for o in batch {
            let enc = o.part_pose.encoding();
            for idx in &o.part_indices {
                rows.extend(o.scene.rows(idx, s));
                lens.push(idx.len());
                poses.push(enc);
            }
        }
        let raw = g.constant(Matrix::from_rows(&rows));
        let fused = self.fuse_rows(g, raw);
        let set = self.part_set.forward(g, fused, &lens);
        let pose = g.constant(Matrix::from_rows(&poses));
        let joined = g.concat_cols(&[set, pose]);
        Ok(self.part_proj.forward(g, joined))
    }

    fn field_rows(&self, field: &SemanticField, indices: &[usize]) -> Result<Matrix> {
        if field.feature_dim() != self.config.feature_dim {
            return Err(Error::invalid(format!(
                "field features have dim {}, encoder expects {}",
                field.feature_dim(),
                self.config.feature_dim
            )));
        }
        let s = self.config.position_scale;
        let rows: Vec<Vec<f64>> = indices
            .iter()
            .map(|&i| {
                let p = field.points()[i] * s;
                let mut r = vec![p.x, p.y, p.z];
                r.extend_from_slice(field.features().row(i));
                r
            })
            .collect();
        Ok(Matrix::from_rows(&rows))
    }

    /// Scene embedding of an already fused field.
    pub fn encode_scene(&self, store: &ParamStore, field: &SemanticField) -> Result<Vec<f64>> {
        let all: Vec<usize> = (0..field.len()).collect();
        let x = self.field_rows(field, &all)?;
        let mut g = Graph::new(store);
        let xv = g.constant(x);
        let out = self.scene.forward(&mut g, xv, &[field.len()]);
        Ok(g.value(out).row(0).to_vec())
    }

    pub fn encode_robot(&self, store: &ParamStore, state: &[f64]) -> Result<Vec<f64>> {
        if state.len() != self.config.robot_dim {
            return Err(Error::invalid(format!(
                "robot state has {} entries, encoder expects {}",
                state.len(),
                self.config.robot_dim
            )));
        }
        let mut g = Graph::new(store);
        let x = g.constant(Matrix::row_vector(state));
        let out = self.robot.forward(&mut g, x);
        Ok(g.value(out).row(0).to_vec())
    }

    /// One embedding row per part of an already fused partition.
    pub fn encode_parts(
        &self,
        store: &ParamStore,
        parts: &LocalFieldSet,
        pose: &RigidTransform,
    ) -> Result<PartEmbeddingSet> {
        let mut rows = Vec::new();
        let mut lens = Vec::new();
        for part in parts.parts() {
            if part.is_empty() {
                return Err(Error::invalid("cannot encode an empty part"));
            }
            let all: Vec<usize> = (0..part.len()).collect();
            let m = self.field_rows(part, &all)?;
            rows.extend(m.iter_rows().map(<[f64]>::to_vec));
            lens.push(part.len());
        }
        let mut g = Graph::new(store);
        let x = g.constant(Matrix::from_rows(&rows));
        let set = self.part_set.forward(&mut g, x, &lens);
        let pose = g.constant(Matrix::from_rows(&vec![pose.encoding(); lens.len()]));
        let joined = g.concat_cols(&[set, pose]);
        let out = self.part_proj.forward(&mut g, joined);
        Ok(PartEmbeddingSet {
            embeddings: g.value(out).clone(),
        })
    }

    pub fn refine_parts(&self, store: &ParamStore, parts: &PartEmbeddingSet) -> PartEmbeddingSet {
        let mut g = Graph::new(store);
        let x = g.constant(parts.embeddings.clone());
        let out = self.refine.forward(&mut g, x, &[parts.k()]);
        PartEmbeddingSet {
            embeddings: g.value(out).clone(),
        }
    }
}

/// `K × d_e` part embeddings; row order carries no meaning.
#[derive(Clone, Debug, PartialEq)]
pub struct PartEmbeddingSet {
    pub embeddings: Matrix,
}

impl PartEmbeddingSet {
    pub fn k(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            embeddings: self.embeddings.select_rows(order),
        }
    }

    pub fn aggregate(&self) -> Vec<f64> {
        aggregate_parts(&self.embeddings)
    }
}

/// Applies a cross-attention block to one activation block `z` (`H × C`).
pub fn cross_attend(
    block: &CrossAttention,
    store: &ParamStore,
    z: &Matrix,
    parts: &PartEmbeddingSet,
) -> Result<Matrix> {
    if z.cols() != block.attn.wq.input_dim {
        return Err(Error::invalid(format!(
            "activation width {} does not match attention input {}",
            z.cols(),
            block.attn.wq.input_dim
        )));
    }
    if parts.embeddings.cols() != block.attn.wk.input_dim {
        return Err(Error::invalid(format!(
            "part width {} does not match attention key input {}",
            parts.embeddings.cols(),
            block.attn.wk.input_dim
        )));
    }
    let mut g = Graph::new(store);
    let zv = g.constant(z.clone());
    let pv = g.constant(parts.embeddings.clone());
    let out = block.forward(&mut g, zv, pv, &[z.rows()], &[parts.k()]);
    Ok(g.value(out).clone())
}
