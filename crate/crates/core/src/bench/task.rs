//! Planar pose-aware toy task: objects, environment, success predicate and
//! the scripted expert.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point3, RigidTransform};
use crate::linalg::Matrix;

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_HEAD: u8 = 1;
pub const LABEL_BODY: u8 = 2;
pub const LABEL_TAIL: u8 = 3;
/// Label values including background.
pub const NUM_LABELS: usize = 4;

/// Per-step action layout: `[dx, dy, dyaw, grip]`.
pub const ACTION_DIM: usize = 4;
/// Robot state layout: `[ee_x, ee_y, grip]`.
pub const ROBOT_DIM: usize = 3;

/// Wraps an angle to `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut x = a.rem_euclid(2.0 * PI);
    if x > PI {
        x -= 2.0 * PI;
    }
    x
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanarPose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl PlanarPose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self { x, y, yaw }
    }

    pub fn transform(&self) -> RigidTransform {
        RigidTransform::planar(self.x, self.y, self.yaw)
    }
}

/// Extruded planar polygon whose surface points carry head/body/tail labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyObject {
    pub id: String,
    /// Polygon vertices in the object frame (meters), counter-clockwise.
    pub vertices: Vec<[f64; 2]>,
    /// Object-frame `x ≥ head_x` is head.
    pub head_x: f64,
    /// Object-frame `x ≤ tail_x` is tail; between the two is body.
    pub tail_x: f64,
    /// Extrusion height (meters).
    pub height: f64,
    /// Grid spacing of sampled surface points (meters).
    pub point_spacing: f64,
}

impl ToyObject {
    /// A shoe-like outline: rounded wide heel (tail) and a narrower toe (head).
    pub fn shoe() -> Self {
        let half = [
            [-0.065, 0.018],
            [-0.058, 0.030],
            [-0.040, 0.036],
            [-0.010, 0.034],
            [0.025, 0.030],
            [0.050, 0.024],
            [0.064, 0.010],
        ];
        let mut vertices: Vec<[f64; 2]> = half.iter().rev().map(|&[x, y]| [x, -y]).collect();
        vertices.extend(half);
        Self {
            id: "shoe".into(),
            vertices,
            head_x: 0.035,
            tail_x: -0.040,
            height: 0.02,
            point_spacing: 0.006,
        }
    }

    /// The same outline split into only head and tail at the median `x` of
    /// its surface samples, so both labels cover equally many points.
    pub fn two_part_shoe() -> Self {
        let base = Self::shoe();
        let mut xs: Vec<f64> = base.surface_points().iter().map(|(p, _)| p.x).collect();
        xs.sort_by(f64::total_cmp);
        let mid = xs[xs.len() / 2];
        Self {
            id: "shoe2".into(),
            head_x: mid,
            tail_x: mid,
            ..base
        }
    }

    fn signed_area(&self) -> f64 {
        let n = self.vertices.len();
        (0..n)
            .map(|i| {
                let [x0, y0] = self.vertices[i];
                let [x1, y1] = self.vertices[(i + 1) % n];
                x0 * y1 - x1 * y0
            })
            .sum::<f64>()
            / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.vertices.len() < 3 {
            return Err(Error::Config(format!("object `{}` needs at least 3 vertices", self.id)));
        }
        if self.signed_area().abs() < 1e-8 {
            return Err(Error::Config(format!("object `{}` is degenerate", self.id)));
        }
        if self.tail_x > self.head_x {
            return Err(Error::Config(format!("object `{}` has tail_x > head_x", self.id)));
        }
        let xs = self.vertices.iter().map(|v| v[0]);
        let (lo, hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| (l.min(x), h.max(x)));
        if !(hi > self.head_x && lo < self.tail_x) {
            return Err(Error::Config(format!(
                "object `{}` must have both head and tail regions",
                self.id
            )));
        }
        if !(self.height > 0.0 && self.point_spacing > 0.0) {
            return Err(Error::Config(format!("object `{}` needs positive height and spacing", self.id)));
        }
        Ok(())
    }

    /// Even-odd point-in-polygon test in the object frame.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let n = self.vertices.len();
        let mut inside = false;
        let mut j = n - 1;
        for i in 0..n {
            let [xi, yi] = self.vertices[i];
            let [xj, yj] = self.vertices[j];
            if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                inside = !inside;
            }
            j = i;
        }
        inside
    }

    pub fn label_of(&self, x: f64) -> u8 {
        if x >= self.head_x {
            LABEL_HEAD
        } else if x <= self.tail_x {
            LABEL_TAIL
        } else {
            LABEL_BODY
        }
    }

    /// Label at an object-frame location, `None` outside the outline.
    pub fn label_at(&self, x: f64, y: f64) -> Option<u8> {
        self.contains(x, y).then(|| self.label_of(x))
    }

    /// Grid samples of the interior on the bottom and top faces, in the
    /// object frame, with labels. Deterministic.
    pub fn surface_points(&self) -> Vec<(Point3, u8)> {
        let s = self.point_spacing;
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &[x, y] in &self.vertices {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        let nx = ((x1 - x0) / s).floor() as i64;
        let ny = ((y1 - y0) / s).floor() as i64;
        let mut out = Vec::new();
        for z in [0.0, self.height] {
            for i in 0..=nx {
                for j in 0..=ny {
                    let x = x0 + (i as f64 + 0.5) * s;
                    let y = y0 + (j as f64 + 0.5) * s;
                    if let Some(l) = self.label_at(x, y) {
                        out.push((Point3::new(x, y, z), l));
                    }
                }
            }
        }
        out
    }
}

/// Uniform ranges of the initial pose; `lo == hi` pins a coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRanges {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub yaw: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSpec {
    pub name: String,
    pub objects: Vec<ToyObject>,
    /// Position tolerance of the success predicate (meters).
    pub delta_pos: f64,
    /// Heading tolerance of the success predicate (radians).
    pub delta_ang: f64,
    pub init_ranges: PoseRanges,
    pub target: PlanarPose,
    /// Half-extents of the reachable workspace around the origin (meters).
    pub workspace: [f64; 2],
    pub episode_steps: usize,
    /// Fraction of the remaining error the expert removes per step.
    pub expert_gain: f64,
    /// Per-step magnitude limits on `[dx, dy, dyaw]`.
    pub max_step: [f64; 3],
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            name: "align_shoe".into(),
            objects: vec![ToyObject::shoe()],
            delta_pos: 0.02,
            delta_ang: 15f64.to_radians(),
            init_ranges: PoseRanges {
                x: [-0.12, 0.12],
                y: [-0.08, 0.08],
                yaw: [-PI, PI],
            },
            target: PlanarPose::new(0.0, 0.0, PI),
            workspace: [0.2, 0.15],
            episode_steps: 16,
            expert_gain: 0.25,
            max_step: [0.08, 0.08, 1.0],
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.objects.len() != 1 {
            return Err(Error::Config("tasks must contain exactly one object".into()));
        }
        for o in &self.objects {
            o.validate()?;
        }
        if !(self.delta_pos > 0.0 && self.delta_ang > 0.0) {
            return Err(Error::Config("success tolerances must be positive".into()));
        }
        for (name, r) in [("x", self.init_ranges.x), ("y", self.init_ranges.y), ("yaw", self.init_ranges.yaw)] {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
                return Err(Error::Config(format!("invalid {name} range {r:?}")));
            }
        }
        if self.episode_steps == 0 {
            return Err(Error::Config("episode_steps must be positive".into()));
        }
        if !(self.expert_gain > 0.0 && self.expert_gain <= 1.0) {
            return Err(Error::Config("expert_gain must lie in (0, 1]".into()));
        }
        if self.max_step.iter().any(|m| !(*m > 0.0)) || self.workspace.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::Config("max_step and workspace must be positive".into()));
        }
        Ok(())
    }

    pub fn object(&self) -> &ToyObject {
        &self.objects[0]
    }

    pub fn in_workspace(&self, p: &PlanarPose) -> bool {
        p.x.abs() <= self.workspace[0] && p.y.abs() <= self.workspace[1]
    }
}

/// Success iff position is within `delta_pos` and heading within `delta_ang`.
pub fn success_predicate(pose: &PlanarPose, target: &PlanarPose, delta_pos: f64, delta_ang: f64) -> bool {
    let d = ((pose.x - target.x).powi(2) + (pose.y - target.y).powi(2)).sqrt();
    d <= delta_pos && wrap_angle(pose.yaw - target.yaw).abs() <= delta_ang
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub pose: PlanarPose,
    pub grip: f64,
    pub step: usize,
}

impl EnvState {
    pub fn robot_state(&self) -> [f64; ROBOT_DIM] {
        [self.pose.x, self.pose.y, self.grip]
    }
}

/// Deterministic toy environment; the gripper holds the object while the
/// grip command exceeds one half.
#[derive(Clone, Debug)]
pub struct Env {
    spec: TaskSpec,
    rng: ChaCha8Rng,
    state: EnvState,
}

pub fn make_env(spec: &TaskSpec, seed: u64) -> Result<Env> {
    spec.validate()?;
    Ok(Env {
        spec: spec.clone(),
        rng: ChaCha8Rng::seed_from_u64(seed),
        state: EnvState {
            pose: spec.target,
            grip: 0.0,
            step: 0,
        },
    })
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

impl Env {
    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    /// Draws a new initial pose from the task ranges.
    pub fn reset(&mut self) -> EnvState {
        let r = self.spec.init_ranges;
        let x = uniform(&mut self.rng, r.x);
        let y = uniform(&mut self.rng, r.y);
        let yaw = uniform(&mut self.rng, r.yaw);
        self.state = EnvState {
            pose: PlanarPose::new(x, y, wrap_angle(yaw)),
            grip: 0.0,
            step: 0,
        };
        self.state
    }

    pub fn set_state(&mut self, state: EnvState) {
        self.state = state;
    }

    pub fn step(&mut self, action: &[f64]) -> Result<EnvState> {
        self.state = apply_action(&self.spec, &self.state, action)?;
        Ok(self.state)
    }

    pub fn success(&self) -> bool {
        let s = &self.spec;
        success_predicate(&self.state.pose, &s.target, s.delta_pos, s.delta_ang)
    }
}

/// Transition function shared by the environment and the expert's rollout.
pub fn apply_action(spec: &TaskSpec, state: &EnvState, action: &[f64]) -> Result<EnvState> {
    if action.len() != ACTION_DIM || action.iter().any(|a| !a.is_finite()) {
        return Err(Error::invalid(format!("actions need {ACTION_DIM} finite entries")));
    }
    let grip = if action[3] > 0.5 { 1.0 } else { 0.0 };
    let mut pose = state.pose;
    if grip > 0.5 {
        let m = spec.max_step;
        pose.x += action[0].clamp(-m[0], m[0]);
        pose.y += action[1].clamp(-m[1], m[1]);
        pose.yaw = wrap_angle(pose.yaw + action[2].clamp(-m[2], m[2]));
    }
    Ok(EnvState {
        pose,
        grip,
        step: state.step + 1,
    })
}

/// Below this remaining error the expert releases and stops.
const EXPERT_DONE: f64 = 1e-6;

/// Proportional controller toward the target, rolled out `horizon` steps
/// from `state`.
pub fn scripted_expert(spec: &TaskSpec, state: &EnvState, horizon: usize) -> Result<Matrix> {
    if !spec.in_workspace(&state.pose) || !spec.in_workspace(&spec.target) {
        return Err(Error::ExpertFailure(format!(
            "pose ({:.3}, {:.3}) or target lies outside the workspace",
            state.pose.x, state.pose.y
        )));
    }
    let k = spec.expert_gain;
    let mut s = *state;
    let mut rows = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let ex = spec.target.x - s.pose.x;
        let ey = spec.target.y - s.pose.y;
        let eyaw = wrap_angle(spec.target.yaw - s.pose.yaw);
        let row = if ex.abs().max(ey.abs()).max(eyaw.abs()) < EXPERT_DONE {
            [0.0, 0.0, 0.0, 0.0]
        } else {
            [k * ex, k * ey, k * eyaw, 1.0]
        };
        s = apply_action(spec, &s, &row)?;
        rows.push(row);
    }
    Ok(Matrix::from_rows(&rows))
}
