//! Temporal convolutional encoder-decoder that predicts diffusion noise.
//!
//! Three stages (full, half, full resolution with a skip connection); each
//! residual block is FiLM-modulated by the step embedding and global
//! condition, and is followed by cross-attention into the part set when the
//! part pathway is active.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::condition::{ConditionConfig, CrossAttention};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{Activation, Graph, Init, Linear, Mlp, ParamStore, Var};
use crate::policy::diffusion::{ConditionBundle, NoisePredictor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    /// Action horizon; must be even.
    pub horizon: usize,
    pub action_dim: usize,
    pub channels: usize,
    pub step_embed_dim: usize,
    pub zero_init_output: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            horizon: 8,
            action_dim: 4,
            channels: 64,
            step_embed_dim: 32,
            zero_init_output: false,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 2 || self.horizon % 2 != 0 {
            return Err(Error::invalid("horizon must be even and at least 2"));
        }
        if self.action_dim == 0 || self.channels == 0 || self.step_embed_dim == 0 {
            return Err(Error::invalid("denoiser widths must be positive"));
        }
        if self.step_embed_dim % 2 != 0 {
            return Err(Error::invalid("step_embed_dim must be even"));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of a diffusion step.
pub fn step_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        let x = t as f64 * freq;
        out[2 * i] = x.sin();
        out[2 * i + 1] = x.cos();
    }
    out
}

/// Constant matrices for one temporal resolution of a batch.
struct Level {
    len: usize,
    prev: Matrix,
    next: Matrix,
    expand: Matrix,
}

impl Level {
    fn new(batch: usize, len: usize) -> Self {
        let n = batch * len;
        let mut prev = Matrix::zeros(n, n);
        let mut next = Matrix::zeros(n, n);
        let mut expand = Matrix::zeros(n, batch);
        for b in 0..batch {
            for i in 0..len {
                let r = b * len + i;
                if i > 0 {
                    prev[(r, r - 1)] = 1.0;
                }
                if i + 1 < len {
                    next[(r, r + 1)] = 1.0;
                }
                expand[(r, b)] = 1.0;
            }
        }
        Self {
            len,
            prev,
            next,
            expand,
        }
    }
}

/// Kernel-3 temporal convolution with zero padding at sequence ends.
#[derive(Clone, Debug)]
struct TemporalConv {
    lin: Linear,
}

impl TemporalConv {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            lin: Linear::new(store, name, 3 * c_in, c_out, Init::FanIn, rng),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, level: &Level) -> Var {
        let p = g.constant(level.prev.clone());
        let n = g.constant(level.next.clone());
        let xp = g.matmul(p, x);
        let xn = g.matmul(n, x);
        let cat = g.concat_cols(&[xp, x, xn]);
        self.lin.forward(g, cat)
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: TemporalConv,
    film: Linear,
    conv2: TemporalConv,
    channels: usize,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, channels: usize, cond_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv1: TemporalConv::new(store, &format!("{name}.conv1"), channels, channels, rng),
            film: Linear::new(store, &format!("{name}.film"), cond_dim, 2 * channels, Init::FanIn, rng),
            conv2: TemporalConv::new(store, &format!("{name}.conv2"), channels, channels, rng),
            channels,
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, cond: Var, level: &Level) -> Var {
        let c = self.channels;
        let h = self.conv1.forward(g, x, level);
        let fs = self.film.forward(g, cond);
        let e = g.constant(level.expand.clone());
        let fs = g.matmul(e, fs);
        let scale = g.slice_cols(fs, 0, c);
        let shift = g.slice_cols(fs, c, c);
        let hs = g.mul(h, scale);
        let h = g.add(h, hs);
        let h = g.add(h, shift);
        let h = g.silu(h);
        let h = self.conv2.forward(g, h, level);
        g.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    global_dim: usize,
    part_dim: usize,
    step_mlp: Mlp,
    input: Linear,
    blocks: Vec<ResBlock>,
    merge: Linear,
    cross: Vec<CrossAttention>,
    output: Linear,
}

impl Denoiser {
    pub fn new(
        store: &mut ParamStore,
        config: DenoiserConfig,
        cond: &ConditionConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let dt = config.step_embed_dim;
        let global_dim = cond.global_dim();
        let cond_dim = dt + global_dim;
        let step_mlp = Mlp::new(store, "denoiser.step", &[dt, 2 * dt, dt], Activation::Silu, Init::FanIn, rng);
        let input = Linear::new(store, "denoiser.input", config.action_dim, c, Init::FanIn, rng);
        let blocks = (0..3)
            .map(|i| ResBlock::new(store, &format!("denoiser.block{i}"), c, cond_dim, rng))
            .collect();
        let merge = Linear::new(store, "denoiser.merge", 2 * c, c, Init::FanIn, rng);
        let cross = (0..3)
            .map(|i| CrossAttention::new(store, &format!("denoiser.cross{i}"), c, cond.part_dim, cond, rng))
            .collect();
        let out_init = if config.zero_init_output {
            Init::Zeros
        } else {
            Init::FanIn
        };
        let output = Linear::new(store, "denoiser.output", c, config.action_dim, out_init, rng);
        Ok(Self {
            config,
            global_dim,
            part_dim: cond.part_dim,
            step_mlp,
            input,
            blocks,
            merge,
            cross,
            output,
        })
    }

    pub fn global_dim(&self) -> usize {
        self.global_dim
    }

    /// Predicted noise for a batch: `a_t` stacks `B` trajectories of
    /// `horizon` rows; `global` is `B × global_dim`; `parts` holds the refined
    /// part rows and per-sample counts.
    pub fn forward(
        &self,
        g: &mut Graph,
        a_t: Var,
        steps: &[usize],
        global: Var,
        parts: Option<(Var, &[usize])>,
    ) -> Var {
        let h = self.config.horizon;
        let b = steps.len();
        assert_eq!(g.shape(a_t), (b * h, self.config.action_dim), "action batch shape");
        assert_eq!(g.shape(global), (b, self.global_dim), "global condition shape");
        let full = Level::new(b, h);
        let half = Level::new(b, h / 2);

        let emb: Vec<Vec<f64>> = steps
            .iter()
            .map(|&t| step_embedding(t, self.config.step_embed_dim))
            .collect();
        let emb = g.constant(Matrix::from_rows(&emb));
        let emb = self.step_mlp.forward(g, emb);
        let cond = g.concat_cols(&[emb, global]);
        let cond = g.silu(cond);

        let cross = |g: &mut Graph, i: usize, z: Var, level: &Level| match parts {
            Some((p, counts)) => {
                let lens = vec![level.len; b];
                self.cross[i].forward(g, z, p, &lens, counts)
            }
            None => z,
        };

        let x0 = self.input.forward(g, a_t);
        let x1 = self.blocks[0].forward(g, x0, cond, &full);
        let x1 = cross(g, 0, x1, &full);

        let mut pool = Matrix::zeros(b * h / 2, b * h);
        let mut up = Matrix::zeros(b * h, b * h / 2);
        for r in 0..b * h {
            pool[(r / 2, r)] = 0.5;
            up[(r, r / 2)] = 1.0;
        }
        let pool = g.constant(pool);
        let up = g.constant(up);

        let d = g.matmul(pool, x1);
        let x2 = self.blocks[1].forward(g, d, cond, &half);
        let x2 = cross(g, 1, x2, &half);

        let u = g.matmul(up, x2);
        let m = g.concat_cols(&[u, x1]);
        let m = self.merge.forward(g, m);
        let x3 = self.blocks[2].forward(g, m, cond, &full);
        let x3 = cross(g, 2, x3, &full);
        self.output.forward(g, x3)
    }

    /// Single-sample prediction from plain values.
    pub fn denoiser_forward(
        &self,
        store: &ParamStore,
        a_t: &Matrix,
        t: usize,
        c: &ConditionBundle,
    ) -> Result<Matrix> {
        if a_t.shape() != (self.config.horizon, self.config.action_dim) {
            return Err(Error::invalid(format!(
                "actions have shape {:?}, denoiser expects {:?}",
                a_t.shape(),
                (self.config.horizon, self.config.action_dim)
            )));
        }
        if c.global.len() != self.global_dim {
            return Err(Error::invalid(format!(
                "global condition has {} entries, denoiser expects {}",
                c.global.len(),
                self.global_dim
            )));
        }
        if let Some(p) = &c.parts {
            if p.embeddings.cols() != self.part_dim || p.k() == 0 {
                return Err(Error::invalid("part set does not match the denoiser"));
            }
        }
        let mut g = Graph::new(store);
        let a = g.constant(a_t.clone());
        let gl = g.constant(Matrix::row_vector(&c.global));
        let counts = c.parts.as_ref().map(|p| vec![p.k()]);
        let parts = c
            .parts
            .as_ref()
            .map(|p| g.constant(p.embeddings.clone()))
            .zip(counts.as_deref());
        let out = self.forward(&mut g, a, &[t], gl, parts);
        Ok(g.value(out).clone())
    }

    pub fn bind<'a>(&'a self, store: &'a ParamStore) -> BoundDenoiser<'a> {
        BoundDenoiser {
            denoiser: self,
            store,
        }
    }
}

/// A denoiser paired with its parameter values.
pub struct BoundDenoiser<'a> {
    pub denoiser: &'a Denoiser,
    pub store: &'a ParamStore,
}

impl NoisePredictor for BoundDenoiser<'_> {
    fn predict_noise(&self, a_t: &Matrix, t: usize, c: &ConditionBundle) -> Matrix {
        self.denoiser
            .denoiser_forward(self.store, a_t, t, c)
            .expect("condition bundle built for this denoiser")
    }
}
