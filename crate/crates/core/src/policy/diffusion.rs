//! Forward noising, reverse steps, the sampling chain, and the denoising loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::condition::PartEmbeddingSet;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::policy::schedule::NoiseSchedule;

/// A horizon × action-dim array.
pub type ActionTrajectory = Matrix;

/// Conditioning consumed by a noise predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBundle {
    pub global: Vec<f64>,
    /// Refined part set; `None` when the part pathway is disabled.
    pub parts: Option<PartEmbeddingSet>,
}

impl ConditionBundle {
    pub fn global_only(global: Vec<f64>) -> Self {
        Self {
            global,
            parts: None,
        }
    }
}

/// Anything that predicts the noise in `a_t`.
pub trait NoisePredictor {
    fn predict_noise(&self, a_t: &Matrix, t: usize, c: &ConditionBundle) -> Matrix;
}

/// Predicts zero noise everywhere.
pub struct ZeroPredictor;

impl NoisePredictor for ZeroPredictor {
    fn predict_noise(&self, a_t: &Matrix, _t: usize, _c: &ConditionBundle) -> Matrix {
        Matrix::zeros(a_t.rows(), a_t.cols())
    }
}

/// Knows the clean trajectory and returns the noise consistent with it.
pub struct PlantedNoiseOracle<'a> {
    pub a0: &'a Matrix,
    pub schedule: &'a NoiseSchedule,
}

impl NoisePredictor for PlantedNoiseOracle<'_> {
    fn predict_noise(&self, a_t: &Matrix, t: usize, _c: &ConditionBundle) -> Matrix {
        let ab = self.schedule.alpha_bar(t);
        let (s0, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
        a_t.zip_map(self.a0, |x, a| (x - s0 * a) / s1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SamplerOptions {
    /// Skip the stochastic term of every reverse step.
    pub deterministic: bool,
    /// Clamp the implied clean trajectory to `[-1, 1]` inside each step.
    pub clip_x0: bool,
    /// Clamp the final output to `[-bound, bound]`.
    pub output_bound: Option<f64>,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self {
            deterministic: false,
            clip_x0: true,
            output_bound: Some(1.0),
        }
    }
}

/// `√ᾱ_t·a0 + √(1−ᾱ_t)·ε`.
pub fn add_noise(a0: &Matrix, t: usize, eps: &Matrix, sched: &NoiseSchedule) -> Result<Matrix> {
    sched.check_step(t)?;
    if a0.shape() != eps.shape() {
        return Err(Error::invalid("noise shape differs from action shape"));
    }
    let ab = sched.alpha_bar(t);
    let (s0, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(a0.zip_map(eps, |a, e| s0 * a + s1 * e))
}

/// Posterior mean of `a_{t−1}` given `a_t` and the predicted noise, plus
/// `σ_t·z` when `z` is given and `t > 1`.
pub fn reverse_step(
    a_t: &Matrix,
    eps_hat: &Matrix,
    t: usize,
    sched: &NoiseSchedule,
    z: Option<&Matrix>,
    clip_x0: bool,
) -> Matrix {
    let (beta, alpha, ab) = (sched.beta(t), sched.alpha(t), sched.alpha_bar(t));
    let mut mean = if clip_x0 {
        let ab_prev = sched.alpha_bar(t - 1);
        let x0 = a_t.zip_map(eps_hat, |x, e| {
            ((x - (1.0 - ab).sqrt() * e) / ab.sqrt()).clamp(-1.0, 1.0)
        });
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        x0.zip_map(a_t, |x0, x| c0 * x0 + ct * x)
    } else {
        let coef = beta / (1.0 - ab).sqrt();
        let inv = 1.0 / alpha.sqrt();
        a_t.zip_map(eps_hat, |x, e| inv * (x - coef * e))
    };
    if let (Some(z), true) = (z, t > 1) {
        let sigma = sched.posterior_variance(t).sqrt();
        mean = mean.zip_map(z, |m, n| m + sigma * n);
    }
    mean
}

/// One reverse step driven by `pred`; `z` is the sampling noise (ignored at `t = 1`).
pub fn denoise_step(
    pred: &dyn NoisePredictor,
    a_t: &Matrix,
    t: usize,
    c: &ConditionBundle,
    sched: &NoiseSchedule,
    z: Option<&Matrix>,
    clip_x0: bool,
) -> Result<Matrix> {
    sched.check_step(t)?;
    let eps_hat = pred.predict_noise(a_t, t, c);
    if eps_hat.shape() != a_t.shape() {
        return Err(Error::invalid("predicted noise has the wrong shape"));
    }
    Ok(reverse_step(a_t, &eps_hat, t, sched, z, clip_x0))
}

fn normals(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Runs the reverse chain from `a_T ~ N(0, I)`. The draws are `a_T` first,
/// then one noise array per step for `t = T..2`, all from `ChaCha8Rng(seed)`.
pub fn sample(
    pred: &dyn NoisePredictor,
    c: &ConditionBundle,
    sched: &NoiseSchedule,
    shape: (usize, usize),
    seed: u64,
    opts: SamplerOptions,
) -> Result<Matrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = normals(shape.0, shape.1, &mut rng);
    for t in (1..=sched.num_steps()).rev() {
        let z = (t > 1 && !opts.deterministic).then(|| normals(shape.0, shape.1, &mut rng));
        a = denoise_step(pred, &a, t, c, sched, z.as_ref(), opts.clip_x0)?;
    }
    if let Some(b) = opts.output_bound {
        a = a.map(|x| x.clamp(-b, b));
    }
    Ok(a)
}

/// A noising draw for one training example.
#[derive(Clone, Debug)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps: Matrix,
}

/// Draws a uniform step in `1..=T` and standard normal noise.
pub fn draw_noise(
    shape: (usize, usize),
    sched: &NoiseSchedule,
    rng: &mut impl rand::Rng,
) -> NoiseDraw {
    let t = Uniform::new_inclusive(1, sched.num_steps())
        .expect("schedule has at least one step")
        .sample(rng);
    let eps = Matrix::from_fn(shape.0, shape.1, |_, _| StandardNormal.sample(rng));
    NoiseDraw { t, eps }
}

/// Batch mean of `‖ε − ε̂(a_t, t, c)‖²` over random steps and noise.
pub fn training_loss(
    pred: &dyn NoisePredictor,
    batch: &[(Matrix, ConditionBundle)],
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for (a0, c) in batch {
        let d = draw_noise(a0.shape(), sched, &mut rng);
        let a_t = add_noise(a0, d.t, &d.eps, sched)?;
        let eps_hat = pred.predict_noise(&a_t, d.t, c);
        total += d.eps.sub(&eps_hat).sum_sq();
    }
    Ok(total / batch.len() as f64)
}
