//! Minimal differentiable building blocks used by the conditioning module and
//! the diffusion policy.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;

pub use gradcheck::{check_gradients, GradCheck};
pub use graph::{Backward, Graph, Var};
pub use layers::{Activation, Linear, Mlp};
pub use optim::{cosine_lr, AdamW, AdamWConfig};
pub use params::{Gradients, Init, ParamId, ParamStore};
