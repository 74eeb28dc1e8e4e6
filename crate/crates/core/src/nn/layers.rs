use rand::Rng;

use crate::nn::graph::{Graph, Var};
use crate::nn::params::{Init, ParamId, ParamStore};

/// Activation applied between MLP layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Silu,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Silu => g.silu(x),
        }
    }
}

/// `y = x·W + b` with `W` stored `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        output_dim: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), init.build(input_dim, output_dim, input_dim, rng));
        let b = Some(store.add(format!("{name}.b"), init.build(1, output_dim, input_dim, rng)));
        Self {
            w,
            b,
            input_dim,
            output_dim,
        }
    }

    /// A layer without bias.
    pub fn without_bias(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        output_dim: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), init.build(input_dim, output_dim, input_dim, rng));
        Self {
            w,
            b: None,
            input_dim,
            output_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        assert_eq!(g.shape(x).1, self.input_dim, "linear input width mismatch");
        let w = g.param(self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Stack of [`Linear`] layers with an activation between (not after) them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `dims = [in, hidden…, out]`; `last_init` initializes the final layer.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        activation: Activation,
        last_init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let init = if i + 1 == n { last_init } else { Init::FanIn };
                Linear::new(store, &format!("{name}.{i}"), dims[i], dims[i + 1], init, rng)
            })
            .collect();
        Self { layers, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output_dim)
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Var {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x);
            if i + 1 < self.layers.len() {
                x = self.activation.apply(g, x);
            }
        }
        x
    }
}
