//! Parameter handles for the dense layers shared by the model components.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, ParamId, ParamStore, Var};
use crate::error::Result;

/// `x · W + b` with `W: [in, out]`, `b: [1, out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Weights from N(0, std²), zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w: store.normal(format!("{name}.w"), input, output, std, rng)?,
            b: store.filled(format!("{name}.b"), 1, output, 0.0)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let h = g.matmul(x, w)?;
        g.add_row(h, b)
    }

    pub fn input_dim(&self, store: &ParamStore) -> usize {
        store.get(self.w).nrows()
    }

    pub fn output_dim(&self, store: &ParamStore) -> usize {
        store.get(self.w).ncols()
    }
}

/// Two-layer feed-forward block: linear → SiLU → linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ffn {
    pub hidden: Linear,
    pub out: Linear,
}

impl Ffn {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, &format!("{name}.0"), input, hidden, std, rng)?,
            out: Linear::new(store, &format!("{name}.1"), hidden, output, std, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, store, x)?;
        let h = g.silu(h)?;
        self.out.forward(g, store, h)
    }

    pub fn input_dim(&self, store: &ParamStore) -> usize {
        self.hidden.input_dim(store)
    }

    pub fn output_dim(&self, store: &ParamStore) -> usize {
        self.out.output_dim(store)
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.hidden.w, self.hidden.b, self.out.w, self.out.b]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.filled(format!("{name}.gamma"), 1, dim, 1.0)?,
            beta: store.filled(format!("{name}.beta"), 1, dim, 0.0)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, Self::EPS)
    }
}
