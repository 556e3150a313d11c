//! Shared mixture-of-experts layer that turns the general sequence
//! representation into a business-specific one.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bid::{gather_business, split_levels, BidParams};
use crate::diffcore::{Graph, ParamId, ParamStore, Var};
use crate::error::{invalid, Error, Result};
use crate::nn::Ffn;

/// Nonlinearity applied to the gate network output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateActivation {
    /// Unnormalised SiLU gates; weights may be negative and need not sum to one.
    #[default]
    Silu,
    /// Softmax over experts.
    Softmax,
    Sigmoid,
}

/// All experts stored side by side: expert `k` owns hidden columns
/// `k*hidden..(k+1)*hidden` of `w1`/`b1`, the matching rows of `w2`, and row
/// `k` of `b2`. Each expert is linear → SiLU → linear on `[e, b]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Experts {
    pub count: usize,
    pub hidden: usize,
    /// `[d_e + d_b, count*hidden]`
    pub w1: ParamId,
    /// `[1, count*hidden]`
    pub b1: ParamId,
    /// `[count*hidden, d_e]`
    pub w2: ParamId,
    /// `[count, d_e]`
    pub b2: ParamId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MbpParams {
    pub gate: Ffn,
    pub experts: Experts,
    /// Same storage as [`BidParams::business`].
    pub business: ParamId,
    pub activation: GateActivation,
}

#[derive(Debug, Clone, Copy)]
pub struct Adapted {
    /// `[n, d_e]`
    pub e: Var,
    /// `[n, k_exp]` gate values after the activation.
    pub gate: Var,
}

impl MbpParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        business: ParamId,
        d_e: usize,
        hidden: usize,
        k_exp: usize,
        activation: GateActivation,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if k_exp == 0 {
            return Err(Error::InvalidConfig("need at least one expert".into()));
        }
        let d_b = store.get(business).ncols();
        let gate = Ffn::new(store, "mbp.gate", d_e + d_b, hidden, k_exp, std, rng)?;
        let width = k_exp * hidden;
        let experts = Experts {
            count: k_exp,
            hidden,
            w1: store.normal("mbp.experts.w1", d_e + d_b, width, std, rng)?,
            b1: store.filled("mbp.experts.b1", 1, width, 0.0)?,
            w2: store.normal("mbp.experts.w2", width, d_e, std, rng)?,
            b2: store.filled("mbp.experts.b2", k_exp, d_e, 0.0)?,
        };
        Ok(Self {
            gate,
            experts,
            business,
            activation,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.business];
        ids.extend(self.gate.param_ids());
        let x = &self.experts;
        ids.extend([x.w1, x.b1, x.w2, x.b2]);
        ids
    }

    /// `e^b = Σ_k g_k · expert_k([e, b])` with `g = act(gate([e, b]))`.
    pub fn adapt(&self, g: &mut Graph, store: &ParamStore, e: Var, b: Var) -> Result<Adapted> {
        let z = g.concat(&[e, b])?;
        let pre = self.gate.forward(g, store, z)?;
        let gate = match self.activation {
            GateActivation::Silu => g.silu(pre)?,
            GateActivation::Softmax => g.softmax(pre)?,
            GateActivation::Sigmoid => g.sigmoid(pre)?,
        };
        // Σ_k g_k (W2_k h_k + b2_k) = [g_1 h_1, …, g_K h_K] · W2 + g · B2
        let x = &self.experts;
        let w1 = g.param(store, x.w1);
        let b1 = g.param(store, x.b1);
        let w2 = g.param(store, x.w2);
        let b2 = g.param(store, x.b2);
        let h = g.matmul(z, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.silu(h)?;
        let expand = g.constant(Array2::from_shape_fn((x.count, x.count * x.hidden), |(k, j)| {
            if j / x.hidden == k {
                1.0
            } else {
                0.0
            }
        }))?;
        let spread = g.matmul(gate, expand)?;
        let hg = g.mul(h, spread)?;
        let out = g.matmul(hg, w2)?;
        let bias = g.matmul(gate, b2)?;
        let e = g.add(out, bias)?;
        Ok(Adapted { e, gate })
    }

    /// Output of expert `k` alone on `[e, b]` rows, `[n, d_e]`.
    pub fn expert_output(&self, g: &mut Graph, store: &ParamStore, k: usize, z: Var) -> Result<Var> {
        let x = &self.experts;
        if k >= x.count {
            return Err(Error::IndexOutOfRange {
                what: "expert",
                index: k,
                size: x.count,
            });
        }
        let (lo, hi) = (k * x.hidden, (k + 1) * x.hidden);
        let w1 = g.param(store, x.w1);
        let b1 = g.param(store, x.b1);
        let w1 = g.slice_cols(w1, lo, hi)?;
        let b1 = g.slice_cols(b1, lo, hi)?;
        let w2 = g.constant(store.get(x.w2).slice(ndarray::s![lo..hi, ..]).to_owned())?;
        let b2 = g.constant(store.get(x.b2).slice(ndarray::s![k..k + 1, ..]).to_owned())?;
        let h = g.matmul(z, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.silu(h)?;
        let o = g.matmul(h, w2)?;
        g.add_row(o, b2)
    }

    /// Decoded token embeddings `[n, k_sid*d_t]` for each row's business.
    pub fn predict_tokens(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        bid: &BidParams,
        e: Var,
        businesses: &[u16],
    ) -> Result<Var> {
        if bid.business != self.business {
            return Err(invalid("expert layer and codec must share one business table"));
        }
        let b = gather_business(g, store, self.business, businesses)?;
        let adapted = self.adapt(g, store, e, b)?;
        Ok(bid.decode(g, store, adapted.e, b)?.tokens)
    }

    /// Single-vector form of [`MbpParams::adapt`].
    pub fn adapt_one(&self, store: &ParamStore, e: &[f64], business: u16) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let ev = g.constant(row(e))?;
        let b = gather_business(&mut g, store, self.business, &[business])?;
        let out = self.adapt(&mut g, store, ev, b)?;
        Ok(g.value(out.e).row(0).to_vec())
    }

    /// Single-vector form of [`MbpParams::predict_tokens`], split by level.
    pub fn predict_one(&self, store: &ParamStore, bid: &BidParams, e: &[f64], business: u16) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let ev = g.constant(row(e))?;
        let out = self.predict_tokens(&mut g, store, bid, ev, &[business])?;
        Ok(split_levels(g.value(out).row(0).as_slice().expect("row"), bid.dims.d_t))
    }
}

fn row(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("sized")
}
