//! Business-conditioned semantic-ID codec.
//!
//! The encoder maps an item's concatenated token embeddings plus its business
//! embedding to a gated item representation; the decoder maps a
//! representation plus a business embedding back to one embedding per token
//! level. One decoder instance serves both reconstruction and prediction.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::Ffn;
use crate::tokenizer::SemanticId;

/// Shapes shared by the codec tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BidDims {
    pub k_sid: usize,
    pub vocab: usize,
    pub d_t: usize,
    pub d_e: usize,
    pub d_b: usize,
    pub hidden: usize,
    pub businesses: usize,
}

impl BidDims {
    pub fn token_width(&self) -> usize {
        self.k_sid * self.d_t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BidParams {
    pub dims: BidDims,
    /// One `[vocab, d_t]` table per level.
    pub tokens: Vec<ParamId>,
    /// `[businesses, d_b]`, the same storage the expert layer reads.
    pub business: ParamId,
    pub enc: Ffn,
    pub enc_gate: Ffn,
    pub dec: Ffn,
    pub dec_gate: Ffn,
}

/// Encoder output with its gate, both `[n, d_e]`.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub e: Var,
    pub gate: Var,
}

/// Decoder output with its gate, both `[n, k_sid * d_t]`.
#[derive(Debug, Clone, Copy)]
pub struct Decoded {
    pub tokens: Var,
    pub gate: Var,
}

/// Item representation of one (item, business) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemRep {
    pub e: Vec<f64>,
    pub business: u16,
}

/// Initial bias of the decoder gate's output layer. A positive start keeps
/// the ReLU gate open so early predictions are not all zero.
pub const DEC_GATE_BIAS: f64 = 1.0;

impl BidParams {
    /// Creates the four gated networks around existing token and business tables.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dims: BidDims,
        tokens: Vec<ParamId>,
        business: ParamId,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if tokens.len() != dims.k_sid {
            return Err(Error::DimensionMismatch {
                expected: dims.k_sid,
                got: tokens.len(),
            });
        }
        let tw = dims.token_width();
        let h = dims.hidden;
        let enc = Ffn::new(store, "bid.enc", tw + dims.d_b, h, dims.d_e, std, rng)?;
        let enc_gate = Ffn::new(store, "bid.enc_gate", dims.d_e + dims.d_b, h, dims.d_e, std, rng)?;
        let dec = Ffn::new(store, "bid.dec", dims.d_e + dims.d_b, h, tw, std, rng)?;
        let dec_gate = Ffn::new(store, "bid.dec_gate", tw + dims.d_b, h, tw, std, rng)?;
        store.get_mut(dec_gate.out.b).fill(DEC_GATE_BIAS);
        Ok(Self {
            dims,
            tokens,
            business,
            enc,
            enc_gate,
            dec,
            dec_gate,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.tokens.clone();
        ids.push(self.business);
        for f in [&self.enc, &self.enc_gate, &self.dec, &self.dec_gate] {
            ids.extend(f.param_ids());
        }
        ids
    }

    /// `[n, d_e]` gated item representations from `[n, k_sid*d_t]` token
    /// embeddings and `[n, d_b]` business embeddings.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, t: Var, b: Var) -> Result<Encoded> {
        let x = g.concat(&[t, b])?;
        let e_enc = self.enc.forward(g, store, x)?;
        let z = g.concat(&[e_enc, b])?;
        let pre = self.enc_gate.forward(g, store, z)?;
        let gate = g.sigmoid(pre)?;
        let e = g.mul(e_enc, gate)?;
        Ok(Encoded { e, gate })
    }

    /// `[n, k_sid*d_t]` reconstructed token embeddings (level blocks side by side).
    pub fn decode(&self, g: &mut Graph, store: &ParamStore, e: Var, b: Var) -> Result<Decoded> {
        let x = g.concat(&[e, b])?;
        let t_dec = self.dec.forward(g, store, x)?;
        let z = g.concat(&[t_dec, b])?;
        let pre = self.dec_gate.forward(g, store, z)?;
        let gate = g.relu(pre)?;
        let tokens = g.mul(t_dec, gate)?;
        Ok(Decoded { tokens, gate })
    }

    pub fn encode_item(&self, store: &ParamStore, sid: &SemanticId, business: u16) -> Result<ItemRep> {
        let mut g = Graph::new();
        let t = gather_tokens(&mut g, store, &self.tokens, &[sid])?;
        let b = gather_business(&mut g, store, self.business, &[business])?;
        let out = self.encode(&mut g, store, t, b)?;
        Ok(ItemRep {
            e: g.value(out.e).row(0).to_vec(),
            business,
        })
    }

    /// One `d_t` vector per level.
    pub fn decode_item(&self, store: &ParamStore, e: &[f64], business: u16) -> Result<Vec<Vec<f64>>> {
        if e.len() != self.dims.d_e {
            return Err(Error::DimensionMismatch {
                expected: self.dims.d_e,
                got: e.len(),
            });
        }
        let mut g = Graph::new();
        let ev = g.constant(Array2::from_shape_vec((1, e.len()), e.to_vec()).expect("sized"))?;
        let b = gather_business(&mut g, store, self.business, &[business])?;
        let out = self.decode(&mut g, store, ev, b)?;
        Ok(split_levels(g.value(out.tokens).row(0).as_slice().expect("row"), self.dims.d_t))
    }
}

/// Splits a concatenated `[k*d_t]` vector into its level blocks.
pub fn split_levels(flat: &[f64], d_t: usize) -> Vec<Vec<f64>> {
    flat.chunks(d_t).map(<[f64]>::to_vec).collect()
}

/// `[n, k_sid*d_t]` concatenation of each item's per-level token embeddings.
pub fn gather_tokens(
    g: &mut Graph,
    store: &ParamStore,
    tables: &[ParamId],
    sids: &[&SemanticId],
) -> Result<Var> {
    let mut parts = Vec::with_capacity(tables.len());
    for (level, &table) in tables.iter().enumerate() {
        let idx = sids
            .iter()
            .map(|s| {
                if s.levels() != tables.len() {
                    return Err(Error::DimensionMismatch {
                        expected: tables.len(),
                        got: s.levels(),
                    });
                }
                Ok(s.tokens()[level])
            })
            .collect::<Result<Vec<_>>>()?;
        let tv = g.param(store, table);
        parts.push(g.gather(tv, &idx)?);
    }
    g.concat(&parts)
}

/// `[n, d_b]` business embedding rows.
pub fn gather_business(g: &mut Graph, store: &ParamStore, table: ParamId, ids: &[u16]) -> Result<Var> {
    let rows = store.get(table).nrows();
    if let Some(&bad) = ids.iter().find(|&&b| b as usize >= rows) {
        return Err(Error::UnknownBusiness(bad));
    }
    let idx: Vec<usize> = ids.iter().map(|&b| b as usize).collect();
    let tv = g.param(store, table);
    g.gather(tv, &idx)
}

/// `(1/k_sid) Σ_k ‖t_k − t̂_k‖²`, averaged over rows.
pub fn reconstruction_loss(g: &mut Graph, original: Var, reconstructed: Var, k_sid: usize) -> Result<Var> {
    let rows = g.shape(original)[0];
    let se = g.sq_err(original, reconstructed)?;
    g.scale(se, 1.0 / (k_sid * rows.max(1)) as f64)
}
