//! Pre-norm causal transformer over packed user sequences.
//!
//! Sequences are packed row-wise without padding rows; each sequence is an
//! attention [`Segment`]. Position indices follow left-padding to `max_len`,
//! so the most recent event of every sequence sits at index `max_len - 1`.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Interaction;
use crate::diffcore::{Graph, ParamId, ParamStore, Segment, Var};
use crate::error::{invalid, Error, Result};
use crate::nn::{Ffn, LayerNorm, Linear};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceBatch {
    sequences: Vec<Vec<Interaction>>,
    max_len: usize,
}

impl SequenceBatch {
    /// Sequences must already be truncated to `max_len`.
    pub fn new(sequences: Vec<Vec<Interaction>>, max_len: usize) -> Result<Self> {
        for (i, s) in sequences.iter().enumerate() {
            if s.len() > max_len {
                return Err(invalid(format!(
                    "sequence {i} has {} events, more than max_len {max_len}; truncate first",
                    s.len()
                )));
            }
            if s.windows(2).any(|w| w[1].ts < w[0].ts) {
                return Err(invalid(format!("sequence {i} has decreasing timestamps")));
            }
        }
        Ok(Self { sequences, max_len })
    }

    pub fn sequences(&self) -> &[Vec<Interaction>] {
        &self.sequences
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn rows(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn segments(&self) -> Vec<Segment> {
        let mut start = 0;
        self.sequences
            .iter()
            .map(|s| {
                let seg = Segment { start, len: s.len() };
                start += s.len();
                seg
            })
            .collect()
    }

    /// Position index of every packed row.
    pub fn positions(&self) -> Vec<usize> {
        self.sequences
            .iter()
            .flat_map(|s| (0..s.len()).map(move |p| self.max_len - s.len() + p))
            .collect()
    }

    /// Events in packed-row order.
    pub fn events(&self) -> impl Iterator<Item = &Interaction> {
        self.sequences.iter().flatten()
    }

    /// `[users][max_len]`, true where a real event sits after left-padding.
    pub fn padding_mask(&self) -> Vec<Vec<bool>> {
        self.sequences
            .iter()
            .map(|s| (0..self.max_len).map(|p| p >= self.max_len - s.len()).collect())
            .collect()
    }

    /// Scatters packed `[rows, d]` outputs to `[users][max_len][d]`, zero at
    /// padded positions.
    pub fn to_padded(&self, packed: &Array2<f64>) -> Vec<Array2<f64>> {
        let d = packed.ncols();
        let mut row = 0;
        self.sequences
            .iter()
            .map(|s| {
                let mut out = Array2::zeros((self.max_len, d));
                let off = self.max_len - s.len();
                for p in 0..s.len() {
                    out.row_mut(off + p).assign(&packed.row(row));
                    row += 1;
                }
                out
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneDims {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub hidden: usize,
    pub max_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub ln_attn: LayerNorm,
    /// Fused `[d, 3d]` query, key and value weights.
    pub qkv: ParamId,
    /// `[1, 2d]` query and value biases. A key bias would shift every logit
    /// of a query equally, so there is none.
    pub qv_bias: ParamId,
    pub proj: Linear,
    pub ln_ffn: LayerNorm,
    pub ffn: Ffn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneParams {
    pub dims: BackboneDims,
    /// `[max_len, d_model]` learned positional embeddings.
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub ln_out: LayerNorm,
}

impl BackboneParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dims: BackboneDims, std: f64, rng: &mut R) -> Result<Self> {
        if dims.layers == 0 {
            return Err(Error::InvalidConfig("backbone needs at least one layer".into()));
        }
        if dims.heads == 0 || dims.d_model % dims.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "head count {} must divide model dim {}",
                dims.heads, dims.d_model
            )));
        }
        if dims.max_len == 0 {
            return Err(Error::InvalidConfig("max_len must be positive".into()));
        }
        let d = dims.d_model;
        let pos = store.normal("backbone.pos", dims.max_len, d, std, rng)?;
        let mut blocks = Vec::with_capacity(dims.layers);
        for l in 0..dims.layers {
            let name = format!("backbone.{l}");
            blocks.push(Block {
                ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d)?,
                qkv: store.normal(format!("{name}.qkv.w"), d, 3 * d, std, rng)?,
                qv_bias: store.filled(format!("{name}.qv.b"), 1, 2 * d, 0.0)?,
                proj: Linear::new(store, &format!("{name}.proj"), d, d, std, rng)?,
                ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d)?,
                ffn: Ffn::new(store, &format!("{name}.ffn"), d, dims.hidden, d, std, rng)?,
            });
        }
        let ln_out = LayerNorm::new(store, "backbone.ln_out", d)?;
        Ok(Self {
            dims,
            pos,
            blocks,
            ln_out,
        })
    }

    /// Runs the transformer over packed `[rows, d_model]` item representations.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, batch: &SequenceBatch) -> Result<Var> {
        let d = self.dims.d_model;
        if batch.max_len() != self.dims.max_len {
            return Err(invalid(format!(
                "batch max_len {} differs from backbone max_len {}",
                batch.max_len(),
                self.dims.max_len
            )));
        }
        if g.shape(x) != [batch.rows(), d] {
            return Err(Error::DimensionMismatch {
                expected: batch.rows(),
                got: g.shape(x)[0],
            });
        }
        let segments = batch.segments();
        let pos_table = g.param(store, self.pos);
        let pos = g.gather(pos_table, &batch.positions())?;
        let mut h = g.add(x, pos)?;
        for block in &self.blocks {
            let a = block.ln_attn.forward(g, store, h)?;
            let w = g.param(store, block.qkv);
            let qkv = g.matmul(a, w)?;
            let bias = g.param(store, block.qv_bias);
            let (qb, vb) = (g.slice_cols(bias, 0, d)?, g.slice_cols(bias, d, 2 * d)?);
            let q = g.slice_cols(qkv, 0, d)?;
            let q = g.add_row(q, qb)?;
            let k = g.slice_cols(qkv, d, 2 * d)?;
            let v = g.slice_cols(qkv, 2 * d, 3 * d)?;
            let v = g.add_row(v, vb)?;
            let att = g.causal_attention(q, k, v, &segments, self.dims.heads)?;
            let att = block.proj.forward(g, store, att)?;
            h = g.add(h, att)?;
            let f = block.ln_ffn.forward(g, store, h)?;
            let f = block.ffn.forward(g, store, f)?;
            h = g.add(h, f)?;
        }
        self.ln_out.forward(g, store, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(ts: i64) -> Interaction {
        Interaction {
            item: 0,
            business: 0,
            ts,
        }
    }

    #[test]
    fn packing_layout() {
        let b = SequenceBatch::new(vec![vec![ev(0), ev(1)], vec![ev(0)], vec![]], 4).unwrap();
        assert_eq!(b.rows(), 3);
        assert_eq!(b.positions(), vec![2, 3, 3]);
        assert_eq!(
            b.segments(),
            vec![
                Segment { start: 0, len: 2 },
                Segment { start: 2, len: 1 },
                Segment { start: 3, len: 0 }
            ]
        );
        assert_eq!(b.padding_mask()[1], vec![false, false, false, true]);
        let packed = Array2::from_shape_fn((3, 2), |(r, c)| (r * 2 + c + 1) as f64);
        let padded = b.to_padded(&packed);
        assert_eq!(padded[0].row(2).to_vec(), vec![1.0, 2.0]);
        assert_eq!(padded[0].row(0).to_vec(), vec![0.0, 0.0]);
        assert_eq!(padded[2].sum(), 0.0);
    }

    #[test]
    fn overlong_sequence_is_an_error() {
        assert!(SequenceBatch::new(vec![vec![ev(0), ev(1), ev(2)]], 2).is_err());
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut store = ParamStore::new();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let dims = BackboneDims {
            layers: 1,
            heads: 3,
            d_model: 8,
            hidden: 8,
            max_len: 4,
        };
        assert!(matches!(
            BackboneParams::new(&mut store, dims, 0.01, &mut rng),
            Err(Error::InvalidConfig(_))
        ));
    }
}
