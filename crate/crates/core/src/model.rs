//! Full model: codec, backbone and expert layer wired together, with the
//! ablation variants.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneDims, BackboneParams, SequenceBatch};
use crate::bid::{gather_business, gather_tokens, reconstruction_loss, split_levels, BidDims, BidParams};
use crate::data::Interaction;
use crate::diffcore::{Graph, ParamId, ParamStore, Var};
use crate::error::{invalid, Error, Result};
use crate::eval::SeparationMode;
use crate::ldr::{labels, TargetMode};
use crate::loss::{infonce, time_decay, total_loss, LossBreakdown, LossConfig, Supervision};
use crate::mbp::{GateActivation, MbpParams};
use crate::nn::Linear;
use crate::tokenizer::{Codebook, SemanticId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Full,
    NoLdr,
    NoMbp,
    NoBid,
    /// All three components removed.
    NtpBaseline,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoLdr,
        Variant::NoMbp,
        Variant::NoBid,
        Variant::NtpBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoLdr => "no-ldr",
            Variant::NoMbp => "no-mbp",
            Variant::NoBid => "no-bid",
            Variant::NtpBaseline => "ntp-baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant `{s}`")))
    }

    pub fn target_mode(self) -> TargetMode {
        match self {
            Variant::NoLdr | Variant::NtpBaseline => TargetMode::Ntp,
            _ => TargetMode::Routed,
        }
    }

    pub fn uses_mbp(self) -> bool {
        !matches!(self, Variant::NoMbp | Variant::NtpBaseline)
    }

    pub fn uses_bid(self) -> bool {
        !matches!(self, Variant::NoBid | Variant::NtpBaseline)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub k_sid: usize,
    pub vocab: usize,
    pub d_t: usize,
    pub d_e: usize,
    pub d_b: usize,
    /// Hidden width of every two-layer feed-forward block.
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub k_exp: usize,
    pub gate_activation: GateActivation,
    pub init_std: f64,
    /// Noise added to the codeword warm start of the token tables.
    pub token_noise: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k_sid: 2,
            vocab: 16,
            d_t: 32,
            d_e: 64,
            d_b: 8,
            hidden: 64,
            layers: 2,
            heads: 2,
            max_len: 64,
            k_exp: 8,
            gate_activation: GateActivation::Silu,
            init_std: 0.01,
            token_noise: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k_sid", self.k_sid),
            ("d_t", self.d_t),
            ("d_e", self.d_e),
            ("d_b", self.d_b),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("heads", self.heads),
            ("max_len", self.max_len),
            ("k_exp", self.k_exp),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("model.{name} must be positive")));
        }
        if self.vocab < 2 {
            return Err(Error::InvalidConfig("model.vocab must be at least 2".into()));
        }
        if self.d_e % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "model.heads ({}) must divide model.d_e ({})",
                self.heads, self.d_e
            )));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) || !(self.token_noise >= 0.0) {
            return Err(Error::InvalidConfig("init scales must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Mean-pooling encoder and single linear decoder used without the gated codec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolCodec {
    /// `[d_t, d_e]` projection, present when the widths differ.
    pub proj: Option<ParamId>,
    pub dec: Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Codec {
    Bid(BidParams),
    Pool(PoolCodec),
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub variant: Variant,
    pub businesses: usize,
    pub store: ParamStore,
    pub tokens: Vec<ParamId>,
    pub business: ParamId,
    pub codec: Codec,
    pub backbone: BackboneParams,
    pub mbp: Option<MbpParams>,
}

/// Graph nodes of the encoded inputs.
struct Inputs {
    tokens: Var,
    business: Var,
    reps: Var,
}

impl Model {
    /// Builds and initialises a model. Token tables start from the codebook's
    /// codewords when one is given.
    pub fn new(
        config: &ModelConfig,
        variant: Variant,
        businesses: usize,
        codebook: Option<&Codebook>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if businesses == 0 {
            return Err(Error::InvalidConfig("need at least one business".into()));
        }
        if let Some(cb) = codebook {
            if cb.levels != config.k_sid || cb.vocab != config.vocab {
                return Err(Error::InvalidConfig(format!(
                    "codebook has {} levels x {} codewords, config expects {} x {}",
                    cb.levels, cb.vocab, config.k_sid, config.vocab
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let std = config.init_std;
        let noise = Normal::new(0.0, config.token_noise.max(f64::MIN_POSITIVE))
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let mut tokens = Vec::with_capacity(config.k_sid);
        for level in 0..config.k_sid {
            let mut table = match codebook {
                Some(cb) => cb.level_table(level, config.d_t),
                None => {
                    let n = Normal::new(0.0, 1.0 / (config.d_t as f64).sqrt()).expect("valid");
                    Array2::from_shape_simple_fn((config.vocab, config.d_t), || n.sample(&mut rng))
                }
            };
            if config.token_noise > 0.0 {
                table.mapv_inplace(|x| x + noise.sample(&mut rng));
            }
            tokens.push(store.add(format!("tokens.{level}"), table)?);
        }
        let business = store.normal("business", businesses, config.d_b, std, &mut rng)?;
        let dims = BidDims {
            k_sid: config.k_sid,
            vocab: config.vocab,
            d_t: config.d_t,
            d_e: config.d_e,
            d_b: config.d_b,
            hidden: config.hidden,
            businesses,
        };
        let codec = if variant.uses_bid() {
            Codec::Bid(BidParams::new(&mut store, dims, tokens.clone(), business, std, &mut rng)?)
        } else {
            let proj = if config.d_t != config.d_e {
                Some(store.normal("pool.proj", config.d_t, config.d_e, std, &mut rng)?)
            } else {
                None
            };
            let dec = Linear::new(&mut store, "pool.dec", config.d_e, dims.token_width(), std, &mut rng)?;
            Codec::Pool(PoolCodec { proj, dec })
        };
        let backbone = BackboneParams::new(
            &mut store,
            BackboneDims {
                layers: config.layers,
                heads: config.heads,
                d_model: config.d_e,
                hidden: config.hidden,
                max_len: config.max_len,
            },
            std,
            &mut rng,
        )?;
        let mbp = if variant.uses_mbp() {
            Some(MbpParams::new(
                &mut store,
                business,
                config.d_e,
                config.hidden,
                config.k_exp,
                config.gate_activation,
                std,
                &mut rng,
            )?)
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            variant,
            businesses,
            store,
            tokens,
            business,
            codec,
            backbone,
            mbp,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.store.ids().collect()
    }

    fn encode_inputs(&self, g: &mut Graph, store: &ParamStore, sids: &[&SemanticId], businesses: &[u16]) -> Result<Inputs> {
        let tokens = gather_tokens(g, store, &self.tokens, sids)?;
        let business = gather_business(g, store, self.business, businesses)?;
        let reps = match &self.codec {
            Codec::Bid(bid) => bid.encode(g, store, tokens, business)?.e,
            Codec::Pool(pool) => {
                let pooled = self.pool_tokens(g, store, tokens)?;
                match pool.proj {
                    Some(p) => {
                        let w = g.param(store, p);
                        g.matmul(pooled, w)?
                    }
                    None => pooled,
                }
            }
        };
        Ok(Inputs {
            tokens,
            business,
            reps,
        })
    }

    /// Mean of the level blocks of `[n, k*d_t]` token embeddings.
    fn pool_tokens(&self, g: &mut Graph, _store: &ParamStore, tokens: Var) -> Result<Var> {
        let d_t = self.config.d_t;
        let mut acc = g.slice_cols(tokens, 0, d_t)?;
        for level in 1..self.config.k_sid {
            let part = g.slice_cols(tokens, level * d_t, (level + 1) * d_t)?;
            acc = g.add(acc, part)?;
        }
        g.scale(acc, 1.0 / self.config.k_sid as f64)
    }

    /// Codec decoder; `business` is `None` for the business-agnostic head.
    fn decode(&self, g: &mut Graph, store: &ParamStore, e: Var, business: Option<Var>) -> Result<Var> {
        match &self.codec {
            Codec::Bid(bid) => {
                let b = match business {
                    Some(b) => b,
                    None => {
                        let rows = g.shape(e)[0];
                        g.constant(Array2::zeros((rows, self.config.d_b)))?
                    }
                };
                Ok(bid.decode(g, store, e, b)?.tokens)
            }
            Codec::Pool(pool) => pool.dec.forward(g, store, e),
        }
    }

    /// Predicted `[n, k*d_t]` token embeddings from general representations.
    fn predict_rows(&self, g: &mut Graph, store: &ParamStore, e: Var, businesses: &[u16]) -> Result<Var> {
        match &self.mbp {
            Some(mbp) => {
                let b = gather_business(g, store, self.business, businesses)?;
                let adapted = mbp.adapt(g, store, e, b)?;
                self.decode(g, store, adapted.e, Some(b))
            }
            None => self.decode(g, store, e, None),
        }
    }

    fn sids_for<'a>(sids: &'a [SemanticId], events: impl Iterator<Item = &'a Interaction>) -> Result<Vec<&'a SemanticId>> {
        events
            .map(|e| {
                sids.get(e.item as usize).ok_or(Error::IndexOutOfRange {
                    what: "item id",
                    index: e.item as usize,
                    size: sids.len(),
                })
            })
            .collect()
    }

    /// Training objective on packed sequences, evaluated against `store`.
    pub fn batch_loss_in(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        sequences: &[Vec<Interaction>],
        sids: &[SemanticId],
        cfg: &LossConfig,
    ) -> Result<(Var, LossBreakdown)> {
        let weights = cfg.effective_weights(self.businesses)?;
        let batch = SequenceBatch::new(sequences.to_vec(), self.config.max_len)?;
        let row_sids = Self::sids_for(sids, batch.events())?;
        let row_business: Vec<u16> = batch.events().map(|e| e.business).collect();
        let inputs = self.encode_inputs(g, store, &row_sids, &row_business)?;
        let h = self.backbone.forward(g, store, inputs.reps, &batch)?;

        let mut rows = Vec::new();
        let mut pair_business = Vec::new();
        let mut sup = Vec::new();
        for (seq, seg) in sequences.iter().zip(batch.segments()) {
            let Some(last) = seq.last() else { continue };
            let targets = labels(seq, self.businesses, self.variant.target_mode())?;
            for p in targets.pairs() {
                let target = seq[p.target];
                sup.push(Supervision {
                    row: rows.len(),
                    business: p.business,
                    tokens: row_sids[seg.start + p.target].tokens().to_vec(),
                    time_weight: time_decay(last.ts, target.ts, cfg.alpha, cfg.time_unit)?,
                });
                rows.push(seg.start + p.position);
                pair_business.push(p.business);
            }
        }
        let tables: Vec<Var> = self.tokens.iter().map(|&t| g.param(store, t)).collect();
        let (nce, per_business, counts) = if rows.is_empty() {
            infonce(g, h, &[], &tables, &weights, cfg.tau)?
        } else {
            let e = g.gather(h, &rows)?;
            let pred = self.predict_rows(g, store, e, &pair_business)?;
            infonce(g, pred, &sup, &tables, &weights, cfg.tau)?
        };

        let recon = if batch.rows() > 0 {
            let rebuilt = match &self.codec {
                Codec::Bid(bid) => bid.decode(g, store, inputs.reps, inputs.business)?.tokens,
                Codec::Pool(_) => self.decode(g, store, inputs.reps, None)?,
            };
            Some(reconstruction_loss(g, inputs.tokens, rebuilt, self.config.k_sid)?)
        } else {
            None
        };
        total_loss(g, nce, per_business, counts, recon, cfg.lambda)
    }

    pub fn batch_loss(
        &self,
        g: &mut Graph,
        sequences: &[Vec<Interaction>],
        sids: &[SemanticId],
        cfg: &LossConfig,
    ) -> Result<(Var, LossBreakdown)> {
        self.batch_loss_in(&self.store, g, sequences, sids, cfg)
    }

    /// General representation after the last event of each context, `[n, d_e]`.
    pub fn encode_contexts(&self, contexts: &[Vec<Interaction>], sids: &[SemanticId]) -> Result<Array2<f64>> {
        if contexts.iter().any(Vec::is_empty) {
            return Err(invalid("cannot encode an empty context"));
        }
        let mut g = Graph::new();
        let h = self.encode_packed(&mut g, contexts, sids)?;
        let batch_segments = SequenceBatch::new(contexts.to_vec(), self.config.max_len)?.segments();
        let last: Vec<usize> = batch_segments.iter().map(|s| s.start + s.len - 1).collect();
        let out = g.gather(h, &last)?;
        Ok(g.value(out).clone())
    }

    /// Backbone output for every packed row.
    pub fn encode_packed(&self, g: &mut Graph, sequences: &[Vec<Interaction>], sids: &[SemanticId]) -> Result<Var> {
        let batch = SequenceBatch::new(sequences.to_vec(), self.config.max_len)?;
        let row_sids = Self::sids_for(sids, batch.events())?;
        let row_business: Vec<u16> = batch.events().map(|e| e.business).collect();
        let inputs = self.encode_inputs(g, &self.store, &row_sids, &row_business)?;
        self.backbone.forward(g, &self.store, inputs.reps, &batch)
    }

    /// Next-item token embeddings for each context under the requested
    /// business, one `d_t` vector per level.
    pub fn predict(&self, contexts: &[Vec<Interaction>], businesses: &[u16], sids: &[SemanticId]) -> Result<Vec<Vec<Vec<f64>>>> {
        if contexts.len() != businesses.len() {
            return Err(Error::DimensionMismatch {
                expected: contexts.len(),
                got: businesses.len(),
            });
        }
        if contexts.is_empty() {
            return Ok(Vec::new());
        }
        let e = self.encode_contexts(contexts, sids)?;
        let mut g = Graph::new();
        let ev = g.constant(e)?;
        let pred = self.predict_rows(&mut g, &self.store, ev, businesses)?;
        Ok(g.value(pred)
            .rows()
            .into_iter()
            .map(|r| split_levels(r.as_slice().expect("row"), self.config.d_t))
            .collect())
    }

    /// Item representations for separation analysis.
    pub fn item_representations(&self, items: &[(SemanticId, u16)], mode: SeparationMode) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let sids: Vec<&SemanticId> = items.iter().map(|(s, _)| s).collect();
        let businesses: Vec<u16> = items.iter().map(|(_, b)| *b).collect();
        let out = match mode {
            SeparationMode::Bid => self.encode_inputs(&mut g, &self.store, &sids, &businesses)?.reps,
            SeparationMode::SumPool => {
                let t = gather_tokens(&mut g, &self.store, &self.tokens, &sids)?;
                self.pool_tokens(&mut g, &self.store, t)?
            }
        };
        Ok(g.value(out).rows().into_iter().map(|r| r.to_vec()).collect())
    }

    /// Current token tables, one `[V, d_t]` matrix per level.
    pub fn token_tables(&self) -> Vec<Array2<f64>> {
        self.tokens.iter().map(|&t| self.store.get(t).clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.name()));
        }
        assert!(Variant::parse("nope").is_err());
    }

    #[test]
    fn variant_wiring() {
        assert_eq!(Variant::NoLdr.target_mode(), TargetMode::Ntp);
        assert!(!Variant::NoMbp.uses_mbp());
        assert!(!Variant::NoBid.uses_bid() && Variant::NoBid.uses_mbp());
        let b = Variant::NtpBaseline;
        assert!(b.target_mode() == TargetMode::Ntp && !b.uses_mbp() && !b.uses_bid());
    }

    #[test]
    fn shared_tables() {
        let m = Model::new(&ModelConfig::default(), Variant::Full, 4, None, 0).unwrap();
        let Codec::Bid(bid) = &m.codec else { panic!() };
        assert_eq!(bid.business, m.mbp.as_ref().unwrap().business);
        assert_eq!(bid.tokens, m.tokens);
    }
}
