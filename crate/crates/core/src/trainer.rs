//! Run configuration, Adam training loop, checkpoints, evaluation and the
//! ablation and sweep drivers.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{batch_checksum, split, truncate, Batcher, Catalog, Interaction, Split, UserHistory};
use crate::diffcore::{grad_check, GradientReport, Gradients, Graph, ParamStore, Tensor};
use crate::error::{invalid, Error, Result};
use crate::eval::{hit_rate_at_k, hit_rate_rows, rank_items, HitRates, MetricRow, RankingResult};
use crate::loss::{LossBreakdown, LossConfig};
use crate::model::{Model, ModelConfig, Variant};
use crate::tokenizer::{assign_sid, fit_residual_quantizer, Codebook, ItemVector, SemanticId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: usize,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 500,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
    /// Test cases predicted per forward pass.
    pub chunk: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { k: 10, chunk: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub seed: u64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: Variant,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub eval: EvalConfig,
    pub tokenizer: TokenizerConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::InvalidConfig("optim.lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::InvalidConfig("optim betas must lie in [0, 1)".into()));
        }
        if !(o.eps > 0.0) {
            return Err(Error::InvalidConfig("optim.eps must be positive".into()));
        }
        if o.batch_size == 0 {
            return Err(Error::InvalidConfig("optim.batch_size must be positive".into()));
        }
        if self.eval.k == 0 || self.eval.chunk == 0 {
            return Err(Error::InvalidConfig("eval.k and eval.chunk must be positive".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form (first 12 characters).
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&json))[..12].to_string()
    }

    pub fn run_id(&self) -> String {
        format!("{}-s{}", self.hash(), self.seed)
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            variant,
            ..self.clone()
        }
    }
}

/// Root for run directories: `$MBGR_RUNS_DIR`, else `runs`.
pub fn runs_root() -> PathBuf {
    std::env::var_os("MBGR_RUNS_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

pub fn run_dir(root: &Path, cfg: &RunConfig) -> PathBuf {
    root.join(cfg.run_id())
}

/// Adam without weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: &OptimConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.raw_dim())).collect();
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (id, g) in grads.params() {
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let p = store.get_mut(id);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

/// Dataset with SIDs assigned and the hold-out split applied.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub catalog: Catalog,
    /// Indexed by item id.
    pub sids: Vec<SemanticId>,
    pub split: Split,
    pub businesses: usize,
    /// Every item with its SID, for full-catalog ranking.
    pub candidates: Vec<(u32, SemanticId)>,
}

pub fn prepare(users: &[UserHistory], items: &[ItemVector], codebook: &Codebook, max_len: usize) -> Result<Prepared> {
    let catalog = Catalog::from_items(items)?;
    catalog.check(users)?;
    let mut sids = vec![SemanticId(Vec::new()); catalog.len()];
    for it in items {
        sids[it.item as usize] = assign_sid(&it.vec, codebook)?;
    }
    let businesses = catalog.businesses();
    let candidates = sids.iter().enumerate().map(|(i, s)| (i as u32, s.clone())).collect();
    Ok(Prepared {
        split: split(users, businesses, max_len),
        catalog,
        sids,
        businesses,
        candidates,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub total: f64,
    pub infonce: f64,
    pub recon: f64,
    pub pairs: usize,
}

pub const CURVE_HEADER: &str = "step,total,infonce,recon,pairs";

pub fn write_curve_csv<W: Write>(mut w: W, curve: &[CurvePoint]) -> Result<()> {
    writeln!(w, "{CURVE_HEADER}")?;
    for c in curve {
        writeln!(w, "{},{},{},{},{}", c.step, c.total, c.infonce, c.recon, c.pairs)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub curve: Vec<CurvePoint>,
    /// One digest per step of the user ids in that batch.
    pub checksums: Vec<String>,
}

fn first_non_finite(store: &ParamStore) -> Option<String> {
    store
        .iter()
        .find(|(_, p)| p.value.iter().any(|v| !v.is_finite()))
        .map(|(_, p)| p.name.clone())
}

/// Trains a fresh model from `cfg` on the training split.
pub fn train(cfg: &RunConfig, data: &Prepared, codebook: &Codebook) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = Model::new(&cfg.model, cfg.variant, data.businesses, Some(codebook), cfg.seed)?;
    train_model(cfg, data, model)
}

/// Continues training `model` for `cfg.optim.steps` steps.
pub fn train_model(cfg: &RunConfig, data: &Prepared, mut model: Model) -> Result<TrainOutcome> {
    cfg.loss.effective_weights(data.businesses)?;
    let pool: Vec<&UserHistory> = data.split.train.iter().filter(|u| !u.events.is_empty()).collect();
    let mut curve = Vec::with_capacity(cfg.optim.steps);
    let mut checksums = Vec::with_capacity(cfg.optim.steps);
    if cfg.optim.steps == 0 {
        return Ok(TrainOutcome {
            model,
            curve,
            checksums,
        });
    }
    if pool.is_empty() {
        return Err(invalid("no training sequences"));
    }
    let mut batcher = Batcher::new(pool.len(), cfg.optim.batch_size, cfg.seed)?;
    let mut adam = Adam::new(&cfg.optim, &model.store);
    for step in 0..cfg.optim.steps {
        let idx = batcher.next_batch();
        let users: Vec<u32> = idx.iter().map(|&i| pool[i].user).collect();
        checksums.push(batch_checksum(&users));
        let seqs: Vec<_> = idx
            .iter()
            .map(|&i| truncate(&pool[i].events, cfg.model.max_len).to_vec())
            .collect();
        let mut g = Graph::new();
        let (loss, br) = model
            .batch_loss(&mut g, &seqs, &data.sids, &cfg.loss)
            .map_err(|e| diagnose(e, step, &model.store))?;
        let grads = g.backward(loss)?;
        adam.step(&mut model.store, &grads);
        if let Some(name) = first_non_finite(&model.store) {
            return Err(Error::NonFinite {
                op: "adam",
                node: format!("parameter `{name}` after step {step}"),
            });
        }
        curve.push(point(step, &br));
        if step % 50 == 0 || step + 1 == cfg.optim.steps {
            log::info!(
                "{} step {step}: total {:.4} infonce {:.4} recon {:.5} pairs {}",
                cfg.variant,
                br.total,
                br.infonce_total,
                br.recon,
                br.pairs.iter().sum::<usize>()
            );
        }
    }
    Ok(TrainOutcome {
        model,
        curve,
        checksums,
    })
}

fn diagnose(e: Error, step: usize, store: &ParamStore) -> Error {
    match e {
        Error::NonFinite { op, node } => Error::NonFinite {
            op,
            node: match first_non_finite(store) {
                Some(p) => format!("{node} at step {step} (parameter `{p}`)"),
                None => format!("{node} at step {step}"),
            },
        },
        other => other,
    }
}

fn point(step: usize, br: &LossBreakdown) -> CurvePoint {
    CurvePoint {
        step,
        total: br.total,
        infonce: br.infonce_total,
        recon: br.recon,
        pairs: br.pairs.iter().sum(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub results: Vec<RankingResult>,
    pub hit_rates: HitRates,
}

/// Ranks the full catalog for every held-out case.
pub fn evaluate(model: &Model, data: &Prepared, cfg: &RunConfig) -> Result<Evaluation> {
    let tables = model.token_tables();
    let mut results = Vec::with_capacity(data.split.test.len());
    for chunk in data.split.test.chunks(cfg.eval.chunk) {
        let contexts: Vec<_> = chunk.iter().map(|c| c.context.clone()).collect();
        let businesses: Vec<u16> = chunk.iter().map(|c| c.business).collect();
        let preds = model.predict(&contexts, &businesses, &data.sids)?;
        for (case, pred) in chunk.iter().zip(preds) {
            results.push(rank_items(
                &pred,
                &data.candidates,
                &tables,
                cfg.loss.tau,
                cfg.eval.k.min(data.candidates.len()),
                case.business,
                case.target.item,
            )?);
        }
    }
    let hit_rates = hit_rate_at_k(&results, cfg.eval.k, data.businesses)?;
    Ok(Evaluation { results, hit_rates })
}

const CHECKPOINT_FORMAT: &str = "mbgr-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub config: RunConfig,
    pub businesses: usize,
    pub params: ParamStore,
}

pub fn save_checkpoint(path: &Path, cfg: &RunConfig, model: &Model) -> Result<()> {
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config_hash: cfg.hash(),
        config: cfg.clone(),
        businesses: model.businesses,
        params: model.store.clone(),
    };
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(f, &ck)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(RunConfig, Model)> {
    let text = std::fs::read_to_string(path)?;
    let ck: Checkpoint = serde_json::from_str(&text)?;
    if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
        return Err(invalid(format!(
            "unsupported checkpoint {} v{}",
            ck.format, ck.version
        )));
    }
    if ck.config.hash() != ck.config_hash {
        return Err(invalid("checkpoint config hash does not match its config"));
    }
    let mut model = Model::new(&ck.config.model, ck.config.variant, ck.businesses, None, ck.config.seed)?;
    if model.store.len() != ck.params.len() {
        return Err(invalid(format!(
            "checkpoint has {} tensors, model expects {}",
            ck.params.len(),
            model.store.len()
        )));
    }
    model.store.load_from(&ck.params)?;
    Ok((ck.config, model))
}

/// Outcome of one trained and evaluated configuration.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub label: String,
    pub config: RunConfig,
    pub hit_rates: HitRates,
    pub checksums: Vec<String>,
    pub curve: Vec<CurvePoint>,
    pub model: Model,
}

impl RunReport {
    pub fn metric_rows(&self) -> Vec<MetricRow> {
        hit_rate_rows(&self.config.run_id(), &self.label, &self.hit_rates)
    }
}

pub fn run(cfg: &RunConfig, label: &str, data: &Prepared, codebook: &Codebook) -> Result<RunReport> {
    let out = train(cfg, data, codebook)?;
    let ev = evaluate(&out.model, data, cfg)?;
    Ok(RunReport {
        label: label.to_string(),
        config: cfg.clone(),
        hit_rates: ev.hit_rates,
        checksums: out.checksums,
        curve: out.curve,
        model: out.model,
    })
}

/// Trains and evaluates every listed variant with the same seed and data.
pub fn ablate(cfg: &RunConfig, variants: &[Variant], data: &Prepared, codebook: &Codebook) -> Result<Vec<RunReport>> {
    variants
        .iter()
        .map(|&v| run(&cfg.with_variant(v), v.name(), data, codebook))
        .collect()
}

/// Hyperparameter grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepGrid {
    Alpha,
    Experts,
    Weights,
}

impl SweepGrid {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(Self::Alpha),
            "experts" => Ok(Self::Experts),
            "weights" => Ok(Self::Weights),
            other => Err(Error::InvalidConfig(format!("unknown sweep grid `{other}`"))),
        }
    }
}

pub const ALPHA_GRID: [f64; 5] = [0.01, 0.05, 0.10, 0.20, 0.50];
pub const EXPERT_GRID: [usize; 4] = [4, 8, 16, 32];

/// Business weights proportional to inverse event share, scaled to sum to B.
pub fn inverse_frequency_weights(shares: &[f64]) -> Result<Vec<f64>> {
    if shares.iter().any(|&s| !(s > 0.0)) {
        return Err(invalid("every business needs a positive share"));
    }
    let inv: Vec<f64> = shares.iter().map(|s| 1.0 / s).collect();
    let total: f64 = inv.iter().sum();
    Ok(inv.iter().map(|x| x * shares.len() as f64 / total).collect())
}

/// Labelled configurations of one grid, derived from `base`.
pub fn sweep_configs(base: &RunConfig, grid: SweepGrid, shares: &[f64]) -> Result<Vec<(String, RunConfig)>> {
    let mut out = Vec::new();
    match grid {
        SweepGrid::Alpha => {
            for a in ALPHA_GRID {
                let mut c = base.clone();
                c.loss.alpha = a;
                out.push((format!("alpha={a}"), c));
            }
        }
        SweepGrid::Experts => {
            for k in EXPERT_GRID {
                let mut c = base.clone();
                c.model.k_exp = k;
                out.push((format!("k_exp={k}"), c));
            }
        }
        SweepGrid::Weights => {
            let b = shares.len();
            let configs = [
                ("uniform", vec![1.0; b]),
                ("inverse-frequency", inverse_frequency_weights(shares)?),
                ("empirical", base.loss.business_weights.clone()),
            ];
            for (name, w) in configs {
                let mut c = base.clone();
                c.loss.business_weights = w;
                out.push((format!("weights={name}"), c));
            }
        }
    }
    Ok(out)
}

/// Tiny configuration for whole-model gradient checks: two SID levels of eight
/// codewords, two experts, width eight. The larger init keeps decoded
/// predictions away from the cosine singularity at zero.
pub fn grad_check_config() -> ModelConfig {
    ModelConfig {
        k_sid: 2,
        vocab: 8,
        d_t: 8,
        d_e: 8,
        d_b: 8,
        hidden: 8,
        layers: 1,
        heads: 2,
        max_len: 6,
        k_exp: 2,
        init_std: 0.3,
        token_noise: 0.1,
        ..ModelConfig::default()
    }
}

/// Finite-difference check of every parameter of a freshly initialised model
/// on a fixed two-user batch.
pub fn model_grad_check(
    cfg: &ModelConfig,
    variant: Variant,
    loss: &LossConfig,
    seed: u64,
    tolerance: f64,
) -> Result<GradientReport> {
    const ITEMS: usize = 12;
    const BUSINESSES: usize = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vectors: Vec<Vec<f64>> = (0..ITEMS)
        .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let cb = fit_residual_quantizer(&vectors, cfg.k_sid, cfg.vocab, seed)?;
    let sids = vectors.iter().map(|v| assign_sid(v, &cb)).collect::<Result<Vec<_>>>()?;
    let users: Vec<Vec<Interaction>> = [[0u16, 1, 0, 2, 1, 0], [3, 3, 1, 0, 3, 2]]
        .iter()
        .enumerate()
        .map(|(u, businesses)| {
            businesses
                .iter()
                .enumerate()
                .map(|(i, &business)| Interaction {
                    item: ((u * 6 + i) % ITEMS) as u32,
                    business,
                    ts: 86_400 * (i + u) as i64,
                })
                .collect()
        })
        .collect();
    let mut model = Model::new(cfg, variant, BUSINESSES, Some(&cb), seed)?;
    let ids = model.param_ids();
    let mut store = std::mem::take(&mut model.store);
    let report = grad_check(&mut store, &ids, 1e-5, tolerance, |s, g| {
        Ok(model.batch_loss_in(s, g, &users, &sids, loss)?.0)
    });
    model.store = store;
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_depends_on_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.loss.alpha = 0.1;
        assert_ne!(a.hash(), b.hash());
        assert!(a.run_id().ends_with("-s0"));
    }

    #[test]
    fn config_rejects_unknown_fields() {
        let r: std::result::Result<RunConfig, _> = serde_json::from_str(r#"{"sead": 1}"#);
        assert!(r.is_err());
        let r: RunConfig = serde_json::from_str(r#"{"seed": 3, "loss": {"alpha": 0.2}}"#).unwrap();
        assert_eq!(r.seed, 3);
        assert_eq!(r.loss.alpha, 0.2);
        assert_eq!(r.loss.tau, 0.07);
    }

    #[test]
    fn grids() {
        let base = RunConfig::default();
        let shares = [0.5, 0.25, 0.125, 0.125];
        assert_eq!(sweep_configs(&base, SweepGrid::Alpha, &shares).unwrap().len(), 5);
        let k: Vec<usize> = sweep_configs(&base, SweepGrid::Experts, &shares)
            .unwrap()
            .iter()
            .map(|(_, c)| c.model.k_exp)
            .collect();
        assert_eq!(k, vec![4, 8, 16, 32]);
        let w = sweep_configs(&base, SweepGrid::Weights, &shares).unwrap();
        let inv = &w[1].1.loss.business_weights;
        assert!((inv.iter().sum::<f64>() - 4.0).abs() < 1e-12);
        assert!((inv[2] / inv[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        use ndarray::array;
        let mut store = ParamStore::new();
        let p = store.add("p", array![[1.0, -2.0]]).unwrap();
        let mut g = Graph::new();
        let v = g.param(&store, p);
        let s = g.sum(v).unwrap();
        let grads = g.backward(s).unwrap();
        let mut adam = Adam::new(&OptimConfig::default(), &store);
        adam.step(&mut store, &grads);
        let got = store.get(p);
        assert!((got[[0, 0]] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((got[[0, 1]] - (-2.0 - 1e-3)).abs() < 1e-9);
    }
}
