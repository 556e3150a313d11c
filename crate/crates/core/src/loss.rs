//! Training objective: business-weighted, time-decayed InfoNCE over per-level
//! token predictions plus weighted reconstruction.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Var};
use crate::error::{invalid, Error, Result};

/// Business weights of the empirical configuration (A, B, C, D).
pub const EMPIRICAL_WEIGHTS: [f64; 4] = [0.9, 1.5, 1.3, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    #[default]
    AsGiven,
    SumToB,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda: f64,
    /// Decay rate per `time_unit`.
    pub alpha: f64,
    pub time_unit: f64,
    /// Indexed by business id.
    pub business_weights: Vec<f64>,
    pub weight_mode: WeightMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            lambda: 0.1,
            alpha: 0.05,
            time_unit: 86_400.0,
            business_weights: EMPIRICAL_WEIGHTS.to_vec(),
            weight_mode: WeightMode::AsGiven,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("loss.tau must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("loss.lambda must be non-negative");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("loss.alpha must be non-negative");
        }
        if !(self.time_unit > 0.0 && self.time_unit.is_finite()) {
            return bad("loss.time_unit must be positive");
        }
        if self.business_weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return bad("loss.business_weights must be finite and positive");
        }
        Ok(())
    }

    /// Weights after normalisation, one per business.
    pub fn effective_weights(&self, businesses: usize) -> Result<Vec<f64>> {
        if self.business_weights.len() != businesses {
            return Err(Error::InvalidConfig(format!(
                "loss.business_weights has {} entries for {businesses} businesses",
                self.business_weights.len()
            )));
        }
        normalize_business_weights(&self.business_weights, self.weight_mode)
    }
}

/// `exp(−α·(t_last − t_target)/unit)`.
pub fn time_decay(t_last: i64, t_target: i64, alpha: f64, unit: f64) -> Result<f64> {
    if t_target > t_last {
        return Err(invalid(format!(
            "target timestamp {t_target} is after the sequence end {t_last}"
        )));
    }
    let delta = (t_last - t_target) as f64 / unit;
    Ok((-alpha * delta).exp())
}

pub fn normalize_business_weights(w: &[f64], mode: WeightMode) -> Result<Vec<f64>> {
    if w.is_empty() {
        return Err(invalid("no business weights"));
    }
    if let Some(bad) = w.iter().find(|&&x| !(x > 0.0 && x.is_finite())) {
        return Err(invalid(format!("business weight {bad} is not positive")));
    }
    Ok(match mode {
        WeightMode::AsGiven => w.to_vec(),
        WeightMode::SumToB => {
            let s: f64 = w.iter().sum();
            w.iter().map(|x| x * w.len() as f64 / s).collect()
        }
    })
}

/// One supervised prediction: row `row` of the prediction tensor should
/// score `tokens` highest at each level.
#[derive(Debug, Clone, PartialEq)]
pub struct Supervision {
    pub row: usize,
    pub business: u16,
    pub tokens: Vec<usize>,
    pub time_weight: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct InfoNce {
    /// `[1, 1]` sum of the per-business components.
    pub loss: Var,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Sum of the per-business components as computed on the graph.
    pub infonce_total: f64,
    pub infonce: Vec<f64>,
    pub recon: f64,
    pub pairs: Vec<usize>,
}

/// Per-business weighted InfoNCE.
///
/// Rows of `pred` (`[rows, k*d_t]`) not named in `sup` are never read. For
/// business `b` with `n_b` supervised rows the component is
/// `w_b / n_b · Σ_i w_t(i) · Σ_level CE(cos(pred_i, V_level)/τ, token)`.
/// `tables` holds one `[V, d_t]` vocabulary per level.
pub fn infonce(
    g: &mut Graph,
    pred: Var,
    sup: &[Supervision],
    tables: &[Var],
    weights: &[f64],
    tau: f64,
) -> Result<(InfoNce, Vec<f64>, Vec<usize>)> {
    let businesses = weights.len();
    let mut counts = vec![0usize; businesses];
    for s in sup {
        let c = counts
            .get_mut(s.business as usize)
            .ok_or(Error::UnknownBusiness(s.business))?;
        *c += 1;
        if s.tokens.len() != tables.len() {
            return Err(Error::DimensionMismatch {
                expected: tables.len(),
                got: s.tokens.len(),
            });
        }
        if !(s.time_weight.is_finite() && s.time_weight >= 0.0) {
            return Err(invalid(format!("time weight {} is invalid", s.time_weight)));
        }
    }
    if sup.is_empty() {
        let zero = g.constant(ndarray::Array2::zeros((1, 1)))?;
        return Ok((InfoNce { loss: zero }, vec![0.0; businesses], counts));
    }
    let levels = tables.len();
    let width = g.shape(pred)[1];
    if levels == 0 || width % levels != 0 {
        return Err(Error::DimensionMismatch {
            expected: levels,
            got: width,
        });
    }
    let d_t = width / levels;
    let rows: Vec<usize> = sup.iter().map(|s| s.row).collect();
    let p = g.gather(pred, &rows)?;
    let mut per_pair: Option<Var> = None;
    for (level, &table) in tables.iter().enumerate() {
        let pl = if levels == 1 {
            p
        } else {
            g.slice_cols(p, level * d_t, (level + 1) * d_t)?
        };
        let cos = g.cosine(pl, table)?;
        let logits = g.scale(cos, 1.0 / tau)?;
        let lsm = g.log_softmax(logits)?;
        let idx: Vec<usize> = sup.iter().map(|s| s.tokens[level]).collect();
        let picked = g.pick(lsm, &idx)?;
        per_pair = Some(match per_pair {
            None => picked,
            Some(acc) => g.add(acc, picked)?,
        });
    }
    let per_pair = per_pair.expect("at least one level");
    let coef: Vec<f64> = sup
        .iter()
        .map(|s| -weights[s.business as usize] * s.time_weight / counts[s.business as usize] as f64)
        .collect();
    let loss = g.weighted_sum(per_pair, &coef)?;

    // Per-business report in a fixed order: w_b · (Σ_i w_t · CE_i) / n_b.
    let values = g.value(per_pair);
    let mut sums = vec![0.0; businesses];
    for (i, s) in sup.iter().enumerate() {
        sums[s.business as usize] += s.time_weight * -values[[i, 0]];
    }
    let per_business = (0..businesses)
        .map(|b| {
            if counts[b] == 0 {
                0.0
            } else {
                weights[b] * sums[b] / counts[b] as f64
            }
        })
        .collect();
    Ok((InfoNce { loss }, per_business, counts))
}

/// `infonce + λ·recon`; the reconstruction term is left out entirely when λ is zero.
pub fn total_loss(
    g: &mut Graph,
    infonce: InfoNce,
    per_business: Vec<f64>,
    pairs: Vec<usize>,
    recon: Option<Var>,
    lambda: f64,
) -> Result<(Var, LossBreakdown)> {
    let recon_value = recon.map_or(0.0, |r| g.scalar(r));
    let total = match recon {
        Some(r) if lambda != 0.0 => {
            let scaled = g.scale(r, lambda)?;
            g.add(infonce.loss, scaled)?
        }
        _ => infonce.loss,
    };
    let breakdown = LossBreakdown {
        total: g.scalar(total),
        infonce_total: g.scalar(infonce.loss),
        infonce: per_business,
        recon: recon_value,
        pairs,
    };
    Ok((total, breakdown))
}
