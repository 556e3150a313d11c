//! Full-catalog ranking, hit rate and business separation of item embeddings.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tokenizer::SemanticId;

/// Per-level log-softmax of `cos(pred_level, V_level)/τ`.
///
/// `tables[l]` is `[V, d_t]`; `pred` holds one `d_t` vector per level.
pub fn level_log_probs(pred: &[Vec<f64>], tables: &[ndarray::Array2<f64>], tau: f64) -> Result<Vec<Vec<f64>>> {
    if pred.len() != tables.len() {
        return Err(Error::DimensionMismatch {
            expected: tables.len(),
            got: pred.len(),
        });
    }
    pred.iter()
        .zip(tables)
        .enumerate()
        .map(|(level, (p, t))| {
            if p.len() != t.ncols() {
                return Err(Error::DimensionMismatch {
                    expected: t.ncols(),
                    got: p.len(),
                });
            }
            let pn = p.iter().map(|x| x * x).sum::<f64>().sqrt();
            if pn == 0.0 {
                return Err(Error::ZeroNorm {
                    operand: format!("prediction level {level}"),
                    row: 0,
                });
            }
            let mut logits = Vec::with_capacity(t.nrows());
            for (r, row) in t.rows().into_iter().enumerate() {
                let rn = row.dot(&row).sqrt();
                if rn == 0.0 {
                    return Err(Error::ZeroNorm {
                        operand: format!("token table level {level}"),
                        row: r,
                    });
                }
                let dot: f64 = row.iter().zip(p).map(|(a, b)| a * b).sum();
                logits.push(dot / (pn * rn) / tau);
            }
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            Ok(logits.into_iter().map(|l| l - lse).collect())
        })
        .collect()
}

/// Score of every candidate: sum over levels of the log-probability of its token.
pub fn score_candidates(log_probs: &[Vec<f64>], candidates: &[(u32, SemanticId)]) -> Result<Vec<f64>> {
    candidates
        .iter()
        .map(|(item, sid)| {
            if sid.levels() != log_probs.len() {
                return Err(Error::DimensionMismatch {
                    expected: log_probs.len(),
                    got: sid.levels(),
                });
            }
            sid.tokens()
                .iter()
                .zip(log_probs)
                .map(|(&t, lp)| {
                    lp.get(t).copied().ok_or(Error::IndexOutOfRange {
                        what: "token of candidate item",
                        index: t,
                        size: lp.len(),
                    })
                })
                .sum::<Result<f64>>()
                .map_err(|e| match e {
                    Error::IndexOutOfRange { what, index, size } => Error::InvalidArgument(format!(
                        "item {item}: {what} {index} out of range {size}"
                    )),
                    other => other,
                })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub business: u16,
    pub truth: u32,
    pub truth_score: f64,
    /// Best first; ties by ascending item id.
    pub top: Vec<(u32, f64)>,
}

impl RankingResult {
    /// The truth counts as a hit when its tie block reaches into the top `k`.
    pub fn is_hit(&self, k: usize) -> bool {
        let k = k.min(self.top.len());
        k > 0 && self.truth_score >= self.top[k - 1].1
    }
}

/// Ranks all candidates and keeps the top `k`.
pub fn rank_items(
    pred: &[Vec<f64>],
    candidates: &[(u32, SemanticId)],
    tables: &[ndarray::Array2<f64>],
    tau: f64,
    k: usize,
    business: u16,
    truth: u32,
) -> Result<RankingResult> {
    if candidates.is_empty() {
        return Err(invalid("empty candidate set"));
    }
    if k == 0 || k > candidates.len() {
        return Err(invalid(format!("k = {k} must lie in 1..={}", candidates.len())));
    }
    let lp = level_log_probs(pred, tables, tau)?;
    let scores = score_candidates(&lp, candidates)?;
    let truth_score = candidates
        .iter()
        .position(|(i, _)| *i == truth)
        .map(|p| scores[p])
        .ok_or_else(|| invalid(format!("truth item {truth} is not a candidate")))?;
    let cmp = |&a: &usize, &b: &usize| {
        scores[b]
            .total_cmp(&scores[a])
            .then(candidates[a].0.cmp(&candidates[b].0))
    };
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, cmp);
        order.truncate(k);
    }
    order.sort_by(cmp);
    let top = order.iter().map(|&i| (candidates[i].0, scores[i])).collect();
    Ok(RankingResult {
        business,
        truth,
        truth_score,
        top,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitRates {
    pub k: usize,
    /// `None` for businesses without test cases.
    pub per_business: Vec<Option<f64>>,
    pub cases: Vec<usize>,
    /// Mean over all cases.
    pub overall: f64,
}

pub fn hit_rate_at_k(results: &[RankingResult], k: usize, businesses: usize) -> Result<HitRates> {
    if k == 0 {
        return Err(invalid("k must be at least 1"));
    }
    if results.is_empty() {
        return Err(invalid("no ranking results"));
    }
    let mut hits = vec![0usize; businesses];
    let mut cases = vec![0usize; businesses];
    let mut total_hits = 0usize;
    for r in results {
        let b = r.business as usize;
        if b >= businesses {
            return Err(Error::UnknownBusiness(r.business));
        }
        cases[b] += 1;
        if r.is_hit(k) {
            hits[b] += 1;
            total_hits += 1;
        }
    }
    Ok(HitRates {
        k,
        per_business: hits
            .iter()
            .zip(&cases)
            .map(|(&h, &c)| (c > 0).then(|| h as f64 / c as f64))
            .collect(),
        cases,
        overall: total_hits as f64 / results.len() as f64,
    })
}

/// Which item representation to analyse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeparationMode {
    /// Business-conditioned codec output.
    Bid,
    /// Mean of the item's token embeddings.
    SumPool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Separation {
    /// 2-D PCA coordinates, one per input row.
    pub coords: Vec<[f64; 2]>,
    /// Mean silhouette over all points.
    pub silhouette: f64,
    /// Mean silhouette of each business's points.
    pub per_business: Vec<f64>,
    /// Variance captured by each returned axis.
    pub explained: [f64; 2],
}

/// Top-two principal axes of the centred data. Axis signs are fixed so the
/// entry of largest magnitude is positive. Missing rank yields zero axes.
pub fn pca2(reps: &[Vec<f64>]) -> Result<(Vec<[f64; 2]>, [f64; 2])> {
    let n = reps.len();
    if n == 0 {
        return Err(invalid("no points"));
    }
    let d = reps[0].len();
    if reps.iter().any(|r| r.len() != d) {
        return Err(invalid("points have different dimensions"));
    }
    let mut mean = vec![0.0; d];
    for r in reps {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x / n as f64;
        }
    }
    let x = DMatrix::from_fn(n, d, |i, j| reps[i][j] - mean[j]);
    let cov = x.transpose() * &x / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let mut axes = Vec::new();
    let mut explained = [0.0; 2];
    for (slot, &i) in order.iter().take(2).enumerate() {
        let lambda = eig.eigenvalues[i];
        if !(lambda > 1e-12 * top.max(f64::MIN_POSITIVE)) {
            log::warn!("covariance has rank {slot}; remaining axes are zero");
            break;
        }
        let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        let pivot = v
            .iter()
            .copied()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
            .map(|(_, x)| x)
            .unwrap_or(1.0);
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        explained[slot] = lambda;
        axes.push(v);
    }
    if d < 2 {
        log::warn!("representations have one dimension; second axis is zero");
    }
    let coords = (0..n)
        .map(|i| {
            let mut c = [0.0; 2];
            for (slot, v) in axes.iter().enumerate() {
                c[slot] = (0..d).map(|j| x[(i, j)] * v[j]).sum();
            }
            c
        })
        .collect();
    Ok((coords, explained))
}

/// Mean silhouette with Euclidean distance; singleton clusters score zero.
pub fn silhouette(reps: &[Vec<f64>], labels: &[u16]) -> Result<(f64, Vec<f64>)> {
    let n = reps.len();
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: labels.len(),
        });
    }
    let k = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l as usize] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(invalid("silhouette needs at least two labelled groups"));
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut s = vec![0.0; n];
    let mut degenerate = true;
    for i in 0..n {
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if i != j {
                sums[labels[j] as usize] += dist(&reps[i], &reps[j]);
            }
        }
        let own = labels[i] as usize;
        if sizes[own] <= 1 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            degenerate = false;
            s[i] = (b - a) / m;
        }
    }
    if degenerate {
        return Err(Error::Degenerate(
            "all representations coincide; silhouette is undefined".into(),
        ));
    }
    let mut per = vec![0.0; k];
    for (i, &l) in labels.iter().enumerate() {
        per[l as usize] += s[i] / sizes[l as usize] as f64;
    }
    Ok((s.iter().sum::<f64>() / n as f64, per))
}

pub fn embedding_separation(reps: &[Vec<f64>], labels: &[u16]) -> Result<Separation> {
    let k = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l as usize] += 1;
    }
    let present: Vec<usize> = sizes.iter().copied().filter(|&s| s > 0).collect();
    if present.len() < 2 || present.iter().any(|&s| s < 3) {
        return Err(invalid("need at least two businesses with three points each"));
    }
    let (silhouette, per_business) = silhouette(reps, labels)?;
    let (coords, explained) = pca2(reps)?;
    Ok(Separation {
        coords,
        silhouette,
        per_business,
        explained,
    })
}

/// Letter name of a business id: 0 → A, 1 → B, …
pub fn business_name(b: u16) -> String {
    if b < 26 {
        ((b'A' + b as u8) as char).to_string()
    } else {
        format!("b{b}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub variant: String,
    pub business: String,
    pub metric: String,
    pub value: f64,
}

pub const METRICS_HEADER: &str = "run_id,variant,business,metric,value";

/// Rows for one run's hit rates: one per business with cases plus `all`.
pub fn hit_rate_rows(run_id: &str, variant: &str, hr: &HitRates) -> Vec<MetricRow> {
    let metric = format!("hr@{}", hr.k);
    let mut rows: Vec<MetricRow> = hr
        .per_business
        .iter()
        .enumerate()
        .filter_map(|(b, v)| {
            v.map(|value| MetricRow {
                run_id: run_id.into(),
                variant: variant.into(),
                business: business_name(b as u16),
                metric: metric.clone(),
                value,
            })
        })
        .collect();
    rows.push(MetricRow {
        run_id: run_id.into(),
        variant: variant.into(),
        business: "all".into(),
        metric,
        value: hr.overall,
    });
    rows
}

pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[MetricRow]) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.run_id, r.variant, r.business, r.metric, r.value)?;
    }
    Ok(())
}

pub fn save_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, rows)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn write_coords_csv<W: Write>(mut w: W, items: &[u32], labels: &[u16], coords: &[[f64; 2]]) -> Result<()> {
    writeln!(w, "item,business,x,y")?;
    for ((i, b), c) in items.iter().zip(labels).zip(coords) {
        writeln!(w, "{i},{},{},{}", business_name(*b), c[0], c[1])?;
    }
    Ok(())
}
