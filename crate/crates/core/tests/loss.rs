use mbgr_core::diffcore::{grad_check, Graph, ParamStore};
use mbgr_core::ldr::route_labels;
use mbgr_core::loss::{infonce, time_decay, total_loss, Supervision};
use mbgr_core::Interaction;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn sup(row: usize, business: u16, tokens: Vec<usize>, time_weight: f64) -> Supervision {
    Supervision {
        row,
        business,
        tokens,
        time_weight,
    }
}

#[test]
fn uniform_logits_give_log_vocab() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for vocab in [2usize, 7, 16, 64] {
        // Codewords live in the first three axes, the prediction on the fourth.
        let mut table = random(vocab, 4, &mut rng);
        table.column_mut(3).fill(0.0);
        let mut g = Graph::new();
        let t = g.constant(table).unwrap();
        let pred = g.constant(ndarray::array![[0.0, 0.0, 0.0, 2.5]]).unwrap();
        let s = [sup(0, 0, vec![vocab / 2], 1.0)];
        let (out, _, _) = infonce(&mut g, pred, &s, &[t], &[1.0], 0.07).unwrap();
        assert!((g.scalar(out.loss) - (vocab as f64).ln()).abs() < 1e-9);
    }
}

#[test]
fn decay_at_twenty_days() {
    let w = time_decay(20 * 86_400, 0, 0.05, 86_400.0).unwrap();
    assert!((w - (-1.0f64).exp()).abs() < 1e-12);
}

/// Dense `[L*B, width]` predictions with supervision only at routed entries.
struct Dense {
    pred: Array2<f64>,
    tables: Vec<Array2<f64>>,
    sup: Vec<Supervision>,
    masked: Vec<usize>,
}

fn dense(seed: u64, businesses: usize) -> Dense {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (levels, vocab, d_t) = (2, 6, 3);
    let events: Vec<Interaction> = (0..12)
        .map(|i| Interaction {
            item: rng.random_range(0..20),
            business: rng.random_range(0..businesses) as u16,
            ts: i * 86_400,
        })
        .collect();
    let tokens: Vec<Vec<usize>> = events
        .iter()
        .map(|_| (0..levels).map(|_| rng.random_range(0..vocab)).collect())
        .collect();
    let routed = route_labels(&events, businesses).unwrap();
    let last = events.last().unwrap().ts;
    let mut sup = Vec::new();
    let mut masked = Vec::new();
    for t in 0..events.len() {
        for k in 0..businesses {
            let row = t * businesses + k;
            match routed.get(t, k) {
                Some(j) => sup.push(Supervision {
                    row,
                    business: k as u16,
                    tokens: tokens[j].clone(),
                    time_weight: time_decay(last, events[j].ts, 0.05, 86_400.0).unwrap(),
                }),
                None => masked.push(row),
            }
        }
    }
    Dense {
        pred: random(events.len() * businesses, levels * d_t, &mut rng),
        tables: (0..levels).map(|_| random(vocab, d_t, &mut rng)).collect(),
        sup,
        masked,
    }
}

fn evaluate(d: &Dense, pred: &Array2<f64>, weights: &[f64], lambda: f64) -> (f64, Vec<f64>, f64) {
    let mut g = Graph::new();
    let p = g.input("pred", pred.clone()).unwrap();
    let tables: Vec<_> = d.tables.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
    let (nce, per, counts) = infonce(&mut g, p, &d.sup, &tables, weights, 0.07).unwrap();
    let target = g.constant(Array2::zeros(pred.raw_dim())).unwrap();
    let recon = g.sq_err(p, target).unwrap();
    let (total, _) = total_loss(&mut g, nce, per.clone(), counts, Some(recon), lambda).unwrap();
    (g.scalar(total), per, g.scalar(recon))
}

#[test]
fn masked_predictions_do_not_matter() {
    let d = dense(1, 3);
    assert!(!d.masked.is_empty());
    let weights = [0.9, 1.5, 1.3];
    let base = evaluate(&d, &d.pred, &weights, 0.0).0;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut perturbed = d.pred.clone();
    for &r in &d.masked {
        for v in perturbed.row_mut(r) {
            *v += rng.random_range(-5.0..5.0);
        }
    }
    assert_eq!(evaluate(&d, &perturbed, &weights, 0.0).0.to_bits(), base.to_bits());

    // And the gradient at masked rows is exactly zero.
    let mut g = Graph::new();
    let p = g.input("pred", d.pred.clone()).unwrap();
    let tables: Vec<_> = d.tables.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
    let (nce, _, _) = infonce(&mut g, p, &d.sup, &tables, &weights, 0.07).unwrap();
    let grads = g.backward(nce.loss).unwrap();
    let gp = grads.wrt(p).unwrap();
    for &r in &d.masked {
        assert!(gp.row(r).iter().all(|&x| x == 0.0));
    }
}

#[test]
fn business_weight_is_linear() {
    let d = dense(2, 3);
    let w = [0.9, 1.5, 1.3];
    let (_, base, _) = evaluate(&d, &d.pred, &w, 0.1);
    for b in 0..3 {
        let mut doubled = w;
        doubled[b] *= 2.0;
        let (_, per, _) = evaluate(&d, &d.pred, &doubled, 0.1);
        for k in 0..3 {
            let want = if k == b { 2.0 * base[k] } else { base[k] };
            assert_eq!(per[k].to_bits(), want.to_bits(), "business {k}");
        }
    }
}

#[test]
fn total_is_sum_of_parts() {
    let d = dense(3, 4);
    let w = [0.9, 1.5, 1.3, 1.0];
    let (total0, per, _) = evaluate(&d, &d.pred, &w, 0.0);
    let mut g = Graph::new();
    let p = g.input("pred", d.pred.clone()).unwrap();
    let tables: Vec<_> = d.tables.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
    let (nce, _, _) = infonce(&mut g, p, &d.sup, &tables, &w, 0.07).unwrap();
    assert_eq!(total0.to_bits(), g.scalar(nce.loss).to_bits());

    let (total, per1, recon) = evaluate(&d, &d.pred, &w, 0.3);
    assert_eq!(per, per1);
    let parts: f64 = per.iter().sum::<f64>() + 0.3 * recon;
    assert!((total - parts).abs() < 1e-9 * total.abs());
}

/// Plain per-level softmax cross-entropy, averaged over pairs.
fn reference_ce(pred: &Array2<f64>, tables: &[Array2<f64>], sup: &[Supervision], tau: f64) -> f64 {
    let d_t = tables[0].ncols();
    let mut total = 0.0;
    for s in sup {
        for (level, table) in tables.iter().enumerate() {
            let p: Vec<f64> = (0..d_t).map(|c| pred[[s.row, level * d_t + c]]).collect();
            let pn = p.iter().map(|x| x * x).sum::<f64>().sqrt();
            let logits: Vec<f64> = table
                .rows()
                .into_iter()
                .map(|r| {
                    let dot: f64 = r.iter().zip(&p).map(|(a, b)| a * b).sum();
                    dot / (pn * r.dot(&r).sqrt()) / tau
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            total += lse - logits[s.tokens[level]];
        }
    }
    total / sup.len() as f64
}

#[test]
fn reduces_to_plain_cross_entropy() {
    let mut d = dense(4, 1);
    for s in &mut d.sup {
        s.time_weight = 1.0;
    }
    let got = evaluate(&d, &d.pred, &[1.0], 0.0).0;
    let want = reference_ce(&d.pred, &d.tables, &d.sup, 0.07);
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
}

#[test]
fn gradients_match_finite_differences() {
    let d = dense(5, 3);
    let mut store = ParamStore::new();
    let pred = store.add("pred", d.pred.clone()).unwrap();
    let tables: Vec<_> = d
        .tables
        .iter()
        .enumerate()
        .map(|(l, t)| store.add(format!("table{l}"), t.clone()).unwrap())
        .collect();
    let mut ids = tables.clone();
    ids.push(pred);
    let report = grad_check(&mut store, &ids, 1e-6, 1e-4, |s, g| {
        let p = g.param(s, pred);
        let tv: Vec<_> = tables.iter().map(|&t| g.param(s, t)).collect();
        let (nce, per, counts) = infonce(g, p, &d.sup, &tv, &[0.9, 1.5, 1.3], 0.07)?;
        let zero = g.constant(Array2::zeros(d.pred.raw_dim()))?;
        let recon = g.sq_err(p, zero)?;
        Ok(total_loss(g, nce, per, counts, Some(recon), 0.1)?.0)
    })
    .unwrap();
    assert!(report.pass, "{:?}", report.worst());
}

proptest! {
    #[test]
    fn decay_is_strictly_monotone(a in 0i64..10_000_000, gap in 1i64..10_000_000, alpha in 0.001f64..1.0) {
        let end = 20_000_000;
        let near = time_decay(end, end - a, alpha, 86_400.0).unwrap();
        let far = time_decay(end, end - a - gap, alpha, 86_400.0).unwrap();
        prop_assert!(far < near);
        prop_assert!(near <= 1.0 && far > 0.0);
    }
}
