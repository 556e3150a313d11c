use mbgr_core::eval::{
    embedding_separation, hit_rate_at_k, hit_rate_rows, pca2, rank_items, silhouette, write_coords_csv,
    write_metrics_csv, RankingResult,
};
use mbgr_core::{Error, SemanticId};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

struct Case {
    pred: Vec<Vec<f64>>,
    tables: Vec<Array2<f64>>,
    candidates: Vec<(u32, SemanticId)>,
}

fn case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (levels, vocab, d_t) = (2, 8, 4);
    Case {
        pred: (0..levels)
            .map(|_| (0..d_t).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect(),
        tables: (0..levels).map(|_| random(vocab, d_t, &mut rng)).collect(),
        candidates: (0..40u32)
            .map(|i| (i * 3 + 1, SemanticId(vec![rng.random_range(0..vocab), rng.random_range(0..vocab)])))
            .collect(),
    }
}

#[test]
fn top_list_is_sorted_with_id_tie_break() {
    let c = case(0);
    let r = rank_items(&c.pred, &c.candidates, &c.tables, 0.07, 40, 0, 4).unwrap();
    assert_eq!(r.top.len(), 40);
    for w in r.top.windows(2) {
        assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
    }
    let short = rank_items(&c.pred, &c.candidates, &c.tables, 0.07, 10, 0, 4).unwrap();
    assert_eq!(short.top, r.top[..10]);
}

#[test]
fn colliding_items_tie_and_still_count() {
    let sid = SemanticId(vec![1, 1]);
    let tables = vec![Array2::eye(3), Array2::eye(3)];
    let pred = vec![vec![0.0, 1.0, 0.0], vec![0.0, 1.0, 0.0]];
    let candidates = vec![(5, sid.clone()), (2, sid.clone()), (9, SemanticId(vec![0, 0]))];
    let r = rank_items(&pred, &candidates, &tables, 1.0, 1, 0, 5).unwrap();
    assert_eq!(r.top[0].0, 2);
    assert!(r.is_hit(1));
}

#[test]
fn ranking_rejects_bad_requests() {
    let c = case(1);
    assert!(rank_items(&c.pred, &c.candidates, &c.tables, 0.07, 0, 0, 4).is_err());
    assert!(rank_items(&c.pred, &c.candidates, &c.tables, 0.07, 41, 0, 4).is_err());
    assert!(rank_items(&c.pred, &c.candidates, &c.tables, 0.07, 5, 0, 5).is_err());
    assert!(rank_items(&c.pred, &[], &c.tables, 0.07, 1, 0, 4).is_err());
}

#[test]
fn overall_is_a_case_mean() {
    let hit = |b: u16| RankingResult {
        business: b,
        truth: 1,
        truth_score: 0.0,
        top: vec![(1, 0.0)],
    };
    let miss = |b: u16| RankingResult {
        business: b,
        truth: 1,
        truth_score: -1.0,
        top: vec![(2, 0.0)],
    };
    let results = vec![hit(0), hit(0), hit(0), miss(1)];
    let hr = hit_rate_at_k(&results, 1, 3).unwrap();
    assert_eq!(hr.per_business, vec![Some(1.0), Some(0.0), None]);
    assert_eq!(hr.overall, 0.75);
    assert_eq!(hr.cases, vec![3, 1, 0]);

    let mut csv = Vec::new();
    write_metrics_csv(&mut csv, &hit_rate_rows("abc-s0", "full", &hr)).unwrap();
    assert_eq!(
        String::from_utf8(csv).unwrap(),
        "run_id,variant,business,metric,value\n\
         abc-s0,full,A,hr@1,1\n\
         abc-s0,full,B,hr@1,0\n\
         abc-s0,full,all,hr@1,0.75\n"
    );
}

#[test]
fn tight_clusters_have_silhouette_near_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut reps = Vec::new();
    let mut labels = Vec::new();
    for (b, centre) in [(0u16, 0.0), (1, 10.0)] {
        for _ in 0..5 {
            reps.push(vec![centre + rng.random_range(-0.01..0.01), centre + rng.random_range(-0.01..0.01)]);
            labels.push(b);
        }
    }
    let sep = embedding_separation(&reps, &labels).unwrap();
    assert!(sep.silhouette > 0.99);
    assert!(sep.per_business.iter().all(|&s| s > 0.99));
    assert!(sep.explained[0] > 0.0 && sep.explained[1] >= 0.0);

    let mut csv = Vec::new();
    let items: Vec<u32> = (0..10).collect();
    write_coords_csv(&mut csv, &items, &labels, &sep.coords).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("item,business,x,y\n0,A,"));
    assert_eq!(text.lines().count(), 11);
}

#[test]
fn identical_points_are_degenerate() {
    let reps = vec![vec![1.0, 2.0]; 6];
    let labels = [0, 0, 0, 1, 1, 1];
    assert!(matches!(silhouette(&reps, &labels), Err(Error::Degenerate(_))));
    assert!(embedding_separation(&reps[..4], &labels[..4]).is_err());
}

fn axes_agree(a: &[[f64; 2]], b: &[[f64; 2]]) -> bool {
    (0..2).all(|axis| {
        [1.0, -1.0]
            .iter()
            .any(|s| a.iter().zip(b).all(|(p, q)| (p[axis] - s * q[axis]).abs() < 1e-9))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ranking_ignores_vector_norms(seed in any::<u64>()) {
        let c = case(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let scaled_pred: Vec<Vec<f64>> = c
            .pred
            .iter()
            .map(|p| {
                let s = rng.random_range(0.01..100.0);
                p.iter().map(|x| x * s).collect()
            })
            .collect();
        let scaled_tables: Vec<Array2<f64>> = c
            .tables
            .iter()
            .map(|t| {
                let mut t = t.clone();
                for mut row in t.rows_mut() {
                    row *= rng.random_range(0.01..100.0);
                }
                t
            })
            .collect();
        let a = rank_items(&c.pred, &c.candidates, &c.tables, 0.07, 10, 0, 4).unwrap();
        let b = rank_items(&scaled_pred, &c.candidates, &scaled_tables, 0.07, 10, 0, 4).unwrap();
        let ids = |r: &RankingResult| r.top.iter().map(|x| x.0).collect::<Vec<_>>();
        prop_assert_eq!(ids(&a), ids(&b));
        prop_assert!((a.truth_score - b.truth_score).abs() < 1e-9);
    }

    #[test]
    fn hit_rate_grows_with_k(seed in any::<u64>()) {
        let mut results = Vec::new();
        for i in 0..30u64 {
            let c = case(seed.wrapping_add(i));
            let truth = c.candidates[(i as usize * 7) % 40].0;
            results.push(rank_items(&c.pred, &c.candidates, &c.tables, 0.07, 40, (i % 3) as u16, truth).unwrap());
        }
        let mut prev = 0.0;
        for k in 1..=40 {
            let hr = hit_rate_at_k(&results, k, 3).unwrap();
            prop_assert!(hr.overall >= prev);
            prev = hr.overall;
        }
        prop_assert_eq!(prev, 1.0);
    }

    #[test]
    fn pca_ignores_point_order(seed in any::<u64>(), shift in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reps: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![rng.random_range(-1.0..1.0) * 3.0, rng.random_range(-1.0..1.0), (i % 2) as f64, rng.random_range(-1.0..1.0) * 0.5])
            .collect();
        let mut rotated = reps.clone();
        rotated.rotate_left(shift);
        let (a, ea) = pca2(&reps).unwrap();
        let (b, eb) = pca2(&rotated).unwrap();
        let mut b_back = b.clone();
        b_back.rotate_right(shift);
        prop_assert!((ea[0] - eb[0]).abs() < 1e-9 && (ea[1] - eb[1]).abs() < 1e-9);
        prop_assert!(axes_agree(&a, &b_back));
    }
}
