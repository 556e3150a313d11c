use mbgr_core::diffcore::{grad_check, primitive_set, Graph, ParamId, ParamStore, Segment, Var};
use mbgr_core::{Error, Result};
use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;
const EPS: f64 = 1e-5;
const DRAWS: u64 = 10;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

/// Reduces an arbitrary output to a scalar through a fixed random projection
/// so every output entry contributes to the checked gradient.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let [r, c] = g.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let w = g.constant(random(&mut rng, r, c))?;
    let m = g.mul(out, w)?;
    g.sum(m)
}

/// Runs `build` over `DRAWS` random parameter draws and asserts each passes.
fn check_primitive<F>(name: &str, shapes: &[(usize, usize)], build: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    for draw in 0..DRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 * draw + name.len() as u64);
        let mut store = ParamStore::new();
        let ids: Vec<ParamId> = shapes
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| store.add(format!("{name}.{i}"), random(&mut rng, r, c)).unwrap())
            .collect();
        let report = grad_check(&mut store, &ids, EPS, TOL, |s, g| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
            let out = build(g, &vars)?;
            project(g, out, draw)
        })
        .unwrap();
        assert!(
            report.pass,
            "{name} draw {draw}: max rel err {} ({:?})",
            report.max_rel_err,
            report.worst()
        );
    }
}

#[test]
fn every_primitive_passes_gradient_check() {
    let segs = [Segment { start: 0, len: 3 }, Segment { start: 3, len: 4 }];
    let mut covered = Vec::new();
    let mut run = |name: &'static str, shapes: &[(usize, usize)], f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>| {
        check_primitive(name, shapes, f);
        covered.push(name);
    };
    run("matmul", &[(3, 4), (4, 2)], &|g, v| g.matmul(v[0], v[1]));
    run("matmul_t", &[(3, 4), (5, 4)], &|g, v| g.matmul_t(v[0], v[1]));
    run("concat", &[(3, 2), (3, 3), (3, 1)], &|g, v| g.concat(v));
    run("slice_cols", &[(3, 5)], &|g, v| g.slice_cols(v[0], 1, 4));
    run("add", &[(3, 4), (3, 4)], &|g, v| g.add(v[0], v[1]));
    run("sub", &[(3, 4), (3, 4)], &|g, v| g.sub(v[0], v[1]));
    run("mul", &[(3, 4), (3, 4)], &|g, v| g.mul(v[0], v[1]));
    run("add_row", &[(3, 4), (1, 4)], &|g, v| g.add_row(v[0], v[1]));
    run("mul_col", &[(3, 4), (3, 1)], &|g, v| g.mul_col(v[0], v[1]));
    run("scale", &[(3, 4)], &|g, v| g.scale(v[0], -0.7));
    run("sigmoid", &[(3, 4)], &|g, v| g.sigmoid(v[0]));
    run("relu", &[(3, 4)], &|g, v| g.relu(v[0]));
    run("silu", &[(3, 4)], &|g, v| g.silu(v[0]));
    run("softmax", &[(3, 5)], &|g, v| g.softmax(v[0]));
    run("log_softmax", &[(3, 5)], &|g, v| g.log_softmax(v[0]));
    run("cosine", &[(3, 4), (5, 4)], &|g, v| g.cosine(v[0], v[1]));
    run("gather", &[(5, 3)], &|g, v| g.gather(v[0], &[4, 0, 4, 2]));
    run("pick", &[(3, 5)], &|g, v| g.pick(v[0], &[4, 0, 2]));
    run("sum", &[(3, 4)], &|g, v| g.sum(v[0]));
    run("mean", &[(3, 4)], &|g, v| g.mean(v[0]));
    run("weighted_sum", &[(3, 2)], &|g, v| g.weighted_sum(v[0], &[0.5, -2.0, 1.25]));
    run("sq_err", &[(3, 4), (3, 4)], &|g, v| g.sq_err(v[0], v[1]));
    run("layer_norm", &[(3, 5), (1, 5), (1, 5)], &|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));
    run("causal_attention", &[(7, 4), (7, 4), (7, 4)], &|g, v| {
        g.causal_attention(v[0], v[1], v[2], &segs, 2)
    });
    let mut expected: Vec<&str> = primitive_set().to_vec();
    expected.sort_unstable();
    covered.sort_unstable();
    assert_eq!(covered, expected, "every registered primitive needs a gradient check");
}

#[test]
fn primitive_examples() {
    let mut g = Graph::new();
    let z = g.constant(array![[0.0]]).unwrap();
    let s = g.silu(z).unwrap();
    let sg = g.sigmoid(z).unwrap();
    assert_eq!(g.scalar(s), 0.0);
    assert_eq!(g.scalar(sg), 0.5);

    let v = g.constant(array![[0.3, -1.2, 4.0]]).unwrap();
    let c = g.cosine(v, v).unwrap();
    assert!((g.scalar(c) - 1.0).abs() < 1e-15);
}

#[test]
fn shape_mismatch_names_operands() {
    let mut store = ParamStore::new();
    let a = store.add("enc.w", Array2::zeros((3, 4))).unwrap();
    let mut g = Graph::new();
    let av = g.param(&store, a);
    let b = g.constant(Array2::zeros((5, 2))).unwrap();
    let err = g.matmul(av, b).unwrap_err();
    match &err {
        Error::ShapeMismatch { op, lhs, lhs_shape, rhs_shape, .. } => {
            assert_eq!(*op, "matmul");
            assert!(lhs.contains("enc.w"));
            assert_eq!(*lhs_shape, [3, 4]);
            assert_eq!(*rhs_shape, [5, 2]);
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(err.to_string().contains("enc.w"));
}

#[test]
fn non_finite_outputs_are_rejected() {
    let mut g = Graph::new();
    let x = g.constant(array![[1e308, 1e308]]).unwrap();
    assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite { op: "scale", .. })));
    assert!(g.constant(array![[f64::NAN]]).is_err());
}

#[test]
fn cosine_rejects_zero_rows() {
    let mut g = Graph::new();
    let a = g.input("pred", array![[0.0, 0.0], [1.0, 0.0]]).unwrap();
    let b = g.constant(array![[1.0, 1.0]]).unwrap();
    match g.cosine(a, b) {
        Err(Error::ZeroNorm { operand, row }) => {
            assert!(operand.contains("pred"));
            assert_eq!(row, 0);
        }
        other => panic!("expected zero-norm error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn softmax_is_stable_for_large_logits() {
    let mut g = Graph::new();
    let x = g.constant(array![[1000.0, 1001.0, 999.0]]).unwrap();
    let s = g.softmax(x).unwrap();
    let ls = g.log_softmax(x).unwrap();
    let total: f64 = g.value(s).sum();
    assert!((total - 1.0).abs() < 1e-12);
    assert!(g.value(ls).iter().all(|v| v.is_finite() && *v <= 0.0));
}

#[test]
fn attention_is_causal_within_segments() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let q0 = random(&mut rng, 6, 4);
    let k0 = random(&mut rng, 6, 4);
    let v0 = random(&mut rng, 6, 4);
    let segs = [Segment { start: 0, len: 6 }];
    let run = |k: &Array2<f64>, v: &Array2<f64>| {
        let mut g = Graph::new();
        let (q, k, v) = (
            g.constant(q0.clone()).unwrap(),
            g.constant(k.clone()).unwrap(),
            g.constant(v.clone()).unwrap(),
        );
        let o = g.causal_attention(q, k, v, &segs, 2).unwrap();
        g.value(o).clone()
    };
    let base = run(&k0, &v0);
    let (mut k1, mut v1) = (k0.clone(), v0.clone());
    k1.row_mut(4).fill(9.0);
    v1.row_mut(5).fill(-9.0);
    let moved = run(&k1, &v1);
    for r in 0..4 {
        assert_eq!(base.row(r), moved.row(r));
    }
    // First row attends only to itself.
    assert_eq!(base.row(0), v0.row(0));
}
