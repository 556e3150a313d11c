use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::{invalid, Error, Result};

/// Worst relative error observed for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    /// Flat index of the worst entry.
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradientReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

const REL_FLOOR: f64 = 1e-8;

/// Relative error with the denominator floored at `1e-8`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn evaluate<F>(store: &ParamStore, loss_fn: &mut F) -> Result<f64>
where
    F: FnMut(&ParamStore, &mut Graph) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(store, &mut g)?;
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Err(Error::NonFinite {
            op: "grad_check",
            node: "loss".into(),
        });
    }
    Ok(value)
}

/// Compares reverse-mode gradients with central differences
/// `(f(θ+eps) − f(θ−eps)) / 2eps` for every entry of the listed parameters.
///
/// `loss_fn` must be deterministic and build its graph from the store it is
/// handed. The store is restored entry by entry, so it is unchanged on return.
pub fn grad_check<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    eps: f64,
    tolerance: f64,
    mut loss_fn: F,
) -> Result<GradientReport>
where
    F: FnMut(&ParamStore, &mut Graph) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(invalid(format!("grad_check eps must be positive, got {eps}")));
    }
    if ids.is_empty() {
        return Ok(GradientReport {
            params: Vec::new(),
            max_rel_err: 0.0,
            tolerance,
            pass: true,
        });
    }

    let mut g = Graph::new();
    let loss = loss_fn(store, &mut g)?;
    if !g.scalar(loss).is_finite() {
        return Err(Error::NonFinite {
            op: "grad_check",
            node: "loss".into(),
        });
    }
    let grads = g.backward(loss)?;
    let analytic: Vec<Option<super::Tensor>> =
        ids.iter().map(|&id| grads.param(id).cloned()).collect();
    drop(g);

    let mut params = Vec::with_capacity(ids.len());
    for (&id, analytic) in ids.iter().zip(analytic) {
        let n = store.get(id).len();
        let mut check = ParamCheck {
            name: store.name(id).to_string(),
            max_rel_err: 0.0,
            worst_entry: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for e in 0..n {
            let orig = flat(store, id, e);
            set_flat(store, id, e, orig + eps);
            let plus = evaluate(store, &mut loss_fn);
            set_flat(store, id, e, orig - eps);
            let minus = evaluate(store, &mut loss_fn);
            set_flat(store, id, e, orig);
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = analytic
                .as_ref()
                .map(|t| t.as_slice().expect("standard layout")[e])
                .unwrap_or(0.0);
            let rel = relative_error(a, numeric);
            if rel > check.max_rel_err || e == 0 {
                check.max_rel_err = rel;
                check.worst_entry = e;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        params.push(check);
    }
    let max_rel_err = params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
    Ok(GradientReport {
        params,
        max_rel_err,
        tolerance,
        pass: max_rel_err < tolerance,
    })
}

fn flat(store: &ParamStore, id: ParamId, e: usize) -> f64 {
    let t = store.get(id);
    let c = t.ncols();
    t[[e / c, e % c]]
}

fn set_flat(store: &mut ParamStore, id: ParamId, e: usize, v: f64) {
    let t = store.get_mut(id);
    let c = t.ncols();
    t[[e / c, e % c]] = v;
}
