//! Finite-difference gradient oracles.

use crate::error::Result;
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn nudge(store: &mut ParamStore, id: ParamId, k: usize, value: f64) {
    store.value_mut(id).data_mut()[k] = value;
}

/// Central differences `(f(θ+h) − f(θ−h)) / 2h` for every scalar of every
/// trainable parameter. `store` is restored before returning.
pub fn finite_diff_grad<F>(mut f: F, store: &mut ParamStore, h: f64) -> Result<Gradients>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut out = Gradients(vec![None; store.len()]);
    for id in store.trainable_ids() {
        let n = store.value(id).numel();
        let mut g = Tensor::zeros(store.value(id).shape());
        for k in 0..n {
            let orig = store.value(id).data()[k];
            nudge(store, id, k, orig + h);
            let plus = f(store);
            nudge(store, id, k, orig - h);
            let minus = f(store);
            nudge(store, id, k, orig);
            g.data_mut()[k] = (plus? - minus?) / (2.0 * h);
        }
        out.0[id.0] = Some(g);
    }
    Ok(out)
}

/// One evaluation of a piecewise-smooth objective: its value and a
/// signature that identifies the smooth piece it was evaluated on
/// (see [`crate::tape::Tape::abs_signature`]).
pub struct Probe {
    pub value: f64,
    pub piece: Vec<i8>,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(parameter name, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
    /// Entries whose central stencil straddled an L1 kink and were
    /// re-evaluated with a one-sided stencil.
    pub one_sided: usize,
    /// Entries where every stencil straddled a kink (not compared).
    pub skipped: usize,
}

/// Compares `analytic` against finite differences for every trainable scalar.
///
/// Where the central stencil `θ ± h` crosses a kink of an absolute-value
/// term (the piece signature changes), the derivative is taken with the
/// second-order one-sided stencil on the side that stays on the same piece,
/// `∓(3f(θ) − 4f(θ∓h) + f(θ∓2h)) / 2h`. The reverse-mode gradient is the
/// derivative of that piece, so this compares like with like.
pub fn check_gradients<F>(
    mut f: F,
    analytic: &Gradients,
    store: &mut ParamStore,
    h: f64,
    floor: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<Probe>,
{
    let base = f(store)?;
    let mut report = GradCheckReport::default();
    for id in store.trainable_ids() {
        let name = store.get(id).name.clone();
        let n = store.value(id).numel();
        let zero = Tensor::zeros(store.value(id).shape());
        let grad = analytic.get(id).unwrap_or(&zero).clone();
        for k in 0..n {
            let orig = store.value(id).data()[k];
            let mut eval = |store: &mut ParamStore, offset: f64| -> Result<Probe> {
                nudge(store, id, k, orig + offset);
                let p = f(store);
                nudge(store, id, k, orig);
                p
            };
            let plus = eval(store, h)?;
            let minus = eval(store, -h)?;
            let numeric = if plus.piece == base.piece && minus.piece == base.piece {
                Some((plus.value - minus.value) / (2.0 * h))
            } else {
                let plus2 = eval(store, 2.0 * h)?;
                if plus.piece == base.piece && plus2.piece == base.piece {
                    report.one_sided += 1;
                    Some((-3.0 * base.value + 4.0 * plus.value - plus2.value) / (2.0 * h))
                } else {
                    let minus2 = eval(store, -2.0 * h)?;
                    if minus.piece == base.piece && minus2.piece == base.piece {
                        report.one_sided += 1;
                        Some((3.0 * base.value - 4.0 * minus.value + minus2.value) / (2.0 * h))
                    } else {
                        None
                    }
                }
            };
            let Some(numeric) = numeric else {
                report.skipped += 1;
                continue;
            };
            let a = grad.data()[k];
            let err = relative_error(a, numeric, floor);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), k, a, numeric));
            }
        }
    }
    Ok(report)
}
