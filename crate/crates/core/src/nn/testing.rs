//! Finite-difference gradient oracle used by the test suites.

use super::{Eval, Graph, NnError, ParamId, ParamStore, Tape};

/// A scalar function of the parameters, evaluable on any graph.
pub trait LossFn {
    fn eval<G: Graph>(&self, g: &mut G) -> Result<G::Value, NnError>;
}

/// Worst norm-wise relative error between taped gradients and central
/// finite differences, over the parameters selected by `ids`.
///
/// Each parameter group is compared as one vector:
/// `|a - n| / max(|a|, |n|, floor)`.
pub fn gradient_relative_error<F: LossFn>(
    store: &ParamStore,
    f: &F,
    ids: &[ParamId],
    step: f64,
    max_entries: usize,
) -> Result<f64, NnError> {
    let grads = {
        let mut tape = Tape::new(store);
        let loss = f.eval(&mut tape)?;
        tape.backward(loss)?
    };
    let mut worst: f64 = 0.0;
    let mut work = store.clone();
    for &id in ids {
        let n = store.value(id).len();
        let stride = (n / max_entries.max(1)).max(1);
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for k in (0..n).step_by(stride) {
            let orig = store.value(id).data()[k];
            work.get_mut(id).value.data_mut()[k] = orig + step;
            let up = eval_scalar(&work, f)?;
            work.get_mut(id).value.data_mut()[k] = orig - step;
            let down = eval_scalar(&work, f)?;
            work.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[k]);
            diff2 += (analytic - numeric).powi(2);
            a2 += analytic * analytic;
            n2 += numeric * numeric;
        }
        let denom = a2.sqrt().max(n2.sqrt()).max(1e-10);
        worst = worst.max(diff2.sqrt() / denom);
    }
    Ok(worst)
}

pub fn eval_scalar<F: LossFn>(store: &ParamStore, f: &F) -> Result<f64, NnError> {
    let mut g = Eval::new(store);
    let v = f.eval(&mut g)?;
    Ok(g.value(&v).item())
}
