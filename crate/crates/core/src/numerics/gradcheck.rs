//! Central finite-difference checks for tape gradients.

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Default step for central differences.
pub const FD_STEP: f64 = 1e-4;

/// Entries whose analytic and numeric magnitudes are both below this are
/// compared on an absolute scale. Central differences at [`FD_STEP`] carry
/// rounding noise near `ε |f| / h`, about 1e-10 for outputs of order 10.
pub const REL_FLOOR: f64 = 1e-5;

/// Relative discrepancy between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Maximum relative error over every entry of every input.
///
/// `f` must build a scalar from the given input leaves.
pub fn check_inputs<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out)[0])
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(|g| g.to_vec()).unwrap_or_default();
        for i in 0..work[which].numel() {
            let orig = work[which].data()[i];
            work[which].data_mut()[i] = orig + FD_STEP;
            let up = eval(&work)?;
            work[which].data_mut()[i] = orig - FD_STEP;
            let down = eval(&work)?;
            work[which].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.get(i).copied().unwrap_or(0.0);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

/// Maximum relative error over every scalar of every parameter in `store`.
pub fn check_params<F>(store: &ParamStore, f: F) -> Result<f64>
where
    F: for<'p> Fn(&mut Tape<'p>, &'p ParamStore) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let out = f(&mut tape, store)?;
        tape.gradients(out, store)?
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, s)?;
        Ok(tape.value(out)[0])
    };
    let mut work = store.clone();
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        let g = analytic.get(id).unwrap().to_vec();
        for (i, &a) in g.iter().enumerate() {
            let orig = work.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = orig + FD_STEP;
            let up = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig - FD_STEP;
            let down = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig;
            worst = worst.max(relative_error(a, (up - down) / (2.0 * FD_STEP)));
        }
    }
    Ok(worst)
}
