use super::params::{ParamId, ParamStore};
use super::tape::{Mode, Tape, Var};
use crate::error::Result;

/// Denominator floor for [`relative_error`]; below it the comparison is
/// effectively absolute.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat coordinate of the worst disagreement.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Compares reverse-mode gradients of `f` against central finite differences
/// over every coordinate of the listed parameters. `f` is evaluated on
/// evaluation-mode tapes, so dropout is off.
pub fn grad_check<F>(store: &ParamStore, ids: &[ParamId], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(store, Mode::Eval);
        let loss = f(&mut tape)?;
        tape.backward(loss)?
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(s, Mode::Eval);
        let loss = f(&mut tape)?;
        Ok(tape.scalar(loss))
    };

    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for &id in ids {
        let grad = analytic.get_or_zero(id, store);
        let len = store.get(id).len();
        for k in 0..len {
            let orig = store.get(id).as_slice().expect("standard layout")[k];
            work.get_mut(id).as_slice_mut().expect("standard layout")[k] = orig + eps;
            let up = eval(&work)?;
            work.get_mut(id).as_slice_mut().expect("standard layout")[k] = orig - eps;
            let down = eval(&work)?;
            work.get_mut(id).as_slice_mut().expect("standard layout")[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = relative_error(grad.as_slice().expect("standard layout")[k], numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((store.name(id).to_string(), k));
                }
            }
        }
    }
    Ok(report)
}
