//! Central finite-difference gradient checking.

use super::{Graph, NumericsError, ParamStore, Var};

/// Denominator floor for the relative error; keeps gradients that are
/// zero up to rounding from dividing by ~0.
pub const REL_ERROR_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares tape gradients of `loss_fn` with central differences of step `h`
/// for every trainable parameter entry.
pub fn check_gradients<E, F>(
    store: &ParamStore<f64>,
    trainable: &[bool],
    h: f64,
    loss_fn: F,
) -> Result<GradCheckReport, E>
where
    E: From<NumericsError>,
    F: Fn(&mut Graph<'_, f64>) -> Result<Var, E>,
{
    let analytic = {
        let mut g = Graph::new(store, trainable);
        let loss = loss_fn(&mut g)?;
        g.backward(loss)?
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64, E> {
        let mut g = Graph::inference(s);
        let loss = loss_fn(&mut g)?;
        Ok(g.value(loss).data()[0])
    };

    let mut work = store.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, entries_checked: 0 };
    for id in store.ids() {
        if !trainable[id.index()] {
            continue;
        }
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[i]);
            let err = relative_error(a, numeric);
            report.entries_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((store.name(id).to_string(), i));
                }
            }
        }
    }
    Ok(report)
}
