use super::graph::{Graph, Var};
use super::param::{ParamId, ParamStore};
use super::rng::Rng;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = f(&mut g, store)?;
    let out = g.value(v).data()[0];
    if !out.is_finite() {
        return Err(Error::Numeric(format!("loss {out}")));
    }
    Ok(out)
}

/// Compares reverse-mode gradients against central differences.
///
/// Coordinates are drawn round-robin over the parameters in `ids` (all
/// parameters when empty), a uniformly random entry each time. The relative
/// error is `|analytic - numeric| / (|numeric| + 1e-8)`.
pub fn grad_check<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    f: F,
    step: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&step) {
        return Err(Error::Parameter(format!("finite-difference step {step} outside [1e-6, 1e-4]")));
    }
    let ids: Vec<ParamId> = if ids.is_empty() { store.ids().collect() } else { ids.to_vec() };
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let analytic = g.backward(loss)?.params(store.len());

    let mut rng = Rng::new(seed);
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, worst: None };
    for s in 0..samples {
        let id = ids[s % ids.len()];
        let n = store.value(id).len();
        let coord = rng.below(n);
        let orig = store.value(id).data()[coord];
        store.get_mut(id).value.data_mut()[coord] = orig + step;
        let plus = eval(store, &f);
        store.get_mut(id).value.data_mut()[coord] = orig - step;
        let minus = eval(store, &f);
        store.get_mut(id).value.data_mut()[coord] = orig;
        let numeric = (plus? - minus?) / (2.0 * step);
        let a = analytic[id.0].as_ref().map_or(0.0, |t| t.data()[coord]);
        let rel = (a - numeric).abs() / (numeric.abs() + 1e-8);
        report.checked += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((store.get(id).name.clone(), coord));
        }
    }
    Ok(report)
}
