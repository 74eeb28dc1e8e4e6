//! Central finite-difference checks of analytic parameter gradients.

use crate::nn::params::{Gradients, ParamId, ParamStore};

/// Worst relative error found for one parameter tensor.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    /// `max|analytic − numeric| / max(max|numeric|, floor)` over the tensor,
    /// where `floor` is `1e-3` times the largest numeric gradient of the whole
    /// check (and at least `1e-6`). Tensors far below that scale sit under
    /// the finite-difference resolution.
    pub relative_error: f64,
    pub max_abs_grad: f64,
}

/// Compares `analytic` against central differences of `loss` for every
/// parameter whose name starts with one of `prefixes` (all when empty).
///
/// `loss` must be a deterministic function of the store.
pub fn check_gradients(
    store: &ParamStore,
    analytic: &Gradients,
    prefixes: &[&str],
    step: f64,
    loss: impl Fn(&ParamStore) -> f64,
) -> Vec<GradCheck> {
    let ids: Vec<ParamId> = store
        .ids()
        .filter(|&id| prefixes.is_empty() || prefixes.iter().any(|p| store.name(id).starts_with(p)))
        .collect();
    let mut work = store.clone();
    let raw: Vec<(ParamId, f64, f64)> = ids
        .into_iter()
        .map(|id| {
            let len = store.get(id).data().len();
            let mut numeric = vec![0.0; len];
            for (i, n) in numeric.iter_mut().enumerate() {
                let orig = store.get(id).data()[i];
                work.get_mut(id).data_mut()[i] = orig + step;
                let up = loss(&work);
                work.get_mut(id).data_mut()[i] = orig - step;
                let down = loss(&work);
                work.get_mut(id).data_mut()[i] = orig;
                *n = (up - down) / (2.0 * step);
            }
            let zeros = vec![0.0; len];
            let a = analytic.get(id).map_or(&zeros[..], |m| m.data());
            let max_num = numeric.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let max_diff = a
                .iter()
                .zip(&numeric)
                .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            (id, max_diff, max_num)
        })
        .collect();
    let scale = raw.iter().fold(0.0f64, |m, r| m.max(r.2));
    let floor = (1e-3 * scale).max(1e-6);
    raw.into_iter()
        .map(|(id, max_diff, max_num)| GradCheck {
            name: store.name(id).to_string(),
            relative_error: max_diff / max_num.max(floor),
            max_abs_grad: max_num,
        })
        .collect()
}
