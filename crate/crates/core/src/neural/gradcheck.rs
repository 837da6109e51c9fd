//! Central finite-difference checks of reverse-mode gradients.

use super::{Graph, ParamStore, Var};
use crate::error::Result;

/// Step of the central difference quotient.
pub const FD_STEP: f64 = 1e-6;

/// Largest relative error between backprop and central differences over
/// every parameter element in `store`. The denominator is floored at
/// `1e-5 * max(1, largest |gradient|)`: elements that far below the gradient
/// scale sit under the difference quotient's rounding noise and are judged
/// against that scale instead.
///
/// Frozen parameters receive no gradient; unfreeze them to include them.
pub fn max_param_fd_error(
    store: &mut ParamStore,
    build: &dyn Fn(&mut Graph, &ParamStore) -> Result<Var>,
) -> Result<f64> {
    let h = FD_STEP;
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let loss = build(&mut g, store)?;
        Ok(g.value(loss).item())
    };
    store.zero_grad();
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    g.backward(loss, store)?;
    let ids: Vec<_> = store.ids().filter(|&id| !store.is_frozen(id)).collect();
    let scale = ids
        .iter()
        .flat_map(|&id| store.grad(id).iter().map(|v| v.abs()))
        .fold(1.0f64, f64::max);
    let mut worst: f64 = 0.0;
    for id in ids {
        let analytic = store.grad(id).to_vec();
        for (k, &a) in analytic.iter().enumerate() {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + h;
            let fp = eval(store);
            store.value_mut(id).data_mut()[k] = orig - h;
            let fm = eval(store);
            store.value_mut(id).data_mut()[k] = orig;
            let numeric = (fp? - fm?) / (2.0 * h);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5 * scale);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
