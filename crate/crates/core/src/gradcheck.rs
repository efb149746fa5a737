//! Central finite-difference check of autodiff gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::param::ParamStore;

/// One checked coordinate.
#[derive(Clone, Debug)]
pub struct GradSample {
    pub param: String,
    pub index: usize,
    pub autodiff: f64,
    pub finite_diff: f64,
    pub rel_error: f64,
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares autodiff gradients of `loss_fn` with finite differences at
/// `coords` (parameter name, flat index).
///
/// The reference is the Richardson combination `(4 D(h/2) - D(h)) / 3` of
/// central differences `D`, which is fourth-order accurate in `h`.
///
/// `loss_fn` must build a deterministic forward pass on the given graph and
/// return a scalar node. Returns the maximum relative error and every sample.
pub fn backward_and_check<F>(
    store: &mut ParamStore,
    coords: &[(String, usize)],
    h: f32,
    mut loss_fn: F,
) -> Result<(f64, Vec<GradSample>)>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    let grads = g.backward(loss)?;
    drop(g);

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss_fn(&mut g, store)?;
        Ok(g.scalar(l))
    };

    let mut samples = Vec::with_capacity(coords.len());
    for (name, index) in coords {
        let id = store.id(name)?;
        if *index >= store.by_id(id).value.numel() {
            return Err(Error::invalid("gradcheck", format!("index {index} out of range for `{name}`")));
        }
        let autodiff = grads.param(id).map_or(0.0, |t| t.data()[*index] as f64);
        let orig = store.by_id(id).value.data()[*index];
        let mut central = |step: f32| -> Result<f64> {
            store.by_id_mut(id).value.data_mut()[*index] = orig + step;
            let plus = eval(store)?;
            store.by_id_mut(id).value.data_mut()[*index] = orig - step;
            let minus = eval(store)?;
            store.by_id_mut(id).value.data_mut()[*index] = orig;
            // use the step actually representable in f32
            let span = ((orig + step) as f64) - ((orig - step) as f64);
            Ok((plus - minus) / span)
        };
        let (coarse, fine) = (central(h)?, central(h / 2.0)?);
        let finite_diff = (4.0 * fine - coarse) / 3.0;
        samples.push(GradSample {
            param: name.clone(),
            index: *index,
            autodiff,
            finite_diff,
            rel_error: relative_error(autodiff, finite_diff),
        });
    }
    let max = samples.iter().map(|s| s.rel_error).fold(0.0, f64::max);
    Ok((max, samples))
}
