use crate::error::{MsdemError, Result};
use crate::numerics::{Graph, NodeId, ParamId, ParamStore, Tensor};

pub const REL_FLOOR: f64 = 1e-6;

/// Compare analytic gradients of the scalar built by `f` against central
/// differences with step `h`, over every component of `params`.
///
/// Returns `max |analytic - numeric| / max(|analytic|, |numeric|, REL_FLOOR)`.
/// Components smaller than the floor are effectively judged on absolute error,
/// since central differences cannot resolve them to a useful relative accuracy.
/// `f` must be deterministic: any noise it draws has to come from a seed it
/// captures. Two unperturbed evaluations that disagree bit-wise are an error.
pub fn finite_diff_check<F>(store: &mut ParamStore, params: &[ParamId], h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<NodeId>,
{
    if !(h > 0.0) {
        return Err(MsdemError::invalid(format!("step size must be positive, got {h}")));
    }
    for &id in params {
        if store.get(id).frozen {
            return Err(MsdemError::Frozen(store.get(id).name.clone()));
        }
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let l = f(&mut g)?;
        Ok(g.value(l).data()[0])
    };

    let (base, grads) = {
        let mut g = Graph::new(store);
        let l = f(&mut g)?;
        (g.value(l).data()[0], g.backward(l)?)
    };
    if eval(store)?.to_bits() != base.to_bits() {
        return Err(MsdemError::invalid(
            "function is not deterministic under its seed",
        ));
    }

    let mut worst = 0.0f64;
    for &id in params {
        let original = store.value(id).clone();
        let analytic = grads
            .get(id)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; original.numel()]);
        for i in 0..original.numel() {
            let mut up = original.data().to_vec();
            up[i] += h;
            store.set_value(id, Tensor::from_parts(original.shape().to_vec(), up))?;
            let fu = eval(store)?;
            let mut dn = original.data().to_vec();
            dn[i] -= h;
            store.set_value(id, Tensor::from_parts(original.shape().to_vec(), dn))?;
            let fd = eval(store)?;
            let numeric = (fu - fd) / (2.0 * h);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
        }
        store.set_value(id, original)?;
    }
    Ok(worst)
}
