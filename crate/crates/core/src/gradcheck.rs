//! Central finite-difference checks of analytic parameter gradients.

use crate::autograd::Gradients;
use crate::error::Result;
use crate::nn::ParamStore;

/// Agreement between analytic and numeric gradients for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub name: String,
    /// Coordinates compared.
    pub checked: usize,
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    pub max_abs_grad: f64,
}

/// Compares gradients of `loss` against central differences with step `h`.
///
/// `loss(ps, true)` must return the loss value and its gradients; the
/// perturbed evaluations call `loss(ps, false)` and may return `None`. At
/// most `per_group` evenly spaced coordinates of every parameter tensor are
/// checked. `floor` keeps the relative error finite where both gradients
/// vanish.
pub fn check_gradients<F>(
    ps: &mut ParamStore,
    h: f64,
    per_group: usize,
    floor: f64,
    mut loss: F,
) -> Result<Vec<GroupCheck>>
where
    F: FnMut(&ParamStore, bool) -> Result<(f64, Option<Gradients>)>,
{
    let (_, grads) = loss(ps, true)?;
    let grads = grads.unwrap_or_default();
    let ids: Vec<_> = ps.ids().collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let n = ps.get(id).len();
        let picks = per_group.min(n).max(1);
        let mut check = GroupCheck {
            name: ps.name(id).to_string(),
            checked: 0,
            max_rel_err: 0.0,
            max_abs_grad: 0.0,
        };
        for p in 0..picks {
            let k = p * n / picks;
            let analytic = grads.get(id).map_or(0.0, |g| g[k]);
            let orig = ps.get(id).data()[k];
            ps.get_mut(id).data_mut()[k] = orig + h;
            let (up, _) = loss(ps, false)?;
            ps.get_mut(id).data_mut()[k] = orig - h;
            let (down, _) = loss(ps, false)?;
            ps.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            check.max_rel_err = check.max_rel_err.max(rel);
            check.max_abs_grad = check.max_abs_grad.max(analytic.abs());
            check.checked += 1;
        }
        out.push(check);
    }
    Ok(out)
}
