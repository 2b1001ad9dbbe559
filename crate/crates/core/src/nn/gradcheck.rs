use super::{Gradients, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn eval<F>(params: &ParamStore, loss_fn: &mut F) -> Result<f64>
where
    F: FnMut(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new(params);
    let loss = loss_fn(&mut tape)?;
    let v = tape.value(loss);
    if v.shape() != (1, 1) {
        return Err(Error::InvalidArgument("grad_check closure must return a scalar".into()));
    }
    Ok(v.item())
}

/// Compares backward-pass gradients against central differences.
///
/// `max_coords` caps the coordinates checked per parameter (evenly strided);
/// `None` checks every coordinate.
pub fn grad_check<F>(params: &mut ParamStore, eps: f64, max_coords: Option<usize>, mut loss_fn: F) -> Result<GradCheck>
where
    F: FnMut(&mut Tape) -> Result<Var>,
{
    let analytic: Gradients = {
        let mut tape = Tape::new(params);
        let loss = loss_fn(&mut tape)?;
        let first = tape.value(loss).item();
        let g = tape.backward(loss)?;
        let second = eval(params, &mut loss_fn)?;
        if first.to_bits() != second.to_bits() {
            return Err(Error::InvalidArgument(format!(
                "closure is not deterministic: {first} then {second}"
            )));
        }
        g
    };

    let mut result = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let n = params.get(id).len();
        let stride = match max_coords {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for j in (0..n).step_by(stride) {
            let orig = params.get(id).data()[j];
            params.get_mut(id).data_mut()[j] = orig + eps;
            let plus = eval(params, &mut loss_fn)?;
            params.get_mut(id).data_mut()[j] = orig - eps;
            let minus = eval(params, &mut loss_fn)?;
            params.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.param(id).map_or(0.0, |g| g.data()[j]);
            let err = relative_error(a, numeric);
            result.checked += 1;
            if err > result.max_rel_error || result.worst.is_none() {
                result.max_rel_error = err;
                result.worst = Some((params.name(id).to_string(), j));
            }
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    #[test]
    fn linear_loss_is_exact() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::row(&[0.3, -1.2, 2.0]));
        let c = Tensor::row(&[1.5, 0.25, -4.0]);
        let r = grad_check(&mut store, 1e-5, None, |t| {
            let wv = t.param(w);
            let cv = t.constant(c.clone());
            let p = t.mul(wv, cv)?;
            Ok(t.sum(p))
        })
        .unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_error < 1e-10, "{}", r.max_rel_error);
    }

    #[test]
    fn nondeterministic_closure_is_rejected() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(1.0));
        let mut calls = 0.0;
        let r = grad_check(&mut store, 1e-5, None, |t| {
            calls += 1.0;
            let wv = t.param(w);
            Ok(t.scale(wv, calls))
        });
        assert!(r.is_err());
    }
}
