use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

fn eval<T: Scalar, F>(store: &ParamStore<T>, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let v = tape.value(out).item()?.to_f64().unwrap_or(f64::NAN);
    if !v.is_finite() {
        return Err(Error::Numeric(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

/// Largest relative disagreement between taped gradients and central
/// differences, `|a − n| / max(|a|, |n|, 1e-8)`, over every element of `ids`.
///
/// `f` must be deterministic and build its scalar objective on the provided
/// tape. Gradients in `store` are overwritten.
pub fn grad_check<T: Scalar, F>(
    store: &mut ParamStore<T>,
    ids: &[ParamId],
    h: f64,
    f: F,
) -> Result<f64>
where
    F: Fn(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Contract(format!("step h = {h} must be positive")));
    }
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss, store)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            let p = store.get(id)?;
            let g = p.grad.as_ref().expect("zeroed above");
            Ok(g.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect())
        })
        .collect::<Result<_>>()?;

    let hs = T::lit(h);
    let mut worst = 0.0f64;
    for (&id, an) in ids.iter().zip(&analytic) {
        for (k, &a) in an.iter().enumerate() {
            let orig = store.value(id)?.data()[k];
            store.get_mut(id)?.value.data_mut()[k] = orig + hs;
            let plus = eval(store, &f);
            store.get_mut(id)?.value.data_mut()[k] = orig - hs;
            let minus = eval(store, &f);
            store.get_mut(id)?.value.data_mut()[k] = orig;
            let num = (plus? - minus?) / (2.0 * h);
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
