use super::{Gradients, Graph, ParamStore, Var};
use crate::{Error, Result, Scalar};

/// Compares reverse-mode gradients against central differences.
///
/// `loss` builds a scalar on a fresh graph over whatever store it is handed;
/// it must be deterministic (no dropout). Every coordinate of every
/// parameter is perturbed by `±step`. Returns the maximum over coordinates
/// of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<T, F>(store: &ParamStore<T>, step: T, loss: F) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Graph<'_, T>) -> Result<Var>,
{
    if !(step > T::zero()) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let eval = |s: &ParamStore<T>| -> Result<T> {
        let mut g = Graph::new(s);
        let v = loss(&mut g)?;
        let value = g.scalar(v);
        if !value.is_finite() {
            return Err(Error::NumericFailure(format!("loss evaluated to {value}")));
        }
        Ok(value)
    };

    let analytic = {
        let mut g = Graph::new(store);
        let v = loss(&mut g)?;
        if !g.scalar(v).is_finite() {
            return Err(Error::NumericFailure(format!("loss evaluated to {}", g.scalar(v))));
        }
        g.backward(v)?
    };

    let floor = T::lit(1e-8);
    let two = T::lit(2.0);
    let mut worst = T::zero();
    let mut probe = store.clone();
    for id in store.ids() {
        let n = store.get(id).len();
        for k in 0..n {
            let original = store.get(id).values()[k];
            probe.get_mut(id).values_mut()[k] = original + step;
            let up = eval(&probe)?;
            probe.get_mut(id).values_mut()[k] = original - step;
            let down = eval(&probe)?;
            probe.get_mut(id).values_mut()[k] = original;

            let numeric = (up - down) / (two * step);
            let exact = analytic.get(id).map_or(T::zero(), |g| g.values()[k]);
            let denom = exact.abs().max(numeric.abs()).max(floor);
            worst = worst.max((exact - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

pub fn global_norm<T: Scalar>(grads: &Gradients<T>) -> T {
    grads
        .iter()
        .flat_map(|(_, g)| g.values().iter())
        .map(|&v| v * v)
        .sum::<T>()
        .sqrt()
}

/// Rescales all gradients by `max_norm / g` when their joint L2 norm `g`
/// exceeds `max_norm`. Returns the norm measured before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut Gradients<T>, max_norm: T) -> Result<T> {
    if !(max_norm > T::zero()) {
        return Err(Error::invalid("max_norm must be positive"));
    }
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.values_mut().iter_mut().for_each(|v| *v = *v * scale);
        }
    }
    Ok(norm)
}
