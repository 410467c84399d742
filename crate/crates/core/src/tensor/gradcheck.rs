//! Central-difference gradient oracle.
//!
//! Nothing here touches the tape's backward rules: the oracle only
//! evaluates forward values, so it stays independent of the path it checks.

use super::{Element, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every element `i`.
pub fn finite_diff_grad<T: Element>(
    mut f: impl FnMut(&Tensor<T>) -> T,
    x: &Tensor<T>,
    h: T,
) -> Result<Tensor<T>> {
    if !(h > T::zero()) {
        return Err(Error::contract("finite difference step must be positive"));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (h + h));
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both vanish.
pub fn relative_error<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    relative_error_slices(a.data(), b.data())
}

pub fn relative_error_slices<T: Element>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x.as_f64() - y.as_f64()));
    let scale = norm(&mut a.iter().map(|x| x.as_f64())).max(norm(&mut b.iter().map(|x| x.as_f64())));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Outcome of comparing tape gradients with finite differences for one parameter.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub relative_error: f64,
    pub analytic_norm: f64,
    pub checked: usize,
}

/// Checks the tape gradient of a scalar loss with respect to each listed
/// parameter. `stride` > 1 checks only every `stride`-th element of each
/// parameter, which keeps large tensors affordable.
pub fn check_params<T, F>(
    store: &ParamStore<T>,
    ids: &[ParamId],
    h: T,
    stride: usize,
    loss: F,
) -> Result<Vec<ParamCheck>>
where
    T: Element,
    F: for<'t> Fn(&'t Tape<T>, &ParamStore<T>) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let out = loss(&tape, store)?;
    let grads = tape.gradients(out)?;
    let analytic: Vec<Tensor<T>> = ids
        .iter()
        .map(|&id| {
            grads
                .param(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(store.value(id).shape().to_vec()))
        })
        .collect();
    drop(grads);
    drop(tape);

    let eval = |s: &ParamStore<T>| -> Result<T> {
        let tape = Tape::inference();
        loss(&tape, s)?.value().item()
    };
    let mut probe = store.clone();
    let mut report = Vec::with_capacity(ids.len());
    for (&id, grad) in ids.iter().zip(&analytic) {
        let mut a = Vec::new();
        let mut n = Vec::new();
        for i in (0..grad.len()).step_by(stride.max(1)) {
            let orig = probe.get(id).value().data()[i];
            probe.get_mut(id).value_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe.get_mut(id).value_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe.get_mut(id).value_mut()[i] = orig;
            n.push((plus - minus) / (h + h));
            a.push(grad.data()[i]);
        }
        report.push(ParamCheck {
            name: store.get(id).name.clone(),
            relative_error: relative_error_slices(&a, &n),
            analytic_norm: a.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt(),
            checked: a.len(),
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::<f64>::from_fn([3, 2], |i| i as f64 - 2.0);
        let g = finite_diff_grad(|t| t.sum(), &x, 1e-4).unwrap();
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn constant_has_zero_gradient() {
        let x = Tensor::<f64>::ones([4]);
        let g = finite_diff_grad(|_| 0.0, &x, 1e-4).unwrap();
        assert_eq!(g, Tensor::zeros([4]));
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::<f64>::scalar(3.0);
        let g = finite_diff_grad(|t| t.data()[0] * t.data()[0], &x, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
        assert!(finite_diff_grad(|t| t.sum(), &x, 0.0).is_err());
    }
}
