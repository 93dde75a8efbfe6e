//! Central finite differences, used to check analytic gradients.

use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// Numerical gradient of `loss` w.r.t. every parameter in `params`.
///
/// `loss` is evaluated twice per scalar parameter, so keep models tiny.
pub fn numeric_grads<T: Real>(
    params: &ParamStore<T>,
    step: f64,
    mut loss: impl FnMut(&ParamStore<T>) -> f64,
) -> BTreeMap<String, Tensor<T>> {
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut out = BTreeMap::new();
    for name in names {
        let n = params.get(&name).unwrap().numel();
        let mut grad = Tensor::zeros(params.get(&name).unwrap().shape());
        for i in 0..n {
            let orig = params.get(&name).unwrap().data()[i];
            probe.get_mut(&name).unwrap().data_mut()[i] = orig + T::lit(step);
            let up = loss(&probe);
            probe.get_mut(&name).unwrap().data_mut()[i] = orig - T::lit(step);
            let down = loss(&probe);
            probe.get_mut(&name).unwrap().data_mut()[i] = orig;
            grad.data_mut()[i] = T::lit((up - down) / (2.0 * step));
        }
        out.insert(name, grad);
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).to_f64().unwrap().powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = a.sum_sq().to_f64().unwrap().sqrt().max(b.sum_sq().to_f64().unwrap().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
