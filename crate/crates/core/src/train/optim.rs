use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// One momentum buffer per registered parameter, zero at the start.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub velocities: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        OptimizerState {
            velocities: store
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
        }
    }
}

/// Nesterov momentum in buffer form: `v <- mu v + g`, `p <- p - lr (g + mu v)`.
///
/// `grads[i]` belongs to the `i`-th registered parameter; `None` means the
/// parameter took no part in the loss and is reported by name.
pub fn sgd_nesterov_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &[Option<&Tensor<T>>],
    state: &mut OptimizerState<T>,
    lr: f64,
    mu: f64,
) -> Result<()> {
    if grads.len() != store.len() || state.velocities.len() != store.len() {
        return Err(Error::invalid(
            "sgd_nesterov_step",
            format!(
                "{} parameters, {} gradients, {} velocities",
                store.len(),
                grads.len(),
                state.velocities.len()
            ),
        ));
    }
    let (lr, mu) = (T::of(lr), T::of(mu));
    for ((p, g), v) in store.iter_mut().zip(grads).zip(&mut state.velocities) {
        let g = g.ok_or_else(|| Error::MissingGradient(p.name.clone()))?;
        if g.shape() != p.value.shape() || v.shape() != p.value.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd_nesterov_step",
                expected: p.value.shape().to_vec(),
                got: g.shape().to_vec(),
            });
        }
        for ((w, &g), v) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(v.data_mut())
        {
            *v = mu * *v + g;
            *w -= lr * (g + mu * *v);
        }
    }
    Ok(())
}
