//! Central finite-difference gradient checking.
//!
//! Only forward evaluations are used, so the check is independent of the
//! backward rules it validates.

use super::{Tensor, TensorError};

/// Largest discrepancy found by [`check_gradients`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// (parameter index, element index) of the worst element.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error with an absolute floor for near-zero gradients.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares the backward gradient of `loss_fn` with central differences of
/// step `h` at `values` (one entry per parameter tensor).
pub fn check_gradients<F, E>(values: &[(Vec<usize>, Vec<f64>)], h: f64, loss_fn: F) -> std::result::Result<GradCheck, E>
where
    F: Fn(&[Tensor]) -> std::result::Result<Tensor, E>,
    E: From<TensorError>,
{
    let params = values
        .iter()
        .map(|(shape, data)| Tensor::param(shape, data.clone()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    loss_fn(&params)?.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let eval = |which: usize, elem: usize, delta: f64| -> std::result::Result<f64, E> {
        let consts = values
            .iter()
            .enumerate()
            .map(|(i, (shape, data))| {
                let mut d = data.clone();
                if i == which {
                    d[elem] += delta;
                }
                Tensor::new(shape, d)
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(loss_fn(&consts)?.item())
    };

    let mut worst = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    for (pi, grad) in analytic.iter().enumerate() {
        for (ei, &a) in grad.iter().enumerate() {
            let numeric = (eval(pi, ei, h)? - eval(pi, ei, -h)?) / (2.0 * h);
            let err = relative_error(a, numeric);
            if err > worst.max_rel_error {
                worst = GradCheck {
                    max_rel_error: err,
                    worst: (pi, ei),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(worst)
}
