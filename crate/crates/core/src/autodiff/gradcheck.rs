//! Central finite-difference oracles for gradient checking.

use super::{grad, Tensor};

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, or 0 when both are zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of a scalar function of several flat inputs.
pub fn numeric_gradient<F>(f: F, inputs: &[Vec<f64>], step: f64) -> Vec<Vec<f64>>
where
    F: Fn(&[Vec<f64>]) -> f64,
{
    let mut point = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].len()];
        for j in 0..inputs[i].len() {
            let orig = point[i][j];
            point[i][j] = orig + step;
            let plus = f(&point);
            point[i][j] = orig - step;
            let minus = f(&point);
            point[i][j] = orig;
            g[j] = (plus - minus) / (2.0 * step);
        }
        grads.push(g);
    }
    grads
}

/// Compares the reverse-mode gradient of `f` with central differences at
/// `inputs` (values with shapes). Returns the worst relative error across
/// inputs.
pub fn check<F>(f: F, inputs: &[(Vec<f64>, Vec<usize>)], step: f64) -> f64
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    let params: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|(v, s)| Tensor::param(v.clone(), s).expect("consistent input"))
        .collect();
    let out = f(&params);
    let analytic = grad(&out, &params, false).expect("scalar output");

    let shapes: Vec<&Vec<usize>> = inputs.iter().map(|(_, s)| s).collect();
    let values: Vec<Vec<f64>> = inputs.iter().map(|(v, _)| v.clone()).collect();
    let numeric = numeric_gradient(
        |point| {
            let consts: Vec<Tensor<f64>> = point
                .iter()
                .zip(&shapes)
                .map(|(v, s)| Tensor::from_vec(v.clone(), s).expect("consistent input"))
                .collect();
            f(&consts).item()
        },
        &values,
        step,
    );
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a.data(), n))
        .fold(0.0, f64::max)
}
