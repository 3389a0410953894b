//! Central finite-difference gradient checking.

use super::tensor::Tensor;

/// Central differences of the scalar function `f` with respect to every
/// element of every input, with step `h`.
pub fn numeric_gradients(f: impl Fn(&[Tensor]) -> f64, inputs: &[Tensor], h: f64) -> Vec<Tensor> {
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape().to_vec());
        for j in 0..inputs[i].len() {
            let x = inputs[i].data()[j];
            work[i].data_mut()[j] = x + h;
            let plus = f(&work);
            work[i].data_mut()[j] = x - h;
            let minus = f(&work);
            work[i].data_mut()[j] = x;
            g.data_mut()[j] = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Largest elementwise `|a - n| / max(|a|, |n|, floor)` across all tensors.
///
/// The floor keeps components whose true gradient is (near) zero from
/// turning round-off into huge relative errors.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
