use super::{Real, Tensor};

/// Central-difference gradient of a scalar function at `x`.
pub fn numeric_gradient<F: Real>(f: &mut dyn FnMut(&[Tensor<F>]) -> F, inputs: &[Tensor<F>], h: F) -> Vec<Vec<F>> {
    let mut work: Vec<Tensor<F>> = inputs.to_vec();
    let two_h = h + h;
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut gi = vec![F::zero(); inputs[i].numel()];
        for j in 0..gi.len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = f(&work);
            work[i].data_mut()[j] = orig - h;
            let minus = f(&work);
            work[i].data_mut()[j] = orig;
            gi[j] = (plus - minus) / two_h;
        }
        out.push(gi);
    }
    out
}

/// Maximum over all input coordinates of
/// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`, with central
/// differences at step `1e-5`.
///
/// `floor` is `1e-6` times the largest numeric gradient entry (and at least
/// `1e-8`): coordinates whose gradient vanishes identically, such as a bias
/// that only shifts softmax logits, are compared on that absolute scale.
///
/// `analytic` returns the value and the gradient with respect to every input.
pub fn grad_check(
    analytic: &mut dyn FnMut(&[Tensor<f64>]) -> (f64, Vec<Vec<f64>>),
    inputs: &[Tensor<f64>],
) -> f64 {
    let (_, grads) = analytic(inputs);
    let numeric = numeric_gradient(&mut |xs: &[Tensor<f64>]| analytic(xs).0, inputs, 1e-5);
    let scale = numeric.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-6 * scale).max(1e-8);
    let mut worst = 0.0f64;
    for (ga, gn) in grads.iter().zip(&numeric) {
        for (&a, &n) in ga.iter().zip(gn) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    worst
}
