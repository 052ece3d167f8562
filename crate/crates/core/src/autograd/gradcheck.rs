use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Analytic gradient of a scalar tensor function at `point`, alongside the
/// central-difference estimate for each coordinate.
pub fn gradient_pair<F>(f: F, point: &Tensor, step: f32) -> Result<(Vec<f32>, Vec<f32>)>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Invalid(format!("finite-difference step must be positive, got {step}")));
    }
    let eval = |p: Tensor| -> Result<f32> {
        let mut g = Graph::new();
        let x = g.input(p);
        let y = f(&mut g, x)?;
        match g.value(y) {
            [v] => Ok(*v),
            _ => Err(Error::NonScalarLoss(g.shape(y).to_vec())),
        }
    };

    let mut g = Graph::new();
    let x = g.input(point.clone().with_requires_grad(true));
    let y = f(&mut g, x)?;
    g.backward(y)?;
    let analytic = g
        .grad(x)
        .map(<[f32]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.numel()]);

    let mut numeric = Vec::with_capacity(point.numel());
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        // divide by the realised step; x ± h is rounded in f32
        let h = plus.data()[i] - minus.data()[i];
        numeric.push((eval(plus)? - eval(minus)?) / h);
    }
    Ok((analytic, numeric))
}

/// Max over coordinates of `|analytic − numeric| / (|analytic| + 1e-8)`.
pub fn finite_difference_check<F>(f: F, point: &Tensor, step: f32) -> Result<f32>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let (analytic, numeric) = gradient_pair(f, point, step)?;
    Ok(max_relative_error(&analytic, &numeric))
}

pub fn max_relative_error(analytic: &[f32], numeric: &[f32]) -> f32 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + 1e-8))
        .fold(0.0, f32::max)
}
