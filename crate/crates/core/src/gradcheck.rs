//! Central finite-difference verification of backward rules.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Relative-error floor used in the denominator.
const FLOOR: f64 = 1e-8;

/// Default step for `f32`, scaled by `max(1, |x|)` per element.
pub const EPS_F32: f64 = 1e-3;
/// Default step for `f64`.
pub const EPS_F64: f64 = 1e-4;

fn eval_scalar<T: Real, F>(f: &F, inputs: &[Tensor<T>]) -> Result<f64>
where
    F: for<'t> Fn(&[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let tape = Tape::<T>::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&vars)?.value();
    if out.numel() != 1 {
        return Err(Error::contract("finite_diff_check", format!("f returned shape {:?}", out.shape())));
    }
    let v = out.item().to_f64().unwrap();
    if !v.is_finite() {
        return Err(Error::contract("finite_diff_check", format!("f(x) = {v}")));
    }
    Ok(v)
}

/// Central difference of `f` along one element of one input.
/// The step is `eps * max(1, |x|)` rounded to a power of two so that every
/// sample point is exactly representable. In `f64` a fourth-order stencil is
/// used; in `f32` rounding noise dominates truncation error, so the
/// two-point stencil (which amplifies noise less) is better. The two-point
/// form over the realized spacing is also the fallback when a sample point
/// crosses a binade.
fn central_difference<T: Real, F>(
    f: &F,
    work: &mut [Tensor<T>],
    which: usize,
    i: usize,
    eps: f64,
) -> Result<f64>
where
    F: for<'t> Fn(&[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let x0 = work[which].data()[i];
    let target = eps * x0.to_f64().unwrap().abs().max(1.0);
    let h = T::lit(2f64.powi(target.log2().round() as i32));
    let two = T::lit(2.0);
    let mut at = |x: T| -> Result<f64> {
        work[which].data_mut()[i] = x;
        eval_scalar(f, work)
    };
    let points = [x0 + h, x0 - h, x0 + two * h, x0 - two * h];
    let wide = T::epsilon().to_f64().unwrap() < 1e-10;
    let fourth_order = wide && points[0] - x0 == h && x0 - points[1] == h && points[2] - x0 == two * h && x0 - points[3] == two * h;
    let result = if fourth_order {
        let (p1, m1, p2, m2) = (at(points[0])?, at(points[1])?, at(points[2])?, at(points[3])?);
        let h = h.to_f64().unwrap();
        Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h))
    } else {
        let (p1, m1) = (at(points[0])?, at(points[1])?);
        Ok((p1 - m1) / (points[0] - points[1]).to_f64().unwrap())
    };
    work[which].data_mut()[i] = x0;
    result
}

fn analytic<T: Real, F>(f: &F, inputs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>>
where
    F: for<'t> Fn(&[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let tape = Tape::<T>::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&vars)?;
    let v = loss.value();
    if v.numel() != 1 || !v.item().is_finite() {
        return Err(Error::contract("finite_diff_check", format!("f(x) = {v:?}")));
    }
    let grads = tape.backward(loss)?;
    Ok(vars.iter().map(|&v| grads.get(v).cloned().expect("leaf gradient")).collect())
}

fn compare<T: Real, U: Real, F>(f: &F, grads: &[Tensor<T>], inputs: &[Tensor<U>], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&[Var<'t, U>]) -> Result<Var<'t, U>>,
{
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (which, grad) in grads.iter().enumerate() {
        for i in 0..grad.numel() {
            let numeric = central_difference(f, &mut work, which, i, eps)?;
            let a = grad.data()[i].to_f64().unwrap();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Compares analytic gradients of scalar `f` with respect to every input
/// against central differences. Returns the maximum over all elements of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// The step for element `x` is `eps * max(1, |x|)`, see
/// [`central_difference`].
pub fn check_gradients<T: Real, F>(f: F, inputs: &[Tensor<T>], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let grads = analytic(&f, inputs)?;
    compare(&f, &grads, inputs, eps)
}

/// A scalar function of several tensors that can be evaluated at either
/// precision.
pub trait ScalarFn {
    fn eval<'t, T: Real>(&self, inputs: &[Var<'t, T>]) -> Result<Var<'t, T>>;
}

/// Checks `f32` backward rules. The analytic gradient is computed in `f32`;
/// the central difference evaluates the same function in `f64` at the same
/// (exactly representable) point. A difference taken in `f32` itself has a
/// noise floor of about `ulp(f) / eps`, which swamps the error being measured.
pub fn check_gradients_f32<F: ScalarFn>(f: &F, inputs: &[Tensor<f32>], eps: f64) -> Result<f64> {
    let grads = analytic(&|v: &[Var<'_, f32>]| f.eval(v), inputs)?;
    let wide: Vec<Tensor<f64>> = inputs.iter().map(Tensor::cast).collect();
    compare(&|v: &[Var<'_, f64>]| f.eval(v), &grads, &wide, eps)
}

/// Single-input form of [`check_gradients`].
pub fn finite_diff_check<T: Real, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(Var<'t, T>) -> Result<Var<'t, T>>,
{
    check_gradients(|v: &[Var<'_, T>]| f(v[0]), std::slice::from_ref(x), eps)
}
