//! Central finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::nn::layers::{softmax_cross_entropy_slice, Mode};
use crate::nn::model::{activation_pattern, backward, forward, loss, ForwardCache, Gradients, ModelParams};
use crate::nn::ModelSpec;
use crate::tensor::Real;

/// Floor on the relative-error denominator, so zero gradients compare by
/// absolute difference instead of dividing by zero.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// Floor for checks of layers and whole networks. There the finite
/// difference carries roundoff around 1e-12 in 64-bit (machine epsilon
/// times the summed terms of the loss over a 1e-4 step), and a 32-bit
/// analytic gradient carries cancellation error around 1e-9 on coordinates
/// whose contributions nearly cancel. With [`REL_ERROR_FLOOR`] those
/// coordinates alone would exceed the 1e-6 / 1e-3 bounds; with this floor
/// a coordinate below 1e-5 is judged by its absolute error instead.
pub const NETWORK_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(parameter index, analytic, numeric)` for every checked coordinate.
    pub per_parameter_errors: Vec<(usize, f64, f64)>,
    /// Coordinates left out because `p + h` or `p - h` fell in a different
    /// piecewise-linear regime than `p` (only filled by
    /// [`finite_difference_check_piecewise`]).
    pub skipped: Vec<usize>,
    /// Denominator floor used for `max_relative_error`.
    pub floor: f64,
}

impl GradCheckReport {
    /// The entry with the largest relative error.
    pub fn worst(&self) -> Option<(usize, f64, f64)> {
        self.per_parameter_errors
            .iter()
            .copied()
            .max_by(|a, b| {
                relative_error_floored(a.1, a.2, self.floor)
                    .total_cmp(&relative_error_floored(b.1, b.2, self.floor))
            })
    }
}

/// `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floored(analytic, numeric, REL_ERROR_FLOOR)
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` against `(f(p + h) - f(p - h)) / 2h` on every coordinate.
pub fn finite_difference_check<T, F>(
    f: F,
    params: &[T],
    analytic: &[T],
    step: f64,
) -> Result<GradCheckReport>
where
    T: Real,
    F: FnMut(&[T]) -> T,
{
    let coords: Vec<usize> = (0..params.len()).collect();
    finite_difference_check_at(f, params, analytic, step, &coords)
}

/// As [`finite_difference_check`], restricted to the listed coordinates.
pub fn finite_difference_check_at<T, F>(
    mut f: F,
    params: &[T],
    analytic: &[T],
    step: f64,
    coords: &[usize],
) -> Result<GradCheckReport>
where
    T: Real,
    F: FnMut(&[T]) -> T,
{
    check_impl(|p| (f(p), 0), params, analytic, step, coords, REL_ERROR_FLOOR)
}

/// For piecewise-smooth functions. `f` also returns a regime key (for a
/// ReLU network, the activation pattern); a coordinate whose perturbed
/// points change regime straddles a kink, where the central difference
/// does not estimate the derivative, and is reported in `skipped`.
/// `floor` replaces [`REL_ERROR_FLOOR`] in the relative error.
pub fn finite_difference_check_piecewise<T, F>(
    f: F,
    params: &[T],
    analytic: &[T],
    step: f64,
    coords: &[usize],
    floor: f64,
) -> Result<GradCheckReport>
where
    T: Real,
    F: FnMut(&[T]) -> (T, u64),
{
    check_impl(f, params, analytic, step, coords, floor)
}

fn check_impl<T, F>(
    mut f: F,
    params: &[T],
    analytic: &[T],
    step: f64,
    coords: &[usize],
    floor: f64,
) -> Result<GradCheckReport>
where
    T: Real,
    F: FnMut(&[T]) -> (T, u64),
{
    if !(floor > 0.0) {
        return Err(Error::InvalidRange { lo: 0.0, hi: floor });
    }
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::InvalidRange { lo: 0.0, hi: step });
    }
    if params.len() != analytic.len() {
        return Err(Error::shape(format!(
            "{} parameters but {} analytic gradient entries",
            params.len(),
            analytic.len()
        )));
    }
    let mut p = params.to_vec();
    let (_, regime) = f(&p);
    let mut entries = Vec::with_capacity(coords.len());
    let mut skipped = Vec::new();
    let mut max_err = 0.0f64;
    for &i in coords {
        if i >= p.len() {
            return Err(Error::shape(format!("coordinate {i} out of range")));
        }
        let orig = p[i];
        let plus = T::of(orig.as_f64() + step);
        let minus = T::of(orig.as_f64() - step);
        p[i] = plus;
        let (f_plus, r_plus) = f(&p);
        p[i] = minus;
        let (f_minus, r_minus) = f(&p);
        p[i] = orig;
        let (f_plus, f_minus) = (f_plus.as_f64(), f_minus.as_f64());
        if !f_plus.is_finite() || !f_minus.is_finite() {
            return Err(Error::NumericFailure { coordinate: i });
        }
        if r_plus != regime || r_minus != regime {
            skipped.push(i);
            continue;
        }
        // the representable perturbation, not the requested one
        let width = plus.as_f64() - minus.as_f64();
        let numeric = (f_plus - f_minus) / width;
        let a = analytic[i].as_f64();
        max_err = max_err.max(relative_error_floored(a, numeric, floor));
        entries.push((i, a, numeric));
    }
    Ok(GradCheckReport {
        max_relative_error: max_err,
        per_parameter_errors: entries,
        skipped,
        floor,
    })
}

/// Checks the cross-entropy gradient of a whole model. The analytic
/// gradient is computed in precision `T` (from `params` cast down); the
/// loss itself is always evaluated in 64-bit, so for `T = f32` the report
/// measures the error of the 32-bit backward pass alone. Coordinates whose
/// perturbation changes the ReLU / max-pool pattern are skipped, and the
/// relative error uses [`NETWORK_FLOOR`].
pub fn check_model<T: Real>(
    spec: &ModelSpec,
    params: &ModelParams<f64>,
    input: &[f64],
    labels: &[usize],
    mode: Mode,
    step: f64,
    coords: &[usize],
) -> Result<GradCheckReport> {
    let p: ModelParams<T> = params.cast();
    let x: Vec<T> = input.iter().map(|&v| T::of(v)).collect();
    let mut cache = ForwardCache::new();
    forward(spec, &p, &x, labels.len(), mode, &mut cache)?;
    let mut dlogits = vec![T::zero(); cache.logits().len()];
    softmax_cross_entropy_slice(cache.logits(), spec.num_classes, labels, &mut dlogits)?;
    let mut grads = Gradients::zeros_like(&p);
    backward(spec, &p, &mut cache, &dlogits, &mut grads)?;
    let analytic: Vec<f64> = grads.flat().iter().map(|g| g.as_f64()).collect();

    // evaluate at exactly the parameters the analytic pass saw
    let mut q: ModelParams<f64> = p.cast();
    let input: Vec<f64> = x.iter().map(|v| v.as_f64()).collect();
    let flat = q.flat_trainable();
    let mut c64 = ForwardCache::new();
    let mut failure = None;
    let report = finite_difference_check_piecewise(
        |v: &[f64]| {
            let l = q
                .set_flat_trainable(v)
                .and_then(|_| loss(spec, &q, &input, labels, mode, &mut c64));
            match l {
                Ok(l) => (l, activation_pattern(spec, &c64)),
                Err(e) => {
                    failure.get_or_insert(e);
                    (f64::NAN, 0)
                }
            }
        },
        &flat,
        &analytic,
        step,
        coords,
        NETWORK_FLOOR,
    );
    match failure {
        Some(e) => Err(e),
        None => report,
    }
}
