//! Central finite-difference verification of reverse-mode gradients.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamId, ParamSet};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference half step `h`.
    pub step: f64,
    /// Parameters with at most this many entries are checked exhaustively;
    /// larger ones are subsampled down to this many coordinates.
    pub max_coords: usize,
    /// Denominator floor of [`relative_error`].
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            max_coords: 256,
            abs_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub identifier: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<T, F>(f: &F, params: &ParamSet<T>) -> Result<T>
where
    T: Scalar,
    F: for<'p> Fn(&mut Tape<'p, T>, &'p ParamSet<T>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, params)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::dimension("grad_check", v.shape(), &[1]));
    }
    Ok(v.data()[0])
}

fn coords_for(numel: usize, max_coords: usize) -> Vec<usize> {
    if numel <= max_coords {
        return (0..numel).collect();
    }
    // evenly strided deterministic subsample, always hitting both ends
    let mut out: Vec<usize> = (0..max_coords)
        .map(|i| i * (numel - 1) / (max_coords - 1))
        .collect();
    out.dedup();
    out
}

/// Pins a closure to the higher-ranked signature [`grad_check`] expects.
pub fn objective<T, F>(f: F) -> F
where
    T: Scalar,
    F: for<'p> Fn(&mut Tape<'p, T>, &'p ParamSet<T>) -> Result<Var>,
{
    f
}

/// Compares the tape gradient of the scalar `f` against central differences
/// `(f(θ+h) - f(θ-h)) / 2h` for every parameter in `params`.
pub fn grad_check<T, F>(
    f: F,
    params: &mut ParamSet<T>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: for<'p> Fn(&mut Tape<'p, T>, &'p ParamSet<T>) -> Result<Var>,
{
    if cfg.step <= 0.0 {
        return Err(Error::Input("grad_check step must be positive".into()));
    }
    if cfg.max_coords < 64 {
        return Err(Error::Input(
            "grad_check must sample at least 64 coordinates per parameter".into(),
        ));
    }

    let analytic = {
        let mut tape = Tape::new();
        let out = f(&mut tape, params)?;
        let first = tape.value(out).data()[0];
        let grads = tape.backward(out)?;
        let second = evaluate(&f, params)?;
        if first.to_f64_lossless().to_bits() != second.to_f64_lossless().to_bits() {
            return Err(Error::NonDeterministic(format!(
                "repeated evaluation gave {first} then {second}"
            )));
        }
        grads
    };

    let h = T::lit(cfg.step);
    let two_h = T::lit(2.0 * cfg.step);
    let ids: Vec<ParamId> = params.ids().collect();
    let mut report = Vec::with_capacity(ids.len());
    for id in ids {
        let numel = params.get(id).value.numel();
        let grad = analytic.get(id);
        let mut worst_rel = 0.0f64;
        let mut worst_abs = 0.0f64;
        let coords = coords_for(numel, cfg.max_coords);
        for &k in &coords {
            let original = params.get(id).value.data()[k];
            params.get_mut(id).value.data_mut()[k] = original + h;
            let plus = evaluate(&f, params);
            params.get_mut(id).value.data_mut()[k] = original - h;
            let minus = evaluate(&f, params);
            params.get_mut(id).value.data_mut()[k] = original;
            let numeric = ((plus? - minus?) / two_h).to_f64_lossless();
            let a = grad.map_or(0.0, |g| g[k].to_f64_lossless());
            worst_rel = worst_rel.max(relative_error(a, numeric, cfg.abs_floor));
            worst_abs = worst_abs.max((a - numeric).abs());
        }
        report.push(ParamCheck {
            identifier: params.get(id).identifier.clone(),
            coords_checked: coords.len(),
            max_rel_error: worst_rel,
            max_abs_error: worst_abs,
        });
    }
    Ok(GradCheckReport { params: report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Parameter, Tensor};

    fn one_param(data: Vec<f64>) -> (ParamSet<f64>, ParamId) {
        let mut set = ParamSet::new();
        let id = set.add(Parameter::new("theta", Tensor::vector(data).unwrap(), true));
        (set, id)
    }

    #[test]
    fn squared_norm_matches_analytic() {
        let (mut set, id) = one_param(vec![0.3, -1.2, 2.5, 0.01]);
        let f = objective(move |tape: &mut Tape<'_, f64>, p| {
            let x = tape.param(p, id);
            let sq = tape.mul(x, x)?;
            Ok(tape.sum(sq))
        });
        let report = grad_check(f, &mut set, &GradCheckConfig::default()).unwrap();
        assert!(report.max_rel_error() < 1e-8, "{report:?}");

        // analytic value is exactly 2θ
        let mut tape = Tape::new();
        let out = f(&mut tape, &set).unwrap();
        let g = tape.backward(out).unwrap();
        for (gv, tv) in g.get(id).unwrap().iter().zip(set.get(id).value.data()) {
            assert_eq!(*gv, 2.0 * tv);
        }
    }

    #[test]
    fn constant_objective_has_zero_gradient() {
        let (mut set, id) = one_param(vec![1.0, 2.0]);
        let f = |tape: &mut Tape<'_, f64>, _p: &ParamSet<f64>| -> Result<Var> {
            Ok(tape.leaf(Tensor::scalar(3.0)))
        };
        let report = grad_check(f, &mut set, &GradCheckConfig::default()).unwrap();
        assert_eq!(report.max_rel_error(), 0.0);
        let mut tape = Tape::new();
        let out = f(&mut tape, &set).unwrap();
        assert!(tape.backward(out).unwrap().get(id).is_none());
    }

    #[test]
    fn non_deterministic_objective_is_rejected() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let (mut set, id) = one_param(vec![1.0]);
        let calls = AtomicUsize::new(0);
        let f = objective(|tape: &mut Tape<'_, f64>, p| {
            let n = calls.fetch_add(1, Ordering::SeqCst) as f64;
            let x = tape.param(p, id);
            let c = tape.leaf(Tensor::vector(vec![n]).unwrap());
            let y = tape.add(x, c)?;
            Ok(tape.sum(y))
        });
        let err = grad_check(f, &mut set, &GradCheckConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonDeterministic(_)));
    }

    #[test]
    fn subsampling_keeps_at_least_64_coords() {
        let c = coords_for(10_000, 64);
        assert_eq!(c.len(), 64);
        assert_eq!((c[0], *c.last().unwrap()), (0, 9_999));
        assert_eq!(coords_for(10, 64).len(), 10);
    }
}
