//! Finite-difference verification of analytic gradients.

use candle_core::{DType, Tensor, Var};

use crate::error::Result;

/// Denominator floor for the relative error, so that entries whose true
/// gradient is (numerically) zero are judged on absolute error instead.
pub const DEFAULT_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `name[index]` of the entry with the largest relative error.
    pub worst: String,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Compares the analytic gradient of `loss` with the fourth-order central
/// difference `(f(x-2h) - 8f(x-h) + 8f(x+h) - f(x+2h)) / 12h` for every entry
/// of every variable.
/// Variables are restored to their original values afterwards.
pub fn gradient_check<F>(params: &[(String, Var)], mut loss: F, eps: f64, floor: f64) -> Result<GradCheckReport>
where
    F: FnMut() -> Result<Tensor>,
{
    let grads = loss()?.backward()?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for (name, var) in params {
        let original = var.as_tensor().copy()?;
        let dims = original.dims().to_vec();
        let values: Vec<f64> = original.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
        let analytic: Vec<f64> = match grads.get(var) {
            Some(g) => g.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?,
            None => vec![0.0; values.len()],
        };
        let set = |vals: &[f64]| -> Result<()> {
            let t = Tensor::from_vec(vals.to_vec(), dims.as_slice(), original.device())?.to_dtype(original.dtype())?;
            var.set(&t)?;
            Ok(())
        };
        let mut probe = values.clone();
        for i in 0..values.len() {
            let mut at = |offset: f64| -> Result<f64> {
                probe[i] = values[i] + offset;
                set(&probe)?;
                scalar(&loss()?)
            };
            let (m2, m1, p1, p2) = (at(-2.0 * eps)?, at(-eps)?, at(eps)?, at(2.0 * eps)?);
            probe[i] = values[i];
            let numeric = (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * eps);
            let rel = relative_error(analytic[i], numeric, floor);
            report.max_abs_error = report.max_abs_error.max((analytic[i] - numeric).abs());
            if rel > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = format!("{name}[{i}]");
            }
            report.checked += 1;
        }
        var.set(&original)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn linear_model_is_exact() {
        let w = Var::from_tensor(&Tensor::new(&[0.3f64, -1.2, 2.5], &Device::Cpu).unwrap()).unwrap();
        let x = Tensor::new(&[1.5f64, 0.25, -4.0], &Device::Cpu).unwrap();
        let params = vec![("w".to_string(), w.clone())];
        let r = gradient_check(&params, || Ok((w.as_tensor() * &x)?.sum_all()?), 1e-3, DEFAULT_FLOOR).unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        let after: Vec<f64> = w.to_vec1().unwrap();
        assert_eq!(after, vec![0.3, -1.2, 2.5]);
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // detach hides the dependence from autodiff: analytic 0, numeric 1
        let w = Var::from_tensor(&Tensor::new(&[1.0f64], &Device::Cpu).unwrap()).unwrap();
        let params = vec![("w".to_string(), w.clone())];
        let r = gradient_check(
            &params,
            || Ok((w.as_tensor() + w.as_tensor().detach())?.sum_all()?),
            1e-4,
            DEFAULT_FLOOR,
        )
        .unwrap();
        assert!(r.max_rel_error > 0.4);
    }
}
