//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Denominator floor of the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// Finite-difference formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, truncation error O(h²).
    #[default]
    Central,
    /// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`, truncation error
    /// O(h⁴); for losses with sharp curvature (layer norms over
    /// near-constant inputs).
    CentralFourthOrder,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    pub stencil: Stencil,
    /// Probe at most this many coordinates per tensor (chosen at random).
    pub max_probes: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, stencil: Stencil::Central, max_probes: None, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub index: usize,
    pub name: String,
    pub probes: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error() < tolerance
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Checks `loss_and_grad` at `params`. The closure returns the loss and one
/// gradient tensor per parameter; it is called once for the analytic
/// gradient and twice per probed coordinate.
pub fn grad_check<F>(loss_and_grad: F, params: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<(f64, Vec<Tensor>)>,
{
    grad_check_with(loss_and_grad, params, &[], GradCheckOptions { step, ..Default::default() })
}

pub fn grad_check_with<F>(
    mut loss_and_grad: F,
    params: &[Tensor],
    names: &[String],
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<(f64, Vec<Tensor>)>,
{
    let (loss, analytic) = loss_and_grad(params)?;
    if !loss.is_finite() {
        return Err(Error::Probe(format!("loss is {loss} at the base point")));
    }
    if analytic.len() != params.len() {
        return Err(Error::Probe(format!(
            "{} gradients for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.to_vec();
    let mut report = Vec::with_capacity(params.len());
    for (pi, (param, grad)) in params.iter().zip(&analytic).enumerate() {
        if grad.shape() != param.shape() {
            return Err(Error::Probe(format!("gradient {pi} has shape {:?}", grad.shape())));
        }
        let n = param.numel();
        let coords: Vec<usize> = match opts.max_probes {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for &c in &coords {
            let orig = work[pi].data()[c];
            let mut at = |offset: f64| -> Result<f64> {
                work[pi].data_mut()[c] = orig + offset;
                let (value, _) = loss_and_grad(&work)?;
                if !value.is_finite() {
                    return Err(Error::Probe(format!("non-finite loss probing param {pi}[{c}]")));
                }
                Ok(value)
            };
            let h = opts.step;
            let numeric = match opts.stencil {
                Stencil::Central => (at(h)? - at(-h)?) / (2.0 * h),
                Stencil::CentralFourthOrder => {
                    (8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h)
                }
            };
            work[pi].data_mut()[c] = orig;
            let a = grad.data()[c];
            max_rel = max_rel.max(relative_error(a, numeric));
            max_abs = max_abs.max((a - numeric).abs());
        }
        report.push(ParamCheck {
            index: pi,
            name: names.get(pi).cloned().unwrap_or_else(|| format!("param{pi}")),
            probes: coords.len(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    Ok(GradCheckReport { params: report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let p = vec![Tensor::new(vec![3], vec![0.5, -1.5, 2.0]).unwrap()];
        let f = |ps: &[Tensor]| {
            let loss = ps[0].data().iter().map(|x| x * x).sum();
            let g = Tensor::new(vec![3], ps[0].data().iter().map(|x| 2.0 * x).collect())?;
            Ok((loss, vec![g]))
        };
        let r = grad_check(f, &p, 1e-5).unwrap();
        assert!(r.max_rel_error() < 1e-8, "{}", r.max_rel_error());
    }

    #[test]
    fn constant() {
        let p = vec![Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()];
        let f = |_: &[Tensor]| Ok((3.25, vec![Tensor::zeros(&[2])]));
        let r = grad_check(f, &p, 1e-5).unwrap();
        assert!(r.params[0].max_abs_error < 1e-10);
    }

    #[test]
    fn wrong_gradient_detected() {
        let p = vec![Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()];
        let f = |ps: &[Tensor]| {
            let loss = ps[0].data().iter().map(|x| x * x).sum();
            Ok((loss, vec![ps[0].clone()]))
        };
        let r = grad_check(f, &p, 1e-5).unwrap();
        assert!(!r.passes(1e-4));
    }

    #[test]
    fn non_finite_probe_errors() {
        let p = vec![Tensor::new(vec![1], vec![0.0]).unwrap()];
        let f = |ps: &[Tensor]| {
            let x = ps[0].data()[0];
            let loss = if x > 0.0 { f64::NAN } else { 0.0 };
            Ok((loss, vec![Tensor::zeros(&[1])]))
        };
        assert!(matches!(grad_check(f, &p, 1e-5), Err(Error::Probe(_))));
    }
}
