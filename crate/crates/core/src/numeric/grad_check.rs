//! Central finite-difference verification of reverse-mode gradients.

use super::tensor::{no_grad, Tensor};
use crate::error::Result;

/// Absolute floor of the relative-error denominator.
pub const RELATIVE_FLOOR: f64 = 1e-6;
/// Entries smaller than this fraction of the largest analytic gradient in
/// the check are compared against that fraction instead of their own size.
pub const SCALE_FLOOR: f64 = 1e-4;

/// Max relative error between the reverse-mode gradient of `f` w.r.t. `x`
/// and the central difference `(f(x + h e_i) - f(x - h e_i)) / 2h`.
///
/// Per entry the error is `|a - n| / max(|a|, |n|, floor)` where `floor` is
/// the larger of [`RELATIVE_FLOOR`] and [`SCALE_FLOOR`] times the largest
/// analytic gradient. Recording is disabled for the probe evaluations.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn() -> Result<Tensor>,
{
    grad_check_params(f, std::slice::from_ref(x), h)
}

/// As [`grad_check`], over every entry of every tensor in `params`.
pub fn grad_check_params<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn() -> Result<Tensor>,
{
    grad_check_report(f, params, h).map(|r| r.max_rel_err)
}

/// Where the largest discrepancy of a gradient check occurred.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

pub fn grad_check_report<F>(f: F, params: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor>,
{
    params.iter().for_each(Tensor::zero_grad);
    f()?.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    params.iter().for_each(Tensor::zero_grad);

    let largest = analytic.iter().flatten().fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = RELATIVE_FLOOR.max(SCALE_FLOOR * largest);
    let mut report = GradCheckReport::default();
    for (pi, (p, grad)) in params.iter().zip(&analytic).enumerate() {
        let base = p.to_vec();
        for i in 0..base.len() {
            let mut probe = base.clone();
            probe[i] = base[i] + h;
            p.set_data(probe.clone())?;
            let plus = no_grad(&f)?.item();
            probe[i] = base[i] - h;
            p.set_data(probe)?;
            let minus = no_grad(&f)?.item();
            let numeric = (plus - minus) / (2.0 * h);
            let denom = grad[i].abs().max(numeric.abs()).max(floor);
            let err = (grad[i] - numeric).abs() / denom;
            if err > report.max_rel_err {
                report = GradCheckReport {
                    max_rel_err: err,
                    param: pi,
                    index: i,
                    analytic: grad[i],
                    numeric,
                };
            }
        }
        p.set_data(base)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{Linear, Parameters, Rng};

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::param(&[2, 3], vec![0.1, -0.4, 2.0, 3.0, 0.0, 1.0]).unwrap();
        let err = grad_check(|| Ok(x.sum()), &x, 1e-5).unwrap();
        assert!(err < 1e-9);
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn cross_entropy_over_linear_is_tight() {
        let mut rng = Rng::new(21);
        let lin = Linear::new(&mut rng, 5, 4);
        let x = Tensor::param(&[3, 5], (0..15).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let f = || lin.forward(&x)?.cross_entropy(&[0, 3, 1], None);
        let mut params = lin.parameters();
        params.push(x.clone());
        let err = grad_check_params(f, &params, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // A deliberately wrong backward: claims d/dx (x^2) = x.
        let x = Tensor::param(&[1], vec![1.5]).unwrap();
        let f = || {
            let v = x.item();
            Ok(Tensor::from_op(
                vec![1],
                vec![v * v],
                vec![x.clone()],
                Box::new(move |g, _| vec![Some(vec![g[0] * v])]),
            ))
        };
        assert!(grad_check(f, &x, 1e-5).unwrap() > 0.4);
    }
}
