//! Central finite-difference oracle for analytic gradients.

use super::params::Parameter;
use crate::error::{Error, Result};

/// Denominator floor for the relative error so that gradients which are
/// numerically zero are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| !p.passed)
            .map(|p| p.name.as_str())
            .collect()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares each trainable parameter's `grad` buffer against central
/// differences of `loss`. The gradients must already be populated.
pub fn finite_difference_check<F>(
    params: &mut [Parameter],
    mut loss: F,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Parameter]) -> Result<f64>,
{
    if !(1e-7..=1e-4).contains(&h) {
        return Err(Error::Config(format!("finite-difference step {h} outside [1e-7, 1e-4]")));
    }
    let mut report = Vec::new();
    for pi in 0..params.len() {
        if !params[pi].trainable {
            continue;
        }
        let mut worst: f64 = 0.0;
        for ei in 0..params[pi].value.len() {
            let orig = params[pi].value.data()[ei];
            params[pi].value.data_mut()[ei] = orig + h;
            let plus = loss(params)?;
            params[pi].value.data_mut()[ei] = orig - h;
            let minus = loss(params)?;
            params[pi].value.data_mut()[ei] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Probe {
                    param: params[pi].name().to_string(),
                });
            }
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(params[pi].grad.data()[ei], numeric));
        }
        report.push(ParamCheck {
            name: params[pi].name().to_string(),
            max_rel_error: worst,
            passed: worst <= tol,
        });
    }
    Ok(GradCheckReport {
        params: report,
        tolerance: tol,
    })
}
