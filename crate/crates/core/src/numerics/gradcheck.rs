use std::collections::BTreeMap;

use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Relative error floor: gradients smaller than this are compared in
/// absolute terms.
pub const ABS_FLOOR: f64 = 1e-6;

/// Result of comparing analytic and central-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Maximum relative error per parameter name.
    pub max_rel_error: BTreeMap<String, f64>,
    pub tolerance: f64,
    pub passed: bool,
    /// Set when there was nothing to check.
    pub vacuous: bool,
}

impl GradCheckReport {
    /// Worst error per parameter group, where the group is the name with
    /// its last dotted component removed.
    pub fn by_group(&self) -> BTreeMap<String, f64> {
        let mut out: BTreeMap<String, f64> = BTreeMap::new();
        for (name, &err) in &self.max_rel_error {
            let group = name.rsplit_once('.').map_or(name.as_str(), |(g, _)| g);
            let slot = out.entry(group.to_string()).or_insert(0.0);
            *slot = slot.max(err);
        }
        out
    }

    pub fn worst(&self) -> f64 {
        self.max_rel_error.values().copied().fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

fn evaluate<F>(f: &F, params: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let root = f(&mut tape, params)?;
    let v = tape.scalar(root);
    if !v.is_finite() {
        return Err(Error::Evaluation(format!("loss evaluated to {v}")));
    }
    Ok(v)
}

/// Compares the tape gradient of `f` with central differences of step
/// `step` for every scalar in `params`.
///
/// `f` records a scalar-valued computation on the tape it is given and
/// returns the root.
pub fn finite_difference_check<F>(f: F, params: &ParamStore, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::Contract(format!("finite difference step must be positive, got {step}")));
    }
    if params.scalar_count() == 0 {
        return Ok(GradCheckReport {
            max_rel_error: BTreeMap::new(),
            tolerance: tol,
            passed: true,
            vacuous: true,
        });
    }

    let mut tape = Tape::new();
    let root = f(&mut tape, params)?;
    let v = tape.scalar(root);
    if !v.is_finite() {
        return Err(Error::Evaluation(format!("loss evaluated to {v}")));
    }
    let grads = tape.backward(root)?;

    let mut probe = params.clone();
    let mut max_rel_error = BTreeMap::new();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.value(&name)?.len();
        let analytic = grads.get(&name).cloned();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let orig = probe.value(&name)?.data()[i];
            probe.value_mut(&name)?.data_mut()[i] = orig + step;
            let plus = evaluate(&f, &probe)?;
            probe.value_mut(&name)?.data_mut()[i] = orig - step;
            let minus = evaluate(&f, &probe)?;
            probe.value_mut(&name)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.as_ref().map_or(0.0, |g| g.data()[i]);
            worst = worst.max(relative_error(a, numeric));
        }
        max_rel_error.insert(name, worst);
    }
    let passed = max_rel_error.values().all(|&e| e <= tol);
    Ok(GradCheckReport {
        max_rel_error,
        tolerance: tol,
        passed,
        vacuous: false,
    })
}
