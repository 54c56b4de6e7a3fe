//! Central finite-difference check of analytic gradients.

use serde::Serialize;

use crate::error::Result;
use crate::model::{Gradients, Model, TensorKind};
use crate::transform::Batch;

/// Perturbation used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so parameters whose true
/// gradient is zero are compared on an absolute scale instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupReport {
    pub name: String,
    pub params: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst parameter within the group.
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub step: f64,
    pub groups: Vec<GroupReport>,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn render(&self) -> String {
        let w = self.groups.iter().map(|g| g.name.len()).max().unwrap_or(5).max(5);
        let mut out = format!("{:<w$}  {:>7}  {:>12}  result\n", "group", "params", "max_rel_err");
        for g in &self.groups {
            out += &format!(
                "{:<w$}  {:>7}  {:>12.3e}  {}\n",
                g.name,
                g.params,
                g.max_rel_error,
                if g.passed { "ok" } else { "FAIL" }
            );
        }
        out += &format!(
            "overall max relative error {:.3e} (tolerance {:.1e}): {}\n",
            self.max_rel_error,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        );
        out
    }
}

/// Compares `analytic[g][i]` against `(loss(g, i, +h) - loss(g, i, -h)) / 2h`
/// for every parameter of every group. `loss(g, i, d)` must return the loss
/// with parameter `i` of group `g` shifted by `d`. No groups passes vacuously.
pub fn check_groups<F>(names: &[String], analytic: &[Vec<f64>], tolerance: f64, step: f64, mut loss: F) -> GradCheckReport
where
    F: FnMut(usize, usize, f64) -> f64,
{
    let mut groups = Vec::with_capacity(names.len());
    for (g, (name, grads)) in names.iter().zip(analytic).enumerate() {
        let mut worst = (0.0f64, 0usize);
        for (i, &a) in grads.iter().enumerate() {
            let numeric = (loss(g, i, step) - loss(g, i, -step)) / (2.0 * step);
            let e = relative_error(a, numeric);
            if e > worst.0 || e.is_nan() {
                worst = (e, i);
            }
        }
        groups.push(GroupReport {
            name: name.clone(),
            params: grads.len(),
            max_rel_error: worst.0,
            worst_index: worst.1,
            passed: worst.0 < tolerance,
        });
    }
    let max_rel_error = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    GradCheckReport {
        tolerance,
        step,
        passed: groups.iter().all(|g| g.passed),
        groups,
        max_rel_error,
    }
}

/// Checks supplied gradients of the mean batch loss against finite differences.
pub fn grad_check_gradients(model: &Model<f64>, batch: &Batch, grads: &Gradients<f64>, tolerance: f64) -> Result<GradCheckReport> {
    let dense = grads.to_dense(model);
    let mut probe = model.clone();
    let mut names = Vec::new();
    let mut analytic = Vec::new();
    let mut index = Vec::new();
    for (i, (name, kind, values)) in dense.tensors().into_iter().enumerate() {
        // frozen tables have no gradient to check
        if let TensorKind::Embedding { table, .. } = kind {
            if !model.fields.tables[table].trainable {
                continue;
            }
        }
        names.push(name);
        analytic.push(values.to_vec());
        index.push(i);
    }
    let mut failure = None;
    let report = check_groups(&names, &analytic, tolerance, FD_STEP, |g, i, d| {
        let tensor = index[g];
        let original = {
            let mut ts = probe.tensors_mut();
            let v = ts[tensor].2[i];
            ts[tensor].2[i] = v + d;
            v
        };
        let loss = match probe.forward_tape(batch) {
            Ok(t) => t.loss(),
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        };
        probe.tensors_mut()[tensor].2[i] = original;
        loss
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

/// Runs forward/backward once and checks every trainable parameter.
pub fn grad_check(model: &Model<f64>, batch: &Batch, tolerance: f64) -> Result<GradCheckReport> {
    let mut tape = model.forward_tape(batch)?;
    let grads = tape.backward(model, batch)?;
    grad_check_gradients(model, batch, &grads, tolerance)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_groups() {
        // loss = sum_g sum_i (g+1) * p_i^2 at p_i = i, gradient 2 (g+1) i
        let analytic: Vec<Vec<f64>> = (0..2).map(|g| (0..3).map(|i| 2.0 * (g + 1) as f64 * i as f64).collect()).collect();
        let names = vec!["a".to_string(), "b".to_string()];
        let r = check_groups(&names, &analytic, 1e-6, FD_STEP, |g, i, d| {
            let p = i as f64 + d;
            (g + 1) as f64 * p * p
        });
        assert!(r.passed, "{}", r.render());

        let mut wrong = analytic.clone();
        wrong[1][2] *= 1.1;
        let r = check_groups(&names, &wrong, 1e-4, FD_STEP, |g, i, d| {
            let p = i as f64 + d;
            (g + 1) as f64 * p * p
        });
        assert!(!r.passed);
        assert!(r.groups[0].passed && !r.groups[1].passed);
        assert_eq!(r.groups[1].worst_index, 2);
    }

    #[test]
    fn no_parameters_is_vacuous_pass() {
        let r = check_groups(&[], &[], 1e-4, FD_STEP, |_, _, _| unreachable!());
        assert!(r.passed);
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!(relative_error(1e-12, 0.0) < 1e-5);
    }
}
