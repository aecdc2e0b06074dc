use serde::Serialize;

use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub max_rel_error: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    /// Worst error per group, where a group is the parameter name up to its
    /// first `.` (e.g. `fusion`, `decoder`).
    pub fn by_group(&self) -> Vec<(String, f64)> {
        let mut groups: Vec<(String, f64)> = Vec::new();
        for p in &self.params {
            let g = p.name.split('.').next().unwrap_or(&p.name).to_string();
            match groups.iter_mut().find(|(name, _)| *name == g) {
                Some((_, e)) => *e = e.max(p.max_rel_error),
                None => groups.push((g, p.max_rel_error)),
            }
        }
        groups
    }
}

/// Compares tape gradients of `f` against central differences over every
/// trainable coordinate of `store`.
///
/// The error of one coordinate is
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
/// `store` is perturbed in place and restored before returning.
pub fn finite_diff_check<F>(store: &mut ParamStore, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let analytic = {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        check_finite(tape.value(loss).item())?;
        tape.backward(loss)?
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        let v = tape.value(loss).item();
        check_finite(v)?;
        Ok(v)
    };

    let mut params = Vec::new();
    let mut worst = 0.0f64;
    for id in store.trainable_ids() {
        let grad = analytic.get(id).expect("trainable params have gradients").clone();
        let mut param_worst = 0.0f64;
        for i in 0..grad.len() {
            let original = store.tensor(id).data()[i];
            store.tensor_mut(id).data_mut()[i] = original + eps;
            let plus = eval(store);
            store.tensor_mut(id).data_mut()[i] = original - eps;
            let minus = eval(store);
            store.tensor_mut(id).data_mut()[i] = original;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = grad.data()[i];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            param_worst = param_worst.max(err);
        }
        worst = worst.max(param_worst);
        params.push(ParamCheck {
            name: store.get(id).name.clone(),
            coords: grad.len(),
            max_rel_error: param_worst,
        });
    }
    Ok(GradCheckReport {
        eps,
        max_rel_error: worst,
        params,
    })
}

fn check_finite(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("objective evaluated to {v}")))
    }
}
