//! Central finite-difference gradient checking (64-bit only).

use super::params::{ParamGrads, ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Scalar objective over a parameter store.
///
/// `loss_after_change` is called after exactly one parameter scalar has been
/// perturbed; implementations may reuse intermediate results that do not
/// depend on `changed`.
pub trait Objective {
    fn loss_and_grads(&mut self, store: &ParamStore<f64>) -> Result<(f64, ParamGrads<f64>)>;
    fn loss_after_change(&mut self, store: &ParamStore<f64>, changed: ParamId) -> Result<f64>;

    /// `f(θ + h·e_i) - f(θ - h·e_i)` for scalar `i` of `id`, leaving the
    /// store unchanged. Override to compute the difference with less
    /// cancellation than subtracting two losses.
    fn central_difference(&mut self, store: &mut ParamStore<f64>, id: ParamId, i: usize, step: f64) -> Result<f64> {
        let original = store.value(id).data()[i];
        store.get_mut(id).value.data_mut()[i] = original + step;
        let plus = self.loss_after_change(store, id);
        store.get_mut(id).value.data_mut()[i] = original - step;
        let minus = self.loss_after_change(store, id);
        store.get_mut(id).value.data_mut()[i] = original;
        Ok(plus? - minus?)
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the worst scalar with its (autodiff, finite-difference) pair.
    pub worst: (usize, f64, f64),
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub step: f64,
    pub loss: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn scalars_checked(&self) -> usize {
        self.params.iter().map(|p| p.numel).sum()
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() < tol
    }

    pub fn worst_param(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// `|a - b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Compares autodiff gradients against `(f(θ+h) - f(θ-h)) / 2h` for every
/// scalar of every trainable parameter. Frozen parameters are skipped and do
/// not appear in the report. The store is restored before returning.
pub fn grad_check<O: Objective>(
    store: &mut ParamStore<f64>,
    objective: &mut O,
    step: f64,
) -> Result<GradCheckReport> {
    if !(step > 0.0) {
        return Err(Error::invalid("grad_check", "step must be positive"));
    }
    let (loss, grads) = objective.loss_and_grads(store)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("grad_check: objective is {loss}")));
    }
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.get(id).trainable).collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let numel = store.value(id).numel();
        let mut check = ParamCheck {
            name: store.get(id).name.clone(),
            numel,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst: (0, 0.0, 0.0),
        };
        for i in 0..numel {
            let delta = objective.central_difference(store, id, i, step)?;
            if !delta.is_finite() {
                return Err(Error::NonFinite(format!(
                    "grad_check: objective non-finite perturbing {}[{i}]",
                    check.name
                )));
            }
            let numeric = delta / (2.0 * step);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
            let rel = relative_error(analytic, numeric);
            check.max_abs_error = check.max_abs_error.max((analytic - numeric).abs());
            if rel > check.max_rel_error || i == 0 {
                check.max_rel_error = check.max_rel_error.max(rel);
                check.worst = (i, analytic, numeric);
            }
        }
        params.push(check);
    }
    Ok(GradCheckReport { step, loss, params })
}

struct FnObjective<F>(F);

impl<F> Objective for FnObjective<F>
where
    F: FnMut(&ParamStore<f64>, &mut Tape<f64>) -> Result<Var>,
{
    fn loss_and_grads(&mut self, store: &ParamStore<f64>) -> Result<(f64, ParamGrads<f64>)> {
        let mut tape = Tape::new();
        let loss = (self.0)(store, &mut tape)?;
        let value = tape.value(loss).item();
        let grads = if tape.requires_grad(loss) {
            tape.backward(loss)?.into_param_grads(store.len())
        } else {
            ParamGrads::new(vec![None; store.len()])
        };
        Ok((value, grads))
    }

    fn loss_after_change(&mut self, store: &ParamStore<f64>, _changed: ParamId) -> Result<f64> {
        let mut tape = Tape::no_grad();
        let loss = (self.0)(store, &mut tape)?;
        Ok(tape.value(loss).item())
    }
}

/// [`grad_check`] for an objective given as a closure that records a scalar
/// loss on the tape it is handed.
pub fn grad_check_fn<F>(store: &mut ParamStore<f64>, f: F, step: f64) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>, &mut Tape<f64>) -> Result<Var>,
{
    grad_check(store, &mut FnObjective(f), step)
}
