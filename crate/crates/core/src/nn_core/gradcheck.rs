//! Central finite-difference gradient checker.

use std::fmt;

use crate::error::{Error, Result};
use crate::nn_core::{NodeId, ParamStore, Tape};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub eps: f64,
    /// Pass threshold on the relative error.
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so gradients that are
    /// zero on both sides compare by absolute error.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose ±eps evaluations put some relu input on different sides of 0.
    pub skipped: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error < self.tol)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            writeln!(
                f,
                "{:<24} max_rel_err={:.3e} checked={} skipped={}",
                p.name, p.max_rel_error, p.checked, p.skipped
            )?;
        }
        write!(
            f,
            "overall max_rel_err={:.3e} tol={:.1e} {}",
            self.max_rel_error(),
            self.tol,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

fn evaluate<F>(store: &ParamStore, build: &F) -> Result<(f64, Vec<bool>)>
where
    F: Fn(&mut Tape) -> Result<NodeId>,
{
    let mut tape = Tape::new(store);
    tape.track_relu_signs();
    let loss = build(&mut tape)?;
    let value = tape.value(loss);
    if value.len() != 1 {
        return Err(Error::Contract("grad_check graph must end in a scalar".into()));
    }
    Ok((value.item(), tape.relu_signs().unwrap_or_default().to_vec()))
}

/// Compares tape gradients of `build` against central differences for every
/// coordinate of every parameter in `store`. `build` must be deterministic.
pub fn grad_check<F>(store: &ParamStore, build: F, config: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<NodeId>,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let loss = build(&mut tape)?;
        let mut grads = store.zero_grads();
        tape.backward(loss, &mut grads)?;
        grads
    };

    let mut work = store.clone();
    let mut params = Vec::with_capacity(store.len());
    for pid in store.ids() {
        let mut check = ParamCheck {
            name: store.name(pid).to_string(),
            max_rel_error: 0.0,
            checked: 0,
            skipped: 0,
        };
        for k in 0..store.get(pid).len() {
            let original = store.get(pid).data()[k];
            work.get_mut(pid).data_mut()[k] = original + config.eps;
            let (plus, plus_signs) = evaluate(&work, &build)?;
            work.get_mut(pid).data_mut()[k] = original - config.eps;
            let (minus, minus_signs) = evaluate(&work, &build)?;
            work.get_mut(pid).data_mut()[k] = original;

            if plus_signs != minus_signs {
                check.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * config.eps);
            let exact = analytic.get(pid).data()[k];
            let denom = exact.abs().max(numeric.abs()).max(config.floor);
            let rel = (exact - numeric).abs() / denom;
            check.max_rel_error = check.max_rel_error.max(rel);
            check.checked += 1;
        }
        params.push(check);
    }
    Ok(GradCheckReport {
        params,
        tol: config.tol,
    })
}
