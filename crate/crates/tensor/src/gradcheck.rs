//! Central finite-difference verification of tape gradients.

use crate::{Tape, Tensor, Var};

/// Relu preactivations closer to zero than this make a check unreliable.
pub const KINK_MARGIN: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// `max_i |g_i − fd_i| / max(‖g‖∞, ‖fd‖∞)` over all inputs.
    pub max_rel_err: f64,
    /// Largest absolute componentwise discrepancy.
    pub max_abs_err: f64,
    /// Some relu input at the base point lies within [`KINK_MARGIN`] of zero;
    /// the caller should resample the point.
    pub near_kink: bool,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        !self.near_kink && self.max_rel_err < tol
    }
}

/// Single-input convenience wrapper around [`grad_check_many`].
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> GradCheck
where
    F: Fn(&mut Tape, Var) -> Var,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), step)
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences with the given step, for every entry of every input.
pub fn grad_check_many<F>(f: F, points: &[Tensor], step: f64) -> GradCheck
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars);
    let near_kink = tape
        .relu_inputs()
        .any(|x| x.data().iter().any(|v| v.abs() < KINK_MARGIN));
    let grads = tape.backward(loss).expect("backward failed in grad_check");

    let eval = |pts: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = pts.iter().map(|p| t.constant(p.clone())).collect();
        let l = f(&mut t, &vs);
        t.value(l).item()
    };

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut work: Vec<Tensor> = points.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let g = grads.get(*var).expect("input gradient missing");
        for i in 0..points[k].len() {
            let orig = points[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let plus = eval(&work);
            work[k].data_mut()[i] = orig - step;
            let minus = eval(&work);
            work[k].data_mut()[i] = orig;
            analytic.push(g.data()[i]);
            numeric.push((plus - minus) / (2.0 * step));
        }
    }

    let scale = analytic
        .iter()
        .chain(&numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-300);
    let max_abs_err = analytic
        .iter()
        .zip(&numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    GradCheck {
        max_rel_err: max_abs_err / scale,
        max_abs_err,
        near_kink,
    }
}
