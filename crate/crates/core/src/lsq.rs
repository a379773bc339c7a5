//! Small dense Levenberg–Marquardt solver shared by camera refinement and
//! segment-length fitting.

use nalgebra::{DMatrix, DVector};

pub trait LeastSquaresProblem {
    /// Residual vector at `params`, or `None` when `params` is outside the
    /// domain of the model (the step is then rejected).
    fn residuals(&self, params: &DVector<f64>) -> Option<DVector<f64>>;

    /// Jacobian of the residuals. Defaults to central differences.
    fn jacobian(&self, params: &DVector<f64>) -> Option<DMatrix<f64>> {
        numeric_jacobian(|p| self.residuals(p), params)
    }
}

pub fn numeric_jacobian<F>(f: F, params: &DVector<f64>) -> Option<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Option<DVector<f64>>,
{
    let r0 = f(params)?;
    let mut jac = DMatrix::zeros(r0.len(), params.len());
    let mut p = params.clone();
    for k in 0..params.len() {
        let h = 1e-7 * params[k].abs().max(1.0);
        let orig = p[k];
        p[k] = orig + h;
        let plus = f(&p)?;
        p[k] = orig - h;
        let minus = f(&p)?;
        p[k] = orig;
        jac.set_column(k, &((plus - minus) / (2.0 * h)));
    }
    Some(jac)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmConfig {
    pub max_iterations: usize,
    /// Stop once `‖Jᵀr‖∞` drops below this.
    pub gradient_tolerance: f64,
    /// Stop once a step changes no parameter by more than this (relative).
    pub step_tolerance: f64,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub cost_tolerance: f64,
    pub initial_damping: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            gradient_tolerance: 1e-10,
            step_tolerance: 1e-15,
            cost_tolerance: 1e-14,
            initial_damping: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmReport {
    pub params: DVector<f64>,
    /// `½‖r‖²` at `params`.
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

/// Minimizes `½‖r(p)‖²` from `initial`. Returns `None` if the residuals are
/// undefined at the starting point.
pub fn levenberg_marquardt<P: LeastSquaresProblem + ?Sized>(
    problem: &P,
    initial: DVector<f64>,
    config: &LmConfig,
) -> Option<LmReport> {
    let mut params = initial;
    let mut r = problem.residuals(&params)?;
    let mut cost = 0.5 * r.norm_squared();
    let mut history = vec![cost];
    let mut lambda = config.initial_damping;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < config.max_iterations {
        iterations += 1;
        let jac = problem.jacobian(&params)?;
        let grad = jac.transpose() * &r;
        if grad.amax() < config.gradient_tolerance || cost == 0.0 {
            converged = true;
            break;
        }
        let jtj = jac.transpose() * &jac;
        let mut accepted = false;
        for _ in 0..30 {
            let mut damped = jtj.clone();
            for k in 0..damped.nrows() {
                damped[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&(-&grad))) else {
                lambda *= 10.0;
                continue;
            };
            let candidate = &params + &step;
            match problem.residuals(&candidate) {
                Some(r_new) => {
                    let new_cost = 0.5 * r_new.norm_squared();
                    if new_cost < cost {
                        let small = step
                            .iter()
                            .zip(params.iter())
                            .all(|(s, p)| s.abs() <= config.step_tolerance * p.abs().max(1.0))
                            || cost - new_cost <= config.cost_tolerance * cost;
                        params = candidate;
                        r = r_new;
                        cost = new_cost;
                        history.push(cost);
                        lambda = (lambda * 0.3).max(1e-12);
                        accepted = true;
                        if small {
                            converged = true;
                        }
                        break;
                    }
                    lambda *= 10.0;
                }
                None => lambda *= 10.0,
            }
        }
        if !accepted {
            // no descent direction left at machine precision
            converged = grad.amax() < config.gradient_tolerance.sqrt();
            break;
        }
        if converged {
            break;
        }
    }

    Some(LmReport {
        params,
        cost,
        iterations,
        converged,
        cost_history: history,
    })
}
