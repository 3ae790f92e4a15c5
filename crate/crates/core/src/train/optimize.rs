//! Limited-memory BFGS with a backtracking Armijo line search.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSettings {
    pub max_iterations: usize,
    /// Convergence when the gradient max-norm drops to this.
    pub gradient_tolerance: f64,
    pub memory: usize,
    /// Largest allowed change of any coordinate in one step.
    pub max_step: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            max_iterations: 500,
            gradient_tolerance: 1e-3,
            memory: 10,
            max_step: 2.0,
        }
    }
}

impl OptimizerSettings {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || self.memory == 0 {
            return Err(Error::Config("optimizer max_iterations and memory must be >= 1".into()));
        }
        if !(self.gradient_tolerance > 0.0) || !(self.max_step > 0.0) {
            return Err(Error::Config("optimizer tolerances must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizationTrace {
    /// Objective after each accepted iterate, starting with the initial point.
    pub objective: Vec<f64>,
    pub gradient_norm: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub trace: OptimizationTrace,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Two-loop recursion for `-H g`.
fn direction(g: &[f64], memory: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q: Vec<f64> = g.to_vec();
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y, rho) in memory.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = memory.back() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in &mut q {
            *qi *= gamma;
        }
    }
    for ((s, y, rho), a) in memory.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter().map(|v| -v).collect()
}

/// Minimize `f` from `x0`. Evaluation errors and non-finite values inside the
/// line search count as `+inf`; an error at `x0` is returned.
pub fn minimize(
    mut f: impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    x0: &[f64],
    settings: &OptimizerSettings,
) -> Result<Minimum> {
    settings.validate()?;
    let (mut fx, mut g) = f(x0)?;
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical(
            "objective not finite at the starting point",
            format!("value {fx}, x0 = {x0:?}"),
        ));
    }
    let mut x = x0.to_vec();
    let mut trace = OptimizationTrace {
        objective: vec![fx],
        gradient_norm: vec![max_abs(&g)],
        iterations: 0,
        evaluations: 1,
        converged: false,
        message: String::new(),
    };
    let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();

    loop {
        let gnorm = max_abs(&g);
        if gnorm <= settings.gradient_tolerance {
            trace.converged = true;
            trace.message = "gradient tolerance reached".into();
            break;
        }
        if trace.iterations >= settings.max_iterations {
            trace.message = "iteration limit reached".into();
            break;
        }
        let mut d = direction(&g, &memory);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            memory.clear();
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
        }
        let mut step = if memory.is_empty() { 1.0 / gnorm.max(1.0) } else { 1.0 };
        let dmax = max_abs(&d);
        if step * dmax > settings.max_step {
            step = settings.max_step / dmax;
        }

        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let xn: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            trace.evaluations += 1;
            if let Ok((fv, gv)) = f(&xn) {
                if fv.is_finite() && gv.iter().all(|v| v.is_finite()) && fv <= fx + ARMIJO_C1 * step * slope {
                    accepted = Some((xn, fv, gv));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else {
            if memory.is_empty() {
                trace.message = "line search failed along steepest descent".into();
                break;
            }
            memory.clear();
            continue;
        };

        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if memory.len() == settings.memory {
                memory.pop_front();
            }
            memory.push_back((s, y, 1.0 / sy));
        }
        x = xn;
        fx = fn_;
        g = gn;
        trace.iterations += 1;
        trace.objective.push(fx);
        trace.gradient_norm.push(max_abs(&g));
    }
    Ok(Minimum {
        x,
        value: fx,
        gradient: g,
        trace,
    })
}
