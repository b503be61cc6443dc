//! Projected Gauss-Newton with active-set splitting, preconditioned CG on the
//! inactive set and Armijo backtracking on the box-projected path.

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::krylov::projected_pcg;
use crate::mesh::ModelBounds;
use crate::scalar::dot;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MisfitParts {
    pub fwi: f64,
    pub eik: f64,
    pub reg: f64,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub value: f64,
    pub parts: MisfitParts,
    pub gradient: Vec<f64>,
}

/// A smooth objective with a Gauss-Newton Hessian.
pub trait Objective {
    fn len(&self) -> usize;

    /// Value and gradient at `m`. Hessian products after this call refer to `m`.
    fn evaluate(&mut self, m: &[f64]) -> Result<Evaluation>;

    /// Value only, for line-search trials.
    fn value(&mut self, m: &[f64]) -> Result<(f64, MisfitParts)>;

    /// Gauss-Newton Hessian product at the last evaluated point.
    fn hessian_vec(&self, v: &[f64]) -> Result<Vec<f64>>;

    fn precondition(&self, r: &[f64]) -> Vec<f64> {
        r.to_vec()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GnOptions {
    pub max_iter: usize,
    pub pcg_iters: usize,
    pub pcg_tol: f64,
    pub armijo: f64,
    pub backtrack: f64,
    pub max_trials: usize,
    /// Stop once the inactive gradient norm falls below this fraction of its
    /// first value.
    pub grad_tol: f64,
}

impl Default for GnOptions {
    fn default() -> Self {
        GnOptions { max_iter: 10, pcg_iters: 5, pcg_tol: 1e-10, armijo: 1e-4, backtrack: 0.5, max_trials: 10, grad_tol: 1e-5 }
    }
}

/// One Gauss-Newton iteration, measured at the accepted iterate.
#[derive(Clone, Debug, PartialEq)]
pub struct GnIteration {
    pub parts: MisfitParts,
    pub value: f64,
    pub step_length: f64,
    pub active_count: usize,
    pub pcg_iterations: usize,
    pub accepted: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GnTermination {
    #[default]
    MaxIterations,
    GradientTolerance,
    Stagnation,
}

#[derive(Clone, Debug, Default)]
pub struct GnOutcome {
    pub iterations: usize,
    pub termination: GnTermination,
    pub initial: Option<(f64, MisfitParts)>,
    pub last_step: Vec<f64>,
    /// Active set of the last iteration.
    pub active: Vec<bool>,
}

/// Indices at a bound whose gradient pushes outward. Points exactly on a
/// bound with zero gradient stay inactive.
pub fn active_set(m: &[f64], g: &[f64], bounds: &ModelBounds) -> Vec<bool> {
    m.iter()
        .zip(g)
        .map(|(&x, &gi)| (x <= bounds.lower && gi > 0.0) || (x >= bounds.upper && gi < 0.0))
        .collect()
}

/// Projected Gauss-Newton from `m` (projected into the box first). Calls
/// `on_iter` after every attempted iteration with the current model.
pub fn projected_gauss_newton(
    obj: &mut dyn Objective,
    m: &mut Vec<f64>,
    bounds: &ModelBounds,
    opts: &GnOptions,
    on_iter: &mut dyn FnMut(&GnIteration, &[f64]) -> Result<()>,
) -> Result<GnOutcome> {
    if m.len() != obj.len() {
        return Err(crate::error::invalid(format!("model has {} values, objective expects {}", m.len(), obj.len())));
    }
    bounds.project(m);
    let mut out = GnOutcome::default();
    if opts.max_iter == 0 {
        return Ok(out);
    }
    let mut ev = obj.evaluate(m)?;
    out.initial = Some((ev.value, ev.parts));
    let mut g0: Option<f64> = None;
    for _ in 0..opts.max_iter {
        let active = active_set(m, &ev.gradient, bounds);
        let inactive: Vec<bool> = active.iter().map(|a| !a).collect();
        let gnorm = ev.gradient.iter().zip(&inactive).filter(|(_, &i)| i).map(|(g, _)| g * g).sum::<f64>().sqrt();
        let g0v = *g0.get_or_insert(gnorm);
        if gnorm == 0.0 || (out.iterations > 0 && gnorm < opts.grad_tol * g0v) {
            out.termination = GnTermination::GradientTolerance;
            break;
        }
        let active_count = active.iter().filter(|&&a| a).count();
        out.active = active.clone();

        let failure: RefCell<Option<Error>> = RefCell::new(None);
        let obj_ref: &dyn Objective = &*obj;
        let op = |v: &[f64]| match obj_ref.hessian_vec(v) {
            Ok(w) => w,
            Err(e) => {
                failure.borrow_mut().get_or_insert(e);
                vec![0.0; v.len()]
            }
        };
        let prec = |r: &[f64]| obj_ref.precondition(r);
        let rhs: Vec<f64> = ev.gradient.iter().map(|g| -g).collect();
        let (mut step, rep) = projected_pcg(&op, &rhs, &prec, &inactive, opts.pcg_tol, opts.pcg_iters);
        if let Some(e) = failure.into_inner() {
            return Err(e);
        }
        if active_count > 0 {
            let dmax = step.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let gmax = ev.gradient.iter().zip(&active).filter(|(_, &a)| a).fold(0.0f64, |a, (g, _)| a.max(g.abs()));
            let s = if dmax > 0.0 && gmax > 0.0 { dmax / gmax } else { 1.0 };
            for i in 0..step.len() {
                if active[i] {
                    step[i] = -s * ev.gradient[i];
                }
            }
        }

        let mut mu = 1.0;
        let mut accepted = None;
        for _ in 0..opts.max_trials {
            let mut trial: Vec<f64> = m.iter().zip(&step).map(|(x, d)| x + mu * d).collect();
            bounds.project(&mut trial);
            let moved: Vec<f64> = trial.iter().zip(m.iter()).map(|(a, b)| a - b).collect();
            let decrease = dot(&ev.gradient, &moved);
            if moved.iter().all(|&d| d == 0.0) {
                break;
            }
            let (val, _) = obj.value(&trial)?;
            if val < ev.value && val <= ev.value + opts.armijo * decrease {
                accepted = Some(trial);
                break;
            }
            mu *= opts.backtrack;
        }
        out.iterations += 1;
        match accepted {
            Some(trial) => {
                out.last_step = trial.iter().zip(m.iter()).map(|(a, b)| a - b).collect();
                *m = trial;
                ev = obj.evaluate(m)?;
                let it = GnIteration {
                    parts: ev.parts,
                    value: ev.value,
                    step_length: mu,
                    active_count,
                    pcg_iterations: rep.iterations,
                    accepted: true,
                };
                on_iter(&it, m)?;
            }
            None => {
                let it = GnIteration {
                    parts: ev.parts,
                    value: ev.value,
                    step_length: 0.0,
                    active_count,
                    pcg_iterations: rep.iterations,
                    accepted: false,
                };
                on_iter(&it, m)?;
                out.termination = GnTermination::Stagnation;
                break;
            }
        }
    }
    Ok(out)
}

/// `½‖W(m - m*)‖²` with diagonal weights, for testing.
#[derive(Clone, Debug)]
pub struct DiagonalQuadratic {
    pub target: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Objective for DiagonalQuadratic {
    fn len(&self) -> usize {
        self.target.len()
    }

    fn evaluate(&mut self, m: &[f64]) -> Result<Evaluation> {
        let (value, parts) = self.value(m)?;
        let gradient = m.iter().zip(&self.target).zip(&self.weights).map(|((x, t), w)| w * (x - t)).collect();
        Ok(Evaluation { value, parts, gradient })
    }

    fn value(&mut self, m: &[f64]) -> Result<(f64, MisfitParts)> {
        let v = 0.5 * m.iter().zip(&self.target).zip(&self.weights).map(|((x, t), w)| w * (x - t).powi(2)).sum::<f64>();
        Ok((v, MisfitParts { fwi: v, ..Default::default() }))
    }

    fn hessian_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        Ok(v.iter().zip(&self.weights).map(|(a, w)| a * w).collect())
    }
}
