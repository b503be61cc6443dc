//! Weighted least-squares data misfits for both physics, their gradients and
//! Gauss-Newton Hessian products, and the joint objective.

use rayon::prelude::*;

use crate::block::Block;
use crate::eikonal::{eik_jacobian_transpose_vec, eik_jacobian_vec, fm_solve, SensitivityRecord};
use crate::error::{invalid, Error, Result};
use crate::helmholtz::{fwi_adjoint_accumulate, fwi_field_perturbations, HelmholtzSolver};
use crate::mesh::{extend_adjoint, extend_field, SlownessSquaredModel};
use crate::scalar::Complex64;

use super::gauss_newton::{Evaluation, MisfitParts, Objective};
use super::regularizer::{Regularizer, RegularizerPreconditioner, DEFAULT_PRECONDITIONER_BYTES};
use super::survey::{ObservedData, Survey};

/// Forward state of one frequency: solver, wavefields and weighted residuals.
#[derive(Clone, Debug)]
pub struct FwiFrequencyState {
    pub freq: usize,
    pub solver: HelmholtzSolver,
    pub fields: Block<Complex64>,
    /// `[source][receiver]`, zero at inactive receivers.
    pub residuals: Vec<Vec<Complex64>>,
}

#[derive(Clone, Debug)]
pub struct FwiEvaluation {
    pub value: f64,
    pub states: Vec<FwiFrequencyState>,
}

/// `Σ_j Σ_i w_ij ‖P_iᵀ u_ij(m) - d_ij‖²` over frequency indices `freqs`,
/// keeping solvers and fields for gradient and Hessian products.
pub fn fwi_forward(survey: &Survey, data: &ObservedData, m: &[f64], freqs: &[usize]) -> Result<FwiEvaluation> {
    let geo = survey.geometry();
    let mut value = 0.0;
    let mut states = Vec::with_capacity(freqs.len());
    for &j in freqs {
        if j >= data.fwi.len() {
            return Err(invalid(format!("frequency index {j} out of range")));
        }
        let solver = survey.helmholtz_solver(m, j)?;
        let fields = survey.wavefields(&solver, j)?;
        let mut residuals = Vec::with_capacity(survey.num_sources());
        for s in 0..survey.num_sources() {
            let mask = geo.mask(s);
            let pred = survey.sampling_padded().sample(&fields.column(s), Some(mask));
            let r: Vec<Complex64> = pred
                .iter()
                .zip(&data.fwi[j][s])
                .zip(mask)
                .map(|((p, d), &a)| if a { p - d } else { Complex64::new(0.0, 0.0) })
                .collect();
            value += data.fwi_weights[j][s] * r.iter().map(|v| v.norm_sqr()).sum::<f64>();
            residuals.push(r);
        }
        states.push(FwiFrequencyState { freq: j, solver, fields, residuals });
    }
    Ok(FwiEvaluation { value, states })
}

/// Weighted, conjugated receiver vectors spread onto the padded grid.
fn adjoint_sources(survey: &Survey, data: &ObservedData, j: usize, r: &[Vec<Complex64>]) -> Block<Complex64> {
    let cols: Vec<Vec<Complex64>> = r
        .iter()
        .enumerate()
        .map(|(s, rs)| {
            let w = data.fwi_weights[j][s];
            let wc: Vec<Complex64> = rs.iter().map(|v| v.conj() * w).collect();
            survey.sampling_padded().sample_adjoint(&wc, Some(survey.geometry().mask(s)))
        })
        .collect();
    Block::from_columns(&cols)
}

fn fwi_adjoint(survey: &Survey, data: &ObservedData, st: &FwiFrequencyState, r: &[Vec<Complex64>]) -> Result<Vec<f64>> {
    let g = adjoint_sources(survey, data, st.freq, r);
    fwi_adjoint_accumulate(&st.solver, &st.fields, &g)
        .map_err(|e| e.context(&format!("adjoint solve at frequency {} Hz", survey.frequencies()[st.freq])))
}

fn restrict_to_core(survey: &Survey, padded: &[f64]) -> Vec<f64> {
    extend_adjoint(survey.core(), survey.padded(), &survey.padding(), padded)
}

/// Gradient `2 Σ Jᵀ W r` on the core grid.
pub fn fwi_gradient(survey: &Survey, data: &ObservedData, ev: &FwiEvaluation) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; survey.padded().len()];
    for st in &ev.states {
        let g = fwi_adjoint(survey, data, st, &st.residuals)?;
        acc.iter_mut().zip(&g).for_each(|(a, b)| *a += 2.0 * b);
    }
    Ok(restrict_to_core(survey, &acc))
}

pub fn fwi_misfit_and_gradient(survey: &Survey, data: &ObservedData, m: &[f64], freqs: &[usize]) -> Result<(f64, Vec<f64>, FwiEvaluation)> {
    let ev = fwi_forward(survey, data, m, freqs)?;
    let g = fwi_gradient(survey, data, &ev)?;
    Ok((ev.value, g, ev))
}

/// Linearized receiver data `J v` per frequency state and source.
pub fn fwi_jacobian_data(survey: &Survey, ev: &FwiEvaluation, v: &[f64]) -> Result<Vec<Vec<Vec<Complex64>>>> {
    let vp = extend_field(survey.core(), survey.padded(), &survey.padding(), v);
    ev.states
        .iter()
        .map(|st| {
            let du = fwi_field_perturbations(&st.solver, &st.fields, &vp)
                .map_err(|e| e.context(&format!("sensitivity solve at frequency {} Hz", survey.frequencies()[st.freq])))?;
            Ok((0..du.ncols()).map(|s| survey.sampling_padded().sample(&du.column(s), Some(survey.geometry().mask(s)))).collect())
        })
        .collect()
}

/// `2 Σ Jᵀ W J v`.
pub fn fwi_hessian_vec(survey: &Survey, data: &ObservedData, ev: &FwiEvaluation, v: &[f64]) -> Result<Vec<f64>> {
    let jv = fwi_jacobian_data(survey, ev, v)?;
    let mut acc = vec![0.0; survey.padded().len()];
    for (st, d) in ev.states.iter().zip(&jv) {
        let g = fwi_adjoint(survey, data, st, d)?;
        acc.iter_mut().zip(&g).for_each(|(a, b)| *a += 2.0 * b);
    }
    Ok(restrict_to_core(survey, &acc))
}

#[derive(Clone, Debug)]
pub struct EikEvaluation {
    pub value: f64,
    pub records: Vec<SensitivityRecord>,
    /// `[source][receiver]`, zero at inactive receivers.
    pub residuals: Vec<Vec<f64>>,
}

fn travel_times(data: &ObservedData) -> Result<&Vec<Vec<f64>>> {
    data.travel_times.as_ref().ok_or_else(|| Error::State("no travel-time data".into()))
}

/// `Σ_i w_i ‖P_iᵀ τ_i(m) - d_i‖²`, keeping sensitivity records.
pub fn eik_forward(survey: &Survey, data: &ObservedData, m: &[f64]) -> Result<EikEvaluation> {
    let tt = travel_times(data)?;
    let model = SlownessSquaredModel::new(survey.core().clone(), m.to_vec())?;
    let nd = survey.core().ndim();
    let per_source: Vec<(SensitivityRecord, Vec<f64>, f64)> = (0..survey.num_sources())
        .into_par_iter()
        .map(|s| {
            let (sol, rec) = fm_solve(&model, &survey.geometry().sources()[s][..nd]).map_err(|e| e.context(&format!("source {s}")))?;
            let mask = survey.geometry().mask(s);
            let pred = survey.sampling_core().sample(&sol.travel_time(), Some(mask));
            let r: Vec<f64> = pred.iter().zip(&tt[s]).zip(mask).map(|((p, d), &a)| if a { p - d } else { 0.0 }).collect();
            let v = data.eik_weights[s] * r.iter().map(|x| x * x).sum::<f64>();
            Ok((rec, r, v))
        })
        .collect::<Result<_>>()?;
    let mut ev = EikEvaluation { value: 0.0, records: Vec::new(), residuals: Vec::new() };
    for (rec, r, v) in per_source {
        ev.value += v;
        ev.records.push(rec);
        ev.residuals.push(r);
    }
    Ok(ev)
}

fn eik_adjoint(survey: &Survey, data: &ObservedData, ev: &EikEvaluation, r: &[Vec<f64>]) -> Result<Vec<f64>> {
    let parts: Vec<Vec<f64>> = (0..ev.records.len())
        .into_par_iter()
        .map(|s| {
            let w = data.eik_weights[s];
            let rs: Vec<f64> = r[s].iter().map(|x| 2.0 * w * x).collect();
            let grid_w = survey.sampling_core().sample_adjoint(&rs, Some(survey.geometry().mask(s)));
            eik_jacobian_transpose_vec(&ev.records[s], &grid_w)
        })
        .collect::<Result<_>>()?;
    let mut acc = vec![0.0; survey.core().len()];
    for p in parts {
        acc.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
    }
    Ok(acc)
}

pub fn eik_gradient(survey: &Survey, data: &ObservedData, ev: &EikEvaluation) -> Result<Vec<f64>> {
    eik_adjoint(survey, data, ev, &ev.residuals)
}

pub fn eik_misfit_and_gradient(survey: &Survey, data: &ObservedData, m: &[f64]) -> Result<(f64, Vec<f64>, EikEvaluation)> {
    let ev = eik_forward(survey, data, m)?;
    let g = eik_gradient(survey, data, &ev)?;
    Ok((ev.value, g, ev))
}

/// `2 Σ Jᵀ W J v` for the travel-time term.
pub fn eik_hessian_vec(survey: &Survey, data: &ObservedData, ev: &EikEvaluation, v: &[f64]) -> Result<Vec<f64>> {
    let jv: Vec<Vec<f64>> = (0..ev.records.len())
        .into_par_iter()
        .map(|s| {
            let dt = eik_jacobian_vec(&ev.records[s], v)?;
            Ok(survey.sampling_core().sample(&dt, Some(survey.geometry().mask(s))))
        })
        .collect::<Result<_>>()?;
    eik_adjoint(survey, data, ev, &jv)
}

/// Which terms enter `Φ = Φ_fwi + β Φ_eik + α R`.
#[derive(Clone, Debug)]
pub struct JointTerms {
    /// Frequency indices of the waveform term (may be empty).
    pub freqs: Vec<usize>,
    /// Travel-time weight `β`; `None` leaves the travel-time term out.
    pub beta: Option<f64>,
    pub regularizer: Option<Regularizer>,
}

#[derive(Clone, Debug)]
struct Cache {
    m: Vec<f64>,
    fwi: Option<FwiEvaluation>,
    eik: Option<EikEvaluation>,
    parts: MisfitParts,
    value: f64,
}

/// The joint objective as a Gauss-Newton [`Objective`], preconditioned by
/// the regularizer Hessian when `α > 0`.
pub struct JointObjective<'a> {
    survey: &'a Survey,
    data: &'a ObservedData,
    terms: JointTerms,
    prec: Option<RegularizerPreconditioner>,
    current: Option<Cache>,
    trial: Option<Cache>,
}

impl<'a> JointObjective<'a> {
    pub fn new(survey: &'a Survey, data: &'a ObservedData, terms: JointTerms) -> Result<Self> {
        if let Some(b) = terms.beta {
            if !(b >= 0.0) {
                return Err(invalid("beta must be nonnegative"));
            }
            travel_times(data)?;
        }
        let prec = match &terms.regularizer {
            Some(r) if r.alpha() > 0.0 => Some(RegularizerPreconditioner::new(r, r.alpha(), DEFAULT_PRECONDITIONER_BYTES)?),
            _ => None,
        };
        Ok(JointObjective { survey, data, terms, prec, current: None, trial: None })
    }

    pub fn terms(&self) -> &JointTerms {
        &self.terms
    }

    fn compute(&self, m: &[f64]) -> Result<Cache> {
        let mut parts = MisfitParts::default();
        let fwi = if self.terms.freqs.is_empty() {
            None
        } else {
            let ev = fwi_forward(self.survey, self.data, m, &self.terms.freqs)?;
            parts.fwi = ev.value;
            Some(ev)
        };
        let eik = match self.terms.beta {
            Some(_) => {
                let ev = eik_forward(self.survey, self.data, m)?;
                parts.eik = ev.value;
                Some(ev)
            }
            None => None,
        };
        let mut value = parts.fwi + self.terms.beta.unwrap_or(0.0) * parts.eik;
        if let Some(r) = &self.terms.regularizer {
            parts.reg = r.value(m);
            value += r.alpha() * parts.reg;
        }
        Ok(Cache { m: m.to_vec(), fwi, eik, parts, value })
    }

    fn gradient(&self, c: &Cache) -> Result<Vec<f64>> {
        let mut g = vec![0.0; c.m.len()];
        if let Some(ev) = &c.fwi {
            g = fwi_gradient(self.survey, self.data, ev)?;
        }
        if let (Some(ev), Some(beta)) = (&c.eik, self.terms.beta) {
            let ge = eik_gradient(self.survey, self.data, ev)?;
            g.iter_mut().zip(&ge).for_each(|(a, b)| *a += beta * b);
        }
        if let Some(r) = &self.terms.regularizer {
            let gr = r.gradient(&c.m);
            g.iter_mut().zip(&gr).for_each(|(a, b)| *a += r.alpha() * b);
        }
        Ok(g)
    }
}

impl Objective for JointObjective<'_> {
    fn len(&self) -> usize {
        self.survey.core().len()
    }

    fn evaluate(&mut self, m: &[f64]) -> Result<Evaluation> {
        let cache = match self.trial.take() {
            Some(c) if c.m == m => c,
            _ => self.compute(m)?,
        };
        let gradient = self.gradient(&cache)?;
        let ev = Evaluation { value: cache.value, parts: cache.parts, gradient };
        self.current = Some(cache);
        Ok(ev)
    }

    fn value(&mut self, m: &[f64]) -> Result<(f64, MisfitParts)> {
        let c = self.compute(m)?;
        let out = (c.value, c.parts);
        self.trial = Some(c);
        Ok(out)
    }

    fn hessian_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        let c = self.current.as_ref().ok_or_else(|| Error::State("Hessian product requested before evaluation".into()))?;
        let mut out = vec![0.0; v.len()];
        if let Some(ev) = &c.fwi {
            out = fwi_hessian_vec(self.survey, self.data, ev, v)?;
        }
        if let (Some(ev), Some(beta)) = (&c.eik, self.terms.beta) {
            let h = eik_hessian_vec(self.survey, self.data, ev, v)?;
            out.iter_mut().zip(&h).for_each(|(a, b)| *a += beta * b);
        }
        if let Some(r) = &self.terms.regularizer {
            let h = r.hessian_vec(v);
            out.iter_mut().zip(&h).for_each(|(a, b)| *a += r.alpha() * b);
        }
        Ok(out)
    }

    fn precondition(&self, r: &[f64]) -> Vec<f64> {
        match &self.prec {
            Some(p) => p.apply(r),
            None => r.to_vec(),
        }
    }
}

/// `Φ_fwi + β Φ_eik + α R` and its gradient at `m`.
pub fn joint_objective(survey: &Survey, data: &ObservedData, m: &[f64], terms: JointTerms) -> Result<(f64, MisfitParts, Vec<f64>)> {
    let mut obj = JointObjective::new(survey, data, terms)?;
    let ev = obj.evaluate(m)?;
    Ok((ev.value, ev.parts, ev.gradient))
}
