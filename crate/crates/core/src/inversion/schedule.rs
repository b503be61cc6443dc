//! Frequency continuation and the two-stage joint inversion, plus the
//! waveform-only and tomography-then-waveform pipelines.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::mesh::ModelBounds;

use super::gauss_newton::{projected_gauss_newton, GnOptions, GnOutcome, GnTermination};
use super::misfit::{eik_forward, fwi_forward, JointObjective, JointTerms};
use super::regularizer::{Regularizer, RegularizerConfig, RegularizerKind};
use super::survey::{ObservedData, Survey};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinuationSchedule {
    /// Frequencies used together with the travel times in stage I.
    pub f_low: usize,
    /// Largest number of data sets (frequencies, travel times) per solve.
    pub batch_size: usize,
    pub sweeps: usize,
    pub gn_stage1: usize,
    pub gn_per_batch: usize,
    pub pcg_iters: usize,
    pub beta_stage1: f64,
    pub beta_stage2: f64,
    pub alpha0: f64,
    pub alpha_decay: f64,
}

impl Default for ContinuationSchedule {
    fn default() -> Self {
        ContinuationSchedule {
            f_low: 1,
            batch_size: 3,
            sweeps: 3,
            gn_stage1: 15,
            gn_per_batch: 5,
            pcg_iters: 5,
            beta_stage1: 2500.0,
            beta_stage2: 50.0,
            alpha0: 1e4,
            alpha_decay: 10.0,
        }
    }
}

impl ContinuationSchedule {
    pub fn validate(&self, nfreq: usize) -> Result<()> {
        if self.f_low == 0 || self.f_low > nfreq {
            return Err(invalid(format!("f_low must be in 1..={nfreq}, got {}", self.f_low)));
        }
        if self.batch_size == 0 || self.sweeps == 0 || self.pcg_iters == 0 {
            return Err(invalid("batch size, sweeps and PCG iterations must be at least 1"));
        }
        if !(self.beta_stage1 > 0.0 && self.beta_stage2 > 0.0) {
            return Err(invalid("beta must be positive"));
        }
        if !(self.alpha0 >= 0.0 && self.alpha_decay > 0.0) {
            return Err(invalid("alpha0 must be nonnegative and the decay positive"));
        }
        Ok(())
    }

    /// Regularization weight of stage-II sweep `sweep` (0-based).
    pub fn alpha(&self, sweep: usize) -> f64 {
        self.alpha0 / self.alpha_decay.powi(sweep as i32)
    }
}

/// Solves of one continuation sweep: for `k = 0..nf` the frequencies
/// `ω_{k-b+1} ..= ω_k` (at most `batch` of them). With travel times the
/// first windows include them and they count toward the batch size.
pub fn frequency_windows(nfreq: usize, batch: usize, travel_time: bool) -> Vec<(Vec<usize>, bool)> {
    (0..nfreq)
        .map(|k| {
            let start = (k + 1).saturating_sub(batch);
            let freqs: Vec<usize> = (start..=k).collect();
            let tt = travel_time && (k == 0 || (start == 0 && freqs.len() < batch));
            (freqs, tt)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InversionMode {
    FwiOnly,
    TomoThenFwi,
    JointTwoStage,
}

impl InversionMode {
    pub fn name(&self) -> &'static str {
        match self {
            InversionMode::FwiOnly => "fwi_only",
            InversionMode::TomoThenFwi => "tomo_then_fwi",
            InversionMode::JointTwoStage => "joint_two_stage",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fwi_only" => Ok(InversionMode::FwiOnly),
            "tomo_then_fwi" => Ok(InversionMode::TomoThenFwi),
            "joint_two_stage" => Ok(InversionMode::JointTwoStage),
            _ => Err(invalid(format!("unknown inversion mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub iter: usize,
    pub stage: usize,
    pub sweep: usize,
    pub freq_batch: String,
    pub phi_fwi: f64,
    pub phi_eik: f64,
    pub phi_reg: f64,
    pub phi_total: f64,
    pub step_length: f64,
    pub active_count: usize,
}

impl HistoryRow {
    pub const CSV_HEADER: &'static str = "iter,stage,sweep,freq_batch,phi_fwi,phi_eik,phi_reg,phi_total,step_length,active_count";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{:e},{:e},{:e},{:e},{},{}",
            self.iter,
            self.stage,
            self.sweep,
            self.freq_batch,
            self.phi_fwi,
            self.phi_eik,
            self.phi_reg,
            self.phi_total,
            self.step_length,
            self.active_count
        )
    }
}

/// Misfit over all available data after a continuation step.
#[derive(Clone, Debug, PartialEq)]
pub struct StageMisfit {
    pub label: String,
    pub phi_fwi: f64,
    pub phi_eik: Option<f64>,
}

/// Model, bounds and bookkeeping of a running inversion.
#[derive(Clone, Debug)]
pub struct InversionState {
    pub m: Vec<f64>,
    pub bounds: ModelBounds,
    /// Active set of the last Gauss-Newton iteration.
    pub active: Vec<bool>,
    pub history: Vec<HistoryRow>,
    pub stage_misfits: Vec<StageMisfit>,
    pub stagnations: usize,
}

impl InversionState {
    pub fn new(m: Vec<f64>, bounds: ModelBounds) -> Result<Self> {
        if !bounds.contains(&m) {
            return Err(invalid("start model violates the bounds"));
        }
        let n = m.len();
        Ok(InversionState { m, bounds, active: vec![false; n], history: Vec::new(), stage_misfits: Vec::new(), stagnations: 0 })
    }
}

/// Called after every Gauss-Newton iteration with the new row and model.
pub type Observer<'o> = dyn FnMut(&HistoryRow, &[f64]) -> Result<()> + 'o;

/// One Gauss-Newton solve of the joint objective.
#[derive(Clone, Debug)]
pub struct SolveSpec {
    pub stage: usize,
    pub sweep: usize,
    pub freqs: Vec<usize>,
    /// Travel-time weight `β`, `None` for no travel-time term.
    pub beta: Option<f64>,
    pub reg: RegularizerKind,
    pub alpha: f64,
    pub gn: GnOptions,
}

fn batch_label(survey: &Survey, freqs: &[usize], tt: bool) -> String {
    let mut parts: Vec<String> = Vec::new();
    if tt {
        parts.push("tt".into());
    }
    parts.extend(freqs.iter().map(|&j| format!("{}", survey.frequencies()[j])));
    parts.join(";")
}

pub fn run_solve(
    state: &mut InversionState,
    survey: &Survey,
    data: &ObservedData,
    m_ref: &[f64],
    spec: &SolveSpec,
    observer: &mut Observer<'_>,
) -> Result<GnOutcome> {
    let reg = Regularizer::new(survey.core(), RegularizerConfig { kind: spec.reg, alpha: spec.alpha, m_ref: m_ref.to_vec() })?;
    let terms = JointTerms { freqs: spec.freqs.clone(), beta: spec.beta, regularizer: Some(reg) };
    let mut obj = JointObjective::new(survey, data, terms)?;
    let label = batch_label(survey, &spec.freqs, spec.beta.is_some());
    let beta = spec.beta.unwrap_or(0.0);
    let bounds = state.bounds;
    let history = &mut state.history;
    let mut m = state.m.clone();
    let out = projected_gauss_newton(&mut obj, &mut m, &bounds, &spec.gn, &mut |it, m| {
        let row = HistoryRow {
            iter: history.len() + 1,
            stage: spec.stage,
            sweep: spec.sweep,
            freq_batch: label.clone(),
            phi_fwi: it.parts.fwi,
            phi_eik: it.parts.eik,
            phi_reg: it.parts.reg,
            phi_total: it.parts.fwi + beta * it.parts.eik + spec.alpha * it.parts.reg,
            step_length: it.step_length,
            active_count: it.active_count,
        };
        observer(&row, m)?;
        history.push(row);
        Ok(())
    })?;
    state.m = m;
    if out.termination == GnTermination::Stagnation {
        state.stagnations += 1;
    }
    if !out.active.is_empty() {
        state.active = out.active.clone();
    }
    Ok(out)
}

/// Misfits over every frequency (and the travel times, when present) at `m`.
pub fn full_misfit(survey: &Survey, data: &ObservedData, m: &[f64]) -> Result<(f64, Option<f64>)> {
    let all: Vec<usize> = (0..survey.frequencies().len()).collect();
    let fwi = fwi_forward(survey, data, m, &all)?.value;
    let eik = match data.travel_times {
        Some(_) => Some(eik_forward(survey, data, m)?.value),
        None => None,
    };
    Ok((fwi, eik))
}

fn record_stage(state: &mut InversionState, survey: &Survey, data: &ObservedData, label: String) -> Result<()> {
    let (phi_fwi, phi_eik) = full_misfit(survey, data, &state.m)?;
    state.stage_misfits.push(StageMisfit { label, phi_fwi, phi_eik });
    Ok(())
}

/// Algorithm-1 style continuation for one sweep: each window warm-starts from
/// the previous result. `beta` adds the travel times to the first windows.
#[allow(clippy::too_many_arguments)]
pub fn frequency_continuation(
    state: &mut InversionState,
    survey: &Survey,
    data: &ObservedData,
    m_ref: &[f64],
    schedule: &ContinuationSchedule,
    stage: usize,
    sweep: usize,
    reg: RegularizerKind,
    alpha: f64,
    beta: Option<f64>,
    observer: &mut Observer<'_>,
) -> Result<()> {
    let windows = frequency_windows(survey.frequencies().len(), schedule.batch_size, beta.is_some());
    for (freqs, tt) in windows {
        let spec = SolveSpec {
            stage,
            sweep,
            beta: if tt { beta } else { None },
            freqs,
            reg,
            alpha,
            gn: GnOptions { max_iter: schedule.gn_per_batch, pcg_iters: schedule.pcg_iters, ..Default::default() },
        };
        run_solve(state, survey, data, m_ref, &spec, observer)?;
        let label = format!("stage {stage} sweep {sweep} {}", batch_label(survey, &spec.freqs, spec.beta.is_some()));
        record_stage(state, survey, data, label)?;
    }
    Ok(())
}

fn check_inputs(state: &InversionState, survey: &Survey, data: &ObservedData, schedule: &ContinuationSchedule) -> Result<()> {
    schedule.validate(survey.frequencies().len())?;
    data.validate(survey)?;
    if state.m.len() != survey.core().len() {
        return Err(invalid("start model does not match the grid"));
    }
    Ok(())
}

/// Stage I: travel times with the lowest frequencies and the spline
/// regularizer. Stage II: sweeps over frequency windows with the gradient
/// regularizer and `α` decaying per sweep.
pub fn two_stage_joint_inversion(
    state: &mut InversionState,
    survey: &Survey,
    data: &ObservedData,
    schedule: &ContinuationSchedule,
    observer: &mut Observer<'_>,
) -> Result<()> {
    check_inputs(state, survey, data, schedule)?;
    if data.travel_times.is_none() {
        return Err(invalid("joint inversion needs travel-time data"));
    }
    let m_ref = state.m.clone();
    record_stage(state, survey, data, "start".into())?;
    for f in 1..=schedule.f_low {
        let spec = SolveSpec {
            stage: 1,
            sweep: 0,
            freqs: (0..f).collect(),
            beta: Some(schedule.beta_stage1),
            reg: RegularizerKind::R1Biharmonic,
            alpha: schedule.alpha0,
            gn: GnOptions { max_iter: schedule.gn_stage1, pcg_iters: schedule.pcg_iters, ..Default::default() },
        };
        run_solve(state, survey, data, &m_ref, &spec, observer)?;
        record_stage(state, survey, data, format!("stage 1 {}", batch_label(survey, &spec.freqs, true)))?;
    }
    for sweep in 0..schedule.sweeps {
        frequency_continuation(
            state,
            survey,
            data,
            &m_ref,
            schedule,
            2,
            sweep + 1,
            RegularizerKind::R2Gradient,
            schedule.alpha(sweep),
            Some(schedule.beta_stage2),
            observer,
        )?;
    }
    Ok(())
}

/// Waveform inversion alone: the stage-II sweeps without travel times.
pub fn fwi_only_inversion(
    state: &mut InversionState,
    survey: &Survey,
    data: &ObservedData,
    schedule: &ContinuationSchedule,
    observer: &mut Observer<'_>,
) -> Result<()> {
    check_inputs(state, survey, data, schedule)?;
    let m_ref = state.m.clone();
    record_stage(state, survey, data, "start".into())?;
    for sweep in 0..schedule.sweeps {
        frequency_continuation(
            state,
            survey,
            data,
            &m_ref,
            schedule,
            2,
            sweep + 1,
            RegularizerKind::R2Gradient,
            schedule.alpha(sweep),
            None,
            observer,
        )?;
    }
    Ok(())
}

/// Travel-time tomography with the spline regularizer, then waveform inversion
/// from its result.
pub fn tomo_then_fwi_inversion(
    state: &mut InversionState,
    survey: &Survey,
    data: &ObservedData,
    schedule: &ContinuationSchedule,
    observer: &mut Observer<'_>,
) -> Result<()> {
    check_inputs(state, survey, data, schedule)?;
    if data.travel_times.is_none() {
        return Err(invalid("tomography needs travel-time data"));
    }
    let m_ref = state.m.clone();
    record_stage(state, survey, data, "start".into())?;
    let spec = SolveSpec {
        stage: 1,
        sweep: 0,
        freqs: Vec::new(),
        beta: Some(schedule.beta_stage1),
        reg: RegularizerKind::R1Biharmonic,
        alpha: schedule.alpha0,
        gn: GnOptions { max_iter: schedule.gn_stage1, pcg_iters: schedule.pcg_iters, ..Default::default() },
    };
    run_solve(state, survey, data, &m_ref, &spec, observer)?;
    record_stage(state, survey, data, "stage 1 tt".into())?;
    for sweep in 0..schedule.sweeps {
        frequency_continuation(
            state,
            survey,
            data,
            &m_ref,
            schedule,
            2,
            sweep + 1,
            RegularizerKind::R2Gradient,
            schedule.alpha(sweep),
            None,
            observer,
        )?;
    }
    Ok(())
}

pub fn run_inversion(
    mode: InversionMode,
    state: &mut InversionState,
    survey: &Survey,
    data: &ObservedData,
    schedule: &ContinuationSchedule,
    observer: &mut Observer<'_>,
) -> Result<()> {
    match mode {
        InversionMode::FwiOnly => fwi_only_inversion(state, survey, data, schedule, observer),
        InversionMode::TomoThenFwi => tomo_then_fwi_inversion(state, survey, data, schedule, observer),
        InversionMode::JointTwoStage => two_stage_joint_inversion(state, survey, data, schedule, observer),
    }
}

/// Number of Gauss-Newton iterations the schedule plans for `mode`.
pub fn scheduled_iterations(mode: InversionMode, schedule: &ContinuationSchedule, nfreq: usize) -> usize {
    let stage2 = schedule.sweeps * nfreq * schedule.gn_per_batch;
    match mode {
        InversionMode::FwiOnly => stage2,
        InversionMode::TomoThenFwi => schedule.gn_stage1 + stage2,
        InversionMode::JointTwoStage => schedule.f_low * schedule.gn_stage1 + stage2,
    }
}
