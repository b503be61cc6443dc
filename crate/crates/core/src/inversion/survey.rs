//! Acquisition setup shared by simulation and inversion, observed data,
//! noise and data weights.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::block::Block;
use crate::eikonal::fm_solve;
use crate::error::{invalid, Result};
use crate::helmholtz::{
    assemble_attenuation, ricker, source_block, AttenuationField, HelmholtzProblem, HelmholtzSolver, RickerSource,
    SolverMethod, SolverOptions,
};
use crate::mesh::{pad_model, AcquisitionGeometry, Padding, RegularGrid, SamplingOperator, SlownessSquaredModel};
use crate::multigrid::coarsenable_size;
use crate::scalar::Complex64;

/// Grids, absorbing layer, acquisition, frequencies and solver settings.
#[derive(Clone, Debug)]
pub struct Survey {
    core: RegularGrid,
    padding: Padding,
    padded: RegularGrid,
    attenuation: AttenuationField,
    geometry: AcquisitionGeometry,
    sampling_padded: SamplingOperator,
    sampling_core: SamplingOperator,
    frequencies: Vec<f64>,
    wavelet: RickerSource,
    solver: SolverOptions,
}

#[derive(Clone, Debug)]
pub struct SurveySpec {
    /// Frequencies in Hz, strictly increasing.
    pub frequencies: Vec<f64>,
    pub peak_frequency: f64,
    /// Constant physical attenuation (rad/s).
    pub base_gamma: f64,
    /// Absorbing layer width in nodes; the top of the last axis is a free surface.
    pub layer_width: usize,
    pub solver: SolverOptions,
}

impl Survey {
    pub fn new(core: RegularGrid, geometry: AcquisitionGeometry, spec: SurveySpec) -> Result<Self> {
        if spec.frequencies.is_empty() {
            return Err(invalid("need at least one frequency"));
        }
        if spec.frequencies.iter().any(|f| !(*f > 0.0)) || spec.frequencies.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("frequencies must be positive and strictly increasing"));
        }
        let nd = core.ndim();
        let mut padding = Padding::surface(nd, spec.layer_width);
        if spec.solver.method != SolverMethod::DenseLuSmall {
            for k in 0..nd {
                let total = core.dims()[k] + padding.lo[k] + padding.hi[k];
                padding.hi[k] += coarsenable_size(total, spec.solver.levels) - total;
            }
        }
        let padded = padding.padded_grid(&core)?;
        let attenuation = assemble_attenuation(&padded, spec.base_gamma, spec.layer_width)?;
        let sampling_padded = SamplingOperator::new(&padded, geometry.receivers())?;
        let sampling_core = SamplingOperator::new(&core, geometry.receivers())?;
        for (i, s) in geometry.sources().iter().enumerate() {
            if !core.contains(&s[..nd]) {
                return Err(invalid(format!("source {i} lies outside the model grid")));
            }
        }
        Ok(Survey {
            core,
            padding,
            padded,
            attenuation,
            geometry,
            sampling_padded,
            sampling_core,
            frequencies: spec.frequencies,
            wavelet: ricker(spec.peak_frequency)?,
            solver: spec.solver,
        })
    }

    pub fn core(&self) -> &RegularGrid {
        &self.core
    }

    pub fn padding(&self) -> Padding {
        self.padding
    }

    pub fn padded(&self) -> &RegularGrid {
        &self.padded
    }

    pub fn attenuation(&self) -> &AttenuationField {
        &self.attenuation
    }

    pub fn geometry(&self) -> &AcquisitionGeometry {
        &self.geometry
    }

    pub fn sampling_padded(&self) -> &SamplingOperator {
        &self.sampling_padded
    }

    pub fn sampling_core(&self) -> &SamplingOperator {
        &self.sampling_core
    }

    /// Frequencies in Hz.
    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn omega(&self, j: usize) -> f64 {
        2.0 * PI * self.frequencies[j]
    }

    pub fn wavelet(&self) -> &RickerSource {
        &self.wavelet
    }

    pub fn solver_options(&self) -> &SolverOptions {
        &self.solver
    }

    pub fn num_sources(&self) -> usize {
        self.geometry.num_sources()
    }

    pub fn num_receivers(&self) -> usize {
        self.geometry.num_receivers()
    }

    fn check_model(&self, m: &[f64]) -> Result<()> {
        if m.len() != self.core.len() {
            return Err(invalid(format!("model has {} values for {} nodes", m.len(), self.core.len())));
        }
        Ok(())
    }

    /// Edge-replicated model on the padded grid.
    pub fn padded_model(&self, m: &[f64]) -> Result<SlownessSquaredModel> {
        self.check_model(m)?;
        let core = SlownessSquaredModel::new(self.core.clone(), m.to_vec())?;
        Ok(pad_model(&core, self.padding)?.into_padded())
    }

    /// Factored Helmholtz solver for model `m` at frequency index `j`.
    pub fn helmholtz_solver(&self, m: &[f64], j: usize) -> Result<HelmholtzSolver> {
        let padded = self.padded_model(m)?;
        let omega = self.omega(j);
        let ctx = format!("frequency {} Hz", self.frequencies[j]);
        let problem = HelmholtzProblem::new(&padded, omega, &self.attenuation).map_err(|e| e.context(&ctx))?;
        HelmholtzSolver::new(problem, self.solver.clone()).map_err(|e| e.context(&ctx))
    }

    /// Ricker-weighted point sources for frequency index `j`, one column per source.
    pub fn sources(&self, j: usize) -> Result<Block<Complex64>> {
        let amp = Complex64::new(self.wavelet.spectrum(self.omega(j)), 0.0);
        source_block(&self.padded, self.geometry.sources(), amp)
    }

    /// Wavefields for every source at frequency index `j`.
    pub fn wavefields(&self, solver: &HelmholtzSolver, j: usize) -> Result<Block<Complex64>> {
        let q = self.sources(j)?;
        let ctx = format!("frequency {} Hz, sources 0..{}", self.frequencies[j], q.ncols());
        solver.solve(&q).map_err(|e| e.context(&ctx))
    }

    /// Receiver values of source `s`, NaN at inactive receivers.
    pub fn record(&self, fields: &Block<Complex64>, s: usize) -> Vec<Complex64> {
        let mask = self.geometry.mask(s);
        let d = self.sampling_padded.sample(&fields.column(s), Some(mask));
        d.into_iter().zip(mask).map(|(v, &a)| if a { v } else { Complex64::new(f64::NAN, f64::NAN) }).collect()
    }

    /// Noise-free frequency-domain data, indexed `[frequency][source][receiver]`.
    pub fn simulate_waveforms(&self, m: &[f64]) -> Result<Vec<Vec<Vec<Complex64>>>> {
        (0..self.frequencies.len())
            .map(|j| {
                let solver = self.helmholtz_solver(m, j)?;
                let u = self.wavefields(&solver, j)?;
                Ok((0..self.num_sources()).map(|s| self.record(&u, s)).collect())
            })
            .collect()
    }

    /// Noise-free first-arrival times, indexed `[source][receiver]`, NaN at
    /// inactive receivers.
    pub fn simulate_travel_times(&self, m: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_model(m)?;
        let model = SlownessSquaredModel::new(self.core.clone(), m.to_vec())?;
        (0..self.num_sources())
            .into_par_iter()
            .map(|s| {
                let (sol, _) = fm_solve(&model, &self.geometry.sources()[s]).map_err(|e| e.context(&format!("source {s}")))?;
                let t = sol.travel_time();
                let mask = self.geometry.mask(s);
                let d = self.sampling_core.sample(&t, Some(mask));
                Ok(d.into_iter().zip(mask).map(|(v, &a)| if a { v } else { f64::NAN }).collect())
            })
            .collect()
    }
}

/// Observed data with scalar weights per trace.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservedData {
    /// `[frequency][source][receiver]`, NaN at inactive receivers.
    pub fwi: Vec<Vec<Vec<Complex64>>>,
    /// `[frequency][source]`.
    pub fwi_weights: Vec<Vec<f64>>,
    /// `[source][receiver]`, NaN at inactive receivers.
    pub travel_times: Option<Vec<Vec<f64>>>,
    pub eik_weights: Vec<f64>,
}

fn trace_weight(max: f64, eta: f64) -> f64 {
    let s = if eta > 0.0 { eta * max } else { max };
    if s > 0.0 {
        1.0 / (s * s)
    } else {
        1.0
    }
}

impl ObservedData {
    /// Data with the default weights `1/(eta·max|d|)²` per trace; `eta = 0`
    /// gives `1/max|d|²`.
    pub fn new(fwi: Vec<Vec<Vec<Complex64>>>, travel_times: Option<Vec<Vec<f64>>>, eta: f64) -> Self {
        let fwi_weights = fwi
            .iter()
            .map(|per_src| {
                per_src
                    .iter()
                    .map(|d| trace_weight(d.iter().filter(|v| !v.re.is_nan()).map(|v| v.norm()).fold(0.0, f64::max), eta))
                    .collect()
            })
            .collect();
        let eik_weights = travel_times
            .as_ref()
            .map(|tt| tt.iter().map(|d| trace_weight(d.iter().filter(|v| !v.is_nan()).fold(0.0f64, |a, v| a.max(v.abs())), eta)).collect())
            .unwrap_or_default();
        ObservedData { fwi, fwi_weights, travel_times, eik_weights }
    }

    /// Check dimensions, activity pattern and weights against the survey.
    pub fn validate(&self, survey: &Survey) -> Result<()> {
        let (nf, ns, nr) = (survey.frequencies().len(), survey.num_sources(), survey.num_receivers());
        if self.fwi.len() != nf || self.fwi_weights.len() != nf {
            return Err(invalid(format!("data has {} frequencies, survey has {nf}", self.fwi.len())));
        }
        let geo = survey.geometry();
        for (j, (per_src, w)) in self.fwi.iter().zip(&self.fwi_weights).enumerate() {
            if per_src.len() != ns || w.len() != ns {
                return Err(invalid(format!("frequency {j}: data has {} sources, survey has {ns}", per_src.len())));
            }
            for (s, d) in per_src.iter().enumerate() {
                if d.len() != nr {
                    return Err(invalid(format!("frequency {j}, source {s}: {} receivers, survey has {nr}", d.len())));
                }
                if d.iter().zip(geo.mask(s)).any(|(v, &a)| a == (v.re.is_nan() || v.im.is_nan())) {
                    return Err(invalid(format!("frequency {j}, source {s}: active receivers do not match the offset mask")));
                }
            }
            if w.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                return Err(invalid(format!("frequency {j}: weights must be positive")));
            }
        }
        if let Some(tt) = &self.travel_times {
            if tt.len() != ns || self.eik_weights.len() != ns {
                return Err(invalid(format!("travel times have {} sources, survey has {ns}", tt.len())));
            }
            for (s, d) in tt.iter().enumerate() {
                if d.len() != nr || d.iter().zip(geo.mask(s)).any(|(v, &a)| a == v.is_nan()) {
                    return Err(invalid(format!("travel times of source {s} do not match the receivers")));
                }
            }
            if self.eik_weights.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                return Err(invalid("travel-time weights must be positive"));
            }
        }
        Ok(())
    }

    /// Multiply every weight by `f`.
    pub fn scale_weights(&mut self, f: f64) {
        self.fwi_weights.iter_mut().flatten().for_each(|w| *w *= f);
        self.eik_weights.iter_mut().for_each(|w| *w *= f);
    }
}

/// Add zero-mean Gaussian noise with standard deviation `eta·max|d|` per
/// trace (split evenly over real and imaginary parts for complex data).
pub fn add_noise(fwi: &mut [Vec<Vec<Complex64>>], travel_times: Option<&mut Vec<Vec<f64>>>, eta: f64, seed: u64) {
    if eta <= 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    for trace in fwi.iter_mut().flatten() {
        let max = trace.iter().filter(|v| !v.re.is_nan()).map(|v| v.norm()).fold(0.0, f64::max);
        let sd = eta * max / 2f64.sqrt();
        for v in trace.iter_mut().filter(|v| !v.re.is_nan()) {
            let (a, b): (f64, f64) = (unit.sample(&mut rng), unit.sample(&mut rng));
            *v += Complex64::new(sd * a, sd * b);
        }
    }
    if let Some(tt) = travel_times {
        for trace in tt.iter_mut() {
            let max = trace.iter().filter(|v| !v.is_nan()).fold(0.0f64, |a, v| a.max(v.abs()));
            for v in trace.iter_mut().filter(|v| !v.is_nan()) {
                let z: f64 = unit.sample(&mut rng);
                *v += eta * max * z;
            }
        }
    }
}

/// Simulated data for `m_true` with noise fraction `eta` and the default weights.
pub fn synthesize(survey: &Survey, m_true: &[f64], eta: f64, seed: u64, travel_times: bool) -> Result<ObservedData> {
    let mut fwi = survey.simulate_waveforms(m_true)?;
    let mut tt = if travel_times { Some(survey.simulate_travel_times(m_true)?) } else { None };
    add_noise(&mut fwi, tt.as_mut(), eta, seed);
    Ok(ObservedData::new(fwi, tt, eta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_survey(method: SolverMethod) -> Survey {
        let g = RegularGrid::with_spacing(&[12, 9], &[0.05, 0.05]).unwrap();
        let src = vec![[0.15, 0.05, 0.0], [0.4, 0.05, 0.0]];
        let rec = vec![[0.1, 0.05, 0.0], [0.275, 0.05, 0.0], [0.5, 0.125, 0.0]];
        let geo = AcquisitionGeometry::new(&g, src, rec, 0.1, 10.0).unwrap();
        let spec = SurveySpec {
            frequencies: vec![1.0, 1.5],
            peak_frequency: 2.0,
            base_gamma: 0.1,
            layer_width: 3,
            solver: SolverOptions::with_method(method),
        };
        Survey::new(g, geo, spec).unwrap()
    }

    #[test]
    fn padding_is_extended_for_multigrid() {
        let s = small_survey(SolverMethod::DenseLuSmall);
        assert_eq!(s.padded().dims(), &[18, 12]);
        let s = small_survey(SolverMethod::MgBicgstab);
        assert_eq!(s.padded().dims(), &[21, 13]);
        assert_eq!(s.padding().lo, [3, 0, 0]);
    }

    #[test]
    fn inactive_receivers_are_nan() {
        let s = small_survey(SolverMethod::DenseLuSmall);
        let m = vec![1.0; s.core().len()];
        let d = s.simulate_waveforms(&m).unwrap();
        assert_eq!(d.len(), 2);
        assert!(d[0][0][0].re.is_nan());
        assert!(d[0][0][1].norm() > 0.0);
        let tt = s.simulate_travel_times(&m).unwrap();
        assert!(tt[1][0].is_finite() && tt[0][0].is_nan());
        let obs = ObservedData::new(d, Some(tt), 0.01);
        obs.validate(&s).unwrap();
    }

    #[test]
    fn noise_is_seeded() {
        let s = small_survey(SolverMethod::DenseLuSmall);
        let m = vec![1.0; s.core().len()];
        let a = synthesize(&s, &m, 0.05, 7, true).unwrap();
        let b = synthesize(&s, &m, 0.05, 7, true).unwrap();
        let c = synthesize(&s, &m, 0.05, 8, true).unwrap();
        let bits = |d: &ObservedData| d.fwi[1][1].iter().map(|v| v.re.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&c));
    }
}
