//! Deterministic macroscopic dynamics of (m, q) under the isotropy closure.
//!
//! The weight vector is modelled as w = (m/ρ) w* + s g with g an isotropic
//! Gaussian direction, so each coordinate is z ~ N(m w*/ρ, s²) given w*.
//! All expectations over z are Gaussian kernels; the teacher expectation
//! is a finite sum over a [`TeacherMeasure`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{generalization_error, make_quantizer, ModelConfig, TeacherDist, TeacherSpec};
use crate::quadrature::gauss_hermite_normal;
use crate::quantizer::{
    gauss_bivariate_term, gauss_mixed_moment, gauss_smoothed_cdf, Quantizer, QuantizerGrid, QuantizerMoments,
};
use crate::simulator::MacroState;

/// Distribution of a single teacher entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherMeasure {
    PointMass(f64),
    Nodes { values: Vec<f64>, weights: Vec<f64> },
}

impl TeacherMeasure {
    pub const HERMITE_NODES: usize = 64;

    /// ±`scale` with equal probability.
    pub fn rademacher(scale: f64) -> Self {
        TeacherMeasure::Nodes {
            values: vec![-scale, scale],
            weights: vec![0.5, 0.5],
        }
    }

    /// N(mean, var) by 64-node Gauss–Hermite quadrature.
    pub fn gaussian(mean: f64, var: f64) -> Self {
        let (x, w) = gauss_hermite_normal(Self::HERMITE_NODES);
        TeacherMeasure::Nodes {
            values: x.iter().map(|x| mean + var.sqrt() * x).collect(),
            weights: w,
        }
    }

    /// Measure matching the simulator's renormalized teacher: entries are
    /// rescaled so that E[w*²] = ρ.
    pub fn from_teacher(spec: &TeacherSpec) -> Self {
        let base = match spec.teacher_dist {
            TeacherDist::AllOnes => return TeacherMeasure::PointMass(spec.rho.sqrt()),
            TeacherDist::Gaussian { mean, var } => Self::gaussian(mean, var),
            TeacherDist::Rademacher { scale } => Self::rademacher(scale),
        };
        base.rescaled(spec.rho)
    }

    /// Same shape, scaled so that E[w*²] = `rho`.
    pub fn rescaled(&self, rho: f64) -> Self {
        let k = (rho / self.second_moment()).sqrt();
        match self {
            TeacherMeasure::PointMass(v) => TeacherMeasure::PointMass(v * k),
            TeacherMeasure::Nodes { values, weights } => TeacherMeasure::Nodes {
                values: values.iter().map(|v| v * k).collect(),
                weights: weights.clone(),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let TeacherMeasure::Nodes { values, weights } = self {
            let total: f64 = weights.iter().sum();
            if values.len() != weights.len()
                || values.is_empty()
                || weights.iter().any(|&w| !(w >= 0.0))
                || (total - 1.0).abs() > 1e-12
            {
                return Err(Error::InvalidParameter(
                    "teacher measure needs matching non-negative weights summing to one".into(),
                ));
            }
        }
        if !(self.second_moment() > 0.0) {
            return Err(Error::InvalidParameter("teacher measure has zero second moment".into()));
        }
        Ok(())
    }

    /// E[f(w*)].
    #[inline]
    pub fn expect<F: FnMut(f64) -> f64>(&self, mut f: F) -> f64 {
        match self {
            TeacherMeasure::PointMass(v) => f(*v),
            TeacherMeasure::Nodes { values, weights } => values.iter().zip(weights).map(|(&v, &w)| w * f(v)).sum(),
        }
    }

    /// ρ = E[w*²].
    pub fn second_moment(&self) -> f64 {
        self.expect(|v| v * v)
    }

    pub fn mean_abs(&self) -> f64 {
        self.expect(f64::abs)
    }
}

/// m_ψ = E[w* ψ(z)], z ~ N(m w*/ρ, s²); temperature `t` smooths ψ.
pub fn m_psi_iso(m: f64, s: f64, grid: &QuantizerGrid, measure: &TeacherMeasure, t: f64) -> f64 {
    let rho = measure.second_moment();
    let (omega, delta) = (grid.range(), grid.delta());
    measure.expect(|ws| {
        let mu = m * ws / rho;
        let sum: f64 = grid.thresholds().iter().map(|&th| gauss_smoothed_cdf(mu, s, th, t)).sum();
        ws * (-omega + delta * sum)
    })
}

/// q_ψ = E[ψ(z)²].
pub fn q_psi_iso(m: f64, s: f64, grid: &QuantizerGrid, measure: &TeacherMeasure, t: f64) -> f64 {
    let rho = measure.second_moment();
    let (omega, delta) = (grid.range(), grid.delta());
    let v = grid.levels();
    let th = grid.thresholds();
    measure.expect(|ws| {
        let mu = m * ws / rho;
        if t == 0.0 {
            // ψ² is a staircase in z: v_0² plus jumps v_k² − v_{k−1}² at θ_k.
            v[0] * v[0]
                + th
                    .iter()
                    .enumerate()
                    .map(|(k, &a)| (v[k + 1] * v[k + 1] - v[k] * v[k]) * gauss_smoothed_cdf(mu, s, a, 0.0))
                    .sum::<f64>()
        } else {
            let first: f64 = th.iter().map(|&a| gauss_smoothed_cdf(mu, s, a, t)).sum();
            let mut cross = 0.0;
            for (i, &a) in th.iter().enumerate() {
                cross += gauss_bivariate_term(mu, s, a, a, t);
                for &b in &th[i + 1..] {
                    cross += 2.0 * gauss_bivariate_term(mu, s, a, b, t);
                }
            }
            omega * omega - 2.0 * omega * delta * first + delta * delta * cross
        }
    })
}

/// r_ψ = E[z ψ(z)] = m m_ψ/ρ + Δ (s²/√(s²+T²)) Σ E[φ(·)].
pub fn r_psi_iso(m: f64, s: f64, grid: &QuantizerGrid, measure: &TeacherMeasure, t: f64) -> f64 {
    let rho = measure.second_moment();
    let (omega, delta) = (grid.range(), grid.delta());
    measure.expect(|ws| {
        let mu = m * ws / rho;
        let sum: f64 = grid.thresholds().iter().map(|&th| gauss_mixed_moment(mu, s, th, t)).sum();
        -omega * mu + delta * sum
    })
}

/// (m_ψ, q_ψ, r_ψ) for any weight quantizer under the isotropy closure.
pub fn psi_overlaps(m: f64, s: f64, weight_q: &Quantizer, measure: &TeacherMeasure) -> (f64, f64, f64) {
    match weight_q {
        Quantizer::Identity => {
            let q = m * m / measure.second_moment() + s * s;
            (m, q, q)
        }
        Quantizer::Uniform { grid, temperature } => (
            m_psi_iso(m, s, grid, measure, *temperature),
            q_psi_iso(m, s, grid, measure, *temperature),
            r_psi_iso(m, s, grid, measure, *temperature),
        ),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdeState {
    pub tau: f64,
    pub m: f64,
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdeConfig {
    pub model: ModelConfig,
    pub teacher_measure: TeacherMeasure,
    #[serde(default)]
    pub noise_var: f64,
    #[serde(default = "default_dtau")]
    pub step_dtau: f64,
    pub horizon_tau: f64,
    #[serde(default = "default_s_floor")]
    pub s_floor: f64,
    /// Recording interval; rounded to a whole number of steps.
    pub record_stride_tau: f64,
    /// Starting point; (0, 1) matches a standard-normal initialization.
    #[serde(default = "default_initial")]
    pub initial: OdeState,
}

fn default_dtau() -> f64 {
    0.01
}

fn default_s_floor() -> f64 {
    1e-10
}

fn default_initial() -> OdeState {
    OdeState {
        tau: 0.0,
        m: 0.0,
        q: 1.0,
    }
}

/// Values of q beyond this are treated as a blow-up.
pub const Q_DIVERGENCE: f64 = 1e30;

/// Right-hand side of the (m, q) dynamics with all constants resolved.
#[derive(Debug, Clone)]
pub struct OdeSystem {
    pub weight_q: Quantizer,
    pub moments_x: QuantizerMoments,
    pub measure: TeacherMeasure,
    pub rho: f64,
    pub noise_var: f64,
    pub eta: f64,
    pub ridge: f64,
    pub s_floor: f64,
}

impl OdeSystem {
    pub fn new(model: &ModelConfig, measure: &TeacherMeasure, noise_var: f64, s_floor: f64) -> Result<Self> {
        model.validate()?;
        measure.validate()?;
        let weight_q = make_quantizer(model.weight_quantizer.as_ref())?;
        let input_q = make_quantizer(model.input_quantizer.as_ref())?;
        Ok(Self {
            weight_q,
            moments_x: input_q.moments(),
            measure: measure.clone(),
            rho: measure.second_moment(),
            noise_var,
            eta: model.learning_rate,
            ridge: model.ridge,
            s_floor,
        })
    }

    pub fn from_config(config: &OdeConfig) -> Result<Self> {
        if !(config.step_dtau > 0.0 && config.step_dtau <= config.horizon_tau) {
            return Err(Error::InvalidParameter("step must be positive and no longer than the horizon".into()));
        }
        if !(config.s_floor > 0.0) {
            return Err(Error::InvalidParameter("s_floor must be positive".into()));
        }
        Self::new(&config.model, &config.teacher_measure, config.noise_var, config.s_floor)
    }

    /// s = √(q − m²/ρ), floored at `s_floor`.
    pub fn s_of(&self, m: f64, q: f64) -> f64 {
        (q - m * m / self.rho).max(self.s_floor * self.s_floor).sqrt()
    }

    pub fn observables(&self, tau: f64, m: f64, q: f64) -> MacroState {
        let s = self.s_of(m, q);
        let (m_psi, q_psi, r_psi) = psi_overlaps(m, s, &self.weight_q, &self.measure);
        MacroState {
            tau,
            m,
            q,
            s,
            m_psi,
            q_psi,
            r_psi,
            eps_g: generalization_error(&self.moments_x, m_psi, q_psi, self.rho, self.noise_var),
        }
    }

    /// (dm/dτ, dq/dτ).
    pub fn rhs(&self, m: f64, q: f64) -> (f64, f64) {
        let st = self.observables(0.0, m, q);
        let QuantizerMoments { kappa, sigma_sq } = self.moments_x;
        let gain = sigma_sq + self.ridge;
        let dm = -self.eta * (gain * st.m_psi - kappa * self.rho);
        let dq = -2.0 * self.eta * (gain * st.r_psi - kappa * m) + self.eta * self.eta * sigma_sq * st.eps_g;
        (dm, dq)
    }

    fn clamp(&self, m: f64, q: f64) -> f64 {
        q.max(m * m / self.rho + self.s_floor * self.s_floor)
    }

    /// One classic RK4 step of size `h`.
    pub fn rk4_step(&self, m: f64, q: f64, h: f64) -> (f64, f64) {
        let (k1m, k1q) = self.rhs(m, q);
        let (k2m, k2q) = self.rhs(m + 0.5 * h * k1m, self.clamp(m + 0.5 * h * k1m, q + 0.5 * h * k1q));
        let (k3m, k3q) = self.rhs(m + 0.5 * h * k2m, self.clamp(m + 0.5 * h * k2m, q + 0.5 * h * k2q));
        let (k4m, k4q) = self.rhs(m + h * k3m, self.clamp(m + h * k3m, q + h * k3q));
        let m1 = m + h / 6.0 * (k1m + 2.0 * k2m + 2.0 * k3m + k4m);
        let q1 = q + h / 6.0 * (k1q + 2.0 * k2q + 2.0 * k3q + k4q);
        (m1, self.clamp(m1, q1))
    }

    /// Integrate from `start` for `steps` steps of size `h`, calling
    /// `record` after every step.
    pub fn integrate_with<F: FnMut(&OdeState)>(
        &self,
        start: OdeState,
        h: f64,
        steps: u64,
        mut record: F,
    ) -> std::result::Result<OdeState, OdeState> {
        let (mut m, mut q) = (start.m, self.clamp(start.m, start.q));
        for k in 1..=steps {
            let (m1, q1) = self.rk4_step(m, q, h);
            let state = OdeState {
                tau: start.tau + k as f64 * h,
                m: m1,
                q: q1,
            };
            if !(m1.is_finite() && q1.is_finite()) || q1 > Q_DIVERGENCE {
                return Err(state);
            }
            m = m1;
            q = q1;
            record(&state);
        }
        Ok(OdeState {
            tau: start.tau + steps as f64 * h,
            m,
            q,
        })
    }
}

/// Both right-hand-side components at `state`.
pub fn ode_rhs(state: &OdeState, config: &OdeConfig) -> Result<(f64, f64)> {
    Ok(OdeSystem::from_config(config)?.rhs(state.m, state.q))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdeSolution {
    pub states: Vec<OdeState>,
    pub macro_states: Vec<MacroState>,
}

/// Fixed-step RK4 integration, recording every `record_stride_tau`.
pub fn integrate(config: &OdeConfig) -> Result<OdeSolution> {
    let sys = OdeSystem::from_config(config)?;
    let h = config.step_dtau;
    let total = (config.horizon_tau / h).round() as u64;
    let every = ((config.record_stride_tau / h).round() as u64).max(1);
    let start = config.initial;
    let mut states = vec![OdeState {
        q: sys.clamp(start.m, start.q),
        ..start
    }];
    let mut k = 0u64;
    let outcome = sys.integrate_with(start, h, total, |st| {
        k += 1;
        if k % every == 0 || k == total {
            states.push(*st);
        }
    });
    if let Err(bad) = outcome {
        states.push(bad);
        return Err(Error::OdeDivergence {
            tau: bad.tau,
            partial: states,
        });
    }
    let macro_states = states.iter().map(|s| sys.observables(s.tau, s.m, s.q)).collect();
    Ok(OdeSolution { states, macro_states })
}
