//! Stationary points of the macroscopic dynamics and their stability.
//!
//! Writing c = ρκ/(σ² + λ) (input-quantizer moments κ, σ²), a stationary
//! point satisfies m_ψ(m, s) = c together with the second-moment balance
//!
//!   (2/χ) R⊥(m, s) = η ε_g(m, s),   χ = σ²/(σ² + λ),
//!
//! where R⊥ = r_ψ − m m_ψ/ρ is the part of r_ψ carried by the orthogonal
//! fluctuation (Δ s S(m, s) for a uniform grid, s² without weight
//! quantization).

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{generalization_error, make_quantizer, ModelConfig};
use crate::ode::{m_psi_iso, q_psi_iso, OdeSystem, TeacherMeasure};
use crate::quantizer::{Quantizer, QuantizerGrid, QuantizerMoments};
use crate::special::{norm_pdf, norm_ppf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FixedPointKind {
    InputOnly,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stability {
    AsymptoticallyStable,
    MarginallyStable,
    Unstable,
    /// No finite fixed point exists.
    None,
}

impl std::fmt::Display for Stability {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stability::AsymptoticallyStable => "asymptotically_stable",
            Stability::MarginallyStable => "marginally_stable",
            Stability::Unstable => "unstable",
            Stability::None => "none",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    Interior01,
    Boundary,
    Saturated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointReport {
    pub kind: FixedPointKind,
    pub m_star: f64,
    pub q_star: f64,
    pub s_star: f64,
    pub eps_g_star: f64,
    pub jacobian: [[f64; 2]; 2],
    pub eigenvalues: [Complex64; 2],
    pub stability: Stability,
    pub eta_boundary: Option<f64>,
    /// Position of c relative to the weight levels (joint case only).
    pub regime: Option<Regime>,
}

/// Eigenvalues of a real 2×2 matrix.
pub fn eigenvalues_2x2(j: &[[f64; 2]; 2]) -> [Complex64; 2] {
    let tr = j[0][0] + j[1][1];
    let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
    let disc = Complex64::new(tr * tr / 4.0 - det, 0.0).sqrt();
    let half = Complex64::new(tr / 2.0, 0.0);
    // Order by real part, largest last.
    let (a, b) = (half - disc, half + disc);
    if a.re <= b.re {
        [a, b]
    } else {
        [b, a]
    }
}

/// Classify by the largest real part; `tol` is the width of the band
/// treated as zero.
pub fn classify(eigs: &[Complex64; 2], tol: f64) -> Stability {
    let top = eigs[0].re.max(eigs[1].re);
    if top < -tol {
        Stability::AsymptoticallyStable
    } else if top <= tol {
        Stability::MarginallyStable
    } else {
        Stability::Unstable
    }
}

/// c = ρκ/(σ² + λ).
pub fn target_overlap(moments_x: &QuantizerMoments, rho: f64, lambda: f64) -> f64 {
    rho * moments_x.kappa / (moments_x.sigma_sq + lambda)
}

/// Closed-form fixed point when only the inputs are quantized.
pub fn input_only_fixed_point(
    moments_x: &QuantizerMoments,
    rho: f64,
    noise_var: f64,
    lambda: f64,
    eta: f64,
) -> FixedPointReport {
    let QuantizerMoments { kappa, sigma_sq } = *moments_x;
    let gain = sigma_sq + lambda;
    let m = target_overlap(moments_x, rho, lambda);
    let boundary = 2.0 * gain / (sigma_sq * sigma_sq);
    let jacobian = [
        [-eta * gain, 0.0],
        [2.0 * eta * kappa - 2.0 * eta * eta * sigma_sq * kappa, -2.0 * eta * gain + eta * eta * sigma_sq * sigma_sq],
    ];
    let eigenvalues = eigenvalues_2x2(&jacobian);
    let denom = gain * (2.0 * gain - eta * sigma_sq * sigma_sq);
    if eta >= boundary || denom <= 0.0 {
        return FixedPointReport {
            kind: FixedPointKind::InputOnly,
            m_star: m,
            q_star: f64::NAN,
            s_star: f64::NAN,
            eps_g_star: f64::NAN,
            jacobian,
            eigenvalues,
            stability: Stability::None,
            eta_boundary: Some(boundary),
            regime: None,
        };
    }
    let q = (2.0 * kappa * kappa * rho
        + eta * sigma_sq * ((rho + noise_var) * gain - 2.0 * kappa * kappa * rho))
        / denom;
    let eps = rho + noise_var + sigma_sq * q - 2.0 * kappa * m;
    let tol = 1e-12 * (jacobian[0][0].abs() + jacobian[1][1].abs());
    FixedPointReport {
        kind: FixedPointKind::InputOnly,
        m_star: m,
        q_star: q,
        s_star: (q - m * m / rho).max(0.0).sqrt(),
        eps_g_star: eps,
        jacobian,
        eigenvalues,
        stability: classify(&eigenvalues, tol),
        eta_boundary: Some(boundary),
        regime: None,
    }
}

/// η → 0 limit of the input-only error: ρ + σ_n² − κ²ρ(σ² + 2λ)/(σ² + λ)².
pub fn input_only_small_eta_error(moments_x: &QuantizerMoments, rho: f64, noise_var: f64, lambda: f64) -> f64 {
    let QuantizerMoments { kappa, sigma_sq } = *moments_x;
    let gain = sigma_sq + lambda;
    rho + noise_var - kappa * kappa * rho * (sigma_sq + 2.0 * lambda) / (gain * gain)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelPosition {
    pub c: f64,
    pub i_star: usize,
    pub p: f64,
    pub delta: f64,
    pub regime: Regime,
}

/// Locate `c` between adjacent levels: v_{i*} ≤ c ≤ v_{i*+1} with
/// p = (c − v_{i*})/Δ, the fractional part of (c + ω)/Δ.
pub fn level_position(c: f64, grid: &QuantizerGrid) -> LevelPosition {
    let (omega, delta, l) = (grid.range(), grid.delta(), grid.steps());
    if c.abs() >= omega {
        let (i_star, p) = if c > 0.0 { (l - 1, 1.0) } else { (0, 0.0) };
        return LevelPosition {
            c,
            i_star,
            p,
            delta,
            regime: Regime::Saturated,
        };
    }
    let x = (c + omega) / delta;
    let mut i = x.floor();
    let mut p = x - i;
    // Values within rounding of a level count as exactly on it.
    if p > 1.0 - 1e-12 {
        i += 1.0;
        p = 0.0;
    } else if p < 1e-12 {
        p = 0.0;
    }
    let i_star = (i as usize).min(l - 1);
    if i as usize > l - 1 {
        p = 1.0;
    }
    LevelPosition {
        c,
        i_star,
        p,
        delta,
        regime: if p == 0.0 || p == 1.0 {
            Regime::Boundary
        } else {
            Regime::Interior01
        },
    }
}

/// Which thresholds enter the sum S(m, s) = Σ_k φ(z_k).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdSum {
    /// k = 1..L.
    #[default]
    All,
    /// k = 1..L−1 (drops the top threshold).
    DropLast,
}

/// Overall factor in front of R⊥ in the second-moment balance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceNormalization {
    /// (2/χ) R⊥ = η ε_g.
    #[default]
    Chi,
    /// (2κ/c) R⊥ = η σ² ε_g, i.e. an extra 1/ρ relative to `Chi`.
    KappaOverC,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointConfig {
    pub model: ModelConfig,
    pub teacher_measure: TeacherMeasure,
    #[serde(default)]
    pub noise_var: f64,
    #[serde(default)]
    pub threshold_sum: ThresholdSum,
    #[serde(default)]
    pub normalization: BalanceNormalization,
    /// Upper end of the s search; defaults to 10(ω_w + √ρ).
    #[serde(default)]
    pub s_max: Option<f64>,
}

/// Everything needed to evaluate the stationarity conditions.
struct JointProblem<'a> {
    weight_q: Quantizer,
    moments_x: QuantizerMoments,
    measure: &'a TeacherMeasure,
    rho: f64,
    noise_var: f64,
    lambda: f64,
    c: f64,
    threshold_sum: ThresholdSum,
    normalization: BalanceNormalization,
}

impl<'a> JointProblem<'a> {
    fn new(config: &'a FixedPointConfig) -> Result<Self> {
        config.model.validate()?;
        config.teacher_measure.validate()?;
        let weight_q = make_quantizer(config.model.weight_quantizer.as_ref())?;
        if weight_q.temperature() != 0.0 {
            return Err(Error::InvalidParameter(
                "fixed-point analysis uses the hard weight quantizer".into(),
            ));
        }
        let moments_x = make_quantizer(config.model.input_quantizer.as_ref())?.moments();
        let rho = config.teacher_measure.second_moment();
        Ok(Self {
            weight_q,
            moments_x,
            measure: &config.teacher_measure,
            rho,
            noise_var: config.noise_var,
            lambda: config.model.ridge,
            c: target_overlap(&moments_x, rho, config.model.ridge),
            threshold_sum: config.threshold_sum,
            normalization: config.normalization,
        })
    }

    fn m_psi(&self, m: f64, s: f64) -> f64 {
        match &self.weight_q {
            Quantizer::Identity => m,
            Quantizer::Uniform { grid, .. } => m_psi_iso(m, s, grid, self.measure, 0.0),
        }
    }

    fn q_psi(&self, m: f64, s: f64) -> f64 {
        match &self.weight_q {
            Quantizer::Identity => m * m / self.rho + s * s,
            Quantizer::Uniform { grid, .. } => q_psi_iso(m, s, grid, self.measure, 0.0),
        }
    }

    /// R⊥ = r_ψ − m m_ψ/ρ.
    fn r_perp(&self, m: f64, s: f64) -> f64 {
        match &self.weight_q {
            Quantizer::Identity => s * s,
            Quantizer::Uniform { grid, .. } => {
                let th = match self.threshold_sum {
                    ThresholdSum::All => grid.thresholds(),
                    ThresholdSum::DropLast => &grid.thresholds()[..grid.steps() - 1],
                };
                let rho = self.rho;
                let sum = self
                    .measure
                    .expect(|ws| th.iter().map(|&t| norm_pdf((m * ws / rho - t) / s)).sum::<f64>());
                grid.delta() * s * sum
            }
        }
    }

    fn eps(&self, m: f64, s: f64) -> f64 {
        generalization_error(&self.moments_x, self.m_psi(m, s), self.q_psi(m, s), self.rho, self.noise_var)
    }

    fn chi(&self) -> f64 {
        self.moments_x.sigma_sq / (self.moments_x.sigma_sq + self.lambda)
    }

    /// G_η(s) = (2/χ) R⊥(m(s), s) − η ε_g(m(s), s).
    fn balance(&self, eta: f64, s: f64) -> Result<(f64, f64)> {
        let m = self.solve_m(s)?;
        let mut lhs = 2.0 / self.chi() * self.r_perp(m, s);
        if self.normalization == BalanceNormalization::KappaOverC {
            lhs /= self.rho;
        }
        Ok((lhs - eta * self.eps(m, s), m))
    }

    /// Supremum of |m_ψ| over m for the current teacher measure.
    fn reachable(&self) -> f64 {
        match &self.weight_q {
            Quantizer::Identity => f64::INFINITY,
            Quantizer::Uniform { grid, .. } => grid.range() * self.measure.mean_abs(),
        }
    }

    fn solve_m(&self, s: f64) -> Result<f64> {
        let grid = match &self.weight_q {
            Quantizer::Identity => return Ok(self.c),
            Quantizer::Uniform { grid, .. } => grid,
        };
        let limit = self.reachable();
        if self.c.abs() >= limit {
            return Err(Error::NoInteriorSolution { c: self.c, limit });
        }
        let scale = self.rho.sqrt();
        let pos = level_position(self.c / scale, grid);
        let center = grid.thresholds()[pos.i_star.min(grid.steps() - 1)] * scale;
        bisect_increasing(|m| self.m_psi(m, s) - self.c, center, 10.0 * s * scale, 1e-12)
    }
}

/// Root of a strictly increasing `f`, starting from [x0 − w, x0 + w] and
/// widening geometrically until the bracket holds a sign change. Stops once
/// |f| ≤ `ftol` or the bracket can no longer be split.
fn bisect_increasing<F: Fn(f64) -> f64>(f: F, x0: f64, w: f64, ftol: f64) -> Result<f64> {
    let mut width = w.max(1e-300);
    let mut lo = x0 - width;
    let mut flo = f(lo);
    let mut grow = 0;
    while flo > 0.0 {
        width *= 2.0;
        lo -= width;
        flo = f(lo);
        grow += 1;
        if grow > 2000 || !lo.is_finite() {
            return Err(Error::NoFixedPointFound("could not bracket m from below".into()));
        }
    }
    let mut width = w.max(1e-300);
    let mut hi = x0 + width;
    let mut fhi = f(hi);
    let mut grow = 0;
    while fhi < 0.0 {
        width *= 2.0;
        hi += width;
        fhi = f(hi);
        grow += 1;
        if grow > 2000 || !hi.is_finite() {
            return Err(Error::NoFixedPointFound("could not bracket m from above".into()));
        }
    }
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    let mut best = if -flo < fhi { (lo, flo) } else { (hi, fhi) };
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let fm = f(mid);
        if fm.abs() < best.1.abs() {
            best = (mid, fm);
        }
        if fm.abs() <= ftol {
            return Ok(mid);
        }
        if fm < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(best.0)
}

/// Fixed point of the joint (weight and input) quantized dynamics at rate
/// `eta`, found by a one-dimensional search in s.
pub fn joint_fixed_point(config: &FixedPointConfig, eta: f64) -> Result<FixedPointReport> {
    let prob = JointProblem::new(config)?;
    let mut model = config.model.clone();
    model.learning_rate = eta;
    model.validate()?;

    let regime = match &prob.weight_q {
        Quantizer::Identity => None,
        Quantizer::Uniform { grid, .. } => Some(level_position(prob.c / prob.rho.sqrt(), grid).regime),
    };
    if prob.c.abs() >= prob.reachable() {
        // m grows without bound while every coordinate sits on the extreme
        // level; only the limiting error is finite.
        let grid = prob.weight_q.grid().expect("identity weights always have an interior solution");
        let omega = grid.range();
        let m_psi = omega * prob.measure.mean_abs() * prob.c.signum();
        let eps = generalization_error(&prob.moments_x, m_psi, omega * omega, prob.rho, prob.noise_var);
        return Ok(FixedPointReport {
            kind: FixedPointKind::Joint,
            m_star: f64::NAN,
            q_star: f64::NAN,
            s_star: f64::NAN,
            eps_g_star: eps,
            jacobian: [[f64::NAN; 2]; 2],
            eigenvalues: [Complex64::new(f64::NAN, 0.0); 2],
            stability: Stability::None,
            eta_boundary: None,
            regime: Some(Regime::Saturated),
        });
    }

    let s_max = config.s_max.unwrap_or_else(|| {
        let omega = prob.weight_q.grid().map_or(1.0, QuantizerGrid::range);
        10.0 * (omega + prob.rho.sqrt())
    });
    let g = |s: f64| prob.balance(eta, s).map(|v| v.0);

    // Log-spaced scan for the first sign change from − to +.
    const SCAN: usize = 600;
    let s_min = 1e-12 * s_max;
    let ratio = (s_max / s_min).powf(1.0 / SCAN as f64);
    let mut prev_s = s_min;
    let mut prev_g = g(prev_s)?;
    let mut bracket = None;
    for k in 1..=SCAN {
        let s = s_min * ratio.powi(k as i32);
        let gv = g(s)?;
        if prev_g < 0.0 && gv >= 0.0 {
            bracket = Some((prev_s, s, prev_g, gv));
            break;
        }
        prev_s = s;
        prev_g = gv;
    }
    let (mut lo, mut hi, mut glo, mut ghi) = bracket.ok_or_else(|| {
        Error::NoFixedPointFound(format!("the second-moment balance has no sign change on (0, {s_max}]"))
    })?;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi || (hi - lo) <= 1e-15 * hi {
            break;
        }
        let gm = g(mid)?;
        if gm < 0.0 {
            lo = mid;
            glo = gm;
        } else {
            hi = mid;
            ghi = gm;
        }
    }
    // Secant polish inside the final bracket.
    let mut s = if ghi != glo { lo - glo * (hi - lo) / (ghi - glo) } else { 0.5 * (lo + hi) };
    if !(s > lo && s < hi) {
        s = 0.5 * (lo + hi);
    }
    let mut best = g(s)?.abs();
    for (x, gx) in [(lo, glo), (hi, ghi)] {
        if gx.abs() < best {
            s = x;
            best = gx.abs();
        }
    }
    let (_, m) = prob.balance(eta, s)?;
    let q = s * s + m * m / prob.rho;
    let eps = prob.eps(m, s);

    let sys = OdeSystem::new(&model, prob.measure, prob.noise_var, 1e-300)?;
    let jacobian = numerical_jacobian(&sys, m, s);
    let eigenvalues = eigenvalues_2x2(&jacobian);
    let scale = jacobian.iter().flatten().fold(0.0_f64, |a, v| a.max(v.abs()));
    Ok(FixedPointReport {
        kind: FixedPointKind::Joint,
        m_star: m,
        q_star: q,
        s_star: s,
        eps_g_star: eps,
        jacobian,
        eigenvalues,
        stability: classify(&eigenvalues, 1e-6 * scale),
        eta_boundary: None,
        regime,
    })
}

/// Central-difference Jacobian of the (m, q) right-hand side at
/// (m, s² + m²/ρ).
///
/// Differences are taken in the coordinates (m, v = q − m²/ρ) with steps
/// proportional to s and s², then mapped back; a fixed absolute step would
/// cross q = m²/ρ whenever s² is small. Eigenvalues are unaffected by the
/// change of coordinates.
pub fn numerical_jacobian(sys: &OdeSystem, m: f64, s: f64) -> [[f64; 2]; 2] {
    let rho = sys.rho;
    let v = s * s;
    let f = |m: f64, v: f64| {
        let q = v + m * m / rho;
        let (dm, dq) = sys.rhs(m, q);
        (dm, dq - 2.0 * m * dm / rho)
    };
    let hm = (1e-3 * s).min(1e-6).max(1e-300);
    let hv = (1e-3 * v).min(1e-6).max(1e-300);
    let (a1, b1) = f(m + hm, v);
    let (a0, b0) = f(m - hm, v);
    let (c1, d1) = f(m, v + hv);
    let (c0, d0) = f(m, v - hv);
    // Jacobian in (m, v).
    let jmv = [
        [(a1 - a0) / (2.0 * hm), (c1 - c0) / (2.0 * hv)],
        [(b1 - b0) / (2.0 * hm), (d1 - d0) / (2.0 * hv)],
    ];
    // q = v + m²/ρ: J_mq = T⁻¹ J_mv T with T = ∂(m, v)/∂(m, q).
    let t = -2.0 * m / rho;
    let [[a, b], [c, d]] = jmv;
    // J_mv T
    let (a, c) = (a + b * t, c + d * t);
    // T⁻¹ (…), T⁻¹ = [[1, 0], [−t, 1]]
    [[a, b], [c - t * a, d - t * b]]
}

/// Leading small-η error, the σ²Δ²p(1−p) excess and the predicted limit of
/// s*(η)/η (interior case only).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmallEtaAsymptotics {
    pub position: LevelPosition,
    pub eps_leading: f64,
    pub correction: f64,
    pub s_over_eta: Option<f64>,
}

impl SmallEtaAsymptotics {
    pub fn eps_limit(&self) -> f64 {
        self.eps_leading + self.correction
    }
}

/// η → 0 limit of the joint fixed point for a point-mass teacher.
pub fn small_eta_asymptotics(config: &FixedPointConfig) -> Result<SmallEtaAsymptotics> {
    let prob = JointProblem::new(config)?;
    let grid = prob
        .weight_q
        .grid()
        .ok_or_else(|| Error::InvalidParameter("small-η analysis needs a quantized weight grid".into()))?;
    let a = prob.rho.sqrt();
    let u = prob.c / a;
    let pos = level_position(u, grid);
    let QuantizerMoments { kappa, sigma_sq } = prob.moments_x;
    let base = prob.rho + prob.noise_var;
    if pos.regime == Regime::Saturated {
        let omega = grid.range();
        return Ok(SmallEtaAsymptotics {
            position: pos,
            eps_leading: base - 2.0 * kappa * a * omega * u.signum() + sigma_sq * omega * omega,
            correction: 0.0,
            s_over_eta: None,
        });
    }
    let delta = grid.delta();
    let p = pos.p;
    let eps_leading = base - 2.0 * kappa * prob.c + sigma_sq * u * u;
    let correction = sigma_sq * delta * delta * p * (1.0 - p);
    let s_over_eta = (pos.regime == Regime::Interior01).then(|| {
        let mut k = prob.chi() * (eps_leading + correction) / (2.0 * delta * norm_pdf(norm_ppf(p)));
        if prob.normalization == BalanceNormalization::KappaOverC {
            k *= prob.rho;
        }
        k
    });
    Ok(SmallEtaAsymptotics {
        position: pos,
        eps_leading,
        correction,
        s_over_eta,
    })
}
