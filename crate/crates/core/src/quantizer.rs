//! Uniform scalar quantizers and the Gaussian expectations built on them.
//!
//! A b-bit quantizer with range ω has L + 1 = 2^b − 1 levels
//! v_k = −ω + kΔ (Δ = 2ω/L) and L decision thresholds θ_k = −ω + (k − ½)Δ.
//! The hard map sends x to v_k with k = #{j : x ≥ θ_j}, so a value sitting
//! exactly on a threshold goes to the upper level.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{integrate_adaptive, GaussLegendre};
use crate::special::{norm_cdf, norm_pdf};

/// User-facing description of a uniform quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizerSpec {
    pub bits: u32,
    pub range: f64,
    /// Soft-quantizer temperature; 0 selects the hard quantizer.
    #[serde(default)]
    pub temperature: f64,
}

impl QuantizerSpec {
    pub fn new(bits: u32, range: f64) -> Self {
        Self {
            bits,
            range,
            temperature: 0.0,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }
}

/// Levels and thresholds of a uniform quantizer.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerGrid {
    bits: u32,
    range: f64,
    steps: usize,
    delta: f64,
    inv_delta: f64,
    levels: Vec<f64>,
    /// −∞, θ_1, …, θ_L, +∞.
    padded: Vec<f64>,
    thresholds: Vec<f64>,
}

/// κ_ψ = E[Xψ(X)] and σ_ψ² = E[ψ(X)²] for X ~ N(0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizerMoments {
    pub kappa: f64,
    pub sigma_sq: f64,
}

impl QuantizerMoments {
    pub const IDENTITY: Self = Self {
        kappa: 1.0,
        sigma_sq: 1.0,
    };
}

/// Build the grid for `spec`.
pub fn build_grid(spec: &QuantizerSpec) -> Result<QuantizerGrid> {
    if spec.bits < 2 {
        return Err(Error::DegenerateQuantizer { bits: spec.bits });
    }
    if spec.bits > 30 {
        return Err(Error::InvalidParameter(format!(
            "bit width {} is too large",
            spec.bits
        )));
    }
    if !(spec.range.is_finite() && spec.range > 0.0) {
        return Err(Error::InvalidRange(spec.range));
    }
    if !(spec.temperature.is_finite() && spec.temperature >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "temperature must be non-negative, got {}",
            spec.temperature
        )));
    }
    let steps = (1usize << spec.bits) - 2;
    let omega = spec.range;
    let delta = 2.0 * omega / steps as f64;
    // Fill symmetric pairs from the outside in so that v_k = −v_{L−k} holds
    // bit-exactly and the end points are exactly ±ω.
    let mut levels = vec![0.0; steps + 1];
    for k in 0..=steps / 2 {
        let v = -omega + k as f64 * delta;
        levels[k] = v;
        levels[steps - k] = -v;
    }
    if steps % 2 == 0 {
        levels[steps / 2] = 0.0;
    }
    let mut thresholds = vec![0.0; steps];
    for k in 1..=steps.div_ceil(2) {
        let t = -omega + (k as f64 - 0.5) * delta;
        thresholds[k - 1] = t;
        thresholds[steps - k] = -t;
    }
    Ok(QuantizerGrid {
        bits: spec.bits,
        range: omega,
        steps,
        delta,
        inv_delta: 1.0 / delta,
        levels,
        padded: std::iter::once(f64::NEG_INFINITY)
            .chain(thresholds.iter().copied())
            .chain(std::iter::once(f64::INFINITY))
            .collect(),
        thresholds,
    })
}

impl QuantizerGrid {
    pub fn bits(&self) -> u32 {
        self.bits
    }

    /// ω.
    pub fn range(&self) -> f64 {
        self.range
    }

    /// L, the number of steps (one less than the number of levels).
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Δ.
    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// v_0, …, v_L.
    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    /// θ_1, …, θ_L (stored zero-based).
    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    /// Index k of the level assigned to `x`, i.e. the number of thresholds ≤ x.
    #[inline]
    pub fn level_index(&self, x: f64) -> usize {
        let guess = ((x - self.thresholds[0]) * self.inv_delta + 1.0)
            .max(0.0)
            .min(self.steps as f64);
        let k = guess as usize;
        // The arithmetic guess is off by at most one next to a threshold;
        // settle it against the stored values (padded with ±∞), without
        // branches since inputs are random.
        let up = (x >= self.padded[k + 1]) as usize;
        let down = (x < self.padded[k]) as usize;
        k + up - down
    }

    /// Hard quantization ψ(x). Callers must pass finite values.
    #[inline]
    pub fn quantize(&self, x: f64) -> f64 {
        debug_assert!(x.is_finite());
        self.levels[self.level_index(x)]
    }

    /// Hard quantization that rejects NaN and ±∞.
    pub fn quantize_hard(&self, x: f64) -> Result<f64> {
        if !x.is_finite() {
            return Err(Error::NonFiniteInput(x));
        }
        Ok(self.quantize(x))
    }

    /// Soft quantizer ψ_T(x) = −ω + Δ Σ_k Φ((x − θ_k)/T).
    pub fn quantize_soft(&self, temperature: f64, x: f64) -> Result<f64> {
        if !(temperature > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "soft quantization needs a positive temperature, got {temperature}"
            )));
        }
        if !x.is_finite() {
            return Err(Error::NonFiniteInput(x));
        }
        Ok(self.soft_unchecked(temperature, x))
    }

    #[inline]
    pub(crate) fn soft_unchecked(&self, temperature: f64, x: f64) -> f64 {
        let sum: f64 = self
            .thresholds
            .iter()
            .map(|t| norm_cdf((x - t) / temperature))
            .sum();
        -self.range + self.delta * sum
    }

    /// Closed-form κ_ψ = Δ Σ φ(θ_k) and σ_ψ² = Σ v_k² (Φ(θ_{k+1}) − Φ(θ_k)).
    pub fn moments_closed_form(&self) -> QuantizerMoments {
        let kappa = self.delta * self.thresholds.iter().map(|&t| norm_pdf(t)).sum::<f64>();
        let l = self.steps;
        let mut sigma_sq = 0.0;
        for k in 0..=l {
            let lo = if k == 0 {
                0.0
            } else {
                norm_cdf(self.thresholds[k - 1])
            };
            let hi = if k == l { 1.0 } else { norm_cdf(self.thresholds[k]) };
            sigma_sq += self.levels[k] * self.levels[k] * (hi - lo);
        }
        QuantizerMoments { kappa, sigma_sq }
    }

    /// Quadrature oracle for the moments: integrates x·ψ(x)·φ(x) and
    /// ψ(x)²·φ(x) over [−10, 10], one Gauss–Legendre panel set per
    /// inter-threshold interval so each integrand piece is smooth.
    pub fn moments_oracle(&self) -> QuantizerMoments {
        const CUT: f64 = 10.0;
        let gl = GaussLegendre::new(24);
        let mut breaks = vec![-CUT];
        breaks.extend(self.thresholds.iter().copied().filter(|t| t.abs() < CUT));
        breaks.push(CUT);
        let mut kappa = 0.0;
        let mut sigma_sq = 0.0;
        for w in breaks.windows(2) {
            let (a, b) = (w[0], w[1]);
            kappa += gl.integrate_panels(a, b, 0.5, |x| x * self.quantize(x) * norm_pdf(x));
            sigma_sq += gl.integrate_panels(a, b, 0.5, |x| {
                let v = self.quantize(x);
                v * v * norm_pdf(x)
            });
        }
        QuantizerMoments { kappa, sigma_sq }
    }
}

/// Either no quantization at all or a uniform grid (hard, or soft at a
/// positive temperature).
#[derive(Debug, Clone, PartialEq)]
pub enum Quantizer {
    Identity,
    Uniform {
        grid: QuantizerGrid,
        temperature: f64,
    },
}

impl Quantizer {
    pub fn uniform(spec: &QuantizerSpec) -> Result<Self> {
        Ok(Quantizer::Uniform {
            grid: build_grid(spec)?,
            temperature: spec.temperature,
        })
    }

    pub fn grid(&self) -> Option<&QuantizerGrid> {
        match self {
            Quantizer::Identity => None,
            Quantizer::Uniform { grid, .. } => Some(grid),
        }
    }

    pub fn temperature(&self) -> f64 {
        match self {
            Quantizer::Identity => 0.0,
            Quantizer::Uniform { temperature, .. } => *temperature,
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, Quantizer::Identity)
    }

    /// ψ(x) (or ψ_T(x) for soft grids).
    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Quantizer::Identity => x,
            Quantizer::Uniform { grid, temperature } => {
                if *temperature > 0.0 {
                    grid.soft_unchecked(*temperature, x)
                } else {
                    grid.quantize(x)
                }
            }
        }
    }

    /// Gaussian moments of this quantizer. Soft grids use the smoothed
    /// kernels; the identity gives (1, 1).
    pub fn moments(&self) -> QuantizerMoments {
        match self {
            Quantizer::Identity => QuantizerMoments::IDENTITY,
            Quantizer::Uniform { grid, temperature } if *temperature == 0.0 => {
                grid.moments_closed_form()
            }
            Quantizer::Uniform { grid, temperature } => {
                let t = *temperature;
                let omega = grid.range();
                let delta = grid.delta();
                let th = grid.thresholds();
                let kappa = delta
                    * th
                        .iter()
                        .map(|&a| gauss_mixed_moment(0.0, 1.0, a, t))
                        .sum::<f64>();
                let mut cross = 0.0;
                for &a in th {
                    for &b in th {
                        cross += gauss_bivariate_term(0.0, 1.0, a, b, t);
                    }
                }
                let first: f64 = th.iter().map(|&a| gauss_smoothed_cdf(0.0, 1.0, a, t)).sum();
                let sigma_sq = omega * omega - 2.0 * omega * delta * first + delta * delta * cross;
                QuantizerMoments { kappa, sigma_sq }
            }
        }
    }
}

#[inline]
fn smoothed_scale(s: f64, t: f64) -> f64 {
    (s * s + t * t).sqrt()
}

/// E[Φ((X − a)/T)] for X ~ N(m, s²), equal to Φ((m − a)/√(s² + T²)).
///
/// With s = T = 0 the expectation degenerates to the step Θ(m − a).
pub fn gauss_smoothed_cdf(m: f64, s: f64, a: f64, t: f64) -> f64 {
    let r = smoothed_scale(s, t);
    if r == 0.0 {
        return crate::special::heaviside(m - a);
    }
    norm_cdf((m - a) / r)
}

/// E[φ((X − a)/T)] for X ~ N(m, s²), equal to (T/√(s² + T²)) φ((m − a)/√(s² + T²)).
pub fn gauss_smoothed_pdf(m: f64, s: f64, a: f64, t: f64) -> f64 {
    let r = smoothed_scale(s, t);
    if r == 0.0 {
        // Both degenerate; φ((m − a)/0) has no limit except at m = a.
        return if m == a { norm_pdf(0.0) } else { 0.0 };
    }
    t / r * norm_pdf((m - a) / r)
}

/// E[X Φ((X − a)/T)] for X ~ N(m, s²).
pub fn gauss_mixed_moment(m: f64, s: f64, a: f64, t: f64) -> f64 {
    let r = smoothed_scale(s, t);
    if r == 0.0 {
        return m * crate::special::heaviside(m - a);
    }
    let z = (m - a) / r;
    m * norm_cdf(z) + s * s / r * norm_pdf(z)
}

/// E[Φ((X − a)/T) Φ((X − b)/T)] for X ~ N(m, s²).
///
/// For T > 0 and s > 0 this is the bivariate normal orthant probability
/// Φ₂(h, k; s²/(s² + T²)); it is evaluated as a one-dimensional integral
/// over the shared Gaussian factor X. At T = 0 the product of steps
/// collapses to Φ((m − max(a, b))/s).
pub fn gauss_bivariate_term(m: f64, s: f64, a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        return gauss_smoothed_cdf(m, s, a.max(b), 0.0);
    }
    if s == 0.0 {
        return norm_cdf((m - a) / t) * norm_cdf((m - b) / t);
    }
    const CUT: f64 = 12.0;
    // Integrate over u with X = m + s·u; the integrand switches on near
    // u = (a − m)/s and u = (b − m)/s over a width of order T/s.
    let ua = ((a - m) / s).clamp(-CUT, CUT);
    let ub = ((b - m) / s).clamp(-CUT, CUT);
    let (lo_k, hi_k) = if ua < ub { (ua, ub) } else { (ub, ua) };
    let f = |u: f64| {
        let x = m + s * u;
        norm_pdf(u) * norm_cdf((x - a) / t) * norm_cdf((x - b) / t)
    };
    let mut breaks = vec![-CUT, lo_k, hi_k, CUT];
    breaks.dedup();
    breaks
        .windows(2)
        .map(|w| integrate_adaptive(f, w[0], w[1], 1e-15, 400))
        .sum::<f64>()
        .clamp(0.0, 1.0)
}
