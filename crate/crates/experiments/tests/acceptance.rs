//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! Usage: `cargo test -p stelab --test acceptance -- [N ...] [--full]`.
//! Numeric arguments select criteria; `--full` runs the long joint
//! fixed-point protocol at its full horizon instead of the reduced grid.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use stelab::figures::{self, has_interior_minimum, histogram_l1, run_panel};
use stelab::presets::{default_preset, FigureId, JointFigure, Preset};
use stelab_core::fixed_point::{input_only_fixed_point, joint_fixed_point, BalanceNormalization, FixedPointConfig, Stability, ThresholdSum};
use stelab_core::model::{Model, ModelConfig, Sample, TeacherSpec};
use stelab_core::ode::{integrate, OdeConfig, OdeState, OdeSystem, TeacherMeasure};
use stelab_core::quantizer::{
    build_grid, gauss_bivariate_term, gauss_mixed_moment, gauss_smoothed_cdf, gauss_smoothed_pdf, QuantizerGrid,
    QuantizerSpec,
};
use stelab_core::simulator::{run_simulation, ste_step, InitSpec, SimConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------------------
// Independent numerics for the oracles.

fn phi(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn big_phi(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Adaptive Simpson on [a, b].
fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn rec<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    rec(f, a, b, fa, fm, fb, (b - a) / 6.0 * (fa + 4.0 * fm + fb), tol, 40)
}

/// κ and σ² by integrating x·ψ(x)·φ(x) and ψ(x)²·φ(x) piecewise between
/// thresholds, with ψ read off the quantizer at each piece's midpoint.
fn moments_by_quadrature(grid: &QuantizerGrid) -> (f64, f64) {
    const CUT: f64 = 12.0;
    let mut breaks = vec![-CUT];
    breaks.extend(grid.thresholds().iter().copied().filter(|t| t.abs() < CUT));
    breaks.push(CUT);
    let (mut kappa, mut sigma_sq) = (0.0, 0.0);
    for w in breaks.windows(2) {
        let v = grid.quantize(0.5 * (w[0] + w[1]));
        kappa += v * simpson(&|x: f64| x * phi(x), w[0], w[1], 1e-15);
        sigma_sq += v * v * simpson(&phi, w[0], w[1], 1e-15);
    }
    (kappa, sigma_sq)
}

struct Stats {
    n: f64,
    sum: f64,
    sum_sq: f64,
}

impl Stats {
    fn new() -> Self {
        Self { n: 0.0, sum: 0.0, sum_sq: 0.0 }
    }
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        self.sum += x;
        self.sum_sq += x * x;
    }
    fn mean(&self) -> f64 {
        self.sum / self.n
    }
    fn stderr(&self) -> f64 {
        let m = self.mean();
        ((self.sum_sq / self.n - m * m).max(0.0) / (self.n - 1.0)).sqrt()
    }
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

// ---------------------------------------------------------------------------
// Criteria.

fn c1_moments() -> Outcome {
    let mut worst: f64 = 0.0;
    for b in 2..=8 {
        for omega in [0.25, 0.5, 1.0, 2.0, 4.0] {
            let grid = build_grid(&QuantizerSpec::new(b, omega)).unwrap();
            let closed = grid.moments_closed_form();
            let (k, s) = moments_by_quadrature(&grid);
            worst = worst.max((closed.kappa - k).abs()).max((closed.sigma_sq - s).abs());
        }
    }
    outcome(worst <= 1e-10, format!("max |closed form - quadrature| = {worst:.2e} (tol 1e-10)"))
}

/// Standard error of an N-sample mean of `f(X)`, X ~ N(m, s²), from the
/// exact variance by composite Simpson over m ± 12s. The sample variance
/// underestimates it badly when f(X) is a rare event.
fn mc_stderr<F: Fn(f64) -> f64>(f: F, m: f64, s: f64, n: usize) -> f64 {
    const CELLS: usize = 24_000;
    let h = 24.0 * s / CELLS as f64;
    let (mut e1, mut e2) = (0.0, 0.0);
    for i in 0..=CELLS {
        let x = m - 12.0 * s + i as f64 * h;
        let w = if i == 0 || i == CELLS { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        let g = w * phi((x - m) / s) / s * h / 3.0;
        let v = f(x);
        e1 += g * v;
        e2 += g * v * v;
    }
    ((e2 - e1 * e1).max(0.0) / n as f64).sqrt()
}

fn c2_kernels() -> Outcome {
    const SAMPLES: usize = 1_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst_z: f64 = 0.0;
    for _ in 0..100 {
        let m: f64 = rng.gen_range(-2.0..2.0);
        let s: f64 = rng.gen_range(0.1..2.0);
        let a: f64 = rng.gen_range(-2.5..2.5);
        let b: f64 = rng.gen_range(-2.5..2.5);
        let t: f64 = rng.gen_range(0.05..1.0);
        let closed = [
            gauss_smoothed_cdf(m, s, a, t),
            gauss_smoothed_pdf(m, s, a, t),
            gauss_mixed_moment(m, s, a, t),
            gauss_bivariate_term(m, s, a, b, t),
        ];
        let kernels: [Box<dyn Fn(f64) -> f64>; 4] = [
            Box::new(|x| big_phi((x - a) / t)),
            Box::new(|x| phi((x - a) / t)),
            Box::new(|x| x * big_phi((x - a) / t)),
            Box::new(|x| big_phi((x - a) / t) * big_phi((x - b) / t)),
        ];
        let mut st = [Stats::new(), Stats::new(), Stats::new(), Stats::new()];
        for _ in 0..SAMPLES {
            let z: f64 = StandardNormal.sample(&mut rng);
            let x = m + s * z;
            for (acc, f) in st.iter_mut().zip(&kernels) {
                acc.push(f(x));
            }
        }
        for ((c, acc), f) in closed.iter().zip(&st).zip(&kernels) {
            let se = mc_stderr(f, m, s, SAMPLES).max(acc.stderr());
            worst_z = worst_z.max((c - acc.mean()).abs() / se.max(f64::MIN_POSITIVE));
        }
    }
    outcome(worst_z <= 4.0, format!("400 checks, max |z| = {worst_z:.2} (tol 4)"))
}

/// Every curve agrees with its ODE pointwise in τ; returns the report and
/// the final simulated errors in curve order.
fn trajectory_agreement(id: FigureId) -> (bool, String, Vec<(String, f64, f64)>) {
    let Preset::Trajectories(fig) = default_preset(id) else { unreachable!() };
    let mut ok = true;
    let mut parts = Vec::new();
    let mut finals = Vec::new();
    for panel in &fig.panels {
        for c in run_panel(panel, fig.seed).unwrap() {
            let mut worst_excess = f64::NEG_INFINITY;
            let mut worst = (0.0, 0.0);
            let mut matched = 0;
            for (i, s) in c.sim.states.iter().enumerate() {
                let Some(o) = c.ode.iter().find(|o| (o.tau - s.tau).abs() <= 1e-9 * s.tau.max(1.0)) else {
                    continue;
                };
                matched += 1;
                let gap = (s.eps_g - o.eps_g).abs();
                let allowed = (3.0 * c.sim.eps_stderr(i)).max(0.05);
                if gap - allowed > worst_excess {
                    worst_excess = gap - allowed;
                    worst = (gap, s.tau);
                }
            }
            let pass = matched == c.sim.states.len() && worst_excess <= 0.0;
            ok &= pass;
            parts.push(format!("{} sup gap {:.3} at tau {}", c.label, worst.0, worst.1));
            let last = c.sim.states.len() - 1;
            finals.push((c.label.clone(), c.sim.states[last].eps_g, c.ode.last().unwrap().eps_g));
        }
    }
    (ok, parts.join("; "), finals)
}

fn c3_fig2() -> Outcome {
    let (agree, detail, finals) = trajectory_agreement(FigureId::Fig2);
    let ordered = finals.windows(2).all(|w| w[0].1 > w[1].1);
    let f: Vec<String> = finals.iter().map(|(l, s, _)| format!("{l}={s:.4}")).collect();
    outcome(
        agree && ordered,
        format!("{detail}; final sim eps {} (strictly decreasing: {ordered})", f.join(" ")),
    )
}

fn c4_fig3() -> Outcome {
    let (agree, detail, finals) = trajectory_agreement(FigureId::Fig3);
    let get = |label: &str| finals.iter().find(|f| f.0 == label).map(|f| (f.1, f.2)).unwrap();
    let (small, unit) = (get("omega0.25"), get("omega1"));
    let raised = small.0 > unit.0 && small.1 > unit.1;
    outcome(
        agree && raised,
        format!(
            "{detail}; final eps omega=0.25 sim {:.4} ode {:.4} vs omega=1 sim {:.4} ode {:.4}",
            small.0, small.1, unit.0, unit.1
        ),
    )
}

fn c5_fig1() -> Outcome {
    let Preset::Densities(fig) = default_preset(FigureId::Fig1) else { unreachable!() };
    let res = figures::run_densities(&fig).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    let mut pde_means = Vec::new();
    let mut hist_means = Vec::new();
    for &tau in &fig.taus {
        let h = res
            .sim
            .histograms
            .iter()
            .find(|h| h.tau == tau && (h.conditioning_value - 1.0).abs() < 1e-12)
            .expect("histogram at w* = 1");
        let snap = res.pde.iter().find(|s| (s.density.tau - tau).abs() < 1e-9 * tau).expect("PDE snapshot");
        let l1 = histogram_l1(h, &snap.density).unwrap();
        ok &= l1 <= 0.15;
        pde_means.push(snap.density.means()[0]);
        hist_means.push(h.mean());
        parts.push(format!("tau {tau}: L1 {l1:.3}"));
    }
    let increasing = pde_means.windows(2).all(|w| w[1] > w[0]) && hist_means.windows(2).all(|w| w[1] > w[0]);
    let means: Vec<String> = pde_means.iter().map(|m| format!("{m:.3}")).collect();
    outcome(
        ok && increasing,
        format!("{}; PDE means {} (increasing: {increasing})", parts.join(", "), means.join(" ")),
    )
}

fn c6_input_only() -> Outcome {
    let cases = [
        // (bits, range, ridge, noise, fraction of the boundary)
        (2, 1.0, 0.0, 0.0, 0.5),
        (3, 1.5, 0.5, 0.0, 0.2),
        (4, 2.0, 1.0, 0.1, 0.9),
        (10, 1.0, 0.0, 0.0, 0.05),
    ];
    let mut worst: f64 = 0.0;
    for (bits, range, ridge, noise, frac) in cases {
        let moments = build_grid(&QuantizerSpec::new(bits, range)).unwrap().moments_closed_form();
        let gain = moments.sigma_sq + ridge;
        let boundary = 2.0 * gain / moments.sigma_sq.powi(2);
        let eta = frac * boundary;
        let fp = input_only_fixed_point(&moments, 1.0, noise, ridge, eta);
        let model = ModelConfig {
            weight_quantizer: None,
            input_quantizer: Some(QuantizerSpec::new(bits, range)),
            ridge,
            learning_rate: eta,
        };
        let sys = OdeSystem::new(&model, &TeacherMeasure::PointMass(1.0), noise, 1e-10).unwrap();
        let rates: Vec<f64> = fp.eigenvalues.iter().map(|l| l.re.abs()).collect();
        let slow = rates.iter().copied().fold(f64::INFINITY, f64::min);
        let fast = rates.iter().copied().fold(0.0, f64::max);
        let h = (0.1 / fast).min(0.05);
        let steps = (40.0 / slow / h).ceil() as u64;
        let end = sys.integrate_with(OdeState { tau: 0.0, m: 0.0, q: 1.0 }, h, steps, |_| {}).unwrap();
        worst = worst.max((end.m - fp.m_star).abs()).max((end.q - fp.q_star).abs());
    }
    let mut blow_ups = Vec::new();
    for (bits, range) in [(2, 1.0), (3, 1.0), (4, 2.0)] {
        let moments = build_grid(&QuantizerSpec::new(bits, range)).unwrap().moments_closed_form();
        let eta = 1.05 * 2.0 / moments.sigma_sq;
        let model = ModelConfig {
            weight_quantizer: None,
            input_quantizer: Some(QuantizerSpec::new(bits, range)),
            ridge: 0.0,
            learning_rate: eta,
        };
        let sys = OdeSystem::new(&model, &TeacherMeasure::PointMass(1.0), 0.0, 1e-10).unwrap();
        let mut hit = None;
        let res = sys.integrate_with(OdeState { tau: 0.0, m: 0.0, q: 1.0 }, 0.01, 1_000_000, |st| {
            if hit.is_none() && st.q > 1e6 {
                hit = Some(st.tau);
            }
        });
        if hit.is_none() {
            if let Err(st) = res {
                hit = Some(st.tau);
            }
        }
        blow_ups.push(hit);
    }
    let all_blow = blow_ups.iter().all(Option::is_some);
    let taus: Vec<String> = blow_ups
        .iter()
        .map(|t| t.map_or("never".into(), |t| format!("{t:.1}")))
        .collect();
    outcome(
        worst <= 1e-6 && all_blow,
        format!(
            "max |ODE - closed form| = {worst:.2e} (tol 1e-6); q > 1e6 at 1.05x boundary by tau {}",
            taus.join(", ")
        ),
    )
}

fn c7_joint(full: bool) -> Outcome {
    let Preset::Joint(mut fig) = default_preset(FigureId::Fig6) else { unreachable!() };
    if full {
        fig.simulation.horizon_tau = 8e6;
        fig.simulation.record_stride_tau = 1e5;
        fig.simulation.weight_bits = vec![2, 3];
        fig.simulation.input_bits = vec![2, 3, 4];
        fig.simulation.ranges = vec![0.4, 0.8, 1.2, 1.6, 2.0];
    }
    let curves = figures::joint_curves(&JointFigure {
        include_unquantized_input: false,
        ..fig.clone()
    })
    .unwrap();
    let mut shape_ok = true;
    let mut shapes = Vec::new();
    for c in &curves {
        let eps: Vec<f64> = c.points.iter().map(|(_, r)| r.as_ref().map_or(f64::NAN, |r| r.eps_g_star)).collect();
        let interior = has_interior_minimum(&eps);
        shape_ok &= interior;
        let (arg, min) = c
            .points
            .iter()
            .zip(&eps)
            .filter(|(_, e)| e.is_finite())
            .fold((f64::NAN, f64::INFINITY), |acc, ((w, _), &e)| if e < acc.1 { (*w, e) } else { acc });
        shapes.push(format!("{} min {min:.4} at omega {arg}", c.label));
    }
    let sims = figures::joint_simulations(&fig).unwrap();
    let mut sim_ok = true;
    let mut parts = Vec::new();
    for s in &sims {
        let (eps, se) = s.terminal();
        let star = s.fixed_point.as_ref().map_or(f64::NAN, |r| r.eps_g_star);
        let allowed = (3.0 * se).max(0.02);
        let pass = (eps - star).abs() <= allowed;
        sim_ok &= pass;
        parts.push(format!(
            "bw{} bx{} omega {}: sim {eps:.4} +- {se:.4} vs eps* {star:.4}",
            s.weight_bits, s.input_bits, s.omega
        ));
    }
    let scope = if full { "full horizon" } else { "reduced grid" };
    outcome(
        shape_ok && sim_ok,
        format!(
            "{scope}, tau {:.0e}: {}; interior minima: {}",
            fig.simulation.horizon_tau,
            parts.join("; "),
            shapes.join(", ")
        ),
    )
}

fn c8_small_eta() -> Outcome {
    let (omega, ridge) = (1.0, 0.25);
    let config = FixedPointConfig {
        model: ModelConfig {
            weight_quantizer: Some(QuantizerSpec::new(3, omega)),
            input_quantizer: None,
            ridge,
            learning_rate: 1e-2,
        },
        teacher_measure: TeacherMeasure::PointMass(1.0),
        noise_var: 0.0,
        threshold_sum: ThresholdSum::All,
        normalization: BalanceNormalization::Chi,
        s_max: None,
    };
    // Identity inputs: κ = σ² = 1, ρ = 1.
    let c = 1.0 / (1.0 + ridge);
    let levels = (1u32 << 3) - 2;
    let delta = 2.0 * omega / levels as f64;
    let k = ((c + omega) / delta).floor();
    let p = (c + omega - k * delta) / delta;
    let baseline = 1.0 - (1.0 + 2.0 * ridge) / (1.0 + ridge).powi(2);
    let target = delta * delta * p * (1.0 - p);
    let etas = [1e-2, 1e-3, 1e-4];
    let reports: Vec<_> = etas.iter().map(|&e| joint_fixed_point(&config, e).unwrap()).collect();
    let gaps: Vec<f64> = reports.iter().map(|r| (r.eps_g_star - baseline - target).abs()).collect();
    // Non-increasing up to round-off.
    let monotone = gaps.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    let final_rel = gaps[2] / target;
    let ratios: Vec<f64> = reports.iter().zip(&etas).map(|(r, e)| r.s_star / e).collect();
    let stab = (ratios[2] / ratios[1] - 1.0).abs();
    let stable = reports.iter().all(|r| r.stability == Stability::AsymptoticallyStable);
    outcome(
        p > 0.0 && p < 1.0 && monotone && final_rel <= 0.05 && stab <= 0.05 && stable,
        format!(
            "p = {p:.3}, target gap {target:.6}; |gap - target| {:.2e} {:.2e} {:.2e} (final rel {final_rel:.2e}); s/eta {:.4} {:.4} {:.4} (last change {stab:.2e})",
            gaps[0], gaps[1], gaps[2], ratios[0], ratios[1], ratios[2]
        ),
    )
}

fn c9_one_step() -> Outcome {
    const D: usize = 1000;
    const SAMPLES: usize = 100_000;
    const COORDS: usize = 10;
    let (ridge, eta, noise_var) = (0.5, 0.5, 0.25);
    let wq = QuantizerSpec::new(3, 1.0);
    let xq = QuantizerSpec::new(2, 1.0);
    let model = Model::new(&ModelConfig {
        weight_quantizer: Some(wq),
        input_quantizer: Some(xq),
        ridge,
        learning_rate: eta,
    })
    .unwrap();
    let wgrid = build_grid(&wq).unwrap();
    let xm = build_grid(&xq).unwrap().moments_closed_form();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let teacher = vec![1.0; D];
    let mut worst_z: f64 = 0.0;
    for (m0, s0) in [(0.2, 1.0), (0.7, 0.5), (1.0, 0.3)] {
        let w: Vec<f64> = normals(&mut rng, D).iter().map(|z| m0 + s0 * z).collect();
        let psi_w: Vec<f64> = w.iter().map(|&v| wgrid.quantize(v)).collect();
        let d = D as f64;
        let q_psi = psi_w.iter().map(|v| v * v).sum::<f64>() / d;
        let m_psi = psi_w.iter().zip(&teacher).map(|(a, b)| a * b).sum::<f64>() / d;
        let eps = xm.sigma_sq * q_psi - 2.0 * xm.kappa * m_psi + 1.0 + noise_var;
        let coords: Vec<usize> = (0..COORDS).map(|k| k * (D / COORDS) + 7).collect();
        let mut first: Vec<Stats> = coords.iter().map(|_| Stats::new()).collect();
        let mut second: Vec<Stats> = coords.iter().map(|_| Stats::new()).collect();
        for _ in 0..SAMPLES {
            let x = normals(&mut rng, D);
            let xi: f64 = StandardNormal.sample(&mut rng);
            let label = teacher.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() / d.sqrt() + noise_var.sqrt() * xi;
            let next = ste_step(&model, &w, &Sample { input: x, label }).unwrap();
            for (k, &i) in coords.iter().enumerate() {
                let dw = next[i] - w[i];
                first[k].push(dw);
                second[k].push(dw * dw);
            }
        }
        for (k, &i) in coords.iter().enumerate() {
            let drift = eta / d * (xm.kappa * teacher[i] - (xm.sigma_sq + ridge) * psi_w[i]);
            let msq = eta * eta / d * xm.sigma_sq * eps;
            worst_z = worst_z
                .max((first[k].mean() - drift).abs() / first[k].stderr())
                .max((second[k].mean() - msq).abs() / second[k].stderr());
        }
    }
    outcome(
        worst_z <= 4.0,
        format!("d = {D}, 3 states x {COORDS} coordinates x 2 moments, max |z| = {worst_z:.2} (tol 4)"),
    )
}

fn c10_local_fields() -> Outcome {
    const D: usize = 2000;
    const SAMPLES: usize = 10_000;
    let wq = QuantizerSpec::new(3, 1.0);
    let xq = QuantizerSpec::new(2, 1.5);
    let wgrid = build_grid(&wq).unwrap();
    let xgrid = build_grid(&xq).unwrap();
    let mo = xgrid.moments_closed_form();
    let (k, s2) = (mo.kappa, mo.sigma_sq);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let teacher: Vec<f64> = normals(&mut rng, D);
    let w: Vec<f64> = normals(&mut rng, D).iter().zip(&teacher).map(|(z, t)| 0.6 * t + 0.7 * z).collect();
    let psi_w: Vec<f64> = w.iter().map(|&v| wgrid.quantize(v)).collect();
    let d = D as f64;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / d;
    let (rho, m, q) = (dot(&teacher, &teacher), dot(&w, &teacher), dot(&w, &w));
    let (m_psi, q_psi, r_psi) = (dot(&psi_w, &teacher), dot(&psi_w, &psi_w), dot(&psi_w, &w));
    let sigma = [
        [rho, k * rho, k * m, k * m_psi],
        [k * rho, s2 * rho, s2 * m, s2 * m_psi],
        [k * m, s2 * m, s2 * q, s2 * r_psi],
        [k * m_psi, s2 * m_psi, s2 * r_psi, s2 * q_psi],
    ];
    let sd = d.sqrt();
    let mut fields = Vec::with_capacity(SAMPLES);
    for _ in 0..SAMPLES {
        let x = normals(&mut rng, D);
        let px: Vec<f64> = x.iter().map(|&v| xgrid.quantize(v)).collect();
        let f = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / sd;
        fields.push([f(&teacher, &x), f(&teacher, &px), f(&w, &px), f(&psi_w, &px)]);
    }
    let n = SAMPLES as f64;
    let mean: Vec<f64> = (0..4).map(|i| fields.iter().map(|f| f[i]).sum::<f64>() / n).collect();
    let mut worst_z: f64 = 0.0;
    for i in 0..4 {
        for j in i..4 {
            let prods: Vec<f64> = fields.iter().map(|f| (f[i] - mean[i]) * (f[j] - mean[j])).collect();
            let c = prods.iter().sum::<f64>() / (n - 1.0);
            let var = prods.iter().map(|p| (p - c) * (p - c)).sum::<f64>() / (n - 1.0);
            let se = (var / n).sqrt();
            worst_z = worst_z.max((c - sigma[i][j]).abs() / se);
        }
    }
    outcome(
        worst_z <= 5.0,
        format!("d = {D}, {SAMPLES} inputs, 10 entries, max |z| = {worst_z:.2} (tol 5)"),
    )
}

/// Inputs quantized, weights not: here the ODE is the exact large-d limit.
/// With quantized weights the isotropic closure leaves a d-independent bias
/// that swamps the d^{-1/2} trend.
fn c11_concentration() -> Outcome {
    const RUNS: usize = 20;
    let model = ModelConfig {
        weight_quantizer: None,
        input_quantizer: Some(QuantizerSpec::new(3, 1.0)),
        ridge: 1.0,
        learning_rate: 0.04,
    };
    let horizon = 50.0;
    let ode = integrate(&OdeConfig {
        model: model.clone(),
        teacher_measure: TeacherMeasure::PointMass(1.0),
        noise_var: 0.0,
        step_dtau: 0.01,
        horizon_tau: horizon,
        s_floor: 1e-10,
        record_stride_tau: 0.5,
        initial: OdeState { tau: 0.0, m: 0.0, q: 1.0 },
    })
    .unwrap()
    .macro_states;
    let mut stat = Vec::new();
    for dim in [400, 1600] {
        let out = run_simulation(&SimConfig {
            model: model.clone(),
            teacher: TeacherSpec::all_ones(dim),
            horizon_tau: horizon,
            record_stride_tau: 0.5,
            init: InitSpec::GaussianStd,
            runs: RUNS,
            master_seed: 11,
            histogram_taus: Vec::new(),
            histogram_bins: None,
        })
        .unwrap();
        let per_run_max: Vec<f64> = out
            .per_run
            .iter()
            .map(|run| {
                run.iter()
                    .zip(&ode)
                    .map(|(s, o)| {
                        assert!((s.tau - o.tau).abs() < 1e-9 * s.tau.max(1.0));
                        (s.eps_g - o.eps_g).abs()
                    })
                    .fold(0.0, f64::max)
            })
            .collect();
        stat.push(per_run_max.iter().sum::<f64>() / RUNS as f64);
    }
    let ratio = stat[0] / stat[1];
    outcome(
        (1.5..=3.0).contains(&ratio),
        format!(
            "mean over {RUNS} runs of max |eps_sim - eps_ode|: d=400 {:.4}, d=1600 {:.4}, ratio {ratio:.2} (want [1.5, 3])",
            stat[0], stat[1]
        ),
    )
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let full = args.iter().any(|a| a == "--full");
    let selected: Vec<u32> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let criteria: Vec<(u32, &str, Box<dyn Fn() -> Outcome>)> = vec![
        (1, "quantizer moments vs quadrature", Box::new(c1_moments)),
        (2, "Gaussian kernels vs Monte Carlo", Box::new(c2_kernels)),
        (3, "fig2 simulation vs ODE, bit ordering", Box::new(c3_fig2)),
        (4, "fig3 small range raises the floor", Box::new(c4_fig3)),
        (5, "fig1 PDE density vs histograms", Box::new(c5_fig1)),
        (6, "input-only fixed point and blow-up", Box::new(c6_input_only)),
        (7, "joint fixed point vs long simulations", Box::new(move || c7_joint(full))),
        (8, "small learning-rate limit", Box::new(c8_small_eta)),
        (9, "one-step drift and second moment", Box::new(c9_one_step)),
        (10, "local-field covariance", Box::new(c10_local_fields)),
        (11, "concentration in the dimension", Box::new(c11_concentration)),
    ];
    let mut failed = 0;
    for (id, name, f) in &criteria {
        if !selected.is_empty() && !selected.contains(id) {
            continue;
        }
        let t = Instant::now();
        let o = f();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {id:>2} {verdict} [{:.1}s] {name}: {}",
            t.elapsed().as_secs_f64(),
            o.detail
        );
        if !o.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
