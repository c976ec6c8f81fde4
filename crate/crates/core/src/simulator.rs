//! Finite-dimensional one-pass STE training.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    derive_rng, dot, generalization_error, sample_teacher_with, Model, ModelConfig, Sample, SampleStream,
    Stream, TeacherSpec,
};
use crate::quantizer::{Quantizer, QuantizerMoments};

/// Coordinates beyond this magnitude count as a blow-up.
pub const DIVERGENCE_THRESHOLD: f64 = 1e8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitSpec {
    GaussianStd,
    Zero,
    Custom(Vec<f64>),
}

/// Fixed-width histogram bins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBins {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl HistogramBins {
    /// 101 bins over [−ω − 3, ω + 3].
    pub fn default_for(weight_range: f64) -> Self {
        Self {
            lo: -weight_range - 3.0,
            hi: weight_range + 3.0,
            count: 101,
        }
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.count as f64
    }

    pub fn edges(&self) -> Vec<f64> {
        let h = self.width();
        (0..=self.count)
            .map(|i| if i == self.count { self.hi } else { self.lo + i as f64 * h })
            .collect()
    }

    #[inline]
    fn index(&self, x: f64) -> Option<usize> {
        if !(x >= self.lo && x < self.hi) {
            return None;
        }
        let i = ((x - self.lo) / self.width()) as usize;
        Some(i.min(self.count - 1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub model: ModelConfig,
    pub teacher: TeacherSpec,
    pub horizon_tau: f64,
    pub record_stride_tau: f64,
    pub init: InitSpec,
    pub runs: usize,
    pub master_seed: u64,
    /// Times at which coordinate histograms are taken.
    #[serde(default)]
    pub histogram_taus: Vec<f64>,
    /// Defaults to [`HistogramBins::default_for`] the weight range (ω = 1
    /// for identity weights).
    #[serde(default)]
    pub histogram_bins: Option<HistogramBins>,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.teacher.validate()?;
        let d = self.teacher.dim as f64;
        if !(self.horizon_tau.is_finite() && self.horizon_tau * d >= 1.0) {
            return Err(Error::InvalidParameter("horizon must cover at least one step".into()));
        }
        if !(self.record_stride_tau > 0.0 && self.record_stride_tau <= self.horizon_tau) {
            return Err(Error::InvalidParameter(
                "record stride must be positive and no longer than the horizon".into(),
            ));
        }
        if self.runs == 0 {
            return Err(Error::InvalidParameter("runs must be at least 1".into()));
        }
        if let InitSpec::Custom(v) = &self.init {
            if v.len() != self.teacher.dim {
                return Err(Error::DimError {
                    expected: self.teacher.dim,
                    got: v.len(),
                });
            }
        }
        if self.histogram_taus.iter().any(|&t| !(0.0..=self.horizon_tau).contains(&t)) {
            return Err(Error::InvalidParameter("histogram times must lie within the horizon".into()));
        }
        if let Some(b) = &self.histogram_bins {
            if !(b.count >= 1 && b.hi > b.lo) {
                return Err(Error::InvalidParameter("histogram bins need hi > lo and count >= 1".into()));
            }
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        (self.horizon_tau * self.teacher.dim as f64).floor() as u64
    }

    /// Step indices at which macroscopic states are recorded: every stride
    /// plus the last step.
    pub fn record_steps(&self) -> Vec<u64> {
        let d = self.teacher.dim as f64;
        let total = self.total_steps();
        let mut steps = Vec::new();
        let mut k = 0u64;
        loop {
            let s = (k as f64 * self.record_stride_tau * d).round() as u64;
            if s > total {
                break;
            }
            steps.push(s);
            k += 1;
        }
        steps.push(total);
        steps.dedup();
        steps
    }

    fn bins(&self) -> HistogramBins {
        self.histogram_bins.unwrap_or_else(|| {
            HistogramBins::default_for(self.model.weight_quantizer.map(|q| q.range).unwrap_or(1.0))
        })
    }
}

/// Order parameters of one weight vector.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MacroState {
    pub tau: f64,
    pub m: f64,
    pub q: f64,
    pub s: f64,
    pub m_psi: f64,
    pub q_psi: f64,
    pub r_psi: f64,
    pub eps_g: f64,
}

impl MacroState {
    fn fields(&self) -> [f64; 7] {
        [self.m, self.q, self.s, self.m_psi, self.q_psi, self.r_psi, self.eps_g]
    }

    fn from_fields(tau: f64, f: [f64; 7]) -> Self {
        Self {
            tau,
            m: f[0],
            q: f[1],
            s: f[2],
            m_psi: f[3],
            q_psi: f[4],
            r_psi: f[5],
            eps_g: f[6],
        }
    }
}

/// Time series of macroscopic states, averaged over `run_count` runs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<MacroState>,
    pub run_count: usize,
    /// Standard error across runs for every field, present iff
    /// `run_count > 1`.
    pub stderr: Option<Vec<MacroState>>,
    pub seed: Option<u64>,
    /// Free-form description of the producing configuration.
    pub label: String,
}

impl Trajectory {
    pub fn eps_stderr(&self, i: usize) -> f64 {
        self.stderr.as_ref().map_or(0.0, |s| s[i].eps_g)
    }

    /// Average several equally-sampled trajectories pointwise in τ.
    pub fn average(runs: &[Vec<MacroState>]) -> Self {
        let n = runs.len();
        assert!(n > 0);
        let len = runs.iter().map(Vec::len).min().unwrap_or(0);
        let mut states = Vec::with_capacity(len);
        let mut errs = Vec::with_capacity(len);
        for i in 0..len {
            let tau = runs[0][i].tau;
            let mut mean = [0.0; 7];
            for r in runs {
                for (a, v) in mean.iter_mut().zip(r[i].fields()) {
                    *a += v / n as f64;
                }
            }
            let mut se = [0.0; 7];
            if n > 1 {
                for r in runs {
                    for ((a, v), mu) in se.iter_mut().zip(r[i].fields()).zip(mean) {
                        *a += (v - mu) * (v - mu);
                    }
                }
                for a in se.iter_mut() {
                    *a = (*a / (n - 1) as f64 / n as f64).sqrt();
                }
            }
            states.push(MacroState::from_fields(tau, mean));
            errs.push(MacroState::from_fields(tau, se));
        }
        Self {
            states,
            run_count: n,
            stderr: (n > 1).then_some(errs),
            seed: None,
            label: String::new(),
        }
    }
}

/// Empirical density of the coordinates w_i whose teacher entry equals
/// `conditioning_value` (NaN when pooled over a continuous teacher).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateHistogram {
    pub tau: f64,
    pub conditioning_value: f64,
    pub bin_edges: Vec<f64>,
    /// Normalized over the coordinates that fall inside the bins.
    pub densities: Vec<f64>,
    /// Fraction of coordinates outside the binned range.
    pub outside_fraction: f64,
}

impl CoordinateHistogram {
    pub fn mean(&self) -> f64 {
        self.densities
            .iter()
            .zip(self.bin_edges.windows(2))
            .map(|(p, e)| p * (e[1] - e[0]) * 0.5 * (e[0] + e[1]))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub trajectory: Trajectory,
    pub per_run: Vec<Vec<MacroState>>,
    pub histograms: Vec<CoordinateHistogram>,
}

/// Order parameters of `w` against `teacher`.
pub fn macro_observables(
    w: &[f64],
    teacher: &[f64],
    weight_q: &Quantizer,
    moments_x: &QuantizerMoments,
    rho: f64,
    noise_var: f64,
) -> Result<MacroState> {
    if w.len() != teacher.len() {
        return Err(Error::DimError {
            expected: teacher.len(),
            got: w.len(),
        });
    }
    let psi: Vec<f64> = w.iter().map(|&v| weight_q.apply(v)).collect();
    Ok(observables_from(w, &psi, teacher, moments_x, rho, noise_var, 0.0))
}

fn observables_from(
    w: &[f64],
    psi: &[f64],
    teacher: &[f64],
    moments_x: &QuantizerMoments,
    rho: f64,
    noise_var: f64,
    tau: f64,
) -> MacroState {
    let d = w.len() as f64;
    let (mut m, mut q, mut m_psi, mut q_psi, mut r_psi) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..w.len() {
        let (wi, pi, ti) = (w[i], psi[i], teacher[i]);
        m += ti * wi;
        q += wi * wi;
        m_psi += pi * ti;
        q_psi += pi * pi;
        r_psi += pi * wi;
    }
    let (m, q, m_psi, q_psi, r_psi) = (m / d, q / d, m_psi / d, q_psi / d, r_psi / d);
    MacroState {
        tau,
        m,
        q,
        s: (q - m * m / rho).max(0.0).sqrt(),
        m_psi,
        q_psi,
        r_psi,
        eps_g: generalization_error(moments_x, m_psi, q_psi, rho, noise_var),
    }
}

#[inline]
fn apply_into(q: &Quantizer, src: &[f64], dst: &mut [f64]) {
    match q {
        Quantizer::Identity => dst.copy_from_slice(src),
        Quantizer::Uniform { grid, temperature } if *temperature == 0.0 => {
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = grid.quantize(v);
            }
        }
        _ => {
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = q.apply(v);
            }
        }
    }
}

/// One STE update w ← w − η[(ŷ − y)/√d · ψ(x) + (λ/d) ψ(w)]. The gradient
/// passes through ψ(w) as if it were the identity.
pub fn ste_step(model: &Model, w: &[f64], sample: &Sample) -> Result<Vec<f64>> {
    let d = w.len();
    if sample.input.len() != d {
        return Err(Error::DimError {
            expected: d,
            got: sample.input.len(),
        });
    }
    let mut psi_w = vec![0.0; d];
    let mut psi_x = vec![0.0; d];
    apply_into(&model.weight_q, w, &mut psi_w);
    apply_into(&model.input_q, &sample.input, &mut psi_x);
    let sd = (d as f64).sqrt();
    let y_hat = dot(&psi_w, &psi_x) / sd;
    let g = (y_hat - sample.label) / sd;
    let eta = model.eta();
    let decay = model.ridge() / d as f64;
    let out: Vec<f64> = (0..d).map(|i| w[i] - eta * (g * psi_x[i] + decay * psi_w[i])).collect();
    if out.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_THRESHOLD) {
        return Err(Error::Divergence {
            step: 0,
            tau: 0.0,
            partial: Box::default(),
        });
    }
    Ok(out)
}

/// Buffers for repeated in-place updates.
struct Worker<'a> {
    model: &'a Model,
    w: Vec<f64>,
    psi_w: Vec<f64>,
    x: Vec<f64>,
    psi_x: Vec<f64>,
}

impl Worker<'_> {
    /// Returns false if any coordinate blew up.
    #[inline]
    fn step(&mut self, stream: &mut SampleStream<'_>) -> bool {
        let d = self.w.len();
        let y = stream.fill(&mut self.x);
        apply_into(&self.model.input_q, &self.x, &mut self.psi_x);
        let sd = (d as f64).sqrt();
        let y_hat = dot(&self.psi_w, &self.psi_x) / sd;
        let g = self.model.eta() * (y_hat - y) / sd;
        let decay = self.model.eta() * self.model.ridge() / d as f64;
        let mut ok = true;
        for i in 0..d {
            let v = self.w[i] - g * self.psi_x[i] - decay * self.psi_w[i];
            // NaN fails the comparison as well.
            ok &= v.abs() <= DIVERGENCE_THRESHOLD;
            self.w[i] = v;
        }
        apply_into(&self.model.weight_q, &self.w, &mut self.psi_w);
        ok
    }
}

struct RunResult {
    states: Vec<MacroState>,
    /// (histogram time index, group index) → bin counts, plus outside count.
    counts: Vec<Vec<(Vec<u64>, u64)>>,
}

fn teacher_groups(teacher: &[f64]) -> Vec<f64> {
    let mut vals: Vec<f64> = Vec::new();
    for &t in teacher {
        if !vals.iter().any(|v| v.to_bits() == t.to_bits()) {
            vals.push(t);
            if vals.len() > 8 {
                return vec![f64::NAN];
            }
        }
    }
    vals.sort_by(f64::total_cmp);
    vals
}

fn group_of(groups: &[f64], t: f64) -> usize {
    if groups.len() == 1 && groups[0].is_nan() {
        return 0;
    }
    groups.iter().position(|g| g.to_bits() == t.to_bits()).unwrap_or(0)
}

fn run_one(config: &SimConfig, model: &Model, run: u64) -> Result<(RunResult, Vec<f64>)> {
    let d = config.teacher.dim;
    let df = d as f64;
    let seed = config.master_seed;
    let teacher = sample_teacher_with(&config.teacher, &mut derive_rng(seed, run, Stream::Teacher))?;
    let w0 = match &config.init {
        InitSpec::GaussianStd => {
            let mut rng = derive_rng(seed, run, Stream::Init);
            (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()
        }
        InitSpec::Zero => vec![0.0; d],
        InitSpec::Custom(v) => v.clone(),
    };
    let mut worker = Worker {
        model,
        psi_w: vec![0.0; d],
        x: vec![0.0; d],
        psi_x: vec![0.0; d],
        w: w0,
    };
    apply_into(&model.weight_q, &worker.w.clone(), &mut worker.psi_w);
    let mut stream = SampleStream::new(&teacher, config.teacher.noise_var, seed, run);

    let record = config.record_steps();
    let bins = config.bins();
    let groups = teacher_groups(&teacher);
    let mut hist_steps: Vec<(u64, usize)> = config
        .histogram_taus
        .iter()
        .enumerate()
        .map(|(i, t)| ((t * df).round() as u64, i))
        .collect();
    hist_steps.sort();
    let mut counts = vec![vec![(vec![0u64; bins.count], 0u64); groups.len()]; config.histogram_taus.len()];

    let (rho, noise) = (config.teacher.rho, config.teacher.noise_var);
    let observe = |w: &Worker<'_>, step: u64| {
        observables_from(&w.w, &w.psi_w, &teacher, &model.moments_x, rho, noise, step as f64 / df)
    };
    let mut states = Vec::with_capacity(record.len());
    let mut next_rec = 0;
    let mut next_hist = 0;
    let total = config.total_steps();
    let mut step = 0u64;
    loop {
        while next_rec < record.len() && record[next_rec] == step {
            states.push(observe(&worker, step));
            next_rec += 1;
        }
        while next_hist < hist_steps.len() && hist_steps[next_hist].0 == step {
            let slot = &mut counts[hist_steps[next_hist].1];
            for (&wi, &ti) in worker.w.iter().zip(&teacher) {
                let g = &mut slot[group_of(&groups, ti)];
                match bins.index(wi) {
                    Some(b) => g.0[b] += 1,
                    None => g.1 += 1,
                }
            }
            next_hist += 1;
        }
        if step == total {
            break;
        }
        // Run without bookkeeping until the next event.
        let next_event = record
            .get(next_rec)
            .copied()
            .unwrap_or(total)
            .min(hist_steps.get(next_hist).map_or(total, |h| h.0));
        while step < next_event {
            let ok = worker.step(&mut stream);
            step += 1;
            if !ok {
                let mut partial = Trajectory::average(&[states]);
                partial.seed = Some(seed);
                partial.label = format!("run {run}");
                return Err(Error::Divergence {
                    step,
                    tau: step as f64 / df,
                    partial: Box::new(partial),
                });
            }
        }
    }
    Ok((RunResult { states, counts }, teacher))
}

/// Run `config.runs` independent simulations (in parallel on the current
/// rayon pool) and average them. Results depend only on the master seed.
pub fn run_simulation(config: &SimConfig) -> Result<SimOutput> {
    config.validate()?;
    let model = Model::new(&config.model)?;
    let results: Vec<Result<(RunResult, Vec<f64>)>> = (0..config.runs as u64)
        .into_par_iter()
        .map(|r| run_one(config, &model, r))
        .collect();
    let mut runs = Vec::with_capacity(results.len());
    let mut teachers = Vec::new();
    for r in results {
        let (res, t) = r?;
        runs.push(res);
        teachers.push(t);
    }
    let per_run: Vec<Vec<MacroState>> = runs.iter().map(|r| r.states.clone()).collect();
    let mut trajectory = Trajectory::average(&per_run);
    trajectory.seed = Some(config.master_seed);

    let bins = config.bins();
    let edges = bins.edges();
    let groups = teacher_groups(&teachers[0]);
    let mut histograms = Vec::new();
    for (h, &tau) in config.histogram_taus.iter().enumerate() {
        for (g, &value) in groups.iter().enumerate() {
            let mut inside = vec![0u64; bins.count];
            let mut outside = 0u64;
            for r in &runs {
                if let Some((c, o)) = r.counts[h].get(g) {
                    for (a, b) in inside.iter_mut().zip(c) {
                        *a += b;
                    }
                    outside += o;
                }
            }
            let n_in: u64 = inside.iter().sum();
            let total = n_in + outside;
            let norm = if n_in > 0 { 1.0 / (n_in as f64 * bins.width()) } else { 0.0 };
            histograms.push(CoordinateHistogram {
                tau,
                conditioning_value: value,
                bin_edges: edges.clone(),
                densities: inside.iter().map(|&c| c as f64 * norm).collect(),
                outside_fraction: if total > 0 { outside as f64 / total as f64 } else { 0.0 },
            });
        }
    }
    Ok(SimOutput {
        trajectory,
        per_run,
        histograms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::QuantizerSpec;

    fn model(wq: Option<QuantizerSpec>, xq: Option<QuantizerSpec>, lambda: f64, eta: f64) -> Model {
        Model::new(&ModelConfig {
            weight_quantizer: wq,
            input_quantizer: xq,
            ridge: lambda,
            learning_rate: eta,
        })
        .unwrap()
    }

    #[test]
    fn zero_rate_is_rejected_and_tiny_rate_barely_moves() {
        assert!(Model::new(&ModelConfig {
            weight_quantizer: None,
            input_quantizer: None,
            ridge: 0.0,
            learning_rate: 0.0,
        })
        .is_err());
        let m = model(None, None, 0.0, 1e-300);
        let w = vec![0.3, -0.2];
        let s = Sample {
            input: vec![1.0, 2.0],
            label: 5.0,
        };
        assert_eq!(ste_step(&m, &w, &s).unwrap(), w);
    }

    #[test]
    fn scalar_sgd_step() {
        let m = model(None, None, 0.0, 1.0);
        let s = Sample {
            input: vec![1.0],
            label: 1.0,
        };
        assert_eq!(ste_step(&m, &[0.0], &s).unwrap(), vec![1.0]);
    }

    #[test]
    fn dead_zone_weights_get_no_ridge_pull() {
        let m = model(Some(QuantizerSpec::new(2, 1.0)), None, 5.0, 0.1);
        let w = vec![0.2, -0.3, 0.1, 0.4];
        // Label equal to the prediction (0) leaves only the ridge term.
        let s = Sample {
            input: vec![1.0, -1.0, 0.5, 2.0],
            label: 0.0,
        };
        assert_eq!(ste_step(&m, &w, &s).unwrap(), w);
    }

    #[test]
    fn macro_examples() {
        let teacher = vec![1.0; 50];
        let id = Quantizer::Identity;
        let mx = QuantizerMoments::IDENTITY;
        let st = macro_observables(&teacher, &teacher, &id, &mx, 1.0, 0.0).unwrap();
        for v in [st.m, st.q, st.m_psi, st.q_psi, st.r_psi] {
            assert!((v - 1.0).abs() < 1e-15);
        }
        assert!(st.eps_g.abs() < 1e-15);
        let st = macro_observables(&[0.0; 50], &teacher, &id, &mx, 1.0, 0.3).unwrap();
        assert_eq!((st.m, st.q, st.s, st.m_psi, st.q_psi, st.r_psi), (0.0, 0.0, 0.0, 0.0, 0.0, 0.0));
        assert!((st.eps_g - 1.3).abs() < 1e-15);
    }

    #[test]
    fn record_grid() {
        let cfg = SimConfig {
            model: ModelConfig {
                weight_quantizer: None,
                input_quantizer: None,
                ridge: 0.0,
                learning_rate: 0.1,
            },
            teacher: TeacherSpec::all_ones(10),
            horizon_tau: 1.05,
            record_stride_tau: 0.5,
            init: InitSpec::Zero,
            runs: 1,
            master_seed: 0,
            histogram_taus: vec![],
            histogram_bins: None,
        };
        assert_eq!(cfg.record_steps(), vec![0, 5, 10]);
        assert_eq!(cfg.total_steps(), 10);
    }
}
