//! Linear Gaussian teacher, streaming data and the quantized student's
//! predictions.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::{Quantizer, QuantizerMoments, QuantizerSpec};

/// Distribution of the teacher entries before renormalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TeacherDist {
    AllOnes,
    Gaussian { mean: f64, var: f64 },
    Rademacher { scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSpec {
    pub dim: usize,
    pub rho: f64,
    pub teacher_dist: TeacherDist,
    pub noise_var: f64,
}

impl TeacherSpec {
    pub fn all_ones(dim: usize) -> Self {
        Self {
            dim,
            rho: 1.0,
            teacher_dist: TeacherDist::AllOnes,
            noise_var: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidParameter("dimension must be at least 1".into()));
        }
        if !(self.rho.is_finite() && self.rho > 0.0) {
            return Err(Error::InvalidParameter(format!("rho must be positive, got {}", self.rho)));
        }
        if !(self.noise_var.is_finite() && self.noise_var >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "noise variance must be non-negative, got {}",
                self.noise_var
            )));
        }
        match self.teacher_dist {
            TeacherDist::Gaussian { mean, var } if !(var >= 0.0 && var.is_finite() && mean.is_finite()) => {
                Err(Error::InvalidParameter("Gaussian teacher needs finite mean and var >= 0".into()))
            }
            TeacherDist::Rademacher { scale } if !(scale.is_finite() && scale != 0.0) => {
                Err(Error::InvalidParameter("Rademacher teacher needs a non-zero scale".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Quantizers and optimizer hyper-parameters. A missing quantizer means the
/// identity (no quantization).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default)]
    pub weight_quantizer: Option<QuantizerSpec>,
    #[serde(default)]
    pub input_quantizer: Option<QuantizerSpec>,
    pub ridge: f64,
    pub learning_rate: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ridge.is_finite() && self.ridge >= 0.0) {
            return Err(Error::InvalidParameter(format!("ridge must be non-negative, got {}", self.ridge)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

pub fn make_quantizer(spec: Option<&QuantizerSpec>) -> Result<Quantizer> {
    match spec {
        None => Ok(Quantizer::Identity),
        Some(s) => Quantizer::uniform(s),
    }
}

/// A validated model: both quantizers built, input moments precomputed.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub weight_q: Quantizer,
    pub input_q: Quantizer,
    pub moments_x: QuantizerMoments,
}

impl Model {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let weight_q = make_quantizer(config.weight_quantizer.as_ref())?;
        let input_q = make_quantizer(config.input_quantizer.as_ref())?;
        let moments_x = input_q.moments();
        Ok(Self {
            config: config.clone(),
            weight_q,
            input_q,
            moments_x,
        })
    }

    pub fn eta(&self) -> f64 {
        self.config.learning_rate
    }

    pub fn ridge(&self) -> f64 {
        self.config.ridge
    }

    pub fn predict(&self, w: &[f64], x: &[f64]) -> Result<f64> {
        predict(&self.weight_q, &self.input_q, w, x)
    }
}

/// Independent random streams derived from one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Teacher = 0,
    Data = 1,
    Init = 2,
    Noise = 3,
}

const STREAMS_PER_RUN: u64 = 16;

/// ChaCha8 generator for (`master`, `run`, `stream`). Different runs and
/// streams use disjoint ChaCha stream ids, so results do not depend on the
/// order in which runs are executed.
pub fn derive_rng(master: u64, run: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(run * STREAMS_PER_RUN + stream as u64);
    rng
}

/// Teacher vector for `seed`, rescaled so that ‖w*‖² = ρd exactly.
pub fn sample_teacher(spec: &TeacherSpec, seed: u64) -> Result<Vec<f64>> {
    sample_teacher_with(spec, &mut derive_rng(seed, 0, Stream::Teacher))
}

pub fn sample_teacher_with<R: Rng + ?Sized>(spec: &TeacherSpec, rng: &mut R) -> Result<Vec<f64>> {
    spec.validate()?;
    let d = spec.dim;
    let raw: Vec<f64> = match spec.teacher_dist {
        TeacherDist::AllOnes => return Ok(vec![spec.rho.sqrt(); d]),
        TeacherDist::Gaussian { mean, var } => {
            let n = Normal::new(mean, var.sqrt()).map_err(|e| Error::InvalidParameter(e.to_string()))?;
            (0..d).map(|_| n.sample(rng)).collect()
        }
        TeacherDist::Rademacher { scale } => (0..d)
            .map(|_| if rng.gen::<bool>() { scale } else { -scale })
            .collect(),
    };
    let norm_sq: f64 = raw.iter().map(|v| v * v).sum();
    if !(norm_sq > 0.0) {
        return Err(Error::InvalidParameter("sampled teacher is the zero vector".into()));
    }
    let scale = (spec.rho * d as f64 / norm_sq).sqrt();
    Ok(raw.into_iter().map(|v| v * scale).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Vec<f64>,
    pub label: f64,
}

/// Label for input `x`: x·w*/√d + noise.
pub fn teacher_label(teacher: &[f64], x: &[f64], noise: f64) -> f64 {
    let d = teacher.len() as f64;
    dot(teacher, x) / d.sqrt() + noise
}

/// One-pass stream of fresh samples from the teacher model.
#[derive(Debug, Clone)]
pub struct SampleStream<'a> {
    teacher: &'a [f64],
    noise_std: f64,
    data: ChaCha8Rng,
    noise: ChaCha8Rng,
}

impl<'a> SampleStream<'a> {
    pub fn new(teacher: &'a [f64], noise_var: f64, master: u64, run: u64) -> Self {
        Self {
            teacher,
            noise_std: noise_var.sqrt(),
            data: derive_rng(master, run, Stream::Data),
            noise: derive_rng(master, run, Stream::Noise),
        }
    }

    /// Draw the next input into `x` and return its label.
    #[inline]
    pub fn fill(&mut self, x: &mut [f64]) -> f64 {
        debug_assert_eq!(x.len(), self.teacher.len());
        for xi in x.iter_mut() {
            *xi = StandardNormal.sample(&mut self.data);
        }
        let noise = if self.noise_std > 0.0 {
            let z: f64 = StandardNormal.sample(&mut self.noise);
            self.noise_std * z
        } else {
            0.0
        };
        teacher_label(self.teacher, x, noise)
    }

    pub fn next_sample(&mut self) -> Sample {
        let mut input = vec![0.0; self.teacher.len()];
        let label = self.fill(&mut input);
        Sample { input, label }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// ŷ = ψ(w)ᵀψ(x)/√d.
pub fn predict(weight_q: &Quantizer, input_q: &Quantizer, w: &[f64], x: &[f64]) -> Result<f64> {
    if w.len() != x.len() {
        return Err(Error::DimError {
            expected: w.len(),
            got: x.len(),
        });
    }
    let d = w.len() as f64;
    let s: f64 = w
        .iter()
        .zip(x)
        .map(|(&wi, &xi)| weight_q.apply(wi) * input_q.apply(xi))
        .sum();
    Ok(s / d.sqrt())
}

/// ε_g = σ_ψ² q_ψ − 2κ_ψ m_ψ + ρ + σ², with input-quantizer moments.
pub fn generalization_error(moments_x: &QuantizerMoments, m_psi: f64, q_psi: f64, rho: f64, noise_var: f64) -> f64 {
    moments_x.sigma_sq * q_psi - 2.0 * moments_x.kappa * m_psi + rho + noise_var
}

const REPLAY_MAGIC: &[u8; 4] = b"STEL";
const REPLAY_VERSION: u32 = 1;

/// Writes samples in the little-endian record/replay format.
pub struct SampleWriter<W: Write> {
    out: W,
    dim: usize,
}

impl<W: Write> SampleWriter<W> {
    pub fn new(mut out: W, dim: usize, seed: u64) -> Result<Self> {
        out.write_all(REPLAY_MAGIC)?;
        out.write_all(&REPLAY_VERSION.to_le_bytes())?;
        out.write_all(&(dim as u64).to_le_bytes())?;
        out.write_all(&seed.to_le_bytes())?;
        Ok(Self { out, dim })
    }

    pub fn write(&mut self, sample: &Sample) -> Result<()> {
        if sample.input.len() != self.dim {
            return Err(Error::DimError {
                expected: self.dim,
                got: sample.input.len(),
            });
        }
        for v in &sample.input {
            self.out.write_all(&v.to_le_bytes())?;
        }
        self.out.write_all(&sample.label.to_le_bytes())?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Reads samples written by [`SampleWriter`].
pub struct SampleReader<R: Read> {
    input: R,
    pub dim: usize,
    pub seed: u64,
}

impl<R: Read> SampleReader<R> {
    pub fn new(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != REPLAY_MAGIC {
            return Err(Error::SchemaError("not a sample replay file".into()));
        }
        let version = u32::from_le_bytes(read_array(&mut input)?);
        if version != REPLAY_VERSION {
            return Err(Error::SchemaError(format!("unsupported replay version {version}")));
        }
        let dim = u64::from_le_bytes(read_array(&mut input)?) as usize;
        let seed = u64::from_le_bytes(read_array(&mut input)?);
        Ok(Self { input, dim, seed })
    }

    /// Next record, or `None` at a clean end of file.
    pub fn next_sample(&mut self) -> Result<Option<Sample>> {
        let mut first = [0u8; 8];
        match self.input.read_exact(&mut first) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e.into()),
        }
        let mut values = Vec::with_capacity(self.dim + 1);
        values.push(f64::from_le_bytes(first));
        for _ in 0..self.dim {
            values.push(f64::from_le_bytes(read_array(&mut self.input)?));
        }
        let label = values.pop().expect("at least one value");
        Ok(Some(Sample { input: values, label }))
    }
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}
