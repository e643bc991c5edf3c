//! Autoregressive generation with bounded memory.
//!
//! The prime is read in segment-sized chunks, then every step feeds the
//! previous tuple as a one-position segment and samples the four tokens of
//! the next tuple independently from their own stream's logits. Cost and
//! live state per step depend on `mem_len` only.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{NoteTuple, Stream, TokenStreams};
use crate::model::{Dropout, Model, ModelError, StreamMemory};
use crate::tensor::{Graph, Scalar};

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error("prime must contain at least one note")]
    EmptyPrime,
    #[error("non-finite {stream} logits at step {step}")]
    NonFinite { stream: &'static str, step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("output sink: {0}")]
    Sink(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Per stream: on2on, on2off, pitch, velocity.
    pub temperature: [f64; 4],
    /// Per stream; 0 keeps the whole vocabulary.
    pub top_k: [usize; 4],
    /// Argmax instead of sampling (the zero-temperature limit).
    pub greedy: bool,
    pub notes: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: [1.0; 4],
            top_k: [32, 32, 0, 0],
            greedy: false,
            notes: 1000,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SampleError> {
        if self.temperature.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
            return Err(SampleError::Config(format!(
                "temperatures must be positive, got {:?}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Picks a token from one row of logits. Tokens below `min_token` are
/// never chosen.
pub fn sample_token<R: Rng + ?Sized>(
    logits: &[f64],
    min_token: usize,
    temperature: f64,
    top_k: usize,
    greedy: bool,
    rng: &mut R,
) -> usize {
    let allowed = &logits[min_token..];
    if greedy {
        let mut best = 0;
        for (i, &v) in allowed.iter().enumerate() {
            if v > allowed[best] {
                best = i;
            }
        }
        return best + min_token;
    }
    let mut idx: Vec<usize> = (0..allowed.len()).collect();
    if top_k > 0 && top_k < idx.len() {
        // Stable sort keeps ties in token order.
        idx.sort_by(|&a, &b| allowed[b].total_cmp(&allowed[a]));
        idx.truncate(top_k);
        idx.sort_unstable();
    }
    let top = idx.iter().map(|&i| allowed[i]).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = idx.iter().map(|&i| ((allowed[i] - top) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (k, w) in weights.iter().enumerate() {
        u -= w;
        if u < 0.0 {
            return idx[k] + min_token;
        }
    }
    idx[idx.len() - 1] + min_token
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GenerationStats {
    pub notes: usize,
    /// Largest number of cached scalars seen across all streams and layers.
    pub peak_memory_elements: usize,
    pub final_memory_elements: usize,
    pub seconds: f64,
}

impl GenerationStats {
    pub fn notes_per_second(&self) -> f64 {
        self.notes as f64 / self.seconds.max(1e-9)
    }
}

/// One generation run over a read-only model.
pub struct Session<'m, T: Scalar> {
    model: &'m Model<T>,
    cfg: SamplerConfig,
    memory: StreamMemory<T>,
    rng: ChaCha8Rng,
    next_logits: Option<[Vec<f64>; 4]>,
    peak: usize,
    fed: usize,
}

impl<'m, T: Scalar> Session<'m, T> {
    pub fn new(model: &'m Model<T>, cfg: SamplerConfig) -> Result<Self, SampleError> {
        cfg.validate()?;
        Ok(Self {
            model,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            memory: model.empty_memory(),
            next_logits: None,
            peak: 0,
            fed: 0,
        })
    }

    pub fn memory(&self) -> &StreamMemory<T> {
        &self.memory
    }

    pub fn peak_memory_elements(&self) -> usize {
        self.peak
    }

    /// Logits predicting the next tuple, once anything has been fed.
    pub fn next_logits(&self) -> Option<&[Vec<f64>; 4]> {
        self.next_logits.as_ref()
    }

    /// Runs tuples through the model, chunked by the segment length.
    pub fn feed(&mut self, tuples: &TokenStreams) -> Result<(), SampleError> {
        let l = self.model.config().segment_len;
        let mut start = 0;
        while start < tuples.len() {
            let end = (start + l).min(tuples.len());
            let chunk = tuples.slice(start, end);
            let mut g = Graph::new();
            let bound = self.model.bind_frozen(&mut g);
            let refs = Stream::ALL.map(|s| chunk.stream(s));
            let out = self.model.forward(&mut g, &bound, refs, &self.memory, &mut Dropout::Off)?;
            let last = end - start - 1;
            self.next_logits = Some(out.logits.map(|v| g.value(v).row(last).iter().map(|x| x.to_f64_lossy()).collect()));
            self.memory = out.memory;
            self.peak = self.peak.max(self.memory.live_elements());
            self.fed += end - start;
            start = end;
        }
        Ok(())
    }

    /// Samples the next tuple from the pending logits without feeding it.
    pub fn sample(&mut self) -> Result<NoteTuple, SampleError> {
        let logits = self.next_logits.as_ref().ok_or(SampleError::EmptyPrime)?;
        let mut out = [0u32; 4];
        for s in Stream::ALL {
            let row = &logits[s.index()];
            if row.iter().any(|v| !v.is_finite()) {
                return Err(SampleError::NonFinite {
                    stream: s.name(),
                    step: self.fed,
                });
            }
            out[s.index()] = sample_token(
                row,
                s.min_token() as usize,
                self.cfg.temperature[s.index()],
                self.cfg.top_k[s.index()],
                self.cfg.greedy,
                &mut self.rng,
            ) as u32;
        }
        Ok(NoteTuple::from_array(out))
    }

    pub fn step(&mut self) -> Result<NoteTuple, SampleError> {
        let t = self.sample()?;
        let one = TokenStreams::from_tuples(&[t], self.model.config().vocab_sizes)
            .map_err(|e| SampleError::Config(e.to_string()))?;
        self.feed(&one)?;
        Ok(t)
    }
}

/// Streams `cfg.notes` generated tuples into `sink`, after priming with
/// `prime`. The prime itself is not sent to the sink.
pub fn generate_into<T: Scalar, E: std::fmt::Display>(
    model: &Model<T>,
    prime: &TokenStreams,
    cfg: &SamplerConfig,
    mut sink: impl FnMut(NoteTuple) -> Result<(), E>,
) -> Result<GenerationStats, SampleError> {
    if prime.is_empty() {
        return Err(SampleError::EmptyPrime);
    }
    let started = Instant::now();
    let mut session = Session::new(model, cfg.clone())?;
    session.feed(prime)?;
    for i in 0..cfg.notes {
        let t = if i + 1 < cfg.notes { session.step()? } else { session.sample()? };
        sink(t).map_err(|e| SampleError::Sink(e.to_string()))?;
    }
    Ok(GenerationStats {
        notes: cfg.notes,
        peak_memory_elements: session.peak_memory_elements(),
        final_memory_elements: session.memory().live_elements(),
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Prime followed by `cfg.notes` generated tuples.
pub fn generate<T: Scalar>(model: &Model<T>, prime: &TokenStreams, cfg: &SamplerConfig) -> Result<TokenStreams, SampleError> {
    let mut out = prime.clone();
    generate_into(model, prime, cfg, |t| out.push(t))?;
    Ok(out)
}
