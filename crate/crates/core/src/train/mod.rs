//! Joint training of the four stream networks.

mod segment;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use segment::{make_segment, segment_corpus, segment_count, segment_file, LaneItem, Segment, SegmentScheduler, PAD_TOKEN};

use crate::codec::{Stream, TokenStreams};
use crate::fsutil::write_atomic;
use crate::model::{joint_loss, Dropout, Model, ModelConfig, ModelError, StreamMemory};
use crate::tensor::{clip_global_norm, Adam, AdamConfig, AdamState, Checkpoint, CheckpointError, Graph, Scalar, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub lr: f64,
    /// Fraction of `steps` spent on the linear warm-up.
    pub warmup_frac: f64,
    pub clip_norm: f64,
    pub eval_interval: u64,
    pub checkpoint_interval: u64,
    pub log_interval: u64,
    pub seed: u64,
    /// Share of files held out for validation when the corpus has no
    /// `valid/` directory.
    pub valid_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            steps: 2000,
            lr: 2.5e-4,
            warmup_frac: 0.01,
            clip_norm: 0.25,
            eval_interval: 200,
            checkpoint_interval: 200,
            log_interval: 50,
            seed: 0,
            valid_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size == 0 || self.steps == 0 {
            return err("batch_size and steps must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return err("lr must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) || !(0.0..1.0).contains(&self.valid_fraction) {
            return err("warmup_frac must lie in [0, 1] and valid_fraction in [0, 1)");
        }
        if !(self.clip_norm > 0.0) {
            return err("clip_norm must be positive");
        }
        if self.eval_interval == 0 || self.checkpoint_interval == 0 || self.log_interval == 0 {
            return err("intervals must be positive");
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.steps as f64 * self.warmup_frac).ceil() as u64
    }
}

/// Learning rate of update `step` (0-based): linear warm-up, then cosine
/// decay to zero at `cfg.steps`.
pub fn learning_rate(cfg: &TrainConfig, step: u64) -> f64 {
    let warm = cfg.warmup_steps();
    if step < warm {
        return cfg.lr * (step + 1) as f64 / warm as f64;
    }
    let span = cfg.steps.saturating_sub(warm).max(1) as f64;
    let progress = ((step - warm) as f64 / span).min(1.0);
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Per-stream and total cross-entropy at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: u64,
    pub ce: [f64; 4],
    pub total: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,ce_on2on,ce_on2off,ce_pitch,ce_velocity,total";

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.step, r.ce[0], r.ce[1], r.ce[2], r.ce[3], r.total);
    }
    s
}

pub fn parse_loss_csv(text: &str) -> Result<Vec<LossRow>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(LOSS_CSV_HEADER) {
        return Err("unexpected loss CSV header".into());
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || format!("loss CSV row {}: {line:?}", i + 2);
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad());
            Ok(LossRow {
                step: f[0].parse().map_err(|_| bad())?,
                ce: [num(1)?, num(2)?, num(3)?, num(4)?],
                total: num(5)?,
            })
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainMeta {
    kind: String,
    model: ModelConfig,
    train: TrainConfig,
    step: u64,
    adam_step: u64,
    scheduler: SegmentScheduler,
    best: Option<f64>,
}

pub const TRAIN_CHECKPOINT_KIND: &str = "mtxl-train";

/// Scored positions and summed per-stream cross-entropy.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Tally {
    scored: usize,
    ce_sum: [f64; 4],
}

impl Tally {
    fn row(&self, step: u64) -> LossRow {
        let n = self.scored.max(1) as f64;
        let ce = self.ce_sum.map(|c| c / n);
        LossRow {
            step,
            ce,
            total: ce.iter().sum(),
        }
    }
}

/// Owns the model, optimizer, lane memories and segment schedule.
pub struct Trainer<T: Scalar> {
    model: Model<T>,
    cfg: TrainConfig,
    adam: Adam<T>,
    files: Vec<TokenStreams>,
    scheduler: SegmentScheduler,
    memories: Vec<StreamMemory<T>>,
    step: u64,
    best: Option<f64>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, cfg: TrainConfig, files: Vec<TokenStreams>) -> Result<Self, TrainError> {
        cfg.validate()?;
        let scheduler = Self::schedule_for(&model, &cfg, &files)?;
        let adam = Adam::new(AdamConfig::default(), model.params().values());
        let memories = vec![model.empty_memory(); cfg.batch_size];
        Ok(Self {
            model,
            cfg,
            adam,
            files,
            scheduler,
            memories,
            step: 0,
            best: None,
        })
    }

    fn schedule_for(model: &Model<T>, cfg: &TrainConfig, files: &[TokenStreams]) -> Result<SegmentScheduler, TrainError> {
        let vocab = model.config().vocab_sizes;
        for (i, f) in files.iter().enumerate() {
            if f.vocab_sizes() != vocab {
                return Err(TrainError::Config(format!(
                    "file {i} has vocabulary sizes {:?}, model expects {vocab:?}",
                    f.vocab_sizes()
                )));
            }
        }
        let l = model.config().segment_len;
        let counts = files
            .iter()
            .map(|f| if f.len() < 2 { 0 } else { segment_count(f.len(), l) })
            .collect();
        SegmentScheduler::new(counts, cfg.batch_size, cfg.seed)
            .ok_or_else(|| TrainError::Config("no training file has at least two notes".into()))
    }

    /// Restores the state written by [`Trainer::checkpoint`]. The corpus
    /// must be the one the checkpoint was trained on.
    pub fn resume(ck: &Checkpoint<T>, files: Vec<TokenStreams>, steps: Option<u64>) -> Result<Self, TrainError> {
        let meta: TrainMeta = serde_json::from_str(&ck.meta)
            .map_err(|e| TrainError::Config(format!("not a training checkpoint: {e}")))?;
        if meta.kind != TRAIN_CHECKPOINT_KIND {
            return Err(TrainError::Config(format!("checkpoint kind {:?} cannot be resumed", meta.kind)));
        }
        let model = Model::from_checkpoint(ck)?;
        let mut cfg = meta.train;
        if let Some(s) = steps {
            cfg.steps = s;
        }
        let mut t = Self::new(model, cfg, files)?;
        if t.scheduler.segments_per_file() != meta.scheduler.segments_per_file() {
            return Err(TrainError::Config("corpus differs from the one in the checkpoint".into()));
        }
        t.scheduler = meta.scheduler;
        t.step = meta.step;
        t.best = meta.best;
        let names = t.model.params().names().to_vec();
        let mut state = AdamState {
            step: meta.adam_step,
            m: Vec::new(),
            v: Vec::new(),
        };
        for n in &names {
            state.m.push(ck.get(&format!("adam.m.{n}"))?.clone());
            state.v.push(ck.get(&format!("adam.v.{n}"))?.clone());
        }
        t.adam.state = state;
        let mc = t.model.config();
        for b in 0..t.cfg.batch_size {
            t.memories[b] = StreamMemory::load_from(ck, &format!("memory.lane{b}."), mc.n_layers, mc.d_model)?;
        }
        Ok(t)
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn lane_memories(&self) -> &[StreamMemory<T>] {
        &self.memories
    }

    /// Full training state: parameters, optimizer moments, lane memories
    /// and schedule position.
    pub fn checkpoint(&self) -> Checkpoint<T> {
        let meta = TrainMeta {
            kind: TRAIN_CHECKPOINT_KIND.into(),
            model: self.model.config().clone(),
            train: self.cfg.clone(),
            step: self.step,
            adam_step: self.adam.state.step,
            scheduler: self.scheduler.clone(),
            best: self.best,
        };
        let mut ck = self.model.to_checkpoint();
        ck.meta = serde_json::to_string(&meta).expect("metadata serializes");
        let names = self.model.params().names();
        for (i, n) in names.iter().enumerate() {
            ck.push(format!("adam.m.{n}"), self.adam.state.m[i].clone());
        }
        for (i, n) in names.iter().enumerate() {
            ck.push(format!("adam.v.{n}"), self.adam.state.v[i].clone());
        }
        for (b, m) in self.memories.iter().enumerate() {
            m.save_into(&mut ck, &format!("memory.lane{b}."));
        }
        ck
    }

    /// One optimizer update on the next batch of lane segments.
    pub fn train_step(&mut self) -> Result<LossRow, TrainError> {
        let batch = self.scheduler.next_batch();
        let l = self.model.config().segment_len;
        let mut g = Graph::new();
        let bound = self.model.bind(&mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.step);
        let p = self.model.config().dropout;
        let mut dropout = if p > 0.0 { Dropout::On { p, rng: &mut rng } } else { Dropout::Off };

        let mut lanes = Vec::with_capacity(batch.len());
        let mut new_memories = Vec::with_capacity(batch.len());
        let mut scored = 0;
        for (b, item) in batch.iter().enumerate() {
            if item.reset {
                self.memories[b] = self.model.empty_memory();
            }
            let seg = make_segment(&self.files[item.file], item.segment, l);
            let out = self.model.forward(&mut g, &bound, seg.input_refs(), &self.memories[b], &mut dropout)?;
            let loss = joint_loss(&mut g, &out.logits, seg.target_refs(), &seg.loss_mask)?;
            new_memories.push(out.memory);
            scored += seg.scored();
            lanes.push((seg.scored(), loss.per_stream));
        }

        let mut per_stream = Vec::with_capacity(4);
        let mut tally = Tally {
            scored,
            ..Tally::default()
        };
        for s in Stream::ALL {
            let mut acc = None;
            for (n, ce) in &lanes {
                if *n == 0 {
                    continue;
                }
                let v = g.value(ce[s.index()]).data()[0].to_f64_lossy();
                if !v.is_finite() {
                    return Err(TrainError::NonFinite {
                        what: format!("{} loss", s.name()),
                        step: self.step + 1,
                    });
                }
                tally.ce_sum[s.index()] += v * *n as f64;
                let w = g.scale(ce[s.index()], T::from_f64_lossy(*n as f64 / scored as f64));
                acc = Some(match acc {
                    None => w,
                    Some(a) => g.add(a, w).map_err(ModelError::from)?,
                });
            }
            per_stream.push(acc);
        }

        let lr = learning_rate(&self.cfg, self.step);
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; bound.len()];
        if let [Some(a), Some(b), Some(c), Some(d)] = per_stream[..] {
            let ab = g.add(a, b).map_err(ModelError::from)?;
            let cd = g.add(c, d).map_err(ModelError::from)?;
            let total = g.add(ab, cd).map_err(ModelError::from)?;
            g.backward(total).map_err(ModelError::from)?;
            grads = bound.iter().map(|&v| g.grad(v).cloned()).collect();
            let norm = clip_global_norm(&mut grads, self.cfg.clip_norm);
            if !norm.is_finite() {
                return Err(TrainError::NonFinite {
                    what: "gradient norm".into(),
                    step: self.step + 1,
                });
            }
        }
        self.adam.step(self.model.params_mut().values_mut(), &grads, lr);
        self.memories = new_memories;
        self.step += 1;
        Ok(tally.row(self.step))
    }

    /// Mean per-stream cross-entropy over whole files, memory carried
    /// within each file. Leaves training state untouched.
    pub fn evaluate(&self, files: &[TokenStreams]) -> Result<LossRow, TrainError> {
        evaluate_model(&self.model, files, self.step)
    }

    /// Trains to `cfg.steps`, writing `loss.csv`, `valid.csv`, `last.ckpt`
    /// and `best.ckpt` under `out_dir`.
    pub fn run(&mut self, out_dir: &Path, valid: &[TokenStreams]) -> Result<TrainSummary, TrainError> {
        let read_rows = |name: &str| -> Vec<LossRow> {
            std::fs::read_to_string(out_dir.join(name))
                .ok()
                .and_then(|t| parse_loss_csv(&t).ok())
                .unwrap_or_default()
        };
        let mut history: Vec<LossRow> = read_rows("loss.csv").into_iter().filter(|r| r.step <= self.step).collect();
        let mut valid_history: Vec<LossRow> =
            read_rows("valid.csv").into_iter().filter(|r| r.step <= self.step).collect();
        let started = Instant::now();
        let first_step = self.step;
        while self.step < self.cfg.steps {
            let row = self.train_step()?;
            history.push(row);
            let s = self.step;
            if s % self.cfg.log_interval == 0 || s == self.cfg.steps {
                info!(
                    "step {s}: total {:.4} (on2on {:.4}, on2off {:.4}, pitch {:.4}, velocity {:.4}) lr {:.3e}",
                    row.total,
                    row.ce[0],
                    row.ce[1],
                    row.ce[2],
                    row.ce[3],
                    learning_rate(&self.cfg, s - 1)
                );
            }
            if s % self.cfg.eval_interval == 0 || s == self.cfg.steps {
                let score = if valid.is_empty() {
                    let recent = &history[history.len().saturating_sub(self.cfg.eval_interval as usize)..];
                    recent.iter().map(|r| r.total).sum::<f64>() / recent.len() as f64
                } else {
                    let v = self.evaluate(valid)?;
                    info!("step {s}: validation total {:.4}", v.total);
                    valid_history.push(v);
                    v.total
                };
                if self.best.is_none_or(|b| score < b) {
                    self.best = Some(score);
                    let path = out_dir.join("best.ckpt");
                    self.model.to_checkpoint().save(&path)?;
                }
            }
            if s % self.cfg.checkpoint_interval == 0 || s == self.cfg.steps {
                self.checkpoint().save(&out_dir.join("last.ckpt"))?;
                write_csv(&out_dir.join("loss.csv"), &history)?;
                if !valid.is_empty() {
                    write_csv(&out_dir.join("valid.csv"), &valid_history)?;
                }
            }
        }
        if history.is_empty() {
            warn!("nothing to do: checkpoint already at step {}", self.step);
        }
        Ok(TrainSummary {
            steps_run: self.step - first_step,
            seconds: started.elapsed().as_secs_f64(),
            last: history.last().copied(),
            best: self.best,
            history,
            valid_history,
        })
    }
}

pub struct TrainSummary {
    pub steps_run: u64,
    pub seconds: f64,
    pub last: Option<LossRow>,
    pub best: Option<f64>,
    pub history: Vec<LossRow>,
    pub valid_history: Vec<LossRow>,
}

fn write_csv(path: &Path, rows: &[LossRow]) -> Result<(), TrainError> {
    write_atomic(path, loss_csv(rows).as_bytes()).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Teacher-forced per-stream cross-entropy of `model` on whole files.
pub fn evaluate_model<T: Scalar>(model: &Model<T>, files: &[TokenStreams], step: u64) -> Result<LossRow, TrainError> {
    let l = model.config().segment_len;
    let mut tally = Tally::default();
    for f in files {
        let mut memory = model.empty_memory();
        for seg in segment_file(f, l) {
            let mut g = Graph::new();
            let bound = model.bind_frozen(&mut g);
            let out = model.forward(&mut g, &bound, seg.input_refs(), &memory, &mut Dropout::Off)?;
            let loss = joint_loss(&mut g, &out.logits, seg.target_refs(), &seg.loss_mask)?;
            let n = seg.scored();
            tally.scored += n;
            for s in 0..4 {
                tally.ce_sum[s] += g.value(loss.per_stream[s]).data()[0].to_f64_lossy() * n as f64;
            }
            memory = out.memory;
        }
    }
    Ok(tally.row(step))
}
