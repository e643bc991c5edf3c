//! Python bindings: codec, model, training, sampling and metrics over
//! note tuples given as `(on2on, on2off, pitch, velocity)`.

use std::fmt::Display;
use std::fs;
use std::io::BufReader;
use std::path::PathBuf;

use mtxl::codec::{self, CodecConfig, NoteTuple, TokenStreams};
use mtxl::config::Config;
use mtxl::eval;
use mtxl::midi::{self, MidiScore};
use mtxl::model::Model;
use mtxl::sampler::{self, SamplerConfig};
use mtxl::tensor::Checkpoint;
use mtxl::train::{evaluate_model, Trainer};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

type Tuple4 = (u32, u32, u32, u32);

fn value_err<E: Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err<E: Display>(e: E) -> PyErr {
    PyIOError::new_err(e.to_string())
}

fn codec_at(tempo: f64) -> PyResult<CodecConfig> {
    let c = CodecConfig {
        default_tempo: tempo,
        ..CodecConfig::default()
    };
    c.validate().map_err(value_err)?;
    Ok(c)
}

fn to_streams(tuples: &[Tuple4]) -> PyResult<TokenStreams> {
    let t: Vec<NoteTuple> = tuples.iter().map(|&(a, b, c, d)| NoteTuple::new(a, b, c, d)).collect();
    TokenStreams::from_tuples(&t, CodecConfig::default().vocab_sizes()).map_err(value_err)
}

fn from_streams(s: &TokenStreams) -> Vec<Tuple4> {
    s.tuples().map(|t| (t.on2on, t.on2off, t.pitch, t.velocity)).collect()
}

fn parse_config(config: Option<&str>, overrides: Vec<String>) -> PyResult<Config> {
    let base = match config {
        Some(text) => Config::from_toml(text).map_err(value_err)?,
        None => Config::default(),
    };
    base.with_overrides(&overrides).map_err(value_err)
}

/// Note tuples of a MIDI file.
#[pyfunction]
fn encode_midi(path: PathBuf) -> PyResult<Vec<Tuple4>> {
    let bytes = fs::read(&path).map_err(io_err)?;
    encode_midi_bytes(&bytes)
}

#[pyfunction]
fn encode_midi_bytes(data: &[u8]) -> PyResult<Vec<Tuple4>> {
    let score = midi::parse_midi(data).map_err(value_err)?;
    Ok(from_streams(&codec::encode(&score, &CodecConfig::default()).map_err(value_err)?))
}

/// `(onset, offset, pitch, velocity)` in seconds after decoding at `tempo`.
#[pyfunction]
#[pyo3(signature = (tuples, tempo=120.0))]
fn decode(tuples: Vec<Tuple4>, tempo: f64) -> PyResult<Vec<(f64, f64, u8, u8)>> {
    let score = codec::decode(&to_streams(&tuples)?, &codec_at(tempo)?);
    Ok(score.notes.iter().map(|n| (n.onset, n.offset, n.pitch, n.velocity)).collect())
}

#[pyfunction]
#[pyo3(signature = (tuples, path, tempo=120.0))]
fn write_midi(tuples: Vec<Tuple4>, path: PathBuf, tempo: f64) -> PyResult<()> {
    let score = codec::decode(&to_streams(&tuples)?, &codec_at(tempo)?);
    let bytes = midi::write_midi(&score).map_err(value_err)?;
    mtxl::fsutil::write_atomic(&path, &bytes).map_err(io_err)
}

#[pyfunction]
fn read_tokens(path: PathBuf) -> PyResult<Vec<Tuple4>> {
    let f = fs::File::open(&path).map_err(io_err)?;
    let (_, streams) = codec::read_tokens(BufReader::new(f)).map_err(value_err)?;
    Ok(from_streams(&streams))
}

#[pyfunction]
fn write_tokens(tuples: Vec<Tuple4>, path: PathBuf) -> PyResult<()> {
    let mut buf = Vec::new();
    codec::write_tokens(&mut buf, &to_streams(&tuples)?, &CodecConfig::default()).map_err(value_err)?;
    mtxl::fsutil::write_atomic(&path, &buf).map_err(io_err)
}

fn score_of(tuples: &[Tuple4], tempo: f64) -> PyResult<MidiScore> {
    Ok(codec::decode(&to_streams(tuples)?, &codec_at(tempo)?))
}

/// Onset counts per `window`-second bin of the decoded tuples.
#[pyfunction]
#[pyo3(signature = (tuples, window=5.0, tempo=120.0))]
fn note_density(tuples: Vec<Tuple4>, window: f64, tempo: f64) -> PyResult<Vec<u64>> {
    Ok(eval::note_density(&score_of(&tuples, tempo)?, window).map_err(value_err)?.counts)
}

/// `(leading_mean, trailing_mean, ratio)` over the first and last quarter
/// of `horizon` seconds.
#[pyfunction]
fn density_stability(counts: Vec<u64>, window: f64, horizon: f64) -> PyResult<(f64, f64, f64)> {
    let s = eval::density_stability(&eval::DensityProfile { window, counts }, horizon).map_err(value_err)?;
    Ok((s.leading_mean, s.trailing_mean, s.ratio))
}

#[pyfunction]
#[pyo3(signature = (tuples, low=60, high=71))]
fn pitch_distribution(tuples: Vec<Tuple4>, low: u8, high: u8) -> PyResult<Vec<(u8, f64)>> {
    let score = score_of(&tuples, 120.0)?;
    Ok(eval::pitch_distribution([&score], low..=high).map_err(value_err)?.frequencies())
}

/// The default configuration as TOML.
#[pyfunction]
fn default_config() -> String {
    Config::default().to_toml()
}

#[pyfunction]
fn valid_config_keys() -> Vec<String> {
    mtxl::config::valid_keys()
}

/// Trains a new model on `files` and returns it with `(step, total)` rows.
/// Writes checkpoints and loss curves to `out_dir`.
#[pyfunction]
#[pyo3(signature = (files, out_dir, config=None, overrides=Vec::new()))]
fn train(
    py: Python<'_>,
    files: Vec<Vec<Tuple4>>,
    out_dir: PathBuf,
    config: Option<&str>,
    overrides: Vec<String>,
) -> PyResult<(PyModel, Vec<(u64, f64)>)> {
    let cfg = parse_config(config, overrides)?;
    let files = files.iter().map(|f| to_streams(f)).collect::<PyResult<Vec<_>>>()?;
    let (model, rows) = py
        .detach(|| -> Result<_, String> {
            let model = Model::<f32>::new(cfg.model.clone(), cfg.train.seed).map_err(|e| e.to_string())?;
            let mut trainer = Trainer::new(model, cfg.train.clone(), files).map_err(|e| e.to_string())?;
            let summary = trainer.run(&out_dir, &[]).map_err(|e| e.to_string())?;
            Ok((trainer.model().clone(), summary.history.iter().map(|r| (r.step, r.total)).collect()))
        })
        .map_err(PyValueError::new_err)?;
    Ok((PyModel { inner: model }, rows))
}

/// Four coupled stream networks, single precision.
#[pyclass(name = "Model", module = "mtxl_py", frozen)]
struct PyModel {
    inner: Model<f32>,
}

#[pymethods]
impl PyModel {
    /// `config` is TOML text; only its `[model]` section is used.
    #[new]
    #[pyo3(signature = (config=None, seed=0, overrides=Vec::new()))]
    fn new(config: Option<&str>, seed: u64, overrides: Vec<String>) -> PyResult<Self> {
        let cfg = parse_config(config, overrides)?;
        Ok(Self {
            inner: Model::new(cfg.model, seed).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::<f32>::load(&path).map_err(io_err)?;
        Ok(Self {
            inner: Model::from_checkpoint(&ck).map_err(value_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.to_checkpoint().save(&path).map_err(io_err)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params().element_count()
    }

    /// The model section as TOML.
    #[getter]
    fn config(&self) -> String {
        Config {
            model: self.inner.config().clone(),
            ..Config::default()
        }
        .to_toml()
    }

    /// Teacher-forced `(total, [on2on, on2off, pitch, velocity])` cross-entropy.
    fn loss(&self, py: Python<'_>, files: Vec<Vec<Tuple4>>) -> PyResult<(f64, [f64; 4])> {
        let files = files.iter().map(|f| to_streams(f)).collect::<PyResult<Vec<_>>>()?;
        let row = py.detach(|| evaluate_model(&self.inner, &files, 0)).map_err(value_err)?;
        Ok((row.total, row.ce))
    }

    /// Prime followed by `notes` sampled tuples.
    #[pyo3(signature = (prime, notes, seed=0, temperature=1.0, top_k=None, greedy=false))]
    fn generate(
        &self,
        py: Python<'_>,
        prime: Vec<Tuple4>,
        notes: usize,
        seed: u64,
        temperature: f64,
        top_k: Option<[usize; 4]>,
        greedy: bool,
    ) -> PyResult<Vec<Tuple4>> {
        let prime = to_streams(&prime)?;
        let cfg = SamplerConfig {
            temperature: [temperature; 4],
            top_k: top_k.unwrap_or(SamplerConfig::default().top_k),
            greedy,
            notes,
            seed,
        };
        let out = py.detach(|| sampler::generate(&self.inner, &prime, &cfg)).map_err(value_err)?;
        Ok(from_streams(&out))
    }

    /// Same weights with a different memory length.
    fn with_mem_len(&self, mem_len: usize) -> Self {
        Self {
            inner: self.inner.with_mem_len(mem_len),
        }
    }
}

#[pymodule]
fn mtxl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(encode_midi, m)?)?;
    m.add_function(wrap_pyfunction!(encode_midi_bytes, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(write_midi, m)?)?;
    m.add_function(wrap_pyfunction!(read_tokens, m)?)?;
    m.add_function(wrap_pyfunction!(write_tokens, m)?)?;
    m.add_function(wrap_pyfunction!(note_density, m)?)?;
    m.add_function(wrap_pyfunction!(density_stability, m)?)?;
    m.add_function(wrap_pyfunction!(pitch_distribution, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(valid_config_keys, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
