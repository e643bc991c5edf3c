//! Tempo-free note tuples.
//!
//! A note becomes `⟨on2on, on2off, pitch, velocity⟩` where the two time
//! fields are note values (fractions of a whole note) quantized to
//! `ticks_per_whole` ticks. Note value of a span of seconds is
//! `seconds × bpm / 240`, integrated piecewise when the tempo changes.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::midi::{MidiScore, TempoMap, TimedNote, DEFAULT_TICKS_PER_QUARTER};

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid codec config: {0}")]
    Config(String),
    #[error("invalid token streams: {0}")]
    Invalid(String),
    #[error("token file line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The four parallel token streams, in model order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    On2On,
    On2Off,
    Pitch,
    Velocity,
}

impl Stream {
    pub const ALL: [Stream; 4] = [Stream::On2On, Stream::On2Off, Stream::Pitch, Stream::Velocity];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Stream::On2On => "on2on",
            Stream::On2Off => "on2off",
            Stream::Pitch => "pitch",
            Stream::Velocity => "velocity",
        }
    }

    /// Smallest legal token (a note must sound; velocity 0 means release).
    pub fn min_token(self) -> u32 {
        match self {
            Stream::On2On | Stream::Pitch => 0,
            Stream::On2Off | Stream::Velocity => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub ticks_per_whole: u32,
    pub max_ticks: u32,
    /// Tempo used when turning tokens back into seconds.
    pub default_tempo: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            ticks_per_whole: 384,
            max_ticks: 3840,
            default_tempo: 120.0,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<(), CodecError> {
        if self.ticks_per_whole == 0 || self.ticks_per_whole % 3 != 0 {
            return Err(CodecError::Config(format!(
                "ticks_per_whole {} must be a positive multiple of 3",
                self.ticks_per_whole
            )));
        }
        if self.max_ticks == 0 {
            return Err(CodecError::Config("max_ticks must be positive".into()));
        }
        if !(self.default_tempo.is_finite() && self.default_tempo > 0.0) {
            return Err(CodecError::Config(format!("default_tempo {}", self.default_tempo)));
        }
        Ok(())
    }

    /// Vocabulary size per stream: time streams cover `0..=max_ticks`.
    pub fn vocab_sizes(&self) -> [usize; 4] {
        let t = self.max_ticks as usize + 1;
        [t, t, 128, 128]
    }

    /// Seconds per tick at the decoding tempo.
    pub fn seconds_per_tick(&self) -> f64 {
        240.0 / (f64::from(self.ticks_per_whole) * self.default_tempo)
    }
}

/// Note value, in whole notes, of `duration` seconds at `tempo` bpm.
pub fn note_value(duration: f64, tempo: f64) -> Result<f64, CodecError> {
    if !(tempo > 0.0) {
        return Err(CodecError::Domain(format!("tempo {tempo} must be positive")));
    }
    if !(duration >= 0.0) {
        return Err(CodecError::Domain(format!("duration {duration} must be non-negative")));
    }
    Ok(duration * tempo / 240.0)
}

/// Note value between two instants, integrating over tempo changes.
pub fn beats_between(t0: f64, t1: f64, tempo_map: &TempoMap) -> Result<f64, CodecError> {
    if !(t0 <= t1) {
        return Err(CodecError::Domain(format!("interval [{t0}, {t1}] is reversed")));
    }
    let changes = tempo_map.changes();
    let mut total = 0.0;
    for (i, c) in changes.iter().enumerate() {
        let end = changes.get(i + 1).map_or(f64::INFINITY, |n| n.time);
        let lo = c.time.max(t0);
        let hi = end.min(t1);
        if hi > lo {
            total += note_value(hi - lo, c.bpm)?;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteTuple {
    pub on2on: u32,
    pub on2off: u32,
    pub pitch: u32,
    pub velocity: u32,
}

impl NoteTuple {
    pub fn new(on2on: u32, on2off: u32, pitch: u32, velocity: u32) -> Self {
        Self {
            on2on,
            on2off,
            pitch,
            velocity,
        }
    }

    pub fn get(&self, s: Stream) -> u32 {
        match s {
            Stream::On2On => self.on2on,
            Stream::On2Off => self.on2off,
            Stream::Pitch => self.pitch,
            Stream::Velocity => self.velocity,
        }
    }

    pub fn from_array(a: [u32; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [u32; 4] {
        [self.on2on, self.on2off, self.pitch, self.velocity]
    }
}

/// Four equal-length token sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStreams {
    streams: [Vec<u32>; 4],
    vocab_sizes: [usize; 4],
}

impl TokenStreams {
    pub fn empty(vocab_sizes: [usize; 4]) -> Self {
        Self {
            streams: Default::default(),
            vocab_sizes,
        }
    }

    pub fn from_tuples(tuples: &[NoteTuple], vocab_sizes: [usize; 4]) -> Result<Self, CodecError> {
        let mut s = Self::empty(vocab_sizes);
        for t in tuples {
            s.push(*t)?;
        }
        Ok(s)
    }

    pub fn from_streams(streams: [Vec<u32>; 4], vocab_sizes: [usize; 4]) -> Result<Self, CodecError> {
        let n = streams[0].len();
        if streams.iter().any(|s| s.len() != n) {
            return Err(CodecError::Invalid(format!(
                "stream lengths differ: {:?}",
                streams.iter().map(Vec::len).collect::<Vec<_>>()
            )));
        }
        let mut out = Self::empty(vocab_sizes);
        for i in 0..n {
            out.push(NoteTuple::new(streams[0][i], streams[1][i], streams[2][i], streams[3][i]))?;
        }
        Ok(out)
    }

    pub fn check(tuple: &NoteTuple, vocab_sizes: &[usize; 4]) -> Result<(), CodecError> {
        for s in Stream::ALL {
            let v = tuple.get(s);
            if v < s.min_token() || v as usize >= vocab_sizes[s.index()] {
                return Err(CodecError::Invalid(format!(
                    "{} token {v} outside [{}, {})",
                    s.name(),
                    s.min_token(),
                    vocab_sizes[s.index()]
                )));
            }
        }
        Ok(())
    }

    pub fn push(&mut self, t: NoteTuple) -> Result<(), CodecError> {
        Self::check(&t, &self.vocab_sizes)?;
        for s in Stream::ALL {
            self.streams[s.index()].push(t.get(s));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.streams[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn vocab_sizes(&self) -> [usize; 4] {
        self.vocab_sizes
    }

    pub fn stream(&self, s: Stream) -> &[u32] {
        &self.streams[s.index()]
    }

    pub fn tuple(&self, i: usize) -> NoteTuple {
        NoteTuple::new(
            self.streams[0][i],
            self.streams[1][i],
            self.streams[2][i],
            self.streams[3][i],
        )
    }

    pub fn tuples(&self) -> impl Iterator<Item = NoteTuple> + '_ {
        (0..self.len()).map(|i| self.tuple(i))
    }

    /// Tuples `[start, end)` as new streams.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            streams: std::array::from_fn(|s| self.streams[s][start..end].to_vec()),
            vocab_sizes: self.vocab_sizes,
        }
    }
}

/// Quantization side effects observed while encoding.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EncodeStats {
    pub notes: usize,
    /// Largest pre-clamp values, in ticks.
    pub max_on2on_ticks: u64,
    pub max_on2off_ticks: u64,
    pub clamped_on2on: usize,
    pub clamped_on2off: usize,
    /// Durations that rounded to zero ticks and were raised to one.
    pub raised_on2off: usize,
}

impl EncodeStats {
    pub fn merge(&mut self, other: &EncodeStats) {
        self.notes += other.notes;
        self.max_on2on_ticks = self.max_on2on_ticks.max(other.max_on2on_ticks);
        self.max_on2off_ticks = self.max_on2off_ticks.max(other.max_on2off_ticks);
        self.clamped_on2on += other.clamped_on2on;
        self.clamped_on2off += other.clamped_on2off;
        self.raised_on2off += other.raised_on2off;
    }
}

pub fn encode(score: &MidiScore, cfg: &CodecConfig) -> Result<TokenStreams, CodecError> {
    encode_with_stats(score, cfg).map(|(s, _)| s)
}

pub fn encode_with_stats(
    score: &MidiScore,
    cfg: &CodecConfig,
) -> Result<(TokenStreams, EncodeStats), CodecError> {
    cfg.validate()?;
    let tpw = f64::from(cfg.ticks_per_whole);
    let max = u64::from(cfg.max_ticks);
    let mut stats = EncodeStats {
        notes: score.notes.len(),
        ..Default::default()
    };
    let mut out = TokenStreams::empty(cfg.vocab_sizes());
    let mut prev_onset: Option<f64> = None;
    for n in &score.notes {
        let on2on_raw = match prev_onset {
            None => 0,
            Some(p) => (tpw * beats_between(p, n.onset, &score.tempo_map)?).round() as u64,
        };
        let on2off_raw = (tpw * beats_between(n.onset, n.offset, &score.tempo_map)?).round() as u64;
        stats.max_on2on_ticks = stats.max_on2on_ticks.max(on2on_raw);
        stats.max_on2off_ticks = stats.max_on2off_ticks.max(on2off_raw);
        if on2on_raw > max {
            stats.clamped_on2on += 1;
        }
        if on2off_raw > max {
            stats.clamped_on2off += 1;
        }
        if on2off_raw == 0 {
            stats.raised_on2off += 1;
        }
        out.push(NoteTuple::new(
            on2on_raw.min(max) as u32,
            on2off_raw.clamp(1, max) as u32,
            u32::from(n.pitch),
            u32::from(n.velocity),
        ))?;
        prev_onset = Some(n.onset);
    }
    Ok((out, stats))
}

/// Inverse of [`encode`] at the config's decoding tempo.
///
/// The result is re-sorted by (onset, pitch); streams whose chords already
/// list pitches in ascending order decode in stream order.
pub fn decode(streams: &TokenStreams, cfg: &CodecConfig) -> MidiScore {
    let spt = cfg.seconds_per_tick();
    let mut onset_ticks: u64 = 0;
    let notes = streams
        .tuples()
        .map(|t| {
            onset_ticks += u64::from(t.on2on);
            TimedNote {
                onset: onset_ticks as f64 * spt,
                offset: (onset_ticks + u64::from(t.on2off)) as f64 * spt,
                pitch: t.pitch as u8,
                velocity: t.velocity as u8,
            }
        })
        .collect();
    MidiScore::new(notes, TempoMap::constant(cfg.default_tempo), DEFAULT_TICKS_PER_QUARTER)
}

pub const TOKEN_FORMAT: &str = "mtxl-tokens";
pub const TOKEN_FORMAT_VERSION: u32 = 1;

/// First line of a token file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenFileHeader {
    pub format: String,
    pub version: u32,
    pub ticks_per_whole: u32,
    pub max_ticks: u32,
    pub vocab_sizes: VocabSizes,
    /// Field order of every following line.
    pub fields: [Stream; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabSizes {
    pub on2on: usize,
    pub on2off: usize,
    pub pitch: usize,
    pub velocity: usize,
}

impl VocabSizes {
    pub fn to_array(self) -> [usize; 4] {
        [self.on2on, self.on2off, self.pitch, self.velocity]
    }
}

impl TokenFileHeader {
    pub fn new(cfg: &CodecConfig) -> Self {
        let v = cfg.vocab_sizes();
        Self {
            format: TOKEN_FORMAT.to_string(),
            version: TOKEN_FORMAT_VERSION,
            ticks_per_whole: cfg.ticks_per_whole,
            max_ticks: cfg.max_ticks,
            vocab_sizes: VocabSizes {
                on2on: v[0],
                on2off: v[1],
                pitch: v[2],
                velocity: v[3],
            },
            fields: Stream::ALL,
        }
    }
}

/// Incremental token-file writer: one JSON header line, then one
/// `[on2on, on2off, pitch, velocity]` array per line.
pub struct TokenWriter<W: Write> {
    out: W,
    vocab_sizes: [usize; 4],
    written: usize,
}

impl<W: Write> TokenWriter<W> {
    pub fn new(mut out: W, cfg: &CodecConfig) -> Result<Self, CodecError> {
        let header = TokenFileHeader::new(cfg);
        serde_json::to_writer(&mut out, &header).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
        Ok(Self {
            out,
            vocab_sizes: cfg.vocab_sizes(),
            written: 0,
        })
    }

    pub fn push(&mut self, t: NoteTuple) -> Result<(), CodecError> {
        TokenStreams::check(&t, &self.vocab_sizes)?;
        writeln!(self.out, "[{},{},{},{}]", t.on2on, t.on2off, t.pitch, t.velocity)?;
        self.written += 1;
        Ok(())
    }

    pub fn written(&self) -> usize {
        self.written
    }

    pub fn finish(mut self) -> Result<W, CodecError> {
        self.out.flush()?;
        Ok(self.out)
    }
}

pub fn write_tokens<W: Write>(out: W, streams: &TokenStreams, cfg: &CodecConfig) -> Result<W, CodecError> {
    let mut w = TokenWriter::new(out, cfg)?;
    for t in streams.tuples() {
        w.push(t)?;
    }
    w.finish()
}

pub fn read_tokens<R: BufRead>(input: R) -> Result<(TokenFileHeader, TokenStreams), CodecError> {
    let mut lines = input.lines();
    let first = lines.next().ok_or(CodecError::Format {
        line: 1,
        message: "empty file".into(),
    })??;
    let header: TokenFileHeader = serde_json::from_str(&first).map_err(|e| CodecError::Format {
        line: 1,
        message: e.to_string(),
    })?;
    if header.format != TOKEN_FORMAT || header.version != TOKEN_FORMAT_VERSION {
        return Err(CodecError::Format {
            line: 1,
            message: format!("unsupported format {} v{}", header.format, header.version),
        });
    }
    if header.fields != Stream::ALL {
        return Err(CodecError::Format {
            line: 1,
            message: "field order must be on2on, on2off, pitch, velocity".into(),
        });
    }
    let mut streams = TokenStreams::empty(header.vocab_sizes.to_array());
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let arr: [u32; 4] = serde_json::from_str(&line).map_err(|e| CodecError::Format {
            line: i + 2,
            message: e.to_string(),
        })?;
        streams.push(NoteTuple::from_array(arr)).map_err(|e| CodecError::Format {
            line: i + 2,
            message: e.to_string(),
        })?;
    }
    Ok((header, streams))
}
