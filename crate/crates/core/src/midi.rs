//! Standard MIDI File reading and writing.
//!
//! Only the pieces a solo-piano note stream needs are interpreted: note
//! on/off, set-tempo and end-of-track. Everything else is skipped on input.
//! All non-percussion channels are merged into one note list.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_BPM: f64 = 120.0;
pub const DEFAULT_TICKS_PER_QUARTER: u16 = 480;
const PERCUSSION_CHANNEL: u8 = 9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MidiError {
    #[error("malformed MIDI at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("unsupported MIDI file: {0}")]
    Unsupported(String),
    #[error("invalid note: {0}")]
    InvalidNote(String),
    #[error("invalid tempo map: {0}")]
    InvalidTempo(String),
}

fn parse_err(offset: usize, message: impl Into<String>) -> MidiError {
    MidiError::Parse {
        offset,
        message: message.into(),
    }
}

/// A sounding note in wall-clock time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedNote {
    pub onset: f64,
    pub offset: f64,
    pub pitch: u8,
    pub velocity: u8,
}

impl TimedNote {
    pub fn new(onset: f64, offset: f64, pitch: u8, velocity: u8) -> Result<Self, MidiError> {
        let n = Self {
            onset,
            offset,
            pitch,
            velocity,
        };
        n.validate()?;
        Ok(n)
    }

    pub fn validate(&self) -> Result<(), MidiError> {
        if !(self.onset.is_finite() && self.onset >= 0.0) {
            return Err(MidiError::InvalidNote(format!("onset {}", self.onset)));
        }
        if !(self.offset.is_finite() && self.offset > self.onset) {
            return Err(MidiError::InvalidNote(format!(
                "offset {} not after onset {}",
                self.offset, self.onset
            )));
        }
        if self.pitch > 127 {
            return Err(MidiError::InvalidNote(format!("pitch {}", self.pitch)));
        }
        if !(1..=127).contains(&self.velocity) {
            return Err(MidiError::InvalidNote(format!("velocity {}", self.velocity)));
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.offset - self.onset
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TempoChange {
    /// Seconds from the start of the piece.
    pub time: f64,
    pub bpm: f64,
}

/// Piecewise-constant tempo. The first change sits at time zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TempoMap {
    changes: Vec<TempoChange>,
}

impl Default for TempoMap {
    fn default() -> Self {
        Self::constant(DEFAULT_BPM)
    }
}

impl TempoMap {
    pub fn constant(bpm: f64) -> Self {
        Self {
            changes: vec![TempoChange { time: 0.0, bpm }],
        }
    }

    pub fn new(changes: Vec<TempoChange>) -> Result<Self, MidiError> {
        match changes.first() {
            None => return Err(MidiError::InvalidTempo("empty tempo map".into())),
            Some(c) if c.time != 0.0 => {
                return Err(MidiError::InvalidTempo(format!(
                    "first change at {} s, expected 0",
                    c.time
                )))
            }
            _ => {}
        }
        for c in &changes {
            if !(c.bpm.is_finite() && c.bpm > 0.0) {
                return Err(MidiError::InvalidTempo(format!("tempo {} bpm", c.bpm)));
            }
        }
        for w in changes.windows(2) {
            if !(w[1].time > w[0].time) {
                return Err(MidiError::InvalidTempo(format!(
                    "change times not increasing: {} then {}",
                    w[0].time, w[1].time
                )));
            }
        }
        Ok(Self { changes })
    }

    pub fn changes(&self) -> &[TempoChange] {
        &self.changes
    }

    pub fn bpm_at(&self, t: f64) -> f64 {
        let idx = self.changes.partition_point(|c| c.time <= t);
        self.changes[idx.saturating_sub(1)].bpm
    }

    /// Quarter notes elapsed from time zero to `t`.
    pub fn quarters_at(&self, t: f64) -> f64 {
        let mut q = 0.0;
        for (i, c) in self.changes.iter().enumerate() {
            if c.time >= t {
                break;
            }
            let end = self.changes.get(i + 1).map_or(t, |n| n.time.min(t));
            q += (end - c.time) * c.bpm / 60.0;
        }
        q
    }

    /// Inverse of [`TempoMap::quarters_at`].
    pub fn time_at_quarters(&self, quarters: f64) -> f64 {
        let mut q = 0.0;
        for (i, c) in self.changes.iter().enumerate() {
            let span = self.changes.get(i + 1).map(|n| (n.time - c.time) * c.bpm / 60.0);
            match span {
                Some(s) if q + s < quarters => q += s,
                _ => return c.time + (quarters - q) * 60.0 / c.bpm,
            }
        }
        unreachable!("tempo map is never empty")
    }

    /// Every time scaled by `1 / factor` and every tempo by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            changes: self
                .changes
                .iter()
                .map(|c| TempoChange {
                    time: c.time / factor,
                    bpm: c.bpm * factor,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MidiWarning {
    /// A NOTE_ON never released; closed at the track's last event.
    UnmatchedNoteOn { channel: u8, pitch: u8, tick: u64 },
    /// A note whose on and off share a tick; dropped.
    ZeroLengthNote { channel: u8, pitch: u8, tick: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MidiScore {
    pub notes: Vec<TimedNote>,
    pub tempo_map: TempoMap,
    pub ticks_per_quarter: u16,
    #[serde(default)]
    pub warnings: Vec<MidiWarning>,
}

impl MidiScore {
    pub fn new(mut notes: Vec<TimedNote>, tempo_map: TempoMap, ticks_per_quarter: u16) -> Self {
        sort_notes(&mut notes);
        Self {
            notes,
            tempo_map,
            ticks_per_quarter,
            warnings: Vec::new(),
        }
    }

    pub fn empty() -> Self {
        Self::new(Vec::new(), TempoMap::default(), DEFAULT_TICKS_PER_QUARTER)
    }

    /// Latest note offset, or zero for an empty score.
    pub fn duration(&self) -> f64 {
        self.notes.iter().map(|n| n.offset).fold(0.0, f64::max)
    }

    /// Same music played `factor` times faster: times divided by `factor`,
    /// tempos multiplied by it.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            notes: self
                .notes
                .iter()
                .map(|n| TimedNote {
                    onset: n.onset / factor,
                    offset: n.offset / factor,
                    ..*n
                })
                .collect(),
            tempo_map: self.tempo_map.scaled(factor),
            ticks_per_quarter: self.ticks_per_quarter,
            warnings: self.warnings.clone(),
        }
    }
}

/// Orders notes by onset, then pitch (offset and velocity break any
/// remaining ties).
pub fn sort_notes(notes: &mut [TimedNote]) {
    notes.sort_by(|a, b| {
        a.onset
            .total_cmp(&b.onset)
            .then(a.pitch.cmp(&b.pitch))
            .then(a.offset.total_cmp(&b.offset))
            .then(a.velocity.cmp(&b.velocity))
    });
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn u8(&mut self) -> Result<u8, MidiError> {
        let b = *self
            .buf
            .get(self.pos)
            .ok_or_else(|| parse_err(self.pos, "unexpected end of data"))?;
        self.pos += 1;
        Ok(b)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], MidiError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| parse_err(self.pos, format!("need {n} bytes")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, MidiError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, MidiError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self) -> Result<u32, MidiError> {
        let start = self.pos;
        let mut v: u32 = 0;
        for _ in 0..4 {
            let b = self.u8()?;
            v = (v << 7) | u32::from(b & 0x7f);
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(parse_err(start, "variable-length quantity longer than 4 bytes"))
    }
}

#[derive(Debug, Clone, Copy)]
struct NoteEvent {
    tick: u64,
    channel: u8,
    pitch: u8,
    /// Zero means release.
    velocity: u8,
}

#[derive(Default)]
struct Track {
    notes: Vec<NoteEvent>,
    tempos: Vec<(u64, u32)>,
    end_tick: u64,
}

fn read_track(r: &mut ByteReader<'_>, end: usize) -> Result<Track, MidiError> {
    let mut track = Track::default();
    let mut tick: u64 = 0;
    let mut running: Option<u8> = None;
    while r.pos < end {
        tick += u64::from(r.vlq()?);
        let at = r.pos;
        let mut status = r.u8()?;
        let first_data = if status < 0x80 {
            let s = running.ok_or_else(|| parse_err(at, "data byte without running status"))?;
            let d = status;
            status = s;
            Some(d)
        } else {
            None
        };
        match status {
            0xff => {
                running = None;
                let kind = r.u8()?;
                let len = r.vlq()? as usize;
                let data = r.take(len)?;
                match kind {
                    0x51 => {
                        if len != 3 {
                            return Err(parse_err(at, "set-tempo meta event must have 3 bytes"));
                        }
                        let uspq = u32::from_be_bytes([0, data[0], data[1], data[2]]);
                        if uspq == 0 {
                            return Err(parse_err(at, "zero tempo"));
                        }
                        track.tempos.push((tick, uspq));
                    }
                    0x2f => {
                        track.end_tick = tick;
                        r.pos = end;
                        break;
                    }
                    _ => {}
                }
            }
            0xf0 | 0xf7 => {
                running = None;
                let len = r.vlq()? as usize;
                r.take(len)?;
            }
            0x80..=0xef => {
                running = Some(status);
                let d1 = match first_data {
                    Some(d) => d,
                    None => r.u8()?,
                };
                let kind = status & 0xf0;
                let channel = status & 0x0f;
                let two_bytes = !matches!(kind, 0xc0 | 0xd0);
                let d2 = if two_bytes { r.u8()? } else { 0 };
                if d1 > 0x7f || d2 > 0x7f {
                    return Err(parse_err(at, "data byte with high bit set"));
                }
                match kind {
                    0x90 => track.notes.push(NoteEvent {
                        tick,
                        channel,
                        pitch: d1,
                        velocity: d2,
                    }),
                    0x80 => track.notes.push(NoteEvent {
                        tick,
                        channel,
                        pitch: d1,
                        velocity: 0,
                    }),
                    _ => {}
                }
            }
            other => return Err(parse_err(at, format!("unsupported status byte {other:#04x}"))),
        }
        track.end_tick = tick;
    }
    if r.pos != end {
        return Err(parse_err(r.pos, "event ran past end of track chunk"));
    }
    Ok(track)
}

/// Tick-domain tempo segments with the wall-clock time each one starts.
struct TickClock {
    tpq: f64,
    /// (start tick, start seconds, microseconds per quarter)
    segments: Vec<(u64, f64, u32)>,
}

impl TickClock {
    fn new(mut tempos: Vec<(u64, u32)>, tpq: u16) -> Self {
        tempos.sort_by_key(|&(t, _)| t);
        let mut merged: Vec<(u64, u32)> = Vec::new();
        for (t, u) in tempos {
            match merged.last_mut() {
                Some(last) if last.0 == t => last.1 = u,
                _ => merged.push((t, u)),
            }
        }
        if merged.first().is_none_or(|&(t, _)| t != 0) {
            merged.insert(0, (0, (60e6 / DEFAULT_BPM) as u32));
        }
        let tpq = f64::from(tpq);
        let mut segments: Vec<(u64, f64, u32)> = Vec::with_capacity(merged.len());
        for (t, uspq) in merged {
            let secs = match segments.last() {
                Some(&(pt, ps, pu)) => ps + (t - pt) as f64 * f64::from(pu) / 1e6 / tpq,
                None => 0.0,
            };
            segments.push((t, secs, uspq));
        }
        Self { tpq, segments }
    }

    fn seconds(&self, tick: u64) -> f64 {
        let idx = self.segments.partition_point(|s| s.0 <= tick).saturating_sub(1);
        let (t0, s0, uspq) = self.segments[idx];
        s0 + (tick - t0) as f64 * f64::from(uspq) / 1e6 / self.tpq
    }

    fn tempo_map(&self) -> TempoMap {
        let mut changes: Vec<TempoChange> = Vec::with_capacity(self.segments.len());
        for &(_, secs, uspq) in &self.segments {
            let bpm = 60e6 / f64::from(uspq);
            match changes.last_mut() {
                // Redundant events carry no information.
                Some(last) if last.bpm == bpm => {}
                _ => changes.push(TempoChange { time: secs, bpm }),
            }
        }
        TempoMap { changes }
    }
}

/// Parses a format 0 or 1 Standard MIDI File.
pub fn parse_midi(bytes: &[u8]) -> Result<MidiScore, MidiError> {
    let mut r = ByteReader { buf: bytes, pos: 0 };
    if r.take(4).map_err(|_| parse_err(0, "file too short for header"))? != b"MThd" {
        return Err(parse_err(0, "missing MThd header"));
    }
    let hlen = r.u32()? as usize;
    if hlen < 6 {
        return Err(parse_err(4, format!("header length {hlen} < 6")));
    }
    let hstart = r.pos;
    let format = r.u16()?;
    let ntrks = r.u16()?;
    let division = r.u16()?;
    r.pos = hstart + hlen;
    if format > 1 {
        return Err(MidiError::Unsupported(format!("format {format}")));
    }
    if division & 0x8000 != 0 {
        return Err(MidiError::Unsupported("SMPTE time division".into()));
    }
    if division == 0 {
        return Err(parse_err(12, "zero ticks per quarter"));
    }
    let tpq = division;

    let mut tracks = Vec::new();
    while tracks.len() < ntrks as usize {
        let at = r.pos;
        if at >= bytes.len() {
            return Err(parse_err(at, format!("expected {ntrks} tracks, found {}", tracks.len())));
        }
        let id = r.take(4)?;
        let len = r.u32()? as usize;
        let end = r
            .pos
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| parse_err(at, "chunk length exceeds file size"))?;
        if id == b"MTrk" {
            tracks.push(read_track(&mut r, end)?);
        } else {
            r.pos = end;
        }
    }

    // Tempo lives in the first track (the only one in format 0).
    let tempos = tracks.first().map(|t| t.tempos.clone()).unwrap_or_default();
    let clock = TickClock::new(tempos, tpq);
    let to_secs = |tick: u64| clock.seconds(tick);

    let mut notes = Vec::new();
    let mut warnings = Vec::new();
    for track in &tracks {
        let mut open: HashMap<(u8, u8), VecDeque<(u64, u8)>> = HashMap::new();
        let mut close = |ch: u8, pitch: u8, on: u64, vel: u8, off: u64, warnings: &mut Vec<MidiWarning>| {
            if off > on {
                notes.push(TimedNote {
                    onset: to_secs(on),
                    offset: to_secs(off),
                    pitch,
                    velocity: vel,
                });
            } else {
                warnings.push(MidiWarning::ZeroLengthNote {
                    channel: ch,
                    pitch,
                    tick: on,
                });
            }
        };
        for ev in &track.notes {
            if ev.channel == PERCUSSION_CHANNEL {
                continue;
            }
            let queue = open.entry((ev.channel, ev.pitch)).or_default();
            if ev.velocity > 0 {
                queue.push_back((ev.tick, ev.velocity));
            } else if let Some((on, vel)) = queue.pop_front() {
                close(ev.channel, ev.pitch, on, vel, ev.tick, &mut warnings);
            }
        }
        let mut dangling: Vec<_> = open
            .into_iter()
            .flat_map(|((ch, p), q)| q.into_iter().map(move |(t, v)| (t, ch, p, v)))
            .collect();
        dangling.sort_unstable();
        for (on, ch, pitch, vel) in dangling {
            warnings.push(MidiWarning::UnmatchedNoteOn {
                channel: ch,
                pitch,
                tick: on,
            });
            close(ch, pitch, on, vel, track.end_tick, &mut warnings);
        }
    }
    sort_notes(&mut notes);
    Ok(MidiScore {
        notes,
        tempo_map: clock.tempo_map(),
        ticks_per_quarter: tpq,
        warnings,
    })
}

fn push_vlq(out: &mut Vec<u8>, mut v: u32) {
    let mut buf = [0u8; 4];
    let mut n = 0;
    loop {
        buf[n] = (v & 0x7f) as u8;
        n += 1;
        v >>= 7;
        if v == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        out.push(if i > 0 { buf[i] | 0x80 } else { buf[i] });
    }
}

/// Serializes a score as a format 0 Standard MIDI File.
///
/// Overlapping notes of the same pitch are spread over distinct channels so
/// first-in-first-out matching on re-read pairs every on with its own off.
pub fn write_midi(score: &MidiScore) -> Result<Vec<u8>, MidiError> {
    for n in &score.notes {
        n.validate()?;
    }
    let tpq = score.ticks_per_quarter.max(1);
    let tpq_f = f64::from(tpq);
    let to_tick = |t: f64| (score.tempo_map.quarters_at(t) * tpq_f).round() as u64;

    // (tick, order, message); offs sort before ons at the same tick.
    let mut events: Vec<(u64, u8, Vec<u8>)> = Vec::new();
    for c in score.tempo_map.changes() {
        let uspq = (60e6 / c.bpm).round().clamp(1.0, f64::from(0x00ff_ffff)) as u32;
        let b = uspq.to_be_bytes();
        events.push((to_tick(c.time), 0, vec![0xff, 0x51, 0x03, b[1], b[2], b[3]]));
    }

    let mut notes = score.notes.clone();
    sort_notes(&mut notes);
    let channels: Vec<u8> = (0u8..16).filter(|&c| c != PERCUSSION_CHANNEL).collect();
    let mut busy_until: HashMap<(u8, u8), u64> = HashMap::new();
    for n in &notes {
        let on = to_tick(n.onset);
        let off = to_tick(n.offset).max(on + 1);
        let ch = channels
            .iter()
            .copied()
            .find(|&c| busy_until.get(&(c, n.pitch)).is_none_or(|&until| until <= on))
            .unwrap_or(0);
        busy_until.insert((ch, n.pitch), off);
        events.push((on, 2, vec![0x90 | ch, n.pitch, n.velocity]));
        events.push((off, 1, vec![0x80 | ch, n.pitch, 0x40]));
    }
    events.sort_by_key(|e| (e.0, e.1));

    let mut track = Vec::new();
    let mut last = 0u64;
    for (tick, _, msg) in &events {
        let delta = u32::try_from(tick - last)
            .map_err(|_| MidiError::Unsupported("delta time overflow".into()))?;
        push_vlq(&mut track, delta);
        track.extend_from_slice(msg);
        last = *tick;
    }
    track.extend_from_slice(&[0x00, 0xff, 0x2f, 0x00]);

    let mut out = Vec::with_capacity(track.len() + 22);
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&tpq.to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(&track);
    Ok(out)
}
