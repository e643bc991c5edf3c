//! Hand-made MIDI fixtures written byte by byte, with expected note times
//! computed from ticks independently of the library.

#![allow(dead_code)]

pub mod grad;

use mtxl::codec::{encode, CodecConfig, TokenStreams};
use mtxl::midi::parse_midi;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixNote {
    pub on: u32,
    pub off: u32,
    pub pitch: u8,
    pub velocity: u8,
    pub channel: u8,
}

#[derive(Debug, Clone)]
pub struct Piece {
    pub name: String,
    pub tpq: u16,
    /// (tick, bpm); an entry at tick 0 unless the file relies on 120 bpm.
    pub tempos: Vec<(u32, f64)>,
    pub notes: Vec<FixNote>,
    /// Tempo in its own track, notes split by channel into further tracks.
    pub format1: bool,
    /// NOTE_ON velocity 0 for releases, with running status.
    pub running_status: bool,
}

impl Piece {
    pub fn new(name: &str, tpq: u16) -> Self {
        Self {
            name: name.into(),
            tpq,
            tempos: Vec::new(),
            notes: Vec::new(),
            format1: false,
            running_status: false,
        }
    }

    pub fn tempo(mut self, tick: u32, bpm: f64) -> Self {
        self.tempos.push((tick, bpm));
        self
    }

    pub fn note(mut self, on: u32, dur: u32, pitch: u8, velocity: u8) -> Self {
        self.notes.push(FixNote {
            on,
            off: on + dur,
            pitch,
            velocity,
            channel: 0,
        });
        self
    }

    pub fn note_ch(mut self, on: u32, dur: u32, pitch: u8, velocity: u8, channel: u8) -> Self {
        self.notes.push(FixNote {
            on,
            off: on + dur,
            pitch,
            velocity,
            channel,
        });
        self
    }

    pub fn format1(mut self) -> Self {
        self.format1 = true;
        self
    }

    pub fn running_status(mut self) -> Self {
        self.running_status = true;
        self
    }

    /// Seconds at `tick`, integrating the tempo list directly.
    pub fn seconds_at(&self, tick: u32) -> f64 {
        let mut changes = self.tempos.clone();
        changes.sort_by_key(|c| c.0);
        if changes.first().is_none_or(|c| c.0 > 0) {
            changes.insert(0, (0, 120.0));
        }
        let mut secs = 0.0;
        for (i, &(start, bpm)) in changes.iter().enumerate() {
            if tick <= start {
                break;
            }
            let end = changes.get(i + 1).map_or(tick, |c| c.0.min(tick));
            // Files store whole microseconds per quarter.
            let us = (60e6 / bpm).round();
            secs += (end - start) as f64 / self.tpq as f64 * us * 1e-6;
        }
        secs
    }

    /// Notes in (onset tick, pitch) order.
    pub fn sorted_notes(&self) -> Vec<FixNote> {
        let mut n = self.notes.clone();
        n.sort_by_key(|x| (x.on, x.pitch, x.off));
        n
    }

    /// Whole notes spanned by `ticks` MIDI ticks, whatever the tempo.
    pub fn whole_notes(&self, ticks: u32) -> f64 {
        ticks as f64 / (4.0 * self.tpq as f64)
    }

    pub fn bytes(&self) -> Vec<u8> {
        let mut tempo_events: Vec<(u32, Vec<u8>)> = self
            .tempos
            .iter()
            .map(|&(t, bpm)| {
                let us = (60e6 / bpm).round() as u32;
                (t, vec![0xFF, 0x51, 0x03, (us >> 16) as u8, (us >> 8) as u8, us as u8])
            })
            .collect();
        tempo_events.sort_by_key(|e| e.0);
        let note_events = |filter: &dyn Fn(&FixNote) -> bool| -> Vec<(u32, Vec<u8>)> {
            let mut ev = Vec::new();
            for n in self.notes.iter().filter(|n| filter(n)) {
                ev.push((n.on, 1u8, vec![0x90 | n.channel, n.pitch, n.velocity]));
                let off = if self.running_status {
                    vec![0x90 | n.channel, n.pitch, 0]
                } else {
                    vec![0x80 | n.channel, n.pitch, 64]
                };
                ev.push((n.off, 0u8, off));
            }
            // Releases before attacks at the same tick.
            ev.sort_by_key(|e| (e.0, e.1));
            ev.into_iter().map(|(t, _, b)| (t, b)).collect()
        };
        if self.format1 {
            let mut channels: Vec<u8> = self.notes.iter().map(|n| n.channel).collect();
            channels.sort();
            channels.dedup();
            let mut tracks = vec![tempo_events];
            for ch in channels {
                tracks.push(note_events(&|n: &FixNote| n.channel == ch));
            }
            smf(1, self.tpq, &tracks, self.running_status)
        } else {
            let mut all = tempo_events;
            all.extend(note_events(&|_| true));
            all.sort_by_key(|e| e.0);
            smf(0, self.tpq, &[all], self.running_status)
        }
    }
}

pub fn vlq(mut n: u32) -> Vec<u8> {
    let mut out = vec![(n & 0x7F) as u8];
    n >>= 7;
    while n > 0 {
        out.push(0x80 | (n & 0x7F) as u8);
        n >>= 7;
    }
    out.reverse();
    out
}

/// A Standard MIDI File from absolute-tick event lists, one per track.
pub fn smf(format: u16, tpq: u16, tracks: &[Vec<(u32, Vec<u8>)>], running_status: bool) -> Vec<u8> {
    let mut out = b"MThd".to_vec();
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&format.to_be_bytes());
    out.extend_from_slice(&(tracks.len() as u16).to_be_bytes());
    out.extend_from_slice(&tpq.to_be_bytes());
    for events in tracks {
        let mut body = Vec::new();
        let mut last_tick = 0;
        let mut status = None;
        for (tick, ev) in events {
            body.extend(vlq(tick - last_tick));
            last_tick = *tick;
            if running_status && ev[0] < 0xF0 && status == Some(ev[0]) {
                body.extend_from_slice(&ev[1..]);
            } else {
                body.extend_from_slice(ev);
            }
            status = (ev[0] < 0xF0).then_some(ev[0]);
        }
        body.extend([0x00, 0xFF, 0x2F, 0x00]);
        out.extend_from_slice(b"MTrk");
        out.extend_from_slice(&(body.len() as u32).to_be_bytes());
        out.extend(body);
    }
    out
}

/// The worked example: a C major arpeggio at 120 bpm held by the pedal
/// until 2.0 s, then an F quarter note at 3 s lasting 1 s at 60 bpm.
pub fn figure_one() -> Piece {
    Piece::new("figure_one", 480)
        .tempo(0, 120.0)
        .tempo(2880, 60.0)
        .note(0, 1920, 60, 80)
        .note(480, 1440, 64, 80)
        .note(960, 960, 67, 80)
        .note(2880, 480, 65, 100)
}

/// Deterministic pseudo-random stream for building pieces.
pub struct Lcg(pub u64);

impl Lcg {
    pub fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        self.0 >> 33
    }

    pub fn pick<T: Copy>(&mut self, xs: &[T]) -> T {
        xs[(self.next() % xs.len() as u64) as usize]
    }
}

const MAJOR: [u8; 8] = [0, 2, 4, 5, 7, 9, 11, 12];

fn scale(name: &str, tpq: u16, bpm: f64, step: u32, root: u8) -> Piece {
    let mut p = Piece::new(name, tpq).tempo(0, bpm);
    for (i, d) in MAJOR.iter().chain(MAJOR.iter().rev()).enumerate() {
        p = p.note(i as u32 * step, step * 9 / 10, root + d, 70 + (i as u8 % 4) * 8);
    }
    p
}

/// A repeating four-bar tune with chords; `k` varies key, rhythm and
/// register.
pub fn tune(name: &str, k: u32, bars: u32) -> Piece {
    let q = 480;
    let root = [60u8, 62, 57][k as usize % 3];
    let rhythm: [&[u32]; 3] = [&[480, 480, 240, 240, 480], &[240, 240, 240, 240, 960], &[320, 320, 320, 480, 480, 480]];
    let rhythm = rhythm[k as usize % 3];
    let melody: [&[u8]; 3] = [&[4, 2, 0, 2, 4, 4, 4, 2], &[0, 4, 7, 12, 11, 7, 4, 2], &[7, 5, 4, 2, 0, 2, 4, 0]];
    let melody = melody[k as usize % 3];
    let progression = [0u8, 5, 7, 0];
    let mut p = Piece::new(name, q as u16).tempo(0, [100.0, 120.0, 84.0][k as usize % 3]);
    let mut t = 0;
    let mut m = 0;
    for bar in 0..bars {
        let chord = progression[bar as usize % 4];
        for (i, iv) in [0u8, 4, 7].iter().enumerate() {
            p = p.note(t, 4 * q - 40, root - 24 + chord + iv, 56 + 4 * i as u8);
        }
        let mut used = 0;
        for &d in rhythm {
            p = p.note(t + used, d - 20, root + melody[m % melody.len()], 80 + (m % 3) as u8 * 6);
            used += d;
            m += 1;
        }
        t += 4 * q;
    }
    p
}

/// At least twenty pieces covering tempo changes, chords, triplets,
/// format 1, running status and several resolutions.
pub fn fixture_corpus() -> Vec<Piece> {
    let mut out = vec![figure_one()];
    out.push(scale("scale_quarters", 480, 120.0, 480, 60));
    out.push(scale("scale_eighths_90", 480, 90.0, 240, 62));
    out.push(scale("scale_tpq96", 96, 132.0, 48, 55));
    out.push(scale("scale_tpq384", 384, 75.0, 192, 67));

    let mut chords = Piece::new("block_chords", 480).tempo(0, 100.0);
    for (i, root) in [60u8, 65, 67, 60, 57, 62, 67, 60].iter().enumerate() {
        for iv in [0, 4, 7, 12] {
            chords = chords.note(i as u32 * 960, 900, root + iv - 12 * (iv == 12) as u8, 72);
        }
    }
    out.push(chords);

    let mut trip = Piece::new("triplet_eighths", 480).tempo(0, 120.0);
    for i in 0..24u32 {
        trip = trip.note(i * 160, 150, 60 + (i % 12) as u8, 90);
    }
    out.push(trip);

    let mut mixed = Piece::new("triplets_and_sixteenths", 480).tempo(0, 72.0);
    let mut t = 0;
    for i in 0..30u32 {
        let d = [320, 120, 120, 160, 160, 160][i as usize % 6];
        mixed = mixed.note(t, d, 64 + (i % 7) as u8, 70);
        t += d;
    }
    out.push(mixed);

    let mut sext = Piece::new("sextuplets", 480).tempo(0, 96.0);
    for i in 0..36u32 {
        sext = sext.note(i * 80, 80, 72 - (i % 6) as u8, 64);
    }
    out.push(sext);

    let mut accel = Piece::new("accelerando", 480);
    for bar in 0..6u32 {
        accel = accel.tempo(bar * 1920, 60.0 + 24.0 * bar as f64);
        for b in 0..4 {
            accel = accel.note(bar * 1920 + b * 480, 400, 60 + (b * 2) as u8, 80);
        }
    }
    out.push(accel);

    // Tempo changes land in the middle of sounding notes.
    let mut rit = Piece::new("ritardando_mid_note", 480)
        .tempo(0, 140.0)
        .tempo(700, 110.0)
        .tempo(1900, 70.0)
        .tempo(3100, 50.0);
    for i in 0..10u32 {
        rit = rit.note(i * 400, 600, 67 - i as u8, 85);
    }
    out.push(rit);

    let mut duo = Piece::new("format1_two_hands", 480).tempo(0, 108.0).tempo(3840, 96.0).format1();
    for i in 0..16u32 {
        duo = duo.note_ch(i * 480, 460, 72 + MAJOR[i as usize % 8], 90, 0);
        if i % 2 == 0 {
            duo = duo.note_ch(i * 480, 940, 48 + MAJOR[(i / 2) as usize % 8], 60, 1);
        }
    }
    out.push(duo);

    let mut rs = Piece::new("running_status_vel0", 240).tempo(0, 126.0).running_status();
    for i in 0..20u32 {
        rs = rs.note(i * 120, 110, 60 + (i % 5) as u8 * 2, 75);
    }
    out.push(rs);

    out.push(
        Piece::new("overlap_same_pitch", 480)
            .tempo(0, 120.0)
            .note(0, 480, 60, 80)
            .note(240, 480, 60, 90)
            .note(960, 480, 62, 70)
            .note(1200, 240, 62, 60),
    );

    let mut wide = Piece::new("wide_arpeggios", 480).tempo(0, 150.0);
    for i in 0..22u32 {
        wide = wide.note(i * 120, 240, 21 + (i * 4) as u8, 40 + (i * 3) as u8);
    }
    out.push(wide);

    out.push(
        Piece::new("long_rests", 480)
            .tempo(0, 88.0)
            .note(0, 480, 60, 80)
            .note(480 * 9, 480, 64, 80)
            .note(480 * 20, 960, 67, 80)
            .note(480 * 21, 120, 72, 80),
    );

    let mut dotted = Piece::new("dotted_rhythm", 480).tempo(0, 112.0);
    let mut t = 0;
    for i in 0..16u32 {
        let d = if i % 2 == 0 { 360 } else { 120 };
        dotted = dotted.note(t, d, 65 + (i % 4) as u8, 78);
        t += d;
    }
    out.push(dotted);

    let mut stacc = Piece::new("staccato", 480).tempo(0, 100.0);
    for i in 0..16u32 {
        stacc = stacc.note(i * 240, 60, 70 + (i % 3) as u8, 100);
    }
    out.push(stacc);

    let mut alberti = Piece::new("alberti_bass", 480).tempo(0, 132.0);
    for bar in 0..4u32 {
        for (j, iv) in [0u8, 7, 4, 7, 0, 7, 4, 7].iter().enumerate() {
            alberti = alberti.note_ch(bar * 1920 + j as u32 * 240, 230, 48 + iv, 55, 1);
        }
        alberti = alberti.note_ch(bar * 1920, 1800, 72 + MAJOR[bar as usize], 88, 0);
    }
    out.push(alberti);

    let mut waltz = Piece::new("waltz_150", 480).tempo(0, 150.0);
    for bar in 0..8u32 {
        let t = bar * 1440;
        waltz = waltz.note(t, 460, 43 + (bar % 2) as u8 * 5, 70);
        for b in 1..3 {
            for iv in [0u8, 4, 7] {
                waltz = waltz.note(t + b * 480, 300, 59 + iv, 60);
            }
        }
        waltz = waltz.note(t, 1400, 71 + (bar % 3) as u8, 85);
    }
    out.push(waltz);

    let mut rng = Lcg(7);
    let mut free = Piece::new("free_rhythm", 480).tempo(0, 97.0).tempo(2000, 123.0);
    let mut t = 0;
    for _ in 0..40 {
        let dur = rng.pick(&[60, 120, 160, 240, 320, 480, 720]);
        let pitch = 48 + rng.pick(&[0u8, 3, 5, 7, 10, 12, 15, 17, 19, 24]);
        // A pitch already sounding would make the release pairing ambiguous.
        if free.notes.iter().any(|n| n.pitch == pitch && n.off > t) {
            t += 120;
            continue;
        }
        free = free.note(t, dur, pitch, 30 + rng.pick(&[0u8, 20, 40, 60]));
        t += rng.pick(&[0, 60, 120, 160, 240, 480]);
    }
    out.push(free);

    for k in 0..3 {
        out.push(tune(&format!("tune_{k}"), k, 16));
    }
    out
}

pub fn encode_piece(p: &Piece, codec: &CodecConfig) -> TokenStreams {
    let score = parse_midi(&p.bytes()).expect("fixture parses");
    encode(&score, codec).expect("fixture encodes")
}

pub const TOY_NOTES: usize = 128;

/// Three tunes for training, cut to a common length so that batch lanes
/// stay in phase (two 64-note segments each).
pub fn toy_corpus() -> Vec<TokenStreams> {
    let codec = CodecConfig::default();
    (0..3)
        .map(|k| encode_piece(&tune(&format!("tune_{k}"), k, 16), &codec).slice(0, TOY_NOTES))
        .collect()
}
