//! Objective metrics: note-on density per wall-clock window and pitch
//! distribution over a pitch range.

use std::fmt::Write as _;
use std::ops::RangeInclusive;

use thiserror::Error;

use crate::midi::MidiScore;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("window must be positive, got {0}")]
    Window(f64),
    #[error("profile covers {covered} s, shorter than the {horizon} s horizon")]
    TooShort { covered: f64, horizon: f64 },
    #[error("invalid pitch range {0}..={1}")]
    Range(u8, u8),
    #[error("density CSV line {line}: {message}")]
    Csv { line: usize, message: String },
}

/// Onset counts per half-open window `[k·w, (k+1)·w)` anchored at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityProfile {
    pub window: f64,
    pub counts: Vec<u64>,
}

impl DensityProfile {
    pub fn covered_seconds(&self) -> f64 {
        self.counts.len() as f64 * self.window
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

pub fn note_density(score: &MidiScore, window: f64) -> Result<DensityProfile, EvalError> {
    if !(window > 0.0 && window.is_finite()) {
        return Err(EvalError::Window(window));
    }
    if score.notes.is_empty() {
        return Ok(DensityProfile {
            window,
            counts: Vec::new(),
        });
    }
    let bin = |t: f64| (t / window).floor() as usize;
    let last_onset = score.notes.iter().map(|n| n.onset).fold(0.0, f64::max);
    let windows = ((score.duration() / window).ceil() as usize).max(bin(last_onset) + 1);
    let mut counts = vec![0u64; windows];
    for n in &score.notes {
        counts[bin(n.onset)] += 1;
    }
    Ok(DensityProfile { window, counts })
}

/// Onset counts and frequencies restricted to a pitch range.
#[derive(Debug, Clone, PartialEq)]
pub struct PitchHistogram {
    pub low: u8,
    pub high: u8,
    /// Indexed by MIDI pitch; zero outside the range.
    pub counts: [u64; 128],
}

impl PitchHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `(pitch, frequency)` for every pitch in the range; all zero when
    /// the range holds no onsets.
    pub fn frequencies(&self) -> Vec<(u8, f64)> {
        let total = self.total();
        (self.low..=self.high)
            .map(|p| {
                let c = self.counts[p as usize];
                (p, if total == 0 { 0.0 } else { c as f64 / total as f64 })
            })
            .collect()
    }
}

pub fn pitch_distribution<'a>(
    scores: impl IntoIterator<Item = &'a MidiScore>,
    range: RangeInclusive<u8>,
) -> Result<PitchHistogram, EvalError> {
    let (low, high) = (*range.start(), *range.end());
    if low > high || high > 127 {
        return Err(EvalError::Range(low, high));
    }
    let mut counts = [0u64; 128];
    for s in scores {
        for n in &s.notes {
            if range.contains(&n.pitch) {
                counts[n.pitch as usize] += 1;
            }
        }
    }
    Ok(PitchHistogram { low, high, counts })
}

/// Mean density of the first and last quarter of a horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityStability {
    pub leading_mean: f64,
    pub trailing_mean: f64,
    /// `trailing_mean / leading_mean`; 0 when both are 0, infinite when
    /// only the leading quarter is silent.
    pub ratio: f64,
}

pub fn density_stability(profile: &DensityProfile, horizon: f64) -> Result<DensityStability, EvalError> {
    if !(horizon > 0.0) {
        return Err(EvalError::Window(horizon));
    }
    let windows = (horizon / profile.window).ceil() as usize;
    if windows > profile.counts.len() {
        return Err(EvalError::TooShort {
            covered: profile.covered_seconds(),
            horizon,
        });
    }
    let quarter = (windows / 4).max(1);
    let mean = |c: &[u64]| c.iter().sum::<u64>() as f64 / c.len() as f64;
    let leading_mean = mean(&profile.counts[..quarter]);
    let trailing_mean = mean(&profile.counts[windows - quarter..windows]);
    let ratio = if leading_mean > 0.0 {
        trailing_mean / leading_mean
    } else if trailing_mean > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    Ok(DensityStability {
        leading_mean,
        trailing_mean,
        ratio,
    })
}

pub const DENSITY_CSV_HEADER: &str = "window_index,t_start_seconds,count";
pub const PITCH_CSV_HEADER: &str = "pitch,frequency";

pub fn density_csv(profile: &DensityProfile) -> String {
    let mut s = format!("{DENSITY_CSV_HEADER}\n");
    for (k, c) in profile.counts.iter().enumerate() {
        let _ = writeln!(s, "{k},{},{c}", k as f64 * profile.window);
    }
    s
}

pub fn parse_density_csv(text: &str) -> Result<DensityProfile, EvalError> {
    let err = |line: usize, message: &str| EvalError::Csv {
        line,
        message: message.into(),
    };
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(DENSITY_CSV_HEADER) {
        return Err(err(1, "expected header window_index,t_start_seconds,count"));
    }
    let mut starts = Vec::new();
    let mut counts = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.trim().split(',').collect();
        let parsed = (f.len() == 3)
            .then(|| Some((f[0].parse::<usize>().ok()?, f[1].parse::<f64>().ok()?, f[2].parse::<u64>().ok()?)))
            .flatten();
        let (k, t, c) = parsed.ok_or_else(|| err(i + 2, "expected index,start,count"))?;
        if k != counts.len() {
            return Err(err(i + 2, "window indices must run 0, 1, 2, ..."));
        }
        starts.push(t);
        counts.push(c);
    }
    let window = if starts.len() >= 2 { starts[1] - starts[0] } else { 5.0 };
    Ok(DensityProfile { window, counts })
}

pub fn pitch_csv(hist: &PitchHistogram) -> String {
    let mut s = format!("{PITCH_CSV_HEADER}\n");
    for (p, f) in hist.frequencies() {
        let _ = writeln!(s, "{p},{f}");
    }
    s
}

/// Line chart of density profiles against time, one polyline per series.
pub fn density_svg(series: &[(String, DensityProfile)]) -> String {
    const W: f64 = 720.0;
    const H: f64 = 360.0;
    const PAD: f64 = 48.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
    let t_max = series
        .iter()
        .map(|(_, p)| p.covered_seconds())
        .fold(0.0, f64::max)
        .max(1.0);
    let c_max = series
        .iter()
        .flat_map(|(_, p)| p.counts.iter().copied())
        .max()
        .unwrap_or(0)
        .max(1) as f64;
    let x = |t: f64| PAD + t / t_max * (W - 2.0 * PAD);
    let y = |c: f64| H - PAD - c / c_max * (H - 2.0 * PAD);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {} H{} M{PAD} {} V{PAD}" stroke="black" fill="none"/>"#,
        H - PAD,
        W - PAD,
        H - PAD
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">seconds</text>"#, W / 2.0, H - 12.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">note-ons per window</text>"#,
        H / 2.0,
        H / 2.0
    );
    let _ = writeln!(s, r#"<text x="{PAD}" y="{}" text-anchor="middle">0</text>"#, H - PAD + 16.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{t_max}</text>"#, W - PAD, H - PAD + 16.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{c_max}</text>"#, PAD - 4.0, PAD + 4.0);
    for (i, (label, p)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = p
            .counts
            .iter()
            .enumerate()
            .map(|(k, &c)| format!("{:.1},{:.1}", x((k as f64 + 0.5) * p.window), y(c as f64)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" stroke="{color}" stroke-width="1.5" fill="none"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            W - PAD - 150.0,
            PAD + 16.0 * i as f64,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::midi::{TempoMap, TimedNote};

    fn score(notes: &[(f64, f64, u8)]) -> MidiScore {
        let notes = notes
            .iter()
            .map(|&(on, off, p)| TimedNote::new(on, off, p, 64).unwrap())
            .collect();
        MidiScore::new(notes, TempoMap::constant(120.0), 480)
    }

    #[test]
    fn empty_score_has_empty_profile() {
        let p = note_density(&MidiScore::empty(), 5.0).unwrap();
        assert!(p.counts.is_empty());
    }

    #[test]
    fn simultaneous_onsets_share_a_window() {
        let notes: Vec<(f64, f64, u8)> = (0..10).map(|i| (0.0, 1.0, 60 + i)).collect();
        assert_eq!(note_density(&score(&notes), 5.0).unwrap().counts, [10]);
    }

    #[test]
    fn windows_are_half_open_and_tile_duration() {
        let s = score(&[(0.0, 1.0, 60), (4.999, 5.5, 61), (5.0, 6.0, 62), (9.0, 16.0, 63)]);
        let p = note_density(&s, 5.0).unwrap();
        assert_eq!(p.counts, [2, 2, 0, 0]);
        assert_eq!(p.total(), 4);
        assert!(matches!(note_density(&s, 0.0), Err(EvalError::Window(_))));
    }

    #[test]
    fn histogram_restricts_and_normalizes() {
        let s = score(&[(0.0, 1.0, 60), (0.0, 1.0, 59), (1.0, 2.0, 72)]);
        let h = pitch_distribution([&s], 60..=71).unwrap();
        assert_eq!(h.total(), 1);
        assert_eq!(h.frequencies()[0], (60, 1.0));
        let uniform = score(&(0..12).map(|i| (i as f64, i as f64 + 1.0, 60 + i as u8)).collect::<Vec<_>>());
        let h = pitch_distribution([&uniform], 60..=71).unwrap();
        for (_, f) in h.frequencies() {
            assert!((f - 1.0 / 12.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stability_ratio_cases() {
        let flat = DensityProfile {
            window: 5.0,
            counts: vec![7; 8],
        };
        assert_eq!(density_stability(&flat, 40.0).unwrap().ratio, 1.0);
        let decay = DensityProfile {
            window: 5.0,
            counts: vec![8, 7, 6, 5, 4, 3, 2, 1, 0, 0, 0, 0],
        };
        assert_eq!(density_stability(&decay, 60.0).unwrap().ratio, 0.0);
        assert!(matches!(density_stability(&flat, 45.0), Err(EvalError::TooShort { .. })));
    }

    #[test]
    fn csv_round_trip() {
        let p = DensityProfile {
            window: 5.0,
            counts: vec![3, 0, 4],
        };
        let text = density_csv(&p);
        assert_eq!(text, "window_index,t_start_seconds,count\n0,0,3\n1,5,0\n2,10,4\n");
        assert_eq!(parse_density_csv(&text).unwrap(), p);
        assert!(parse_density_csv("a,b\n").is_err());
    }

    #[test]
    fn svg_has_one_polyline_per_series() {
        let p = DensityProfile {
            window: 5.0,
            counts: vec![1, 2, 3],
        };
        let svg = density_svg(&[("model".into(), p.clone()), ("a<b".into(), p)]);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("a&lt;b"));
    }
}
