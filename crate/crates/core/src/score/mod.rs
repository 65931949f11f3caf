//! Quantized multitrack scores and the preprocessing pipeline that produces
//! them from Standard MIDI Files.

mod midi;
mod preprocess;

use std::fmt;
use std::str::FromStr;

pub use midi::{parse_midi, write_midi};
pub use preprocess::{
    compress_instruments, dedupe_corpus, empty_bar_count, filter_song, quantize_song,
    split_windows, FilterRule, FilterVerdict, MIN_BARS_EXCLUSIVE, MIN_NOTES_EXCLUSIVE,
    MAX_EMPTY_BARS,
};

/// Grid resolution of every quantized song.
pub const TICKS_PER_QUARTER: u32 = 48;
/// 4/4 only.
pub const TICKS_PER_BAR: u32 = 4 * TICKS_PER_QUARTER;
pub const TICKS_PER_BEAT: u32 = TICKS_PER_QUARTER;
pub const BPM: u32 = 120;

/// Drum notes are normalized to a 16th note at this velocity.
pub const DRUM_DURATION: u32 = TICKS_PER_QUARTER / 4;
pub const DRUM_VELOCITY: u8 = 64;

#[derive(Debug, thiserror::Error)]
pub enum ScoreError {
    #[error("malformed MIDI: {0}")]
    MalformedMidi(String),
    #[error("unsupported time signature {numerator}/{denominator}")]
    UnsupportedTimeSignature { numerator: u8, denominator: u32 },
    #[error("song has no melody track")]
    NoMelodyTrack,
    #[error("song has no drum track")]
    NoDrumTrack,
    #[error("song text line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Instrument {
    Drum,
    Piano,
    Guitar,
    Bass,
    Strings,
    SquareSynth,
}

impl Instrument {
    pub const ALL: [Instrument; 6] = [
        Instrument::Drum,
        Instrument::Piano,
        Instrument::Guitar,
        Instrument::Bass,
        Instrument::Strings,
        Instrument::SquareSynth,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn is_drum(self) -> bool {
        self == Instrument::Drum
    }

    pub fn name(self) -> &'static str {
        match self {
            Instrument::Drum => "Drum",
            Instrument::Piano => "Piano",
            Instrument::Guitar => "Guitar",
            Instrument::Bass => "Bass",
            Instrument::Strings => "Strings",
            Instrument::SquareSynth => "SquareSynth",
        }
    }

    /// General MIDI program written for this class on export.
    pub fn canonical_program(self) -> u8 {
        match self {
            Instrument::Drum => 0,
            Instrument::Piano => 0,
            Instrument::Guitar => 24,
            Instrument::Bass => 33,
            Instrument::Strings => 48,
            Instrument::SquareSynth => 80,
        }
    }
}

impl fmt::Display for Instrument {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Instrument {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Instrument::ALL
            .iter()
            .copied()
            .find(|i| i.name() == s)
            .ok_or_else(|| format!("unknown instrument {s:?}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Note {
    pub onset: u32,
    pub pitch: u8,
    pub duration: u32,
    pub velocity: u8,
}

impl Note {
    pub fn new(onset: u32, pitch: u8, duration: u32, velocity: u8) -> Self {
        Self { onset, pitch, duration, velocity }
    }

    pub fn end(&self) -> u32 {
        self.onset + self.duration
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Track {
    pub instrument: Instrument,
    /// General MIDI program as read from the file; `None` once the track is
    /// already expressed in the six-class scheme.
    pub program: Option<u8>,
    pub name: Option<String>,
    pub notes: Vec<Note>,
}

impl Track {
    pub fn new(instrument: Instrument, notes: Vec<Note>) -> Self {
        let mut track = Self { instrument, program: None, name: None, notes };
        track.normalize_order();
        track
    }

    pub fn is_drum(&self) -> bool {
        self.instrument.is_drum()
    }

    /// Sort by (onset, pitch, duration) and drop notes repeating an
    /// onset+pitch pair; the longest duration survives.
    pub fn normalize_order(&mut self) {
        self.notes.sort_by(|a, b| {
            (a.onset, a.pitch)
                .cmp(&(b.onset, b.pitch))
                .then(b.duration.cmp(&a.duration))
                .then(b.velocity.cmp(&a.velocity))
        });
        self.notes.dedup_by(|later, first| later.onset == first.onset && later.pitch == first.pitch);
    }

    pub fn explicitly_melody(&self) -> bool {
        let named = self
            .name
            .as_deref()
            .is_some_and(|n| n.to_ascii_lowercase().contains("melody"));
        named || (self.program.is_none() && self.instrument == Instrument::SquareSynth)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Song {
    pub tracks: Vec<Track>,
    pub n_bars: usize,
    pub ticks_per_quarter: u32,
}

impl Song {
    pub fn new(tracks: Vec<Track>, n_bars: usize) -> Self {
        Self { tracks, n_bars, ticks_per_quarter: TICKS_PER_QUARTER }
    }

    pub fn ticks_per_bar(&self) -> u32 {
        self.ticks_per_quarter * 4
    }

    pub fn note_count(&self) -> usize {
        self.tracks.iter().map(|t| t.notes.len()).sum()
    }

    pub fn track(&self, instrument: Instrument) -> Option<&Track> {
        self.tracks.iter().find(|t| t.instrument == instrument)
    }

    /// Bar count implied by the latest onset.
    pub fn bars_spanned(&self) -> usize {
        let bar = self.ticks_per_bar();
        self.tracks
            .iter()
            .flat_map(|t| t.notes.iter())
            .map(|n| (n.onset / bar) as usize + 1)
            .max()
            .unwrap_or(0)
    }

    /// Notes of `track` whose onset falls inside bar `bar`.
    pub fn bar_notes(&self, track: usize, bar: usize) -> &[Note] {
        let tpb = self.ticks_per_bar();
        let lo = bar as u32 * tpb;
        let hi = lo + tpb;
        let notes = &self.tracks[track].notes;
        let start = notes.partition_point(|n| n.onset < lo);
        let end = notes.partition_point(|n| n.onset < hi);
        &notes[start..end]
    }

    /// Serialize to the line-oriented text form. Tracks without notes have no
    /// lines and are therefore not represented.
    pub fn to_text(&self) -> String {
        let mut out = format!("SONG n_bars={}\n", self.n_bars);
        let mut idx = 0;
        for track in &self.tracks {
            if track.notes.is_empty() {
                continue;
            }
            for n in &track.notes {
                out.push_str(&format!(
                    "T{idx} {} {} {} {} {}\n",
                    track.instrument, n.onset, n.pitch, n.duration, n.velocity
                ));
            }
            idx += 1;
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Song, ScoreError> {
        let err = |line: usize, message: String| ScoreError::Parse { line, message };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty input".into()))?;
        let n_bars = header
            .strip_prefix("SONG n_bars=")
            .and_then(|v| v.parse::<usize>().ok())
            .ok_or_else(|| err(1, format!("bad header {header:?}")))?;
        let mut tracks: Vec<Track> = Vec::new();
        for (i, line) in lines {
            let lineno = i + 1;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(' ').collect();
            if fields.len() != 6 {
                return Err(err(lineno, format!("expected 6 fields, got {}", fields.len())));
            }
            let idx: usize = fields[0]
                .strip_prefix('T')
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| err(lineno, format!("bad track field {:?}", fields[0])))?;
            let instrument: Instrument = fields[1].parse().map_err(|e| err(lineno, e))?;
            let num = |s: &str| -> Result<u32, ScoreError> {
                s.parse().map_err(|_| err(lineno, format!("bad number {s:?}")))
            };
            let onset = num(fields[2])?;
            let pitch = num(fields[3])?;
            let duration = num(fields[4])?;
            let velocity = num(fields[5])?;
            if pitch > 127 || !(1..=127).contains(&velocity) || duration == 0 {
                return Err(err(lineno, "note field out of range".into()));
            }
            if idx == tracks.len() {
                tracks.push(Track::new(instrument, Vec::new()));
            } else if idx > tracks.len() {
                return Err(err(lineno, format!("track T{idx} appears before T{}", tracks.len())));
            }
            let track = &mut tracks[idx];
            if track.instrument != instrument {
                return Err(err(lineno, format!("track T{idx} changes instrument")));
            }
            track.notes.push(Note::new(onset, pitch as u8, duration, velocity as u8));
        }
        for t in &mut tracks {
            t.normalize_order();
        }
        Ok(Song::new(tracks, n_bars))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Song {
        Song::new(
            vec![
                Track::new(Instrument::Drum, vec![Note::new(0, 36, 12, 64), Note::new(48, 38, 12, 64)]),
                Track::new(Instrument::Bass, vec![Note::new(0, 40, 96, 90)]),
            ],
            2,
        )
    }

    #[test]
    fn text_format_layout() {
        let text = sample().to_text();
        assert_eq!(
            text,
            "SONG n_bars=2\nT0 Drum 0 36 12 64\nT0 Drum 48 38 12 64\nT1 Bass 0 40 96 90\n"
        );
        assert_eq!(Song::from_text(&text).unwrap(), sample());
    }

    #[test]
    fn text_rejects_gaps_and_bad_header() {
        assert!(Song::from_text("SONG bars=2\n").is_err());
        assert!(Song::from_text("SONG n_bars=2\nT1 Bass 0 40 96 90\n").is_err());
        assert!(Song::from_text("SONG n_bars=2\nT0 Bass 0 40 0 90\n").is_err());
        assert!(Song::from_text("SONG n_bars=2\nT0 Oboe 0 40 10 90\n").is_err());
    }

    #[test]
    fn dedup_keeps_longest() {
        let t = Track::new(
            Instrument::Piano,
            vec![Note::new(0, 60, 10, 80), Note::new(0, 60, 30, 70), Note::new(0, 59, 5, 70)],
        );
        assert_eq!(t.notes, vec![Note::new(0, 59, 5, 70), Note::new(0, 60, 30, 70)]);
    }

    fn arb_song() -> impl Strategy<Value = Song> {
        let note = (0u32..2000, 0u8..128, 1u32..400, 1u8..128)
            .prop_map(|(o, p, d, v)| Note::new(o, p, d, v));
        let track = (0usize..6, prop::collection::vec(note, 1..20))
            .prop_map(|(i, notes)| Track::new(Instrument::ALL[i], notes));
        (prop::collection::vec(track, 0..5), 0usize..40).prop_map(|(tracks, n)| Song::new(tracks, n))
    }

    proptest! {
        #[test]
        fn text_round_trip_is_identity(song in arb_song()) {
            let text = song.to_text();
            let parsed = Song::from_text(&text).unwrap();
            prop_assert_eq!(parsed.to_text(), text);
            let kept: Vec<_> = song.tracks.iter().filter(|t| !t.notes.is_empty()).cloned().collect();
            prop_assert_eq!(parsed.tracks, kept);
        }
    }
}
