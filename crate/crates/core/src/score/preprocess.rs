use std::collections::HashSet;
use std::fmt;

use super::{
    Instrument, Note, ScoreError, Song, Track, DRUM_DURATION, DRUM_VELOCITY, TICKS_PER_QUARTER,
};

/// A song must have strictly more bars than this.
pub const MIN_BARS_EXCLUSIVE: usize = 16;
/// A song must have strictly more notes than this.
pub const MIN_NOTES_EXCLUSIVE: usize = 512;
pub const MAX_EMPTY_BARS: usize = 4;
const MIN_INSTRUMENT_CLASSES: usize = 4;
const MONOPHONIC_RATIO: f64 = 0.9;

/// Six-class mapping of a General MIDI program. `None` means the track is
/// discarded (percussive and sound-effect programs).
pub(crate) fn program_class(program: u8, melody: bool) -> Option<Instrument> {
    Some(match program {
        0..=15 => Instrument::Piano,
        16..=23 => Instrument::Strings,
        24..=31 => Instrument::Guitar,
        32..=39 => Instrument::Bass,
        40..=79 => Instrument::Strings,
        80..=103 if melody => Instrument::SquareSynth,
        80..=111 => Instrument::Strings,
        _ => return None,
    })
}

fn snap(ticks: u32, from: u32) -> u32 {
    let scaled = u64::from(ticks) * u64::from(TICKS_PER_QUARTER) + u64::from(from / 2);
    (scaled / u64::from(from)) as u32
}

/// Snap onsets and durations onto the 48-per-quarter grid and normalize drum
/// notes. Idempotent.
pub fn quantize_song(song: &Song) -> Song {
    let from = song.ticks_per_quarter.max(1);
    let tracks = song
        .tracks
        .iter()
        .map(|t| {
            let notes = t
                .notes
                .iter()
                .map(|n| {
                    let (duration, velocity) = if t.is_drum() {
                        (DRUM_DURATION, DRUM_VELOCITY)
                    } else {
                        (snap(n.duration, from).max(1), n.velocity)
                    };
                    Note::new(snap(n.onset, from), n.pitch, duration, velocity)
                })
                .collect();
            let mut track = Track { notes, ..t.clone() };
            track.normalize_order();
            track
        })
        .collect();
    let mut out = Song { tracks, n_bars: song.n_bars, ticks_per_quarter: TICKS_PER_QUARTER };
    out.n_bars = out.n_bars.max(out.bars_spanned());
    out
}

fn monophonic_ratio(notes: &[Note]) -> f64 {
    if notes.is_empty() {
        return 0.0;
    }
    // notes are onset-sorted; a note is monophonic if it overlaps neither
    // neighbour-in-time
    let mut max_end_before = vec![0u32; notes.len()];
    let mut running = 0;
    for (i, n) in notes.iter().enumerate() {
        max_end_before[i] = running;
        running = running.max(n.end());
    }
    let mono = notes
        .iter()
        .enumerate()
        .filter(|&(i, n)| {
            let prev_overlap = i > 0 && max_end_before[i] > n.onset;
            let next_overlap = notes.get(i + 1).is_some_and(|m| m.onset < n.end());
            !prev_overlap && !next_overlap
        })
        .count();
    mono as f64 / notes.len() as f64
}

fn mean_pitch(notes: &[Note]) -> f64 {
    notes.iter().map(|n| f64::from(n.pitch)).sum::<f64>() / notes.len().max(1) as f64
}

fn find_melody(song: &Song) -> Option<usize> {
    let candidates = || song.tracks.iter().enumerate().filter(|(_, t)| !t.is_drum() && !t.notes.is_empty());
    if let Some((i, _)) = candidates().find(|(_, t)| t.explicitly_melody()) {
        return Some(i);
    }
    candidates()
        .filter(|(_, t)| monophonic_ratio(&t.notes) >= MONOPHONIC_RATIO)
        .fold(None::<(usize, f64)>, |best, (i, t)| {
            let mp = mean_pitch(&t.notes);
            match best {
                Some((_, b)) if b >= mp => best,
                _ => Some((i, mp)),
            }
        })
        .map(|(i, _)| i)
}

/// Fold every track into the six instrument classes, merge tracks of equal
/// class, and keep Drum, the melody and the two busiest accompaniment classes.
pub fn compress_instruments(song: &Song) -> Result<Song, ScoreError> {
    let melody = find_melody(song).ok_or(ScoreError::NoMelodyTrack)?;
    let mut merged: Vec<Vec<Note>> = vec![Vec::new(); Instrument::ALL.len()];
    let mut present = [false; 6];
    for (i, track) in song.tracks.iter().enumerate() {
        if track.notes.is_empty() {
            continue;
        }
        let class = if i == melody {
            Some(Instrument::SquareSynth)
        } else if track.is_drum() {
            Some(Instrument::Drum)
        } else {
            match track.program {
                Some(p) => program_class(p, false),
                // already classed; a second melody-class track folds into Strings
                None if track.instrument == Instrument::SquareSynth => Some(Instrument::Strings),
                None => Some(track.instrument),
            }
        };
        if let Some(class) = class {
            merged[class.index()].extend_from_slice(&track.notes);
            present[class.index()] = true;
        }
    }
    if !present[Instrument::Drum.index()] {
        return Err(ScoreError::NoDrumTrack);
    }

    let mut accompaniment: Vec<Instrument> = Instrument::ALL
        .iter()
        .copied()
        .filter(|c| !matches!(c, Instrument::Drum | Instrument::SquareSynth) && present[c.index()])
        .collect();
    // stable sort keeps enum order among equal counts
    accompaniment.sort_by(|a, b| merged[b.index()].len().cmp(&merged[a.index()].len()));
    accompaniment.truncate(2);

    let tracks = Instrument::ALL
        .iter()
        .copied()
        .filter(|c| matches!(c, Instrument::Drum | Instrument::SquareSynth) || accompaniment.contains(c))
        .map(|class| {
            let mut track = Track {
                instrument: class,
                program: None,
                name: None,
                notes: std::mem::take(&mut merged[class.index()]),
            };
            track.normalize_order();
            track
        })
        .collect();
    Ok(Song { tracks, n_bars: song.n_bars, ticks_per_quarter: song.ticks_per_quarter })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FilterRule {
    MinInstruments,
    MissingDrum,
    MissingMelody,
    MinBars,
    MinNotes,
    MaxEmptyBars,
}

impl fmt::Display for FilterRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FilterVerdict {
    pub accepted: bool,
    pub reasons: Vec<FilterRule>,
}

/// Bars in which no track has a note onset.
pub fn empty_bar_count(song: &Song) -> usize {
    let tpb = song.ticks_per_bar();
    let mut occupied = vec![false; song.n_bars];
    for n in song.tracks.iter().flat_map(|t| &t.notes) {
        if let Some(slot) = occupied.get_mut((n.onset / tpb) as usize) {
            *slot = true;
        }
    }
    occupied.iter().filter(|&&o| !o).count()
}

pub fn filter_song(song: &Song) -> FilterVerdict {
    let classes: HashSet<Instrument> =
        song.tracks.iter().filter(|t| !t.notes.is_empty()).map(|t| t.instrument).collect();
    let mut reasons = Vec::new();
    if classes.len() < MIN_INSTRUMENT_CLASSES {
        reasons.push(FilterRule::MinInstruments);
    }
    if !classes.contains(&Instrument::Drum) {
        reasons.push(FilterRule::MissingDrum);
    }
    if !classes.contains(&Instrument::SquareSynth) {
        reasons.push(FilterRule::MissingMelody);
    }
    if song.n_bars <= MIN_BARS_EXCLUSIVE {
        reasons.push(FilterRule::MinBars);
    }
    if song.note_count() <= MIN_NOTES_EXCLUSIVE {
        reasons.push(FilterRule::MinNotes);
    }
    if empty_bar_count(song) > MAX_EMPTY_BARS {
        reasons.push(FilterRule::MaxEmptyBars);
    }
    FilterVerdict { accepted: reasons.is_empty(), reasons }
}

/// Cut a song into windows of `max_bars` bars every `stride` bars. The first
/// start whose window would run past the end yields one final shorter window,
/// kept only if it spans at least `min_bars`.
pub fn split_windows(song: &Song, min_bars: usize, max_bars: usize, stride: usize) -> Vec<Song> {
    assert!(min_bars <= max_bars && stride >= 1 && max_bars >= 1);
    let mut out = Vec::new();
    let mut start = 0;
    while start < song.n_bars {
        let len = max_bars.min(song.n_bars - start);
        if len < max_bars {
            if len >= min_bars {
                out.push(window(song, start, len));
            }
            break;
        }
        out.push(window(song, start, len));
        start += stride;
    }
    out
}

fn window(song: &Song, start: usize, len: usize) -> Song {
    let tpb = song.ticks_per_bar();
    let lo = start as u32 * tpb;
    let hi = (start + len) as u32 * tpb;
    let tracks = song
        .tracks
        .iter()
        .map(|t| Track {
            notes: t
                .notes
                .iter()
                .filter(|n| n.onset >= lo && n.onset < hi)
                .map(|n| Note { onset: n.onset - lo, ..*n })
                .collect(),
            ..t.clone()
        })
        .collect();
    Song { tracks, n_bars: len, ticks_per_quarter: song.ticks_per_quarter }
}

/// Keep the first song of every group sharing identical binned expert
/// features.
pub fn dedupe_corpus(songs: Vec<Song>) -> Vec<Song> {
    let mut seen = HashSet::new();
    songs
        .into_iter()
        .filter(|s| {
            let grid = crate::features::extract_expert_features(s);
            seen.insert(grid.to_text())
        })
        .collect()
}
