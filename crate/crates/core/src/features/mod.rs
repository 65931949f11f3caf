//! Per-track, per-bar expert features and their discrete bins.

mod chord;

use std::fmt::Write as _;

use crate::score::{Note, Song, TICKS_PER_BEAT};

pub use chord::{detect_chord, ChordLabel, Quality};

/// Vocabulary sizes of the binned features (Chord, DT, DD, ND, MP, MD, MV).
pub const CHORD_BINS: usize = ChordLabel::COUNT;
pub const DT_BINS: usize = 32;
pub const DD_BINS: usize = 50;
pub const ND_BINS: usize = 66;
pub const MP_BINS: usize = 34;
pub const MD_BINS: usize = 30;
pub const MV_BINS: usize = 34;

/// Number of VQ code groups per (track, bar).
pub const VQ_GROUPS: usize = 8;
pub const BEATS_PER_BAR: usize = 4;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum FeatureError {
    #[error("feature file line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Raw, unbinned features of one track in one bar. `None` marks a bar in
/// which the track has no onset.
#[derive(Clone, Debug, PartialEq)]
pub enum RawFeatures {
    Drum(Option<RawDrum>),
    Pitched { stats: Option<RawPitched>, chords: [ChordLabel; BEATS_PER_BAR] },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawDrum {
    pub drum_types: usize,
    pub drum_density: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawPitched {
    pub note_density: f64,
    pub mean_pitch: f64,
    pub mean_duration: f64,
    pub mean_velocity: f64,
}

/// Binned features of one track in one bar. An empty bar takes the extra
/// bin one past each vocabulary (e.g. `dt == DT_BINS`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ExpertFeatures {
    Drum { dt: u16, dd: u16 },
    Pitched { nd: u16, mp: u16, md: u16, mv: u16, ct: [ChordLabel; BEATS_PER_BAR] },
}

impl ExpertFeatures {
    pub fn is_drum(&self) -> bool {
        matches!(self, ExpertFeatures::Drum { .. })
    }

    /// All bins inside their vocabulary (empty sentinel included).
    pub fn in_range(&self) -> bool {
        match *self {
            ExpertFeatures::Drum { dt, dd } => (dt as usize) <= DT_BINS && (dd as usize) <= DD_BINS,
            ExpertFeatures::Pitched { nd, mp, md, mv, .. } => {
                (nd as usize) <= ND_BINS && (mp as usize) <= MP_BINS && (md as usize) <= MD_BINS && (mv as usize) <= MV_BINS
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawFeatureGrid {
    pub entries: Vec<Vec<RawFeatures>>,
}

/// The I × B control grid.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct FeatureGrid {
    pub entries: Vec<Vec<ExpertFeatures>>,
    pub vq_entries: Option<Vec<Vec<[u16; VQ_GROUPS]>>>,
}

impl FeatureGrid {
    pub fn n_tracks(&self) -> usize {
        self.entries.len()
    }

    pub fn n_bars(&self) -> usize {
        self.entries.first().map_or(0, Vec::len)
    }

    /// `F <track> <bar> k=v …` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, row) in self.entries.iter().enumerate() {
            for (b, e) in row.iter().enumerate() {
                write!(out, "F {i} {b}").unwrap();
                match e {
                    ExpertFeatures::Drum { dt, dd } => write!(out, " dt={dt} dd={dd}").unwrap(),
                    ExpertFeatures::Pitched { nd, mp, md, mv, ct } => {
                        write!(out, " nd={nd} mp={mp} md={md} mv={mv} ct=").unwrap();
                        let ct: Vec<String> = ct.iter().map(|c| c.index().to_string()).collect();
                        out.push_str(&ct.join(","));
                    }
                }
                if let Some(vq) = &self.vq_entries {
                    let codes: Vec<String> = vq[i][b].iter().map(u16::to_string).collect();
                    write!(out, " vq={}", codes.join(",")).unwrap();
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<FeatureGrid, FeatureError> {
        let mut entries: Vec<Vec<ExpertFeatures>> = Vec::new();
        let mut vq: Vec<Vec<[u16; VQ_GROUPS]>> = Vec::new();
        let mut has_vq = None;
        for (li, line) in text.lines().enumerate() {
            let err = |message: &str| FeatureError::Parse { line: li + 1, message: message.to_string() };
            let mut fields = line.split(' ');
            if fields.next() != Some("F") {
                return Err(err("line must start with F"));
            }
            let mut index = || -> Result<usize, FeatureError> {
                fields.next().and_then(|f| f.parse().ok()).ok_or_else(|| err("bad track/bar index"))
            };
            let (track, bar) = (index()?, index()?);
            if track == entries.len() && bar == 0 {
                entries.push(Vec::new());
                vq.push(Vec::new());
            }
            if track + 1 != entries.len() || bar != entries[track].len() {
                return Err(err("entries must be listed track by track, bar by bar"));
            }
            let mut kv = std::collections::BTreeMap::new();
            for f in fields {
                let (k, v) = f.split_once('=').ok_or_else(|| err("expected key=value"))?;
                kv.insert(k, v);
            }
            let num = |k: &str| -> Result<u16, FeatureError> {
                kv.get(k).and_then(|v| v.parse().ok()).ok_or_else(|| err(&format!("missing or bad {k}")))
            };
            let entry = if kv.contains_key("dt") {
                ExpertFeatures::Drum { dt: num("dt")?, dd: num("dd")? }
            } else {
                let ct_field = kv.get("ct").ok_or_else(|| err("missing ct"))?;
                let labels: Vec<ChordLabel> = ct_field
                    .split(',')
                    .map(|c| c.parse().ok().and_then(ChordLabel::from_index))
                    .collect::<Option<_>>()
                    .ok_or_else(|| err("bad chord index"))?;
                let ct: [ChordLabel; BEATS_PER_BAR] = labels.try_into().map_err(|_| err("ct needs 4 chords"))?;
                ExpertFeatures::Pitched { nd: num("nd")?, mp: num("mp")?, md: num("md")?, mv: num("mv")?, ct }
            };
            if !entry.in_range() {
                return Err(err("bin out of range"));
            }
            entries[track].push(entry);
            let codes = match kv.get("vq") {
                Some(v) => {
                    let c: Vec<u16> =
                        v.split(',').map(|x| x.parse().ok()).collect::<Option<_>>().ok_or_else(|| err("bad vq"))?;
                    Some(<[u16; VQ_GROUPS]>::try_from(c).map_err(|_| err("vq needs 8 codes"))?)
                }
                None => None,
            };
            if *has_vq.get_or_insert(codes.is_some()) != codes.is_some() {
                return Err(err("vq codes must be present on every line or none"));
            }
            if let Some(c) = codes {
                vq[track].push(c);
            }
        }
        if entries.iter().any(|r| r.len() != entries[0].len()) {
            return Err(FeatureError::Parse { line: 0, message: "tracks have different bar counts".into() });
        }
        Ok(FeatureGrid { entries, vq_entries: if has_vq == Some(true) { Some(vq) } else { None } })
    }
}

fn sounding_in(notes: &[Note], lo: u32, hi: u32) -> impl Iterator<Item = &Note> {
    let end = notes.partition_point(|n| n.onset < hi);
    notes[..end].iter().filter(move |n| n.end() > lo)
}

/// Chords of every beat, over all pitched tracks jointly. Notes held over
/// from earlier onsets count as sounding.
pub fn beat_chords(song: &Song) -> Vec<ChordLabel> {
    let n_beats = song.n_bars * BEATS_PER_BAR;
    (0..n_beats as u32)
        .map(|beat| {
            let lo = beat * TICKS_PER_BEAT;
            let hi = lo + TICKS_PER_BEAT;
            let sounding: Vec<Note> = song
                .tracks
                .iter()
                .filter(|t| !t.is_drum())
                .flat_map(|t| sounding_in(&t.notes, lo, hi).copied())
                .collect();
            detect_chord(&sounding)
        })
        .collect()
}

pub fn extract_raw_features(song: &Song) -> RawFeatureGrid {
    let chords = beat_chords(song);
    let entries = (0..song.tracks.len())
        .map(|ti| {
            let drum = song.tracks[ti].is_drum();
            (0..song.n_bars)
                .map(|bar| {
                    let notes = song.bar_notes(ti, bar);
                    let count = notes.len() as f64;
                    if drum {
                        let stats = (!notes.is_empty()).then(|| {
                            let mut keys: Vec<u8> = notes.iter().map(|n| n.pitch).collect();
                            keys.sort_unstable();
                            keys.dedup();
                            RawDrum { drum_types: keys.len(), drum_density: count / BEATS_PER_BAR as f64 }
                        });
                        RawFeatures::Drum(stats)
                    } else {
                        let mean = |f: fn(&Note) -> f64| notes.iter().map(f).sum::<f64>() / count;
                        let stats = (!notes.is_empty()).then(|| RawPitched {
                            note_density: count / BEATS_PER_BAR as f64,
                            mean_pitch: mean(|n| f64::from(n.pitch)),
                            mean_duration: mean(|n| f64::from(n.duration)),
                            mean_velocity: mean(|n| f64::from(n.velocity)),
                        });
                        let ct = chords[bar * BEATS_PER_BAR..(bar + 1) * BEATS_PER_BAR].try_into().unwrap();
                        RawFeatures::Pitched { stats, chords: ct }
                    }
                })
                .collect()
        })
        .collect();
    RawFeatureGrid { entries }
}

fn linear_bin(x: f64, lo: f64, width: f64, bins: usize) -> u16 {
    (((x - lo) / width).floor().max(0.0) as usize).min(bins - 1) as u16
}

pub fn dt_bin(types: usize) -> u16 {
    types.min(DT_BINS - 1) as u16
}

/// Step 0.25 onsets per beat.
pub fn dd_bin(x: f64) -> u16 {
    linear_bin(x, 0.0, 0.25, DD_BINS)
}

pub fn nd_bin(x: f64) -> u16 {
    linear_bin(x, 0.0, 0.25, ND_BINS)
}

/// Width 2 over pitches 32–99.
pub fn mp_bin(x: f64) -> u16 {
    linear_bin(x.clamp(32.0, 99.0), 32.0, 2.0, MP_BINS)
}

const MD_LO: f64 = 4.0;
const MD_HI: f64 = 384.0;

/// Log-spaced over 4–384 ticks.
pub fn md_bin(x: f64) -> u16 {
    let x = x.clamp(MD_LO, MD_HI);
    let t = (x / MD_LO).ln() / (MD_HI / MD_LO).ln();
    ((t * MD_BINS as f64).floor() as usize).min(MD_BINS - 1) as u16
}

/// Width 4 over velocities 0–135.
pub fn mv_bin(x: f64) -> u16 {
    linear_bin(x.clamp(0.0, 135.0), 0.0, 4.0, MV_BINS)
}

pub fn quantize_features(raw: &RawFeatureGrid) -> FeatureGrid {
    let entries = raw
        .entries
        .iter()
        .map(|row| {
            row.iter()
                .map(|r| match r {
                    RawFeatures::Drum(Some(d)) => {
                        ExpertFeatures::Drum { dt: dt_bin(d.drum_types), dd: dd_bin(d.drum_density) }
                    }
                    RawFeatures::Drum(None) => ExpertFeatures::Drum { dt: DT_BINS as u16, dd: DD_BINS as u16 },
                    RawFeatures::Pitched { stats: Some(s), chords } => ExpertFeatures::Pitched {
                        nd: nd_bin(s.note_density),
                        mp: mp_bin(s.mean_pitch),
                        md: md_bin(s.mean_duration),
                        mv: mv_bin(s.mean_velocity),
                        ct: *chords,
                    },
                    RawFeatures::Pitched { stats: None, chords } => ExpertFeatures::Pitched {
                        nd: ND_BINS as u16,
                        mp: MP_BINS as u16,
                        md: MD_BINS as u16,
                        mv: MV_BINS as u16,
                        ct: *chords,
                    },
                })
                .collect()
        })
        .collect();
    FeatureGrid { entries, vq_entries: None }
}

/// Representative raw value of every bin; `quantize_features` maps it back
/// to the same bin.
pub fn dequantize_features(grid: &FeatureGrid) -> RawFeatureGrid {
    let entries = grid
        .entries
        .iter()
        .map(|row| {
            row.iter()
                .map(|e| match *e {
                    ExpertFeatures::Drum { dt, dd } if dt as usize >= DT_BINS || dd as usize >= DD_BINS => {
                        RawFeatures::Drum(None)
                    }
                    ExpertFeatures::Drum { dt, dd } => RawFeatures::Drum(Some(RawDrum {
                        drum_types: dt as usize,
                        drum_density: f64::from(dd) * 0.25,
                    })),
                    ExpertFeatures::Pitched { nd, ct, .. } if nd as usize >= ND_BINS => {
                        RawFeatures::Pitched { stats: None, chords: ct }
                    }
                    ExpertFeatures::Pitched { nd, mp, md, mv, ct } => RawFeatures::Pitched {
                        stats: Some(RawPitched {
                            note_density: f64::from(nd) * 0.25,
                            mean_pitch: 32.0 + 2.0 * f64::from(mp),
                            mean_duration: MD_LO * (MD_HI / MD_LO).powf((f64::from(md) + 0.5) / MD_BINS as f64),
                            mean_velocity: 4.0 * f64::from(mv) + 2.0,
                        }),
                        chords: ct,
                    },
                })
                .collect()
        })
        .collect();
    RawFeatureGrid { entries }
}

pub fn extract_expert_features(song: &Song) -> FeatureGrid {
    quantize_features(&extract_raw_features(song))
}
