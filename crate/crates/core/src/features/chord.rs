use std::fmt;

use crate::score::Note;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Quality {
    Maj,
    Min,
    Dim,
    Aug,
    Sus2,
    Sus4,
    Maj7,
    Min7,
    Dom7,
    Hdim7,
    Dim7,
}

impl Quality {
    pub const ALL: [Quality; 11] = [
        Quality::Maj,
        Quality::Min,
        Quality::Dim,
        Quality::Aug,
        Quality::Sus2,
        Quality::Sus4,
        Quality::Maj7,
        Quality::Min7,
        Quality::Dom7,
        Quality::Hdim7,
        Quality::Dim7,
    ];

    /// Chord tones as semitones above the root.
    pub fn intervals(self) -> &'static [u8] {
        match self {
            Quality::Maj => &[0, 4, 7],
            Quality::Min => &[0, 3, 7],
            Quality::Dim => &[0, 3, 6],
            Quality::Aug => &[0, 4, 8],
            Quality::Sus2 => &[0, 2, 7],
            Quality::Sus4 => &[0, 5, 7],
            Quality::Maj7 => &[0, 4, 7, 11],
            Quality::Min7 => &[0, 3, 7, 10],
            Quality::Dom7 => &[0, 4, 7, 10],
            Quality::Hdim7 => &[0, 3, 6, 10],
            Quality::Dim7 => &[0, 3, 6, 9],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Quality::Maj => "maj",
            Quality::Min => "min",
            Quality::Dim => "dim",
            Quality::Aug => "aug",
            Quality::Sus2 => "sus2",
            Quality::Sus4 => "sus4",
            Quality::Maj7 => "maj7",
            Quality::Min7 => "min7",
            Quality::Dom7 => "dom7",
            Quality::Hdim7 => "hdim7",
            Quality::Dim7 => "dim7",
        }
    }

    fn mask(self, root: u8) -> u16 {
        self.intervals().iter().fold(0, |m, &i| m | 1 << ((root + i) % 12))
    }
}

/// A (root, quality) pair or no chord; 12 × 11 + 1 = 133 labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct ChordLabel(Option<(u8, Quality)>);

impl ChordLabel {
    pub const NONE: ChordLabel = ChordLabel(None);
    pub const COUNT: usize = 133;

    pub fn new(root: u8, quality: Quality) -> Self {
        assert!(root < 12);
        Self(Some((root, quality)))
    }

    pub fn root(self) -> Option<u8> {
        self.0.map(|(r, _)| r)
    }

    pub fn quality(self) -> Option<Quality> {
        self.0.map(|(_, q)| q)
    }

    pub fn is_none(self) -> bool {
        self.0.is_none()
    }

    /// `root * 11 + quality`, with 132 for no chord.
    pub fn index(self) -> usize {
        match self.0 {
            Some((r, q)) => r as usize * Quality::ALL.len() + q as usize,
            None => Self::COUNT - 1,
        }
    }

    pub fn from_index(index: usize) -> Option<Self> {
        match index {
            i if i < Self::COUNT - 1 => Some(Self::new((i / 11) as u8, Quality::ALL[i % 11])),
            i if i == Self::COUNT - 1 => Some(Self::NONE),
            _ => None,
        }
    }

    pub fn transpose(self, semitones: i32) -> Self {
        Self(self.0.map(|(r, q)| ((r as i32 + semitones).rem_euclid(12) as u8, q)))
    }
}

impl fmt::Display for ChordLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const NAMES: [&str; 12] = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"];
        match self.0 {
            Some((r, q)) => write!(f, "{}:{}", NAMES[r as usize], q.name()),
            None => f.write_str("N"),
        }
    }
}

const NON_CHORD_PENALTY: f64 = 0.5;
const MIN_SCORE: f64 = 2.0;

/// Best-matching chord template for the pitches sounding in one beat.
///
/// Score = matched template tones − 0.5 × pitch classes outside the template.
/// Equal scores prefer the root closest above the lowest sounding pitch
/// class, then the earlier quality; this keeps detection covariant under
/// transposition even for symmetric chords (aug, dim7).
pub fn detect_chord(notes: &[Note]) -> ChordLabel {
    let mut present: u16 = 0;
    for n in notes {
        present |= 1 << (n.pitch % 12);
    }
    if present.count_ones() < 2 {
        return ChordLabel::NONE;
    }
    let bass = notes.iter().map(|n| n.pitch).min().map_or(0, |p| p % 12);
    let mut best: Option<(f64, u8, usize, ChordLabel)> = None;
    for offset in 0..12u8 {
        let root = (bass + offset) % 12;
        for (qi, &q) in Quality::ALL.iter().enumerate() {
            let mask = q.mask(root);
            let matched = (present & mask).count_ones() as f64;
            let outside = (present & !mask).count_ones() as f64;
            let score = matched - NON_CHORD_PENALTY * outside;
            let better = match best {
                None => true,
                Some((s, o, bq, _)) => score > s || (score == s && (offset, qi) < (o, bq)),
            };
            if better {
                best = Some((score, offset, qi, ChordLabel::new(root, q)));
            }
        }
    }
    match best {
        Some((score, _, _, label)) if score >= MIN_SCORE => label,
        _ => ChordLabel::NONE,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn notes(pitches: &[u8]) -> Vec<Note> {
        pitches.iter().map(|&p| Note::new(0, p, 48, 80)).collect()
    }

    #[test]
    fn triads_and_sevenths() {
        assert_eq!(detect_chord(&notes(&[60, 64, 67])), ChordLabel::new(0, Quality::Maj));
        // G Bb Db F
        assert_eq!(detect_chord(&notes(&[55, 58, 61, 65])), ChordLabel::new(7, Quality::Hdim7));
        assert_eq!(detect_chord(&notes(&[57, 60, 64, 67])), ChordLabel::new(9, Quality::Min7));
        assert_eq!(detect_chord(&notes(&[62, 67, 71, 65])), ChordLabel::new(7, Quality::Dom7));
        assert_eq!(ChordLabel::new(7, Quality::Hdim7).to_string(), "G:hdim7");
    }

    #[test]
    fn below_threshold() {
        assert_eq!(detect_chord(&notes(&[57])), ChordLabel::NONE);
        assert_eq!(detect_chord(&notes(&[57, 69])), ChordLabel::NONE);
        assert_eq!(detect_chord(&[]), ChordLabel::NONE);
        // C and C# are only ever both chord tones of C#:maj7
        assert_eq!(detect_chord(&notes(&[60, 61])), ChordLabel::new(1, Quality::Maj7));
        // a bare fifth matches two tones of several templates
        assert_eq!(detect_chord(&notes(&[48, 55])), ChordLabel::new(0, Quality::Maj));
    }

    #[test]
    fn symmetric_chords_follow_the_bass() {
        assert_eq!(detect_chord(&notes(&[60, 64, 68])), ChordLabel::new(0, Quality::Aug));
        assert_eq!(detect_chord(&notes(&[64, 68, 72])), ChordLabel::new(4, Quality::Aug));
    }

    #[test]
    fn label_indexing() {
        let mut seen = std::collections::HashSet::new();
        for i in 0..ChordLabel::COUNT {
            let l = ChordLabel::from_index(i).unwrap();
            assert_eq!(l.index(), i);
            seen.insert(l);
        }
        assert_eq!(seen.len(), 133);
        assert!(ChordLabel::from_index(133).is_none());
        assert_eq!(ChordLabel::NONE.index(), 132);
    }

    proptest! {
        #[test]
        fn transposition_covariant(pitches in prop::collection::vec(20u8..100, 0..7), shift in -12i32..=12) {
            let base = notes(&pitches);
            let moved: Vec<Note> = base.iter().map(|n| Note { pitch: (n.pitch as i32 + shift) as u8, ..*n }).collect();
            prop_assert_eq!(detect_chord(&moved), detect_chord(&base).transpose(shift));
        }
    }
}
