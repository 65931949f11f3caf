//! Token vocabulary and the per-track (REMI_Track) and interleaved (REMI+)
//! encodings of a [`Song`](crate::score::Song).

mod io;
mod remi_plus;
mod remi_track;
mod stats;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::score::{Instrument, TICKS_PER_BAR};

pub use io::{read_token_corpus, write_token_corpus, TokenRecord};
pub use remi_plus::tokenize_remi_plus;
pub use remi_track::{canonicalize, detokenize, tokenize_song, TrackTokenSeqs};
pub use stats::{corpus_stats, StatsEntry, TokStats};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;

pub const DEFAULT_POSITION_GRID: u32 = 4;
pub const VELOCITY_BINS: u32 = 32;
pub const MAX_DURATION: u32 = 384;

/// The 31 drum keys that get their own token.
pub const DRUM_KEYS: [u8; 31] = [
    25, 26, 27, 28, 29, 31, 35, 36, 37, 38, 39, 40, 41, 42, 43, 44, 45, 46, 47, 48, 49, 50, 51,
    52, 53, 54, 55, 56, 57, 58, 59,
];

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TokenizeError {
    #[error("position grid {0} must be a positive divisor of {TICKS_PER_BAR}")]
    InvalidGrid(u32),
    #[error("duration mesh must be non-empty, strictly ascending and at most {MAX_DURATION}")]
    InvalidMesh,
    #[error("note at tick {onset} lies beyond bar {n_bars}")]
    NoteOutOfRange { onset: u32, n_bars: usize },
    #[error("at most 4 tracks can be tokenized, got {0}")]
    TooManyTracks(usize),
    #[error("malformed sequence at track {track}, index {index}: {reason}")]
    MalformedSequence { track: usize, index: usize, reason: String },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("token file line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TokenKind {
    Pad,
    Bos,
    Eos,
    Instrument,
    BarNormal,
    BarEmpty,
    Position,
    Pitch,
    PitchDrum,
    Duration,
    Velocity,
    Merged,
}

impl TokenKind {
    const NAMES: [(TokenKind, &'static str); 12] = [
        (TokenKind::Pad, "PAD"),
        (TokenKind::Bos, "BOS"),
        (TokenKind::Eos, "EOS"),
        (TokenKind::Instrument, "Instrument"),
        (TokenKind::BarNormal, "BarNormal"),
        (TokenKind::BarEmpty, "BarEmpty"),
        (TokenKind::Position, "Position"),
        (TokenKind::Pitch, "Pitch"),
        (TokenKind::PitchDrum, "PitchDrum"),
        (TokenKind::Duration, "Duration"),
        (TokenKind::Velocity, "Velocity"),
        (TokenKind::Merged, "Merged"),
    ];

    /// Pitch, drum, duration and velocity tokens (and merges of them).
    pub fn is_note(self) -> bool {
        matches!(
            self,
            TokenKind::Pitch | TokenKind::PitchDrum | TokenKind::Duration | TokenKind::Velocity | TokenKind::Merged
        )
    }

    pub fn is_bar(self) -> bool {
        matches!(self, TokenKind::BarNormal | TokenKind::BarEmpty)
    }

    pub fn name(self) -> &'static str {
        Self::NAMES.iter().find(|(k, _)| *k == self).map(|(_, n)| *n).unwrap_or("?")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Token {
    pub kind: TokenKind,
    pub value: u32,
}

impl Token {
    pub const fn new(kind: TokenKind, value: u32) -> Self {
        Self { kind, value }
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.name(), self.value)
    }
}

impl FromStr for Token {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, value) = s.split_once(':').ok_or_else(|| format!("bad token {s:?}"))?;
        let kind = TokenKind::NAMES
            .iter()
            .find(|(_, n)| *n == kind)
            .map(|(k, _)| *k)
            .ok_or_else(|| format!("unknown token kind {kind:?}"))?;
        let value = value.parse().map_err(|_| format!("bad token value in {s:?}"))?;
        Ok(Token { kind, value })
    }
}

/// Dense token ↔ id bijection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<Token>,
    ids: HashMap<Token, u32>,
    position_grid: u32,
    duration_mesh: Vec<u32>,
    base_size: usize,
}

/// Fine steps for short notes, coarser steps up to two bars.
pub fn default_duration_mesh() -> Vec<u32> {
    (1..=12)
        .map(|k| k * 4)
        .chain((5..=16).map(|k| k * 12))
        .chain((9..=16).map(|k| k * 24))
        .collect()
}

/// Vocabulary for a position grid step (in ticks) and duration mesh.
pub fn build_vocab(position_grid: u32, duration_mesh: &[u32]) -> Result<Vocab, TokenizeError> {
    if position_grid == 0 || !TICKS_PER_BAR.is_multiple_of(position_grid) {
        return Err(TokenizeError::InvalidGrid(position_grid));
    }
    let ascending = duration_mesh.windows(2).all(|w| w[0] < w[1]);
    if duration_mesh.is_empty() || !ascending || duration_mesh[0] == 0 || *duration_mesh.last().unwrap() > MAX_DURATION {
        return Err(TokenizeError::InvalidMesh);
    }
    use TokenKind::*;
    let mut tokens = vec![Token::new(Pad, 0), Token::new(Bos, 0), Token::new(Eos, 0)];
    tokens.extend(crate::score::Instrument::ALL.iter().map(|i| Token::new(TokenKind::Instrument, i.index() as u32)));
    tokens.push(Token::new(BarNormal, 0));
    tokens.push(Token::new(BarEmpty, 0));
    tokens.extend((0..TICKS_PER_BAR).step_by(position_grid as usize).map(|p| Token::new(Position, p)));
    tokens.extend((0..128).map(|p| Token::new(Pitch, p)));
    tokens.extend(DRUM_KEYS.iter().map(|&k| Token::new(PitchDrum, u32::from(k))));
    tokens.extend((0..duration_mesh.len() as u32).map(|d| Token::new(Duration, d)));
    tokens.extend((0..VELOCITY_BINS).map(|v| Token::new(Velocity, v)));
    Ok(Vocab::from_tokens(tokens, position_grid, duration_mesh.to_vec()))
}

impl Vocab {
    fn from_tokens(tokens: Vec<Token>, position_grid: u32, duration_mesh: Vec<u32>) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (*t, i as u32)).collect();
        let base_size = tokens.iter().filter(|t| t.kind != TokenKind::Merged).count();
        Self { tokens, ids, position_grid, duration_mesh, base_size }
    }

    /// Grid 4, the default 32-value mesh.
    pub fn default_vocab() -> Self {
        build_vocab(DEFAULT_POSITION_GRID, &default_duration_mesh()).expect("default vocab is valid")
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    /// Size without merged tokens.
    pub fn base_size(&self) -> usize {
        self.base_size
    }

    pub fn position_grid(&self) -> u32 {
        self.position_grid
    }

    pub fn duration_mesh(&self) -> &[u32] {
        &self.duration_mesh
    }

    pub fn id(&self, token: Token) -> Option<u32> {
        self.ids.get(&token).copied()
    }

    pub fn token(&self, id: u32) -> Option<Token> {
        self.tokens.get(id as usize).copied()
    }

    pub fn kind(&self, id: u32) -> Option<TokenKind> {
        self.token(id).map(|t| t.kind)
    }

    pub fn count(&self, kind: TokenKind) -> usize {
        self.tokens.iter().filter(|t| t.kind == kind).count()
    }

    /// Id of a token that must exist in this vocabulary.
    pub(crate) fn must(&self, kind: TokenKind, value: u32) -> u32 {
        self.ids[&Token::new(kind, value)]
    }

    pub fn instrument_id(&self, instrument: Instrument) -> u32 {
        self.must(TokenKind::Instrument, instrument.index() as u32)
    }

    /// Copy of this vocabulary with `n` merged tokens appended.
    pub fn with_merges(&self, n: usize) -> Vocab {
        let mut tokens = self.tokens[..self.base_size].to_vec();
        tokens.extend((0..n as u32).map(|m| Token::new(TokenKind::Merged, m)));
        Vocab::from_tokens(tokens, self.position_grid, self.duration_mesh.clone())
    }

    /// Duration mesh index closest to `ticks`; ties go to the shorter value.
    pub fn duration_class(&self, ticks: u32) -> u32 {
        let ticks = ticks.min(MAX_DURATION);
        let mut best = 0;
        for (i, &d) in self.duration_mesh.iter().enumerate() {
            if d.abs_diff(ticks) < self.duration_mesh[best].abs_diff(ticks) {
                best = i;
            }
        }
        best as u32
    }

    pub fn duration_ticks(&self, class: u32) -> u32 {
        self.duration_mesh[class as usize]
    }

    /// Onset within a bar snapped to the nearest grid step (kept inside the bar).
    pub fn position_of(&self, tick_in_bar: u32) -> u32 {
        let g = self.position_grid;
        ((tick_in_bar + g / 2) / g * g).min(TICKS_PER_BAR - g)
    }

    /// `<id> <kind>:<value>` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            out.push_str(&format!("{i} {t}\n"));
        }
        out
    }

    /// Parse a vocabulary file. The position grid and duration mesh cannot be
    /// recovered from token values alone, so they are passed in and checked.
    pub fn from_text(text: &str, position_grid: u32, duration_mesh: &[u32]) -> Result<Vocab, TokenizeError> {
        let expected = build_vocab(position_grid, duration_mesh)?;
        let mut tokens = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let err = |message: String| TokenizeError::Parse { line: i + 1, message };
            let (id, tok) = line.split_once(' ').ok_or_else(|| err("missing separator".into()))?;
            if id.parse::<usize>().ok() != Some(tokens.len()) {
                return Err(err(format!("ids must be dense, expected {}", tokens.len())));
            }
            tokens.push(tok.parse::<Token>().map_err(err)?);
        }
        let vocab = Vocab::from_tokens(tokens, position_grid, duration_mesh.to_vec());
        if vocab.tokens[..vocab.base_size] != expected.tokens[..] {
            return Err(TokenizeError::Parse { line: 0, message: "base tokens do not match the configuration".into() });
        }
        Ok(vocab)
    }
}

/// 32 uniform velocity bins of width 4.
pub fn velocity_bin(velocity: u8) -> u32 {
    (u32::from(velocity) * VELOCITY_BINS / 128).min(VELOCITY_BINS - 1)
}

pub fn velocity_from_bin(bin: u32) -> u8 {
    (bin * 4 + 2).min(127) as u8
}

/// Nearest tokenizable drum key; ties go to the lower key.
pub fn drum_key(key: u8) -> u8 {
    *DRUM_KEYS
        .iter()
        .min_by_key(|&&k| (k.abs_diff(key), k))
        .expect("non-empty key set")
}
