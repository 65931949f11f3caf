use crate::score::{Instrument, Note, Song, Track, DRUM_DURATION, DRUM_VELOCITY, TICKS_PER_BAR};

use super::{
    drum_key, velocity_bin, velocity_from_bin, TokenKind, TokenizeError, Vocab, BOS, EOS, PAD,
};

/// One padded token sequence per track plus the bar bookkeeping the model
/// needs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrackTokenSeqs {
    pub seqs: Vec<Vec<u32>>,
    /// Bar number of every position; framing tokens before the first bar map
    /// to bar 0 and EOS/PAD to the last bar.
    pub bar_index: Vec<Vec<usize>>,
    /// Index of each bar token, per track.
    pub bar_token_positions: Vec<Vec<usize>>,
    /// Unpadded length per track.
    pub lengths: Vec<usize>,
}

impl TrackTokenSeqs {
    /// Pad raw per-track id lists and derive bar metadata. Merged ids count
    /// as note tokens.
    pub fn from_ids(mut seqs: Vec<Vec<u32>>, vocab: &Vocab) -> Self {
        let lengths: Vec<usize> = seqs
            .iter()
            .map(|s| s.iter().rposition(|&id| id != PAD).map_or(0, |p| p + 1))
            .collect();
        let t = lengths.iter().copied().max().unwrap_or(0);
        let mut bar_index = Vec::with_capacity(seqs.len());
        let mut bar_token_positions = Vec::with_capacity(seqs.len());
        for seq in &mut seqs {
            seq.resize(t, PAD);
            let (bars, positions) = annotate_bars(seq, vocab);
            bar_index.push(bars);
            bar_token_positions.push(positions);
        }
        Self { seqs, bar_index, bar_token_positions, lengths }
    }

    pub fn n_tracks(&self) -> usize {
        self.seqs.len()
    }

    pub fn len(&self) -> usize {
        self.seqs.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Longest unpadded track, the sequence length of the song.
    pub fn max_len(&self) -> usize {
        self.lengths.iter().copied().max().unwrap_or(0)
    }

    pub fn unpadded(&self, track: usize) -> &[u32] {
        &self.seqs[track][..self.lengths[track]]
    }

    pub fn n_bars(&self) -> usize {
        self.bar_token_positions.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// Per-position bar numbers and bar-token indices for one id sequence.
pub(crate) fn annotate_bars(seq: &[u32], vocab: &Vocab) -> (Vec<usize>, Vec<usize>) {
    let positions: Vec<usize> = seq
        .iter()
        .enumerate()
        .filter(|(_, &id)| vocab.kind(id).is_some_and(TokenKind::is_bar))
        .map(|(k, _)| k)
        .collect();
    let last_bar = positions.len().saturating_sub(1);
    let mut bars = Vec::with_capacity(seq.len());
    let mut current: Option<usize> = None;
    for &id in seq {
        match vocab.kind(id) {
            Some(k) if k.is_bar() => current = Some(current.map_or(0, |b| b + 1)),
            Some(TokenKind::Eos) | Some(TokenKind::Pad) => current = Some(last_bar),
            _ => {}
        }
        bars.push(current.unwrap_or(0));
    }
    (bars, positions)
}

/// The song as the tokenizer will reproduce it: onsets on the position grid,
/// durations on the mesh, velocities at bin midpoints, drum keys folded.
pub fn canonicalize(song: &Song, vocab: &Vocab) -> Song {
    let tracks = song
        .tracks
        .iter()
        .map(|t| {
            let notes = t
                .notes
                .iter()
                .map(|n| {
                    let bar = n.onset / TICKS_PER_BAR;
                    let onset = bar * TICKS_PER_BAR + vocab.position_of(n.onset % TICKS_PER_BAR);
                    if t.is_drum() {
                        Note::new(onset, drum_key(n.pitch), DRUM_DURATION, DRUM_VELOCITY)
                    } else {
                        let duration = vocab.duration_ticks(vocab.duration_class(n.duration));
                        Note::new(onset, n.pitch, duration, velocity_from_bin(velocity_bin(n.velocity)))
                    }
                })
                .collect();
            let mut track = Track { instrument: t.instrument, program: None, name: None, notes };
            track.normalize_order();
            track
        })
        .collect();
    Song::new(tracks, song.n_bars)
}

/// Encode a quantized song as parallel per-track sequences:
/// `Instrument BOS (Bar (Position note…)…)… EOS PAD…`.
pub fn tokenize_song(song: &Song, vocab: &Vocab) -> Result<TrackTokenSeqs, TokenizeError> {
    if song.tracks.len() > 4 {
        return Err(TokenizeError::TooManyTracks(song.tracks.len()));
    }
    let limit = song.n_bars as u32 * TICKS_PER_BAR;
    if let Some(n) = song.tracks.iter().flat_map(|t| &t.notes).find(|n| n.onset >= limit) {
        return Err(TokenizeError::NoteOutOfRange { onset: n.onset, n_bars: song.n_bars });
    }
    let song = canonicalize(song, vocab);
    let bar_normal = vocab.must(TokenKind::BarNormal, 0);
    let bar_empty = vocab.must(TokenKind::BarEmpty, 0);

    let seqs = song
        .tracks
        .iter()
        .map(|track| {
            let mut seq = vec![vocab.instrument_id(track.instrument), BOS];
            let mut notes = track.notes.iter().peekable();
            for bar in 0..song.n_bars as u32 {
                let end = (bar + 1) * TICKS_PER_BAR;
                if notes.peek().is_none_or(|n| n.onset >= end) {
                    seq.push(bar_empty);
                    continue;
                }
                seq.push(bar_normal);
                let mut position = None;
                while let Some(n) = notes.next_if(|n| n.onset < end) {
                    let pos = n.onset - bar * TICKS_PER_BAR;
                    if position != Some(pos) {
                        seq.push(vocab.must(TokenKind::Position, pos));
                        position = Some(pos);
                    }
                    if track.is_drum() {
                        seq.push(vocab.must(TokenKind::PitchDrum, u32::from(n.pitch)));
                    } else {
                        seq.push(vocab.must(TokenKind::Pitch, u32::from(n.pitch)));
                        seq.push(vocab.must(TokenKind::Duration, vocab.duration_class(n.duration)));
                        seq.push(vocab.must(TokenKind::Velocity, velocity_bin(n.velocity)));
                    }
                }
            }
            seq.push(EOS);
            seq
        })
        .collect();
    Ok(TrackTokenSeqs::from_ids(seqs, vocab))
}

/// Rebuild a song from base-vocabulary sequences. Drums come back as 16th
/// notes at velocity 64, velocities at their bin midpoint.
pub fn detokenize(seqs: &TrackTokenSeqs, vocab: &Vocab) -> Result<Song, TokenizeError> {
    let mut tracks = Vec::with_capacity(seqs.n_tracks());
    let mut n_bars = 0;
    for (ti, seq) in seqs.seqs.iter().enumerate() {
        let (track, bars) = decode_track(ti, seq, vocab)?;
        n_bars = n_bars.max(bars);
        tracks.push(track);
    }
    Ok(Song::new(tracks, n_bars))
}

fn decode_track(track: usize, seq: &[u32], vocab: &Vocab) -> Result<(Track, usize), TokenizeError> {
    let fail = |index: usize, reason: &str| TokenizeError::MalformedSequence {
        track,
        index,
        reason: reason.to_string(),
    };
    let token = |index: usize| vocab.token(seq[index]).ok_or_else(|| fail(index, "unknown id"));

    let first = seq.first().ok_or_else(|| fail(0, "empty sequence"))?;
    let head = vocab.token(*first).ok_or_else(|| fail(0, "unknown id"))?;
    if head.kind != TokenKind::Instrument {
        return Err(fail(0, "sequence must start with an Instrument token"));
    }
    let instrument = Instrument::from_index(head.value as usize).ok_or_else(|| fail(0, "bad instrument"))?;
    if seq.get(1) != Some(&BOS) {
        return Err(fail(1, "expected BOS after the Instrument token"));
    }

    let mut notes = Vec::new();
    let mut bar: Option<u32> = None;
    let mut bar_is_empty = false;
    let mut position: Option<u32> = None;
    let mut k = 2;
    while k < seq.len() {
        let t = token(k)?;
        match t.kind {
            TokenKind::Eos => {
                if seq[k + 1..].iter().any(|&id| id != PAD) {
                    return Err(fail(k + 1, "tokens after EOS"));
                }
                break;
            }
            TokenKind::Pad => {
                if seq[k..].iter().any(|&id| id != PAD) {
                    return Err(fail(k, "PAD before end of sequence"));
                }
                break;
            }
            TokenKind::BarNormal | TokenKind::BarEmpty => {
                bar = Some(bar.map_or(0, |b| b + 1));
                bar_is_empty = t.kind == TokenKind::BarEmpty;
                position = None;
            }
            TokenKind::Position => {
                if bar.is_none() {
                    return Err(fail(k, "Position before any Bar"));
                }
                if bar_is_empty {
                    return Err(fail(k, "Position inside an empty bar"));
                }
                if position.is_some_and(|p| t.value < p) {
                    return Err(fail(k, "Position moves backwards"));
                }
                position = Some(t.value);
            }
            TokenKind::PitchDrum | TokenKind::Pitch => {
                let (Some(b), Some(p)) = (bar, position) else {
                    return Err(fail(k, "note token before any Position"));
                };
                let onset = b * TICKS_PER_BAR + p;
                if t.kind == TokenKind::PitchDrum {
                    if !instrument.is_drum() {
                        return Err(fail(k, "drum token in a pitched track"));
                    }
                    notes.push(Note::new(onset, t.value as u8, DRUM_DURATION, DRUM_VELOCITY));
                    k += 1;
                    continue;
                }
                if instrument.is_drum() {
                    return Err(fail(k, "pitched token in the drum track"));
                }
                let dur = seq.get(k + 1).and_then(|&id| vocab.token(id));
                let vel = seq.get(k + 2).and_then(|&id| vocab.token(id));
                match (dur, vel) {
                    (Some(d), Some(v)) if d.kind == TokenKind::Duration && v.kind == TokenKind::Velocity => {
                        notes.push(Note::new(
                            onset,
                            t.value as u8,
                            vocab.duration_ticks(d.value),
                            velocity_from_bin(v.value),
                        ));
                        k += 3;
                        continue;
                    }
                    _ => return Err(fail(k + 1, "expected Duration and Velocity after Pitch")),
                }
            }
            TokenKind::Duration | TokenKind::Velocity => {
                return Err(fail(k, "Duration/Velocity without a preceding Pitch"))
            }
            TokenKind::Instrument | TokenKind::Bos => return Err(fail(k, "framing token inside the body")),
            TokenKind::Merged => return Err(fail(k, "merged token; decode BPE first")),
        }
        k += 1;
    }
    let n_bars = bar.map_or(0, |b| b as usize + 1);
    Ok((Track::new(instrument, notes), n_bars))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::Token;

    fn names(vocab: &Vocab, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&id| vocab.token(id).unwrap().to_string()).collect()
    }

    #[test]
    fn single_piano_note() {
        let v = Vocab::default_vocab();
        let song = Song::new(vec![Track::new(Instrument::Piano, vec![Note::new(0, 60, 48, 64)])], 3);
        let seqs = tokenize_song(&song, &v).unwrap();
        assert_eq!(
            names(&v, seqs.unpadded(0)),
            [
                "Instrument:1", "BOS:0", "BarNormal:0", "Position:0", "Pitch:60", "Duration:11", "Velocity:16",
                "BarEmpty:0", "BarEmpty:0", "EOS:0"
            ]
        );
        assert_eq!(v.duration_ticks(11), 48);
        assert_eq!(seqs.bar_token_positions[0], vec![2, 7, 8]);
        assert_eq!(seqs.bar_index[0], vec![0, 0, 0, 0, 0, 0, 0, 1, 2, 2]);
        let back = detokenize(&seqs, &v).unwrap();
        assert_eq!(back.tracks[0].notes, vec![Note::new(0, 60, 48, 66)]);
        assert_eq!(back.n_bars, 3);
    }

    #[test]
    fn drum_notes_are_single_tokens() {
        let v = Vocab::default_vocab();
        let song = Song::new(
            vec![Track::new(Instrument::Drum, vec![Note::new(0, 36, 12, 64), Note::new(0, 42, 12, 64)])],
            1,
        );
        let seqs = tokenize_song(&song, &v).unwrap();
        assert_eq!(
            names(&v, seqs.unpadded(0)),
            ["Instrument:0", "BOS:0", "BarNormal:0", "Position:0", "PitchDrum:36", "PitchDrum:42", "EOS:0"]
        );
    }

    #[test]
    fn empty_track_and_padding() {
        let v = Vocab::default_vocab();
        let song = Song::new(
            vec![
                Track::new(Instrument::Bass, vec![]),
                Track::new(Instrument::Piano, vec![Note::new(200, 60, 48, 64)]),
            ],
            2,
        );
        let seqs = tokenize_song(&song, &v).unwrap();
        assert_eq!(names(&v, seqs.unpadded(0)), ["Instrument:3", "BOS:0", "BarEmpty:0", "BarEmpty:0", "EOS:0"]);
        assert_eq!(seqs.len(), 9);
        assert_eq!(seqs.lengths, vec![5, 9]);
        assert_eq!(&seqs.seqs[0][5..], &[PAD; 4]);
        assert_eq!(seqs.bar_index[0][5..], [1, 1, 1, 1]);
        let back = detokenize(&seqs, &v).unwrap();
        assert!(back.tracks[0].notes.is_empty());
        assert_eq!(back.tracks[1].notes, vec![Note::new(200, 60, 48, 66)]);
    }

    #[test]
    fn out_of_range_and_too_many_tracks() {
        let v = Vocab::default_vocab();
        let song = Song::new(vec![Track::new(Instrument::Piano, vec![Note::new(192, 60, 48, 64)])], 1);
        assert_eq!(tokenize_song(&song, &v), Err(TokenizeError::NoteOutOfRange { onset: 192, n_bars: 1 }));
        let five = Song::new(vec![Track::new(Instrument::Piano, vec![]); 5], 1);
        assert_eq!(tokenize_song(&five, &v), Err(TokenizeError::TooManyTracks(5)));
    }

    #[test]
    fn grammar_violations() {
        let v = Vocab::default_vocab();
        let id = |k, val| v.id(Token::new(k, val)).unwrap();
        let bad = vec![
            id(TokenKind::Instrument, 1),
            BOS,
            id(TokenKind::BarNormal, 0),
            id(TokenKind::Pitch, 60),
            id(TokenKind::Duration, 11),
            id(TokenKind::Velocity, 16),
            EOS,
        ];
        let err = detokenize(&TrackTokenSeqs::from_ids(vec![bad], &v), &v).unwrap_err();
        assert!(matches!(err, TokenizeError::MalformedSequence { track: 0, index: 3, .. }));

        let no_bar = vec![id(TokenKind::Instrument, 1), BOS, id(TokenKind::Position, 0), EOS];
        let err = detokenize(&TrackTokenSeqs::from_ids(vec![no_bar], &v), &v).unwrap_err();
        assert!(matches!(err, TokenizeError::MalformedSequence { index: 2, .. }));

        let unknown = vec![id(TokenKind::Instrument, 1), BOS, 9999, EOS];
        let err = detokenize(&TrackTokenSeqs::from_ids(vec![unknown], &v), &v).unwrap_err();
        assert!(matches!(err, TokenizeError::MalformedSequence { index: 2, .. }));
    }

    #[test]
    fn all_empty_bars_decode_to_empty_track() {
        let v = Vocab::default_vocab();
        let empty = v.must(TokenKind::BarEmpty, 0);
        let seq = vec![v.instrument_id(Instrument::Guitar), BOS, empty, empty, empty, EOS];
        let song = detokenize(&TrackTokenSeqs::from_ids(vec![seq], &v), &v).unwrap();
        assert_eq!(song.n_bars, 3);
        assert!(song.tracks[0].notes.is_empty());
        assert_eq!(song.tracks[0].instrument, Instrument::Guitar);
    }
}
