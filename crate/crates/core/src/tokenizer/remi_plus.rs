use crate::score::{Song, TICKS_PER_BAR};

use super::{canonicalize, velocity_bin, TokenKind, TokenizeError, Vocab};

/// Single interleaved sequence over all tracks: per bar a Bar token, per
/// onset a Position token, per note its Instrument, Pitch (or drum key),
/// Duration and Velocity. Notes are ordered by (onset, track, pitch). Used
/// for length statistics only; no BOS/EOS framing is added.
pub fn tokenize_remi_plus(song: &Song, vocab: &Vocab) -> Result<Vec<u32>, TokenizeError> {
    if song.tracks.len() > 4 {
        return Err(TokenizeError::TooManyTracks(song.tracks.len()));
    }
    let limit = song.n_bars as u32 * TICKS_PER_BAR;
    if let Some(n) = song.tracks.iter().flat_map(|t| &t.notes).find(|n| n.onset >= limit) {
        return Err(TokenizeError::NoteOutOfRange { onset: n.onset, n_bars: song.n_bars });
    }
    let song = canonicalize(song, vocab);
    let mut events: Vec<(u32, usize, u8, u32, u8)> = song
        .tracks
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| t.notes.iter().map(move |n| (n.onset, ti, n.pitch, n.duration, n.velocity)))
        .collect();
    events.sort();

    let bar = vocab.must(TokenKind::BarNormal, 0);
    let mut out = Vec::with_capacity(1 + events.len() * 5);
    let mut events = events.into_iter().peekable();
    for b in 0..song.n_bars as u32 {
        out.push(bar);
        let end = (b + 1) * TICKS_PER_BAR;
        let mut position = None;
        while let Some((onset, ti, pitch, duration, velocity)) = events.next_if(|e| e.0 < end) {
            let pos = onset - b * TICKS_PER_BAR;
            if position != Some(pos) {
                out.push(vocab.must(TokenKind::Position, pos));
                position = Some(pos);
            }
            let track = &song.tracks[ti];
            out.push(vocab.instrument_id(track.instrument));
            if track.is_drum() {
                out.push(vocab.must(TokenKind::PitchDrum, u32::from(pitch)));
            } else {
                out.push(vocab.must(TokenKind::Pitch, u32::from(pitch)));
                out.push(vocab.must(TokenKind::Duration, vocab.duration_class(duration)));
                out.push(vocab.must(TokenKind::Velocity, velocity_bin(velocity)));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::{Instrument, Note, Track};

    #[test]
    fn single_note_is_six_tokens() {
        let v = Vocab::default_vocab();
        let song = Song::new(vec![Track::new(Instrument::Bass, vec![Note::new(0, 40, 48, 80)])], 1);
        assert_eq!(tokenize_remi_plus(&song, &v).unwrap().len(), 6);
    }

    #[test]
    fn empty_bar_is_one_token() {
        let v = Vocab::default_vocab();
        let song = Song::new(vec![Track::new(Instrument::Bass, vec![])], 1);
        assert_eq!(tokenize_remi_plus(&song, &v).unwrap(), vec![v.must(TokenKind::BarNormal, 0)]);
    }

    #[test]
    fn notes_interleave_by_onset_then_track() {
        let v = Vocab::default_vocab();
        let song = Song::new(
            vec![
                Track::new(Instrument::Drum, vec![Note::new(48, 36, 12, 64)]),
                Track::new(Instrument::Bass, vec![Note::new(0, 40, 48, 80), Note::new(48, 43, 48, 80)]),
            ],
            1,
        );
        let ids = tokenize_remi_plus(&song, &v).unwrap();
        let kinds: Vec<TokenKind> = ids.iter().map(|&i| v.kind(i).unwrap()).collect();
        let expected = {
            use TokenKind::*;
            [
                BarNormal, Position, Instrument, Pitch, Duration, Velocity, Position, Instrument, PitchDrum,
                Instrument, Pitch, Duration, Velocity,
            ]
        };
        assert_eq!(kinds, expected);
    }
}
