use super::TokenizeError;

/// Token counts of one song under some representation.
#[derive(Clone, Debug, PartialEq)]
pub struct StatsEntry {
    /// Unpadded length of each parallel sequence (one entry for single-sequence
    /// representations).
    pub lengths: Vec<usize>,
    pub notes: usize,
    pub beats: usize,
}

impl StatsEntry {
    /// Length of the song: the longest of its parallel sequences.
    pub fn song_len(&self) -> usize {
        self.lengths.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokStats {
    pub vocab_size: usize,
    pub tok_per_beat: f64,
    pub tok_per_note: f64,
    pub avg_len: f64,
    pub songs: usize,
}

pub fn corpus_stats(entries: &[StatsEntry], vocab_size: usize) -> Result<TokStats, TokenizeError> {
    if entries.is_empty() {
        return Err(TokenizeError::EmptyCorpus);
    }
    let tokens: usize = entries.iter().map(StatsEntry::song_len).sum();
    let notes: usize = entries.iter().map(|e| e.notes).sum();
    let beats: usize = entries.iter().map(|e| e.beats).sum();
    let ratio = |den: usize| if den == 0 { 0.0 } else { tokens as f64 / den as f64 };
    Ok(TokStats {
        vocab_size,
        tok_per_beat: ratio(beats),
        tok_per_note: ratio(notes),
        avg_len: tokens as f64 / entries.len() as f64,
        songs: entries.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_is_max_over_tracks() {
        let e = StatsEntry { lengths: vec![10, 8, 6, 6], notes: 5, beats: 4 };
        let s = corpus_stats(&[e], 282).unwrap();
        assert_eq!(s.avg_len, 10.0);
    }

    #[test]
    fn per_beat_and_per_note() {
        let e = StatsEntry { lengths: vec![32], notes: 8, beats: 16 };
        let s = corpus_stats(&[e], 282).unwrap();
        assert_eq!(s.tok_per_beat, 2.0);
        assert_eq!(s.tok_per_note, 4.0);
        assert_eq!(corpus_stats(&[], 1), Err(TokenizeError::EmptyCorpus));
    }
}
