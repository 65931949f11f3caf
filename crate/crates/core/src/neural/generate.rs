use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::Graph;
use super::{BandControlNet, NeuralError};
use crate::bpe::BpeModel;
use crate::features::FeatureGrid;
use crate::score::Instrument;
use crate::tokenizer::{TokenKind, TrackTokenSeqs, Vocab, BOS, EOS};

pub const DEFAULT_K_FRAC: f64 = 0.02;

/// `max(1, round(frac · V))`.
pub fn top_k_size(vocab_size: usize, frac: f64) -> Result<usize, NeuralError> {
    if vocab_size == 0 {
        return Err(NeuralError::DegenerateVocab);
    }
    Ok(((frac * vocab_size as f64).round() as usize).clamp(1, vocab_size))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateOptions {
    pub seed: u64,
    pub k_frac: f64,
    /// Cap on every track's length and on the draws spent on it; the
    /// model's `max_len` when `None`.
    pub max_len: Option<usize>,
    pub audit: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self { seed: 0, k_frac: DEFAULT_K_FRAC, max_len: None, audit: false }
    }
}

/// One sampling decision.
#[derive(Clone, Debug, PartialEq)]
pub struct AuditEntry {
    pub track: usize,
    pub step: usize,
    pub token: u32,
    /// The k most probable ids with their unrenormalized probabilities,
    /// most probable first.
    pub top_k: Vec<(u32, f64)>,
    /// Highest probability among the ids left out.
    pub best_excluded: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// Repaired sequences in the base vocabulary.
    pub seqs: TrackTokenSeqs,
    pub audit: Vec<AuditEntry>,
    /// Ids drawn from the sampler, kept or not.
    pub sampled: usize,
    /// Base tokens in the output, framing excluded.
    pub tokens: usize,
    pub seconds: f64,
}

struct TrackState {
    ids: Vec<u32>,
    bars: usize,
    empty_bar: bool,
    last_position: Option<u32>,
    draws: usize,
    done: bool,
}

/// Sample a piece with the same number of tracks and bars as `grid`.
/// `vocab` names the model's ids; `bpe` expands merged ids.
pub fn generate(
    model: &BandControlNet,
    grid: &FeatureGrid,
    instruments: &[Instrument],
    vocab: &Vocab,
    bpe: Option<&BpeModel>,
    opts: &GenerateOptions,
) -> Result<Generation, NeuralError> {
    let v = model.config.vocab_size;
    let k = top_k_size(v, opts.k_frac)?;
    let n_bars = grid.n_bars();
    let max_len = opts.max_len.unwrap_or(model.config.max_len).min(model.config.max_len);
    let start = Instant::now();
    let encoded = model.encode_grid(grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut tracks: Vec<TrackState> = instruments
        .iter()
        .map(|&inst| TrackState {
            ids: vec![vocab.instrument_id(inst), BOS],
            bars: 0,
            empty_bar: false,
            last_position: None,
            draws: 0,
            done: false,
        })
        .collect();
    let mut audit = Vec::new();
    let mut sampled = 0;
    let mut step = 0;
    let is_note = |id: u32| id as usize >= vocab.base_size() || vocab.kind(id).is_some_and(TokenKind::is_note);
    while tracks.iter().any(|t| !t.done) {
        let seqs = TrackTokenSeqs::from_ids(tracks.iter().map(|t| t.ids.clone()).collect(), vocab);
        let len = seqs.len();
        let mut g = Graph::new(&model.params);
        let states = model.forward(&mut g, grid, Some(&encoded), &seqs, instruments, len, None)?;
        for (i, track) in tracks.iter_mut().enumerate() {
            if track.done {
                continue;
            }
            let last = g.gather_rows(states[i], &[track.ids.len() - 1]);
            let logits = model.project_logits(&mut g, last, i);
            let probs = g.softmax(logits, None);
            if let Some(op) = g.nonfinite() {
                return Err(NeuralError::NonFinite(op));
            }
            let probs = &g.value(probs).data;
            let mut order: Vec<u32> = (0..v as u32).collect();
            order.sort_by(|&a, &b| probs[b as usize].total_cmp(&probs[a as usize]).then(a.cmp(&b)));
            let top = &order[..k];
            let mass: f64 = top.iter().map(|&id| probs[id as usize]).sum();
            let mut u = rng.gen::<f64>() * mass;
            let mut token = top[k - 1];
            for &id in top {
                u -= probs[id as usize];
                if u < 0.0 {
                    token = id;
                    break;
                }
            }
            sampled += 1;
            track.draws += 1;
            if opts.audit {
                audit.push(AuditEntry {
                    track: i,
                    step,
                    token,
                    top_k: top.iter().map(|&id| (id, probs[id as usize])).collect(),
                    best_excluded: order.get(k).map_or(0.0, |&id| probs[id as usize]),
                });
            }
            let kind = vocab.kind(token);
            match kind {
                Some(TokenKind::Eos) => track.done = true,
                Some(k @ (TokenKind::BarNormal | TokenKind::BarEmpty)) => {
                    if track.bars == n_bars {
                        track.done = true;
                    } else {
                        track.ids.push(token);
                        track.bars += 1;
                        track.empty_bar = k == TokenKind::BarEmpty;
                        track.last_position = None;
                    }
                }
                Some(TokenKind::Position) => {
                    let p = vocab.token(token).map(|t| t.value);
                    if track.bars > 0 && !track.empty_bar && track.last_position < p {
                        track.ids.push(token);
                        track.last_position = p;
                    }
                }
                _ if is_note(token) && track.last_position.is_some() => track.ids.push(token),
                _ => {}
            }
            if track.ids.len() + 1 >= max_len || track.draws >= max_len {
                track.done = true;
            }
        }
        step += 1;
    }
    let mut out = Vec::with_capacity(tracks.len());
    let mut tokens = 0;
    for (t, &inst) in tracks.iter().zip(instruments) {
        let ids = repair_track(&t.ids, inst, n_bars, vocab, bpe)?;
        tokens += ids.len() - 3;
        out.push(ids);
    }
    let base = vocab.with_merges(0);
    Ok(Generation {
        seqs: TrackTokenSeqs::from_ids(out, &base),
        audit,
        sampled,
        tokens,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Turn a sampled track into a well-formed base-vocabulary sequence with
/// exactly `n_bars` bars: merges are expanded, notes that do not fit the
/// track kind or are incomplete are dropped, positions without notes are
/// removed, noteless bars become empty bars and missing bars are appended.
pub fn repair_track(
    ids: &[u32],
    instrument: Instrument,
    n_bars: usize,
    vocab: &Vocab,
    bpe: Option<&BpeModel>,
) -> Result<Vec<u32>, NeuralError> {
    let base_size = vocab.base_size();
    let mut expanded = Vec::with_capacity(ids.len());
    for &id in ids {
        if (id as usize) < base_size {
            expanded.push(id);
        } else if let Some(b) = bpe {
            let parts = b.decode(&[id]).map_err(|_| NeuralError::IdOutOfVocab { id, vocab: b.vocab_size() })?;
            expanded.extend(parts);
        }
    }
    let bar_normal = vocab.id(crate::tokenizer::Token::new(TokenKind::BarNormal, 0)).expect("bar token");
    let bar_empty = vocab.id(crate::tokenizer::Token::new(TokenKind::BarEmpty, 0)).expect("empty bar token");
    let mut bars: Vec<Vec<(u32, Vec<u32>)>> = Vec::new();
    let mut k = 0;
    while k < expanded.len() {
        let id = expanded[k];
        match vocab.kind(id) {
            Some(TokenKind::BarNormal | TokenKind::BarEmpty) => bars.push(Vec::new()),
            Some(TokenKind::Position) => {
                if let Some(bar) = bars.last_mut() {
                    bar.push((id, Vec::new()));
                }
            }
            Some(TokenKind::PitchDrum) if instrument.is_drum() => {
                if let Some((_, notes)) = bars.last_mut().and_then(|b| b.last_mut()) {
                    notes.push(id);
                }
            }
            Some(TokenKind::Pitch) if !instrument.is_drum() => {
                let triple = expanded.get(k..k + 3).map(|w| (vocab.kind(w[1]), vocab.kind(w[2])));
                if triple == Some((Some(TokenKind::Duration), Some(TokenKind::Velocity))) {
                    if let Some((_, notes)) = bars.last_mut().and_then(|b| b.last_mut()) {
                        notes.extend_from_slice(&expanded[k..k + 3]);
                    }
                    k += 2;
                }
            }
            _ => {}
        }
        k += 1;
    }
    bars.truncate(n_bars);
    bars.resize(n_bars, Vec::new());
    let mut out = vec![vocab.instrument_id(instrument), BOS];
    for bar in bars {
        let body: Vec<u32> = bar
            .into_iter()
            .filter(|(_, notes)| !notes.is_empty())
            .flat_map(|(p, notes)| std::iter::once(p).chain(notes))
            .collect();
        out.push(if body.is_empty() { bar_empty } else { bar_normal });
        out.extend(body);
    }
    out.push(EOS);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::ExpertFeatures;
    use crate::neural::ModelConfig;
    use crate::tokenizer::{detokenize, Token};

    #[test]
    fn k_is_two_percent_of_the_vocabulary() {
        assert_eq!(top_k_size(10_000, 0.02).unwrap(), 200);
        assert_eq!(top_k_size(282, 0.02).unwrap(), 6);
        assert_eq!(top_k_size(20, 0.02).unwrap(), 1);
        assert!(matches!(top_k_size(0, 0.02), Err(NeuralError::DegenerateVocab)));
    }

    #[test]
    fn repair_keeps_good_notes_and_fills_bars() {
        let v = Vocab::default_vocab();
        let t = |kind, value| v.id(Token::new(kind, value)).unwrap();
        let ids = vec![
            v.instrument_id(Instrument::Bass),
            BOS,
            t(TokenKind::Pitch, 40), // before any position
            t(TokenKind::BarNormal, 0),
            t(TokenKind::Position, 0),
            t(TokenKind::Pitch, 40),
            t(TokenKind::Duration, 3),
            t(TokenKind::Velocity, 20),
            t(TokenKind::Position, 48),
            t(TokenKind::Pitch, 43),
            t(TokenKind::Duration, 3), // truncated note
            t(TokenKind::BarNormal, 0),
            t(TokenKind::Position, 0),
            t(TokenKind::PitchDrum, 36), // wrong kind for bass
        ];
        let out = repair_track(&ids, Instrument::Bass, 3, &v, None).unwrap();
        let want = vec![
            v.instrument_id(Instrument::Bass),
            BOS,
            t(TokenKind::BarNormal, 0),
            t(TokenKind::Position, 0),
            t(TokenKind::Pitch, 40),
            t(TokenKind::Duration, 3),
            t(TokenKind::Velocity, 20),
            t(TokenKind::BarEmpty, 0),
            t(TokenKind::BarEmpty, 0),
            EOS,
        ];
        assert_eq!(out, want);
        let seqs = TrackTokenSeqs::from_ids(vec![out], &v);
        assert_eq!(detokenize(&seqs, &v).unwrap().tracks[0].notes.len(), 1);
    }

    #[test]
    fn untrained_generation_matches_bar_count_and_is_reproducible() {
        let v = Vocab::default_vocab();
        let model = BandControlNet::new(ModelConfig { d: 16, ffn: 32, ..ModelConfig::toy() }).unwrap();
        let grid = FeatureGrid {
            entries: vec![vec![ExpertFeatures::Drum { dt: 3, dd: 4 }; 3], vec![ExpertFeatures::Drum { dt: 1, dd: 1 }; 3]],
            vq_entries: None,
        };
        let insts = [Instrument::Drum, Instrument::Drum];
        let opts = GenerateOptions { seed: 9, max_len: Some(40), audit: true, ..Default::default() };
        let a = generate(&model, &grid, &insts, &v, None, &opts).unwrap();
        let b = generate(&model, &grid, &insts, &v, None, &opts).unwrap();
        assert_eq!(a.seqs, b.seqs);
        assert_eq!(a.audit, b.audit);
        for p in &a.seqs.bar_token_positions {
            assert_eq!(p.len(), 3);
        }
        for e in &a.audit {
            assert_eq!(e.top_k.len(), 6);
            assert!(e.top_k.iter().any(|&(id, _)| id == e.token));
            assert!(e.top_k.iter().all(|&(_, p)| p >= e.best_excluded));
        }
        detokenize(&a.seqs, &v).unwrap();
    }
}
