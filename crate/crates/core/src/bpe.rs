//! Byte-pair encoding restricted to note tokens that share an onset.
//!
//! Training units are the maximal runs of note tokens between two metric
//! tokens (Instrument, BOS, EOS, Bar, Position), so a merged token never
//! spans a Position or Bar boundary and the encoded stream keeps its
//! explicit metrical structure.

use std::collections::{HashMap, HashSet};

use crate::tokenizer::{TokenKind, Vocab};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum BpeError {
    #[error("target vocabulary {target} must exceed the base vocabulary {base}")]
    TargetTooSmall { target: usize, base: usize },
    #[error("unknown token id {0}")]
    UnknownToken(u32),
    #[error("merge file line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Merge {
    pub left: u32,
    pub right: u32,
    pub new: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<Merge>,
    base_vocab_size: usize,
    target_size: usize,
    ranks: HashMap<(u32, u32), usize>,
}

impl BpeModel {
    pub fn new(merges: Vec<Merge>, base_vocab_size: usize, target_size: usize) -> Self {
        let ranks = merges.iter().enumerate().map(|(i, m)| ((m.left, m.right), i)).collect();
        Self { merges, base_vocab_size, target_size, ranks }
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    pub fn base_vocab_size(&self) -> usize {
        self.base_vocab_size
    }

    pub fn target_size(&self) -> usize {
        self.target_size
    }

    /// Base vocabulary plus one id per learned merge.
    pub fn vocab_size(&self) -> usize {
        self.base_vocab_size + self.merges.len()
    }

    /// `<left-id> <right-id> <new-id>` per line, in learned order.
    pub fn to_text(&self) -> String {
        self.merges.iter().map(|m| format!("{} {} {}\n", m.left, m.right, m.new)).collect()
    }

    pub fn from_text(text: &str, base_vocab_size: usize) -> Result<Self, BpeError> {
        let mut merges = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let err = |message: &str| BpeError::Parse { line: i + 1, message: message.into() };
            let fields: Vec<u32> = line
                .split(' ')
                .map(|f| f.parse().map_err(|_| err("expected three integer ids")))
                .collect::<Result<_, _>>()?;
            let [left, right, new] = fields[..] else {
                return Err(err("expected three integer ids"));
            };
            if new as usize != base_vocab_size + merges.len() {
                return Err(err("merge ids must be dense after the base vocabulary"));
            }
            if left >= new || right >= new {
                return Err(err("merge operand defined after its use"));
            }
            merges.push(Merge { left, right, new });
        }
        let target = base_vocab_size + merges.len();
        Ok(Self::new(merges, base_vocab_size, target))
    }

    fn check(&self, seq: &[u32]) -> Result<(), BpeError> {
        match seq.iter().find(|&&id| id as usize >= self.vocab_size()) {
            Some(&id) => Err(BpeError::UnknownToken(id)),
            None => Ok(()),
        }
    }

    /// Apply the merges in learned order. Equivalent to repeatedly merging
    /// the lowest-ranked adjacent pair: a merge can only create pairs of
    /// higher rank than itself.
    pub fn encode(&self, seq: &[u32]) -> Result<Vec<u32>, BpeError> {
        self.check(seq)?;
        let mut out = seq.to_vec();
        loop {
            let best = out
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).copied())
                .min();
            let Some(rank) = best else { break };
            let m = self.merges[rank];
            let mut merged = Vec::with_capacity(out.len());
            let mut k = 0;
            while k < out.len() {
                if k + 1 < out.len() && out[k] == m.left && out[k + 1] == m.right {
                    merged.push(m.new);
                    k += 2;
                } else {
                    merged.push(out[k]);
                    k += 1;
                }
            }
            out = merged;
        }
        Ok(out)
    }

    /// Expand every merged id back into base tokens.
    pub fn decode(&self, seq: &[u32]) -> Result<Vec<u32>, BpeError> {
        self.check(seq)?;
        let mut out = Vec::with_capacity(seq.len() * 2);
        let mut stack = Vec::new();
        for &id in seq {
            stack.push(id);
            while let Some(top) = stack.pop() {
                match (top as usize).checked_sub(self.base_vocab_size) {
                    Some(m) => {
                        let merge = self.merges[m];
                        stack.push(merge.right);
                        stack.push(merge.left);
                    }
                    None => out.push(top),
                }
            }
        }
        Ok(out)
    }
}

/// Maximal runs of note tokens; metric tokens and PAD split them.
pub fn note_units<'a>(seq: &'a [u32], vocab: &'a Vocab) -> impl Iterator<Item = &'a [u32]> + 'a {
    seq.split(move |&id| !vocab.kind(id).is_some_and(|k| k.is_note() && k != TokenKind::Merged))
        .filter(|u| !u.is_empty())
}

/// Learn merges from unpadded base-vocabulary sequences until the vocabulary
/// reaches `target_size` or no pair occurs at least twice. Frequency ties go
/// to the lexicographically smallest (left, right) pair.
pub fn learn_bpe<S: AsRef<[u32]>>(sequences: &[S], vocab: &Vocab, target_size: usize) -> Result<BpeModel, BpeError> {
    let base = vocab.base_size();
    if target_size <= base {
        return Err(BpeError::TargetTooSmall { target: target_size, base });
    }
    let mut unit_counts: HashMap<Vec<u32>, u64> = HashMap::new();
    for seq in sequences {
        for unit in note_units(seq.as_ref(), vocab) {
            if unit.len() >= 2 {
                *unit_counts.entry(unit.to_vec()).or_default() += 1;
            }
        }
    }
    let mut words: Vec<(Vec<u32>, u64)> = unit_counts.into_iter().collect();
    words.sort();

    let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
    let mut where_: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (wi, (w, c)) in words.iter().enumerate() {
        for p in w.windows(2) {
            let key = (p[0], p[1]);
            *pair_counts.entry(key).or_default() += c;
            where_.entry(key).or_default().insert(wi);
        }
    }

    let mut merges = Vec::new();
    while base + merges.len() < target_size {
        let best = pair_counts
            .iter()
            .filter(|(_, &c)| c > 0)
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then(pb.cmp(pa)))
            .map(|(&p, &c)| (p, c));
        let Some(((left, right), count)) = best else { break };
        if count < 2 {
            break;
        }
        let new = (base + merges.len()) as u32;
        merges.push(Merge { left, right, new });

        let mut affected: Vec<usize> = where_.remove(&(left, right)).unwrap_or_default().into_iter().collect();
        affected.sort_unstable();
        for wi in affected {
            let (word, c) = &mut words[wi];
            for p in word.windows(2) {
                let key = (p[0], p[1]);
                if let Some(v) = pair_counts.get_mut(&key) {
                    *v -= *c;
                }
                if let Some(set) = where_.get_mut(&key) {
                    set.remove(&wi);
                }
            }
            let mut merged = Vec::with_capacity(word.len());
            let mut k = 0;
            while k < word.len() {
                if k + 1 < word.len() && word[k] == left && word[k + 1] == right {
                    merged.push(new);
                    k += 2;
                } else {
                    merged.push(word[k]);
                    k += 1;
                }
            }
            *word = merged;
            for p in word.windows(2) {
                let key = (p[0], p[1]);
                *pair_counts.entry(key).or_default() += *c;
                where_.entry(key).or_default().insert(wi);
            }
        }
        pair_counts.remove(&(left, right));
        pair_counts.retain(|_, c| *c > 0);
    }
    Ok(BpeModel::new(merges, base, target_size))
}
