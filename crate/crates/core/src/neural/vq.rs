//! Bar-level VQ-VAE: each track's bar sub-sequence is pooled to a latent,
//! split into groups and snapped to a shared codebook.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Mask, Var};
use super::model::{add_decoder_layer, add_encoder_layer, add_linear, decoder_layer, encoder_layer, linear, TrackContext};
use super::params::ParamStore;
use super::tensor::{sinusoidal, Tensor};
use super::train::Adam;
use super::{ModelConfig, NeuralError};
use crate::features::{FeatureGrid, VQ_GROUPS};
use crate::tokenizer::{TrackTokenSeqs, EOS, PAD};

const COMMITMENT: f64 = 0.25;
const MAX_BAR_TOKENS: usize = 256;

/// Nearest codebook row for each of the equal-width groups of `latent`.
/// Ties go to the lower index.
pub fn vq_quantize(latent: &[f64], codebook: &Tensor) -> Result<([u16; VQ_GROUPS], Tensor), NeuralError> {
    let k = codebook.rows();
    if k == 0 {
        return Err(NeuralError::EmptyCodebook);
    }
    let w = codebook.cols();
    if latent.len() != VQ_GROUPS * w {
        return Err(NeuralError::Shape(format!("latent of {} values for {VQ_GROUPS} groups of {w}", latent.len())));
    }
    let mut codes = [0u16; VQ_GROUPS];
    let mut quantized = Tensor::zeros(VQ_GROUPS, w);
    for (n, z) in latent.chunks_exact(w).enumerate() {
        let mut best = (f64::INFINITY, 0);
        for c in 0..k {
            let dist: f64 = z.iter().zip(codebook.row(c)).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < best.0 {
                best = (dist, c);
            }
        }
        codes[n] = u16::try_from(best.1).map_err(|_| NeuralError::Config("codebook larger than 65536".into()))?;
        quantized.row_mut(n).copy_from_slice(codebook.row(best.1));
    }
    Ok((codes, quantized))
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqVae {
    pub config: ModelConfig,
    pub params: ParamStore,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VqTrainReport {
    /// Mean loss per bar, one entry per step.
    pub losses: Vec<f64>,
    /// Fraction of codebook rows used when encoding the corpus.
    pub codebook_usage: f64,
}

/// Token ids of every bar of one track, from its bar token up to the next
/// bar token or the end marker.
fn bar_slices(seqs: &TrackTokenSeqs, track: usize) -> Vec<&[u32]> {
    let s = seqs.unpadded(track);
    let pos = &seqs.bar_token_positions[track];
    pos.iter()
        .enumerate()
        .map(|(b, &start)| {
            let end = pos.get(b + 1).copied().unwrap_or_else(|| s.iter().position(|&t| t == EOS).unwrap_or(s.len()));
            &s[start..end.min(start + MAX_BAR_TOKENS)]
        })
        .collect()
}

impl VqVae {
    pub fn new(config: ModelConfig) -> Result<Self, NeuralError> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed ^ 0x5151);
        let mut p = ParamStore::default();
        let group = c.latent_dim / VQ_GROUPS;
        p.insert("vq.tok.emb", Tensor::randn(c.vocab_size, c.d, 0.5, &mut rng));
        for l in 0..c.layers_enc {
            add_encoder_layer(&mut p, &format!("vq.enc.{l}"), c, &mut rng);
        }
        add_linear(&mut p, "vq.enc.out", c.d, c.latent_dim, true, &mut rng);
        p.insert("vq.codebook", Tensor::randn(c.codebook_size, group, 1.0, &mut rng));
        add_linear(&mut p, "vq.dec.in", group, c.d, true, &mut rng);
        for l in 0..c.layers_top {
            add_decoder_layer(&mut p, &format!("vq.dec.{l}"), c, false, &mut rng);
        }
        add_linear(&mut p, "vq.head", c.d, c.vocab_size, true, &mut rng);
        Ok(Self { config, params: p })
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(), NeuralError> {
        match ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            Some(&id) => Err(NeuralError::IdOutOfVocab { id, vocab: self.config.vocab_size }),
            None if ids.is_empty() => Err(NeuralError::Shape("empty bar".into())),
            None => Ok(()),
        }
    }

    fn embed(&self, g: &mut Graph, ids: &[u32]) -> Var {
        let te = g.param("vq.tok.emb");
        let rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let x = g.gather_rows(te, &rows);
        let pe = g.constant(sinusoidal(ids.len(), self.config.d));
        g.add(x, pe)
    }

    /// Continuous latent of one bar as a `groups × width` matrix.
    fn encode(&self, g: &mut Graph, ids: &[u32]) -> Var {
        let mut h = self.embed(g, ids);
        for l in 0..self.config.layers_enc {
            h = encoder_layer(g, h, &format!("vq.enc.{l}"), self.config.heads, None);
        }
        let n = ids.len();
        let avg = g.constant(Tensor::full(1, n, 1.0 / n as f64));
        let pooled = g.matmul(avg, h);
        let z = linear(g, pooled, "vq.enc.out");
        g.reshape(z, VQ_GROUPS, self.config.latent_dim / VQ_GROUPS)
    }

    pub fn encode_bar(&self, ids: &[u32]) -> Result<[u16; VQ_GROUPS], NeuralError> {
        self.check_ids(ids)?;
        let mut g = Graph::new(&self.params);
        let z = self.encode(&mut g, ids);
        let codebook = self.params.get("vq.codebook").expect("codebook block");
        Ok(vq_quantize(&g.value(z).data, codebook)?.0)
    }

    /// Reconstruction cross-entropy plus codebook and commitment terms for
    /// one bar.
    fn loss(&self, g: &mut Graph, ids: &[u32]) -> Result<Var, NeuralError> {
        self.check_ids(ids)?;
        let z = self.encode(g, ids);
        let codebook = self.params.get("vq.codebook").expect("codebook block");
        let (codes, quantized) = vq_quantize(&g.value(z).data, codebook)?;
        let st = g.straight_through(z, &quantized);
        let cb = g.param("vq.codebook");
        let picked = g.gather_rows(cb, &codes.map(usize::from));
        let z_fixed = g.detach(z);
        let d1 = g.sub(z_fixed, picked);
        let codebook_loss = g.sum_squares(d1);
        let q_fixed = g.constant(quantized);
        let d2 = g.sub(z, q_fixed);
        let commit = g.sum_squares(d2);
        let commit = g.scale(commit, COMMITMENT);
        let mut total = g.add(codebook_loss, commit);
        if ids.len() > 1 {
            let mem = linear(g, st, "vq.dec.in");
            let pe = g.constant(sinusoidal(VQ_GROUPS, self.config.d));
            let mem = g.add(mem, pe);
            let n = ids.len() - 1;
            let mask = Mask::causal(n);
            let zeros = vec![0; n];
            let ctx = TrackContext { memory: mem, bar_index: &zeros, mask: &mask };
            let mut h = self.embed(g, &ids[..n]);
            for l in 0..self.config.layers_top {
                h = decoder_layer(g, h, &ctx, &format!("vq.dec.{l}"), self.config.heads, false)?;
            }
            let logits = linear(g, h, "vq.head");
            let targets: Vec<Option<usize>> = ids[1..].iter().map(|&t| Some(t as usize)).collect();
            let ce = g.cross_entropy(logits, &targets);
            total = g.add(total, ce);
        }
        Ok(total)
    }
}

/// Train a VQ-VAE on every bar of every track in `corpus` for `steps`
/// minibatches of `batch` bars.
pub fn train_vqvae(
    corpus: &[TrackTokenSeqs],
    config: &ModelConfig,
    steps: usize,
    batch: usize,
) -> Result<(VqVae, VqTrainReport), NeuralError> {
    let mut model = VqVae::new(config.clone())?;
    let bars: Vec<&[u32]> = corpus
        .iter()
        .flat_map(|s| (0..s.n_tracks()).flat_map(move |i| bar_slices(s, i)))
        .filter(|b| !b.is_empty() && b[0] != PAD)
        .collect();
    let mut report = VqTrainReport::default();
    if bars.is_empty() {
        return Ok((model, report));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7171);
    let mut opt = Adam::new(&model.params);
    let mut order: Vec<usize> = (0..bars.len()).collect();
    let mut cursor = order.len();
    for _ in 0..steps {
        let mut total = super::Gradients::zeros_like(&model.params);
        let mut loss_sum = 0.0;
        let take = batch.max(1).min(bars.len());
        for _ in 0..take {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let ids = bars[order[cursor]];
            cursor += 1;
            let mut g = Graph::new(&model.params);
            let l = model.loss(&mut g, ids)?;
            if let Some(op) = g.nonfinite() {
                return Err(NeuralError::NonFinite(op));
            }
            loss_sum += g.value(l).data[0];
            total.accumulate(&g.backward(l));
        }
        total.scale(1.0 / take as f64);
        opt.step(&mut model.params, &total, config.lr);
        report.losses.push(loss_sum / take as f64);
    }
    let mut used = vec![false; config.codebook_size];
    for ids in &bars {
        for c in model.encode_bar(ids)? {
            used[c as usize] = true;
        }
    }
    report.codebook_usage = used.iter().filter(|&&u| u).count() as f64 / used.len() as f64;
    Ok((model, report))
}

/// Encode every bar of `seqs` and store the codes in `grid`.
pub fn fill_vq_codes(vq: &VqVae, grid: &mut FeatureGrid, seqs: &TrackTokenSeqs) -> Result<(), NeuralError> {
    let counts: Vec<usize> = seqs.bar_token_positions.iter().map(Vec::len).collect();
    if seqs.n_tracks() != grid.n_tracks() || counts.iter().any(|&c| c != grid.n_bars()) {
        return Err(NeuralError::BarCountMismatch { counts });
    }
    let mut codes = Vec::with_capacity(seqs.n_tracks());
    for i in 0..seqs.n_tracks() {
        codes.push(bar_slices(seqs, i).into_iter().map(|b| vq.encode_bar(b)).collect::<Result<Vec<_>, _>>()?);
    }
    grid.vq_entries = Some(codes);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_picks_nearest_with_low_index_ties() {
        let cb = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![1.0, 1.0], vec![-1.0, 0.0]]);
        let mut z = vec![0.0; 16];
        z[0..2].copy_from_slice(&[0.9, 1.2]);
        z[2..4].copy_from_slice(&[-0.8, 0.1]);
        z[4..6].copy_from_slice(&[0.5, 0.5]); // equidistant from rows 0 and 1
        let (codes, q) = vq_quantize(&z, &cb).unwrap();
        assert_eq!(codes, [1, 3, 0, 0, 0, 0, 0, 0]);
        assert_eq!(q.row(1), &[-1.0, 0.0]);
        assert!(matches!(vq_quantize(&z, &Tensor::zeros(0, 2)), Err(NeuralError::EmptyCodebook)));
        assert!(vq_quantize(&z[..15], &cb).is_err());
    }

    #[test]
    fn a_few_steps_lower_the_loss() {
        let config = ModelConfig { vocab_size: 20, codebook_size: 8, ..ModelConfig::toy() };
        let seqs = TrackTokenSeqs {
            seqs: vec![vec![3, 1, 9, 11, 12, 13, 9, 11, 14, 15, 2]],
            bar_index: vec![vec![0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1]],
            bar_token_positions: vec![vec![2, 6]],
            lengths: vec![11],
        };
        assert_eq!(bar_slices(&seqs, 0), vec![&[9, 11, 12, 13][..], &[9, 11, 14, 15][..]]);
        let (vq, report) = train_vqvae(std::slice::from_ref(&seqs), &config, 30, 2).unwrap();
        assert!(report.losses[29] < report.losses[0] * 0.5, "{:?}", report.losses);
        let mut grid = FeatureGrid {
            entries: vec![vec![crate::features::ExpertFeatures::Drum { dt: 0, dd: 0 }; 2]],
            vq_entries: None,
        };
        fill_vq_codes(&vq, &mut grid, &seqs).unwrap();
        let codes = grid.vq_entries.unwrap();
        assert_eq!(codes[0].len(), 2);
        assert!(codes[0].iter().flatten().all(|&c| c < 8));
    }
}
