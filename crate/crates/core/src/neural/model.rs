//! The parallel-track conditional transformer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Gradients, Graph, Mask, Var};
use super::params::ParamStore;
use super::tensor::{sinusoidal, Tensor};
use super::{ModelConfig, NeuralError};
use crate::features::{
    extract_expert_features, ExpertFeatures, FeatureGrid, CHORD_BINS, DD_BINS, DT_BINS, MD_BINS, MP_BINS, MV_BINS, ND_BINS, VQ_GROUPS,
};
use crate::score::{Instrument, Song};
use crate::tokenizer::{tokenize_song, TokenizeError, TrackTokenSeqs, Vocab, PAD};

const EMBED_STD: f64 = 0.5;
const HEAD_STD: f64 = 0.02;

/// One training example: the control grid and the token sequences it
/// describes.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub grid: FeatureGrid,
    pub seqs: TrackTokenSeqs,
    pub instruments: Vec<Instrument>,
}

impl Sample {
    /// Tokens, expert features and instruments of a quantized song.
    pub fn from_song(song: &Song, vocab: &Vocab) -> Result<Self, TokenizeError> {
        Ok(Self {
            grid: extract_expert_features(song),
            seqs: tokenize_song(song, vocab)?,
            instruments: song.tracks.iter().map(|t| t.instrument).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BandControlNet {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Widths of the concatenated condition vector, per table.
struct FeatureLayout {
    unit: usize,
}

impl FeatureLayout {
    fn ct(&self) -> usize {
        self.unit
    }
    fn dt(&self) -> usize {
        self.unit
    }
    fn dd(&self) -> usize {
        2 * self.unit
    }
    fn nd(&self) -> usize {
        2 * self.unit
    }
    fn scalar(&self) -> usize {
        self.unit
    }
    fn vq(&self) -> usize {
        self.unit / 2
    }
    fn total(&self) -> usize {
        4 * self.ct() + self.dt() + self.dd() + self.nd() + 3 * self.scalar() + VQ_GROUPS * self.vq()
    }
}

pub(crate) fn add_linear(p: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut ChaCha8Rng) {
    p.insert(&format!("{name}.w"), Tensor::randn(fan_in, fan_out, (fan_in as f64).powf(-0.5), rng));
    if bias {
        p.insert(&format!("{name}.b"), Tensor::zeros(1, fan_out));
    }
}

fn add_norm(p: &mut ParamStore, name: &str, width: usize) {
    p.insert(&format!("{name}.g"), Tensor::full(1, width, 1.0));
    p.insert(&format!("{name}.b"), Tensor::zeros(1, width));
}

fn add_attention(p: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) {
    for w in ["q", "k", "v", "o"] {
        add_linear(p, &format!("{name}.{w}"), d, d, true, rng);
    }
}

fn add_ffn(p: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut ChaCha8Rng) {
    add_linear(p, &format!("{name}.in"), d, hidden, true, rng);
    add_linear(p, &format!("{name}.out"), hidden, d, true, rng);
}

pub(crate) fn add_encoder_layer(p: &mut ParamStore, name: &str, c: &ModelConfig, rng: &mut ChaCha8Rng) {
    add_attention(p, &format!("{name}.attn"), c.d, rng);
    add_norm(p, &format!("{name}.norm1"), c.d);
    add_ffn(p, &format!("{name}.ffn"), c.d, c.ffn, rng);
    add_norm(p, &format!("{name}.norm2"), c.d);
}

pub(crate) fn add_decoder_layer(p: &mut ParamStore, name: &str, c: &ModelConfig, similarity: bool, rng: &mut ChaCha8Rng) {
    if similarity {
        add_linear(p, &format!("{name}.sim.q"), c.d, c.d, false, rng);
        add_linear(p, &format!("{name}.sim.k"), c.d, c.d, false, rng);
    }
    add_attention(p, &format!("{name}.self"), c.d, rng);
    add_norm(p, &format!("{name}.norm1"), c.d);
    add_attention(p, &format!("{name}.cross"), c.d, rng);
    add_norm(p, &format!("{name}.norm2"), c.d);
    add_ffn(p, &format!("{name}.ffn"), c.d, c.ffn, rng);
    add_norm(p, &format!("{name}.norm3"), c.d);
}

pub(crate) fn linear(g: &mut Graph, x: Var, name: &str) -> Var {
    let w = g.param(&format!("{name}.w"));
    let y = g.matmul(x, w);
    match g.params().id(&format!("{name}.b")) {
        Some(_) => {
            let b = g.param(&format!("{name}.b"));
            g.add_row(y, b)
        }
        None => y,
    }
}

pub(crate) fn norm(g: &mut Graph, x: Var, name: &str) -> Var {
    let n = g.layer_norm(x);
    let gamma = g.param(&format!("{name}.g"));
    let beta = g.param(&format!("{name}.b"));
    let y = g.mul_row(n, gamma);
    g.add_row(y, beta)
}

fn ffn(g: &mut Graph, x: Var, name: &str) -> Var {
    let h = linear(g, x, &format!("{name}.in"));
    let h = g.gelu(h);
    linear(g, h, &format!("{name}.out"))
}

/// Multi-head attention of `xq` over `xkv`. When `similarity` is given it
/// multiplies every head's raw logits element-wise before scaling and
/// masking.
pub fn attention(
    g: &mut Graph,
    xq: Var,
    xkv: Var,
    name: &str,
    heads: usize,
    mask: Option<&Mask>,
    similarity: Option<Var>,
) -> Var {
    let q = linear(g, xq, &format!("{name}.q"));
    let k = linear(g, xkv, &format!("{name}.k"));
    let v = linear(g, xkv, &format!("{name}.v"));
    let d = g.value(q).cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (g.slice_cols(q, h * dh, dh), g.slice_cols(k, h * dh, dh), g.slice_cols(v, h * dh, dh))
        };
        let mut logits = g.matmul_bt(qh, kh);
        if let Some(s) = similarity {
            logits = g.mul(s, logits);
        }
        let logits = g.scale(logits, scale);
        let p = g.softmax(logits, mask);
        outs.push(g.matmul(p, vh));
    }
    let o = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
    linear(g, o, &format!("{name}.o"))
}

pub(crate) fn encoder_layer(g: &mut Graph, x: Var, name: &str, heads: usize, mask: Option<&Mask>) -> Var {
    let a = attention(g, x, x, &format!("{name}.attn"), heads, mask, None);
    let h = g.add(x, a);
    let h = norm(g, h, &format!("{name}.norm1"));
    let f = ffn(g, h, &format!("{name}.ffn"));
    let o = g.add(h, f);
    norm(g, o, &format!("{name}.norm2"))
}

/// Bar-to-bar similarity of one track's encoded features: softmax of the
/// scaled query-key products, then standardized along each row.
pub fn bar_similarity(g: &mut Graph, e: Var, name: &str) -> Var {
    let d = g.value(e).cols();
    let q = linear(g, e, &format!("{name}.q"));
    let k = linear(g, e, &format!("{name}.k"));
    let logits = g.matmul_bt(q, k);
    let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
    let p = g.softmax(logits, None);
    g.layer_norm(p)
}

/// Tile a bar-level `B × B` matrix to token resolution.
pub fn expand_similarity(g: &mut Graph, s: Var, bar_index: &[usize]) -> Result<Var, NeuralError> {
    let b = g.value(s).rows();
    if let Some(&bad) = bar_index.iter().find(|&&x| x >= b) {
        return Err(NeuralError::BarIndexOutOfRange { bar: bad, bars: b });
    }
    Ok(g.expand(s, bar_index))
}

/// Structure-enhanced causal self-attention; `s_tilde = None` is plain
/// causal attention.
pub fn se_attention(g: &mut Graph, x: Var, s_tilde: Option<Var>, name: &str, heads: usize, mask: &Mask) -> Var {
    attention(g, x, x, name, heads, Some(mask), s_tilde)
}

/// Token context shared by every layer of a decoder stack for one track.
pub struct TrackContext<'a> {
    pub memory: Var,
    pub bar_index: &'a [usize],
    pub mask: &'a Mask,
}

pub(crate) fn decoder_layer(
    g: &mut Graph,
    x: Var,
    ctx: &TrackContext,
    name: &str,
    heads: usize,
    se_sa: bool,
) -> Result<Var, NeuralError> {
    let s_tilde = if se_sa {
        let s = bar_similarity(g, ctx.memory, &format!("{name}.sim"));
        Some(expand_similarity(g, s, ctx.bar_index)?)
    } else {
        None
    };
    let a = se_attention(g, x, s_tilde, &format!("{name}.self"), heads, ctx.mask);
    let h = g.add(x, a);
    let h = norm(g, h, &format!("{name}.norm1"));
    let c = attention(g, h, ctx.memory, &format!("{name}.cross"), heads, None, None);
    let h2 = g.add(h, c);
    let h2 = norm(g, h2, &format!("{name}.norm2"));
    let f = ffn(g, h2, &format!("{name}.ffn"));
    let o = g.add(h2, f);
    Ok(norm(g, o, &format!("{name}.norm3")))
}

/// Per-table row index of one grid entry; one extra row past the empty
/// sentinel marks a feature that does not apply to the track kind.
fn feature_rows(e: &ExpertFeatures) -> [usize; 10] {
    let na = |bins: usize| bins + 1;
    match *e {
        ExpertFeatures::Drum { dt, dd } => [
            CHORD_BINS,
            CHORD_BINS,
            CHORD_BINS,
            CHORD_BINS,
            dt as usize,
            dd as usize,
            na(ND_BINS),
            na(MP_BINS),
            na(MD_BINS),
            na(MV_BINS),
        ],
        ExpertFeatures::Pitched { nd, mp, md, mv, ct } => [
            ct[0].index(),
            ct[1].index(),
            ct[2].index(),
            ct[3].index(),
            na(DT_BINS),
            na(DD_BINS),
            nd as usize,
            mp as usize,
            md as usize,
            mv as usize,
        ],
    }
}

const FEATURE_TABLES: [(&str, usize); 7] = [
    ("cond.ct", CHORD_BINS + 1),
    ("cond.dt", DT_BINS + 2),
    ("cond.dd", DD_BINS + 2),
    ("cond.nd", ND_BINS + 2),
    ("cond.mp", MP_BINS + 2),
    ("cond.md", MD_BINS + 2),
    ("cond.mv", MV_BINS + 2),
];

impl BandControlNet {
    pub fn new(config: ModelConfig) -> Result<Self, NeuralError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = &config;
        let mut p = ParamStore::default();
        let layout = FeatureLayout { unit: c.emb_unit };
        let widths = [layout.ct(), layout.dt(), layout.dd(), layout.nd(), layout.scalar(), layout.scalar(), layout.scalar()];
        for ((name, rows), w) in FEATURE_TABLES.iter().zip(widths) {
            p.insert(name, Tensor::randn(*rows, w, EMBED_STD, &mut rng));
        }
        p.insert("cond.vq", Tensor::randn(c.codebook_size + 1, layout.vq(), EMBED_STD, &mut rng));
        add_linear(&mut p, "cond.proj", layout.total(), c.d, true, &mut rng);
        for l in 0..c.layers_enc {
            add_encoder_layer(&mut p, &format!("enc.{l}"), c, &mut rng);
        }
        p.insert("tok.emb", Tensor::randn(c.vocab_size, c.d, EMBED_STD, &mut rng));
        p.insert("bar.emb", Tensor::randn(c.max_bars, c.d, EMBED_STD, &mut rng));
        p.insert("inst.emb", Tensor::randn(Instrument::ALL.len(), c.d, EMBED_STD, &mut rng));
        for l in 0..c.layers_bottom {
            add_decoder_layer(&mut p, &format!("bottom.{l}"), c, c.use_se_sa, &mut rng);
        }
        if c.use_ctt {
            for l in 0..c.layers_ctt {
                add_encoder_layer(&mut p, &format!("ctt.{l}"), c, &mut rng);
            }
        }
        for l in 0..c.layers_top {
            add_decoder_layer(&mut p, &format!("top.{l}"), c, c.use_se_sa, &mut rng);
        }
        for i in 0..c.tracks {
            p.insert(&format!("head.{i}.w"), Tensor::randn(c.d, c.vocab_size, HEAD_STD, &mut rng));
            p.insert(&format!("head.{i}.b"), Tensor::zeros(1, c.vocab_size));
        }
        Ok(Self { config, params: p })
    }

    /// Condition vectors `C_i`, one `B × d` matrix per track.
    pub fn embed_conditions(&self, g: &mut Graph, grid: &FeatureGrid) -> Result<Vec<Var>, NeuralError> {
        let k = self.config.codebook_size;
        let mut out = Vec::with_capacity(grid.n_tracks());
        for (i, row) in grid.entries.iter().enumerate() {
            if row.len() > self.config.max_bars {
                return Err(NeuralError::BarIndexOutOfRange { bar: row.len() - 1, bars: self.config.max_bars });
            }
            let mut rows: Vec<[usize; 10]> = Vec::with_capacity(row.len());
            for (b, e) in row.iter().enumerate() {
                if !e.in_range() {
                    return Err(NeuralError::BinOutOfVocab { track: i, bar: b });
                }
                rows.push(feature_rows(e));
            }
            let mut parts = Vec::with_capacity(10 + VQ_GROUPS);
            for col in 0..10usize {
                let table = FEATURE_TABLES[col.saturating_sub(3)].0;
                let t = g.param(table);
                let ids: Vec<usize> = rows.iter().map(|r| r[col]).collect();
                parts.push(g.gather_rows(t, &ids));
            }
            let vq_table = g.param("cond.vq");
            for n in 0..VQ_GROUPS {
                let mut ids = Vec::with_capacity(row.len());
                for b in 0..row.len() {
                    let code = match &grid.vq_entries {
                        Some(vq) => {
                            let c = vq[i][b][n] as usize;
                            if c >= k {
                                return Err(NeuralError::BinOutOfVocab { track: i, bar: b });
                            }
                            c
                        }
                        None => k,
                    };
                    ids.push(code);
                }
                parts.push(g.gather_rows(vq_table, &ids));
            }
            let cat = g.concat_cols(&parts);
            out.push(linear(g, cat, "cond.proj"));
        }
        Ok(out)
    }

    /// Encoded features `E_i`: bar positions added, then full self-attention
    /// over bars with weights shared by every track.
    pub fn encode_features(&self, g: &mut Graph, conditions: &[Var]) -> Vec<Var> {
        conditions
            .iter()
            .map(|&c| {
                let b = g.value(c).rows();
                let pe = g.constant(sinusoidal(b, self.config.d));
                let mut x = g.add(c, pe);
                for l in 0..self.config.layers_enc {
                    x = encoder_layer(g, x, &format!("enc.{l}"), self.config.heads, None);
                }
                x
            })
            .collect()
    }

    /// `TE(x) + PE(t) + BE(bar) + IE(instrument)` for one track.
    pub fn embed_tokens(
        &self,
        g: &mut Graph,
        ids: &[u32],
        bar_index: &[usize],
        instrument: Instrument,
    ) -> Result<Var, NeuralError> {
        let v = self.config.vocab_size;
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= v) {
            return Err(NeuralError::IdOutOfVocab { id: bad, vocab: v });
        }
        if let Some(&bad) = bar_index.iter().find(|&&b| b >= self.config.max_bars) {
            return Err(NeuralError::BarIndexOutOfRange { bar: bad, bars: self.config.max_bars });
        }
        let te = g.param("tok.emb");
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let x = g.gather_rows(te, &ids);
        let pe = g.constant(sinusoidal(ids.len(), self.config.d));
        let x = g.add(x, pe);
        let be = g.param("bar.emb");
        let bars = g.gather_rows(be, bar_index);
        let x = g.add(x, bars);
        let ie = g.param("inst.emb");
        let inst = g.gather_rows(ie, &[instrument.index()]);
        Ok(g.add_row(x, inst))
    }

    fn decode_stack(&self, g: &mut Graph, stack: &str, layers: usize, xs: &[Var], ctxs: &[TrackContext]) -> Result<Vec<Var>, NeuralError> {
        xs.iter()
            .zip(ctxs)
            .map(|(&x, ctx)| {
                let mut h = x;
                for l in 0..layers {
                    h = decoder_layer(g, h, ctx, &format!("{stack}.{l}"), self.config.heads, self.config.use_se_sa)?;
                }
                Ok(h)
            })
            .collect()
    }

    pub fn bottom_decode(&self, g: &mut Graph, xs: &[Var], ctxs: &[TrackContext]) -> Result<Vec<Var>, NeuralError> {
        self.decode_stack(g, "bottom", self.config.layers_bottom, xs, ctxs)
    }

    pub fn top_decode(&self, g: &mut Graph, xs: &[Var], ctxs: &[TrackContext]) -> Result<Vec<Var>, NeuralError> {
        self.decode_stack(g, "top", self.config.layers_top, xs, ctxs)
    }

    /// Exchange information between the bar-token states of all tracks, bar
    /// by bar, with the instrument axis as the sequence; every other
    /// position passes through unchanged.
    pub fn ctt_forward(&self, g: &mut Graph, states: &[Var], bar_positions: &[Vec<usize>]) -> Result<Vec<Var>, NeuralError> {
        let n_bars = bar_positions.first().map_or(0, Vec::len);
        if bar_positions.len() != states.len() || bar_positions.iter().any(|p| p.len() != n_bars) {
            return Err(NeuralError::BarCountMismatch {
                counts: bar_positions.iter().map(Vec::len).collect(),
            });
        }
        if n_bars == 0 || !self.config.use_ctt {
            return Ok(states.to_vec());
        }
        let t = g.value(states[0]).rows();
        if states.iter().any(|&s| g.value(s).rows() != t) {
            return Err(NeuralError::Shape("tracks must share one padded length".into()));
        }
        let all = g.concat_rows(states);
        let mut rows = Vec::with_capacity(n_bars * states.len());
        let mut groups = Vec::with_capacity(n_bars * states.len());
        for b in 0..n_bars {
            for (i, pos) in bar_positions.iter().enumerate() {
                if pos[b] >= t {
                    return Err(NeuralError::BarIndexOutOfRange { bar: pos[b], bars: t });
                }
                rows.push(i * t + pos[b]);
                groups.push(b);
            }
        }
        let mask = Mask::blocks(&groups);
        let mut x = g.gather_rows(all, &rows);
        for l in 0..self.config.layers_ctt {
            x = encoder_layer(g, x, &format!("ctt.{l}"), self.config.heads, Some(&mask));
        }
        let merged = g.replace_rows(all, x, &rows);
        Ok((0..states.len())
            .map(|i| {
                let idx: Vec<usize> = (i * t..(i + 1) * t).collect();
                g.gather_rows(merged, &idx)
            })
            .collect())
    }

    /// Unnormalized next-token scores from the head of track slot `track`.
    pub fn project_logits(&self, g: &mut Graph, state: Var, track: usize) -> Var {
        linear(g, state, &format!("head.{track}"))
    }

    /// Next-token distributions, one `T × V` matrix per track.
    pub fn project_probs(&self, g: &mut Graph, states: &[Var]) -> Vec<Var> {
        states
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let l = self.project_logits(g, s, i);
                g.softmax(l, None)
            })
            .collect()
    }

    /// Full forward pass over the first `len` positions of every track;
    /// returns the per-track top-decoder states. `encoded` replaces the feature encoder
    /// output when it is already known.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        grid: &FeatureGrid,
        encoded: Option<&[Tensor]>,
        seqs: &TrackTokenSeqs,
        instruments: &[Instrument],
        len: usize,
        ctt_bars: Option<usize>,
    ) -> Result<Vec<Var>, NeuralError> {
        let n = seqs.n_tracks();
        if n > self.config.tracks || instruments.len() != n || grid.n_tracks() != n {
            return Err(NeuralError::Shape(format!(
                "{n} token tracks, {} instruments, {} grid tracks, model supports {}",
                instruments.len(),
                grid.n_tracks(),
                self.config.tracks
            )));
        }
        let memory = match encoded {
            Some(e) => e.iter().map(|t| g.constant(t.clone())).collect(),
            None => {
                let c = self.embed_conditions(g, grid)?;
                self.encode_features(g, &c)
            }
        };
        let mask = Mask::causal(len);
        let mut xs = Vec::with_capacity(n);
        for (i, &inst) in instruments.iter().enumerate().take(n) {
            xs.push(self.embed_tokens(g, &seqs.seqs[i][..len], &seqs.bar_index[i][..len], inst)?);
        }
        let ctxs: Vec<TrackContext> = (0..n)
            .map(|i| TrackContext { memory: memory[i], bar_index: &seqs.bar_index[i][..len], mask: &mask })
            .collect();
        let bottom = self.bottom_decode(g, &xs, &ctxs)?;
        let bars = ctt_bars.unwrap_or_else(|| seqs.bar_token_positions.iter().map(Vec::len).min().unwrap_or(0));
        let positions: Vec<Vec<usize>> = seqs
            .bar_token_positions
            .iter()
            .map(|p| p.iter().copied().take(bars).filter(|&k| k < len).collect())
            .collect();
        let mixed = if self.config.use_ctt { self.ctt_forward(g, &bottom, &positions)? } else { bottom };
        self.top_decode(g, &mixed, &ctxs)
    }

    /// Summed next-token cross-entropy over every track and non-PAD target,
    /// and the number of targets.
    pub fn loss(&self, g: &mut Graph, sample: &Sample) -> Result<(Var, usize), NeuralError> {
        let t = sample.seqs.len();
        if t < 2 {
            return Err(NeuralError::Shape("sequences need at least two tokens".into()));
        }
        let states = self.forward(g, &sample.grid, None, &sample.seqs, &sample.instruments, t - 1, None)?;
        let mut total = None;
        let mut count = 0;
        for (i, &s) in states.iter().enumerate() {
            let l = self.project_logits(g, s, i);
            let targets: Vec<Option<usize>> =
                sample.seqs.seqs[i][1..].iter().map(|&y| (y != PAD).then_some(y as usize)).collect();
            count += targets.iter().flatten().count();
            let ce = g.cross_entropy(l, &targets);
            total = Some(match total {
                Some(acc) => g.add(acc, ce),
                None => ce,
            });
        }
        let total = total.ok_or_else(|| NeuralError::Shape("sample has no tracks".into()))?;
        if let Some(op) = g.nonfinite() {
            return Err(NeuralError::NonFinite(op));
        }
        Ok((total, count))
    }

    /// Summed loss, target count and parameter gradients of one sample.
    pub fn gradients(&self, sample: &Sample) -> Result<(f64, usize, Gradients), NeuralError> {
        let mut g = Graph::new(&self.params);
        let (loss, count) = self.loss(&mut g, sample)?;
        let value = g.value(loss).data[0];
        Ok((value, count, g.backward(loss)))
    }

    /// Mean per-token loss of one sample without building gradients.
    pub fn mean_loss(&self, sample: &Sample) -> Result<f64, NeuralError> {
        let mut g = Graph::new(&self.params);
        let (loss, count) = self.loss(&mut g, sample)?;
        Ok(g.value(loss).data[0] / count.max(1) as f64)
    }

    /// Encoded feature grid as plain tensors, for reuse across generation
    /// steps.
    pub fn encode_grid(&self, grid: &FeatureGrid) -> Result<Vec<Tensor>, NeuralError> {
        let mut g = Graph::new(&self.params);
        let c = self.embed_conditions(&mut g, grid)?;
        let e = self.encode_features(&mut g, &c);
        if let Some(op) = g.nonfinite() {
            return Err(NeuralError::NonFinite(op));
        }
        Ok(e.iter().map(|&v| g.value(v).clone()).collect())
    }
}
