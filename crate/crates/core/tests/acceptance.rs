use std::collections::HashMap;
use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use bandcontrol::bpe::{learn_bpe, BpeModel, Merge};
use bandcontrol::metrics::evaluate_pair;
use bandcontrol::neural::{
    expand_similarity, generate, se_attention, top_k_size, train_step, vq_quantize, Adam, BandControlNet,
    GenerateOptions, Graph, Mask, ModelConfig, Sample, Tensor,
};
use bandcontrol::score::{compress_instruments, filter_song, quantize_song, split_windows, Instrument, Note, Song, Track};
use bandcontrol::synth::synth_corpus;
use bandcontrol::tokenizer::{canonicalize, detokenize, tokenize_remi_plus, tokenize_song, Token, TokenKind, Vocab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: u32, name: &str, pass: bool, detail: String) {
    let line = format!("criterion {n:>2} {name}: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    // written straight to stdout so the line shows without --nocapture
    std::io::stdout().write_all(line.as_bytes()).unwrap();
    assert!(pass, "{line}");
}

fn corpus() -> &'static [Song] {
    static C: OnceLock<Vec<Song>> = OnceLock::new();
    C.get_or_init(|| {
        synth_corpus(50, 2024)
            .iter()
            .map(|s| {
                let s = compress_instruments(&quantize_song(s)).expect("synthetic songs have drums and melody");
                assert!(filter_song(&s).accepted);
                s
            })
            .collect()
    })
}

fn note_multiset(song: &Song) -> HashMap<(Instrument, Note), usize> {
    let mut m = HashMap::new();
    for t in &song.tracks {
        for n in &t.notes {
            *m.entry((t.instrument, *n)).or_default() += 1;
        }
    }
    m
}

#[test]
fn c01_tokenization_round_trip() {
    let v = Vocab::default_vocab();
    let start = Instant::now();
    let exact = corpus()
        .iter()
        .filter(|s| {
            let back = detokenize(&tokenize_song(s, &v).unwrap(), &v).unwrap();
            note_multiset(&back) == note_multiset(&canonicalize(s, &v)) && back.n_bars == s.n_bars
        })
        .count();
    let secs = start.elapsed().as_secs_f64();
    let n = corpus().len();
    report(1, "tokenization round-trip", n >= 50 && exact == n && secs < 10.0, format!("{exact}/{n} songs exact in {secs:.2} s"));
}

fn track_seqs(v: &Vocab) -> Vec<Vec<Vec<u32>>> {
    corpus()
        .iter()
        .map(|s| {
            let t = tokenize_song(s, v).unwrap();
            (0..t.n_tracks()).map(|i| t.unpadded(i).to_vec()).collect()
        })
        .collect()
}

#[test]
fn c02_bpe_identity_and_compression() {
    let v = Vocab::default_vocab();
    let songs = track_seqs(&v);
    let all: Vec<&Vec<u32>> = songs.iter().flatten().collect();
    let bpe = learn_bpe(&all, &v, 2000).unwrap();
    let mut identity = true;
    let (mut raw, mut enc) = (0usize, 0usize);
    for song in &songs {
        let mut longest = (0, 0);
        for seq in song {
            let e = bpe.encode(seq).unwrap();
            identity &= bpe.decode(&e).unwrap() == *seq;
            longest = (longest.0.max(seq.len()), longest.1.max(e.len()));
        }
        raw += longest.0;
        enc += longest.1;
    }
    let ratio = enc as f64 / raw as f64;
    report(
        2,
        "BPE identity and compression",
        identity && ratio <= 0.8,
        format!("identity {identity}, {} merges, encoded/raw mean length {ratio:.3}", bpe.merges().len()),
    );
}

#[test]
fn c03_length_domination() {
    let v = Vocab::default_vocab();
    let (mut track, mut plus) = (0usize, 0usize);
    for s in corpus() {
        track += tokenize_song(s, &v).unwrap().max_len();
        plus += tokenize_remi_plus(s, &v).unwrap().len();
    }
    let k = corpus().len() as f64;
    let (a, b) = (track as f64 / k, plus as f64 / k);
    report(3, "length domination", a <= 0.5 * b, format!("per-track {a:.1} vs interleaved {b:.1}, ratio {:.3}", a / b));
}

#[test]
fn c04_worked_example() {
    let v = Vocab::default_vocab();
    let id = |kind, value| v.id(Token::new(kind, value)).unwrap();
    let song = Song::new(
        vec![
            Track::new(Instrument::Drum, vec![Note::new(0, 36, 12, 64)]),
            Track::new(Instrument::Piano, vec![Note::new(0, 60, 48, 64), Note::new(0, 64, 48, 64)]),
            Track::new(Instrument::Bass, vec![Note::new(0, 36, 48, 64)]),
            Track::new(Instrument::SquareSynth, vec![Note::new(0, 72, 48, 64)]),
        ],
        1,
    );
    let plus = tokenize_remi_plus(&song, &v).unwrap().len();
    let seqs = tokenize_song(&song, &v).unwrap();
    // each pitched note merges Pitch+Duration, then that with Velocity
    let dur = id(TokenKind::Duration, v.duration_class(48));
    let vel = id(TokenKind::Velocity, 16);
    let mut merges = Vec::new();
    for pitch in [36, 60, 64, 72] {
        let base = (v.base_size() + merges.len()) as u32;
        merges.push(Merge { left: id(TokenKind::Pitch, pitch), right: dur, new: base });
        merges.push(Merge { left: base, right: vel, new: base + 1 });
    }
    let bpe = BpeModel::new(merges, v.base_size(), v.base_size() + 8);
    let body_len = |ids: &[u32]| ids.iter().filter(|&&t| t != bandcontrol::tokenizer::BOS && t != bandcontrol::tokenizer::EOS).count();
    let merged: Vec<usize> = (0..seqs.n_tracks()).map(|i| body_len(&bpe.encode(seqs.unpadded(i)).unwrap())).collect();
    let raw: Vec<usize> = (0..seqs.n_tracks()).map(|i| body_len(seqs.unpadded(i))).collect();
    let longest = *merged.iter().max().unwrap();
    report(
        4,
        "worked five-note example",
        plus == 20 && longest == 5,
        format!("interleaved {plus} tokens, per-track {raw:?} raw and {merged:?} merged"),
    );
}

fn toy_model(seed: u64) -> BandControlNet {
    BandControlNet::new(ModelConfig { seed, ..ModelConfig::toy() }).unwrap()
}

#[test]
fn c05_similarity_of_ones_is_vanilla_attention() {
    let m = toy_model(1);
    let mut g = Graph::new(&m.params);
    let x = g.constant(Tensor::randn(64, 32, 1.0, &mut ChaCha8Rng::seed_from_u64(5)));
    let mask = Mask::causal(64);
    let ones = g.constant(Tensor::full(64, 64, 1.0));
    let a = se_attention(&mut g, x, Some(ones), "bottom.0.self", 2, &mask);
    let b = se_attention(&mut g, x, None, "bottom.0.self", 2, &mask);
    let diff = g.value(a).max_abs_diff(g.value(b));
    report(5, "structure-enhanced attention with all-ones similarity", diff < 1e-12, format!("max abs diff {diff:e}"));
}

#[test]
fn c06_expansion_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let store = Default::default();
    let mut checked = 0usize;
    let mut wrong = 0usize;
    for _ in 0..200 {
        let b = rng.gen_range(1..=8);
        let t = rng.gen_range(1..=64);
        let s = Tensor::randn(b, b, 1.0, &mut rng);
        let bars: Vec<usize> = (0..t).map(|_| rng.gen_range(0..b)).collect();
        let mut g = Graph::new(&store);
        let sv = g.constant(s.clone());
        let e = expand_similarity(&mut g, sv, &bars).unwrap();
        let e = g.value(e);
        for t1 in 0..t {
            for t2 in 0..t {
                checked += 1;
                wrong += usize::from(e.get(t1, t2) != s.get(bars[t1], bars[t2]));
            }
        }
    }
    report(6, "similarity expansion", wrong == 0, format!("{checked} entries checked, {wrong} wrong"));
}

#[test]
fn c07_cross_track_pass_through_and_equivariance() {
    let m = toy_model(7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut changed, mut worst) = (0usize, 0f64);
    for _ in 0..100 {
        let n = rng.gen_range(1..=4);
        let t = rng.gen_range(4..24);
        let bars = rng.gen_range(1..=t.min(6));
        let states: Vec<Tensor> = (0..n).map(|_| Tensor::randn(t, 32, 1.0, &mut rng)).collect();
        let positions: Vec<Vec<usize>> = (0..n)
            .map(|_| {
                let mut p: Vec<usize> = rand::seq::index::sample(&mut rng, t, bars).into_vec();
                p.sort_unstable();
                p
            })
            .collect();
        let run = |states: &[Tensor], positions: &[Vec<usize>]| {
            let mut g = Graph::new(&m.params);
            let vars: Vec<_> = states.iter().map(|s| g.constant(s.clone())).collect();
            let out = m.ctt_forward(&mut g, &vars, positions).unwrap();
            out.iter().map(|&o| g.value(o).clone()).collect::<Vec<_>>()
        };
        let out = run(&states, &positions);
        for i in 0..n {
            for r in (0..t).filter(|r| !positions[i].contains(r)) {
                let same = out[i].row(r).iter().zip(states[i].row(r)).all(|(a, b)| a.to_bits() == b.to_bits());
                changed += usize::from(!same);
            }
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.reverse();
        let ps: Vec<Tensor> = perm.iter().map(|&i| states[i].clone()).collect();
        let pp: Vec<Vec<usize>> = perm.iter().map(|&i| positions[i].clone()).collect();
        let pout = run(&ps, &pp);
        for (k, &i) in perm.iter().enumerate() {
            worst = worst.max(pout[k].max_abs_diff(&out[i]));
        }
    }
    report(
        7,
        "cross-track transformer pass-through and equivariance",
        changed == 0 && worst < 1e-10,
        format!("{changed} non-bar rows changed, permutation error {worst:e}"),
    );
}

fn window_samples(v: &Vocab, songs: std::ops::Range<usize>, bars: usize) -> Vec<Sample> {
    corpus()[songs].iter().map(|s| Sample::from_song(&split_windows(s, bars, bars, bars)[0], v).unwrap()).collect()
}

#[test]
fn c08_gradient_check() {
    const H: f64 = 1e-5;
    let v = Vocab::default_vocab();
    let mut m = toy_model(8);
    let sample = &window_samples(&v, 0..1, 1)[0];
    let loss = |m: &BandControlNet| {
        let mut g = Graph::new(&m.params);
        let (l, _) = m.loss(&mut g, sample).unwrap();
        g.value(l).data[0]
    };
    let (_, _, grads) = m.gradients(sample).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut worst, mut worst_block, mut missing) = (0f64, String::new(), Vec::new());
    let mut entries = 0;
    for id in 0..m.params.len() {
        let name = m.params.name(id).to_string();
        let Some(gt) = grads.get(id).cloned() else {
            missing.push(name);
            continue;
        };
        let len = gt.data.len();
        let mut order: Vec<usize> = (0..len).collect();
        order.sort_by(|&a, &b| gt.data[b].abs().total_cmp(&gt.data[a].abs()));
        let mut picks: Vec<usize> = order.into_iter().take(3).collect();
        picks.extend((0..3).map(|_| rng.gen_range(0..len)));
        for k in picks {
            let orig = m.params.tensor(id).data[k];
            m.params.tensor_mut(id).data[k] = orig + H;
            let up = loss(&m);
            m.params.tensor_mut(id).data[k] = orig - H;
            let down = loss(&m);
            m.params.tensor_mut(id).data[k] = orig;
            let numeric = (up - down) / (2.0 * H);
            let analytic = gt.data[k];
            let rel = (numeric - analytic).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            entries += 1;
            if rel > worst {
                worst = rel;
                worst_block = name.clone();
            }
        }
    }
    report(
        8,
        "gradient check",
        worst < 1e-4 && missing.is_empty(),
        format!("{} blocks, {entries} entries, worst relative error {worst:.2e} in {worst_block}, blocks without gradient {missing:?}", m.params.len()),
    );
}

struct Trained {
    model: BandControlNet,
    losses: Vec<f64>,
    seconds: f64,
}

const SMOKE_STEPS: usize = 200;

fn train(steps: usize) -> (BandControlNet, Vec<f64>) {
    let v = Vocab::default_vocab();
    let samples = window_samples(&v, 0..8, 2);
    let mut model = toy_model(9);
    let mut opt = Adam::new(&model.params);
    let mut losses = Vec::with_capacity(steps + 1);
    losses.push(samples.iter().map(|s| model.mean_loss(s).unwrap()).sum::<f64>() / samples.len() as f64);
    for _ in 0..steps {
        let lr = model.config.lr;
        let stats = train_step(&mut model, &mut opt, &samples, lr).unwrap();
        losses.push(stats.mean_loss);
    }
    (model, losses)
}

fn trained() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| {
        let start = Instant::now();
        let (model, losses) = train(SMOKE_STEPS);
        Trained { model, losses, seconds: start.elapsed().as_secs_f64() }
    })
}

#[test]
fn c09_training_smoke() {
    let t = trained();
    let secs = t.seconds;
    let ln_v = (t.model.config.vocab_size as f64).ln();
    let (rerun_model, rerun) = train(SMOKE_STEPS);
    let deterministic = rerun.iter().zip(&t.losses).all(|(a, b)| a.to_bits() == b.to_bits()) && rerun_model == t.model;
    let first_below = t.losses.iter().position(|&l| l < 0.5 * ln_v);
    report(
        9,
        "training smoke",
        (t.losses[0] - ln_v).abs() < 0.1 * ln_v && first_below.is_some() && deterministic && secs < 300.0,
        format!(
            "loss {:.3} -> {:.3} (ln V = {ln_v:.3}), below half at step {first_below:?}, rerun identical {deterministic}, {secs:.0} s",
            t.losses[0],
            t.losses[SMOKE_STEPS]
        ),
    );
}

#[test]
fn c10_top_k_contract() {
    let v = Vocab::default_vocab();
    let k_wide = top_k_size(10_000, 0.02).unwrap();
    let wide = BandControlNet::new(ModelConfig { vocab_size: 10_000, ..ModelConfig::toy() }).unwrap();
    let reference = &window_samples(&v, 40..41, 2)[0];
    let opts = GenerateOptions { seed: 1, max_len: Some(12), audit: true, ..Default::default() };
    let g = generate(&wide, &reference.grid, &reference.instruments, &v, None, &opts).unwrap();
    let wide_ok = g.audit.iter().all(|e| e.top_k.len() == 200);

    let model = &trained().model;
    let refs = window_samples(&v, 30..50, 2);
    let (mut draws, mut outside, mut bars_ok) = (0usize, 0usize, 0usize);
    for (seed, r) in refs.iter().enumerate() {
        let opts = GenerateOptions { seed: seed as u64, max_len: Some(160), audit: true, ..Default::default() };
        let out = generate(model, &r.grid, &r.instruments, &v, None, &opts).unwrap();
        for e in &out.audit {
            draws += 1;
            let inside = e.top_k.iter().any(|&(id, _)| id == e.token) && e.top_k.iter().all(|&(_, p)| p >= e.best_excluded);
            outside += usize::from(!inside);
        }
        let song = detokenize(&out.seqs, &v).unwrap();
        bars_ok += usize::from(out.seqs.bar_token_positions.iter().all(|p| p.len() == r.grid.n_bars()) && song.n_bars == r.grid.n_bars());
    }
    report(
        10,
        "top-k contract",
        k_wide == 200 && wide_ok && outside == 0 && bars_ok == refs.len(),
        format!("k = {k_wide} at V = 10000, {draws} audited draws with {outside} outside the top k, {bars_ok}/{} bar counts match", refs.len()),
    );
}

fn random_song(rng: &mut ChaCha8Rng) -> Song {
    let n_bars = rng.gen_range(1..=8);
    let tracks = (0..rng.gen_range(0..=4))
        .map(|_| {
            let inst = Instrument::ALL[rng.gen_range(0..6)];
            let notes = (0..rng.gen_range(0..40))
                .map(|_| {
                    Note::new(rng.gen_range(0..n_bars as u32 * 192), rng.gen_range(0..128), rng.gen_range(1..400), rng.gen_range(1..128))
                })
                .collect();
            Track::new(inst, notes)
        })
        .collect();
    Song::new(tracks, n_bars)
}

#[test]
fn c11_metric_self_identity_and_ranges() {
    let mut perfect = 0;
    for s in corpus() {
        let r = evaluate_pair(s, s, None).unwrap();
        let one = |x: f64| (x - 1.0).abs() < 1e-12;
        if r.nde == 0.0 && r.ssmd == 0.0 && [r.oap, r.oad, r.oav, r.ccs, r.gcs, r.ca].into_iter().all(one) {
            perfect += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let in_range = (0..1000).filter(|_| evaluate_pair(&random_song(&mut rng), &random_song(&mut rng), None).unwrap().in_range()).count();
    let n = corpus().len();
    report(
        11,
        "metric self-identity and ranges",
        perfect == n && in_range == 1000,
        format!("{perfect}/{n} perfect self-scores, {in_range}/1000 random pairs in range"),
    );
}

#[test]
fn c12_vq_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let codebook = Tensor::randn(16, 4, 1.0, &mut rng);
    let mut agree = 0;
    for _ in 0..1000 {
        let z: Vec<f64> = (0..32).map(|_| rng.gen_range(-2.5..2.5)).collect();
        let (codes, q) = vq_quantize(&z, &codebook).unwrap();
        let mut ok = true;
        for (n, group) in z.chunks(4).enumerate() {
            let dist = |c: usize| (0..4).map(|j| (group[j] - codebook.get(c, j)).powi(2)).sum::<f64>();
            let best = (0..16).fold(0, |b, c| if dist(c) < dist(b) { c } else { b });
            ok &= usize::from(codes[n]) == best && q.row(n) == codebook.row(best);
        }
        agree += usize::from(ok);
    }
    report(12, "vector quantization oracle", agree == 1000, format!("{agree}/1000 vectors match, K = 16, 8 groups"));
}
