//! Command-line front end: preprocess, tokenize, bpe-train, features, train,
//! generate, evaluate, stats and synth.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::bpe::{learn_bpe, BpeError, BpeModel};
use crate::features::{extract_expert_features, FeatureError, BEATS_PER_BAR};
use crate::metrics::{evaluate_pair, mean_report, MetricsError, Timing, CSV_HEADER};
use crate::neural::{
    fill_vq_codes, generate, train_step, train_vqvae, Adam, BandControlNet, GenerateOptions, ModelConfig, NeuralError, Sample,
    VqVae,
};
use crate::score::{
    compress_instruments, dedupe_corpus, filter_song, parse_midi, quantize_song, split_windows, write_midi, ScoreError, Song,
};
use crate::synth::synth_corpus;
use crate::tokenizer::{
    corpus_stats, detokenize, read_token_corpus, tokenize_remi_plus, tokenize_song, write_token_corpus, StatsEntry, TokenRecord,
    TokenizeError, TrackTokenSeqs, Vocab,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("no counterpart for {0} in the other directory")]
    PairMismatch(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    /// Process exit status: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numeric(_) => 3,
            _ => 2,
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}
data_error!(ScoreError, TokenizeError, BpeError, FeatureError, MetricsError);

impl From<NeuralError> for CliError {
    fn from(e: NeuralError) -> Self {
        match e {
            NeuralError::NonFinite(_) => CliError::Numeric(e.to_string()),
            NeuralError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "bandcontrol", version, about = "Steerable multitrack music generation pipeline")]
pub struct Cli {
    /// Worker threads for per-song parallelism.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Quantize, compress, filter, window and deduplicate a MIDI directory.
    Preprocess(PreprocessArgs),
    /// Write a token corpus and its vocabulary file.
    Tokenize(TokenizeArgs),
    /// Learn BPE merges from a token corpus.
    BpeTrain(BpeTrainArgs),
    /// Write binned expert features for every song.
    Features(FeaturesArgs),
    /// Train a model on the training split of a song directory.
    Train(TrainArgs),
    /// Generate a new piece steered by the features of a reference.
    Generate(GenerateArgs),
    /// Score cover songs against references with the fidelity metrics.
    Evaluate(EvaluateArgs),
    /// Print tokens per beat, tokens per note and average length.
    Stats(StatsArgs),
    /// Write a seeded synthetic MIDI corpus.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub min_bars: usize,
    #[arg(long, default_value_t = 16)]
    pub max_bars: usize,
    #[arg(long, default_value_t = 16)]
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    All,
    Train,
    Test,
}

#[derive(Args, Debug)]
pub struct TokenizeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::All)]
    pub split: Split,
    /// Merge file to apply after tokenizing.
    #[arg(long)]
    pub bpe: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BpeTrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    pub vocab_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FeaturesArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Toy,
    Paper,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Checkpoint path; the VQ-VAE goes next to it with a `.vq` suffix.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Toy)]
    pub preset: Preset,
    /// `key = value` overrides applied on top of the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub bpe: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 100)]
    pub vq_steps: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub bpe: Option<PathBuf>,
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub cov: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long, required = true, num_args = 1..)]
    pub corpus: Vec<PathBuf>,
    /// Also report BPE rows, learning merges up to this vocabulary size.
    #[arg(long)]
    pub bpe_size: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Provenance record written next to each output.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<PathBuf>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub version: String,
    pub wall_seconds: f64,
    pub extra: Vec<(String, String)>,
}

impl RunManifest {
    fn new(command: &str) -> Self {
        Self { command: command.into(), version: env!("CARGO_PKG_VERSION").into(), ..Default::default() }
    }

    pub fn to_text(&self) -> String {
        let paths = |p: &[PathBuf]| p.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(" ");
        let mut s = String::new();
        writeln!(s, "command = {}", self.command).unwrap();
        writeln!(s, "config = {}", self.config.as_ref().map_or("-".into(), |p| p.display().to_string())).unwrap();
        writeln!(s, "inputs = {}", paths(&self.inputs)).unwrap();
        writeln!(s, "outputs = {}", paths(&self.outputs)).unwrap();
        writeln!(s, "seed = {}", self.seed.map_or("-".into(), |x| x.to_string())).unwrap();
        writeln!(s, "version = {}", self.version).unwrap();
        writeln!(s, "wall_seconds = {:.3}", self.wall_seconds).unwrap();
        for (k, v) in &self.extra {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    /// `key = value` pairs of a manifest file, in order.
    pub fn parse(text: &str) -> Vec<(String, String)> {
        text.lines()
            .filter_map(|l| l.split_once(" = "))
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .collect()
    }
}

/// Whether a song id falls in the held-out tenth.
pub fn is_test_song(id: &str) -> bool {
    let h = Sha256::digest(id.as_bytes());
    u64::from_be_bytes(h[..8].try_into().unwrap()) % 10 == 0
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// Write `bytes` to a temporary file beside `path`, then rename it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| CliError::Io { path: path.to_path_buf(), source: e.error })?;
    Ok(())
}

fn manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().map(OsString::from).unwrap_or_default();
    name.push(".manifest");
    artifact.with_file_name(name)
}

fn finish(mut manifest: RunManifest, start: Instant, at: &Path) -> Result<()> {
    manifest.wall_seconds = start.elapsed().as_secs_f64();
    write_atomic(at, manifest.to_text().as_bytes())
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn has_ext(path: &Path, exts: &[&str]) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| exts.iter().any(|x| e.eq_ignore_ascii_case(x)))
}

const SONG_EXTS: [&str; 3] = ["song", "mid", "midi"];

/// Files in `dir` with one of `exts`, sorted by name.
fn list_files(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && has_ext(p, exts))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::MissingInput(format!("no {} files in {}", exts.join("/"), dir.display())));
    }
    Ok(files)
}

/// One file per stem, preferring the `.song` text form when a stem has
/// several.
fn songs_by_stem(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out: Vec<(String, PathBuf)> = Vec::new();
    for f in list_files(dir, &SONG_EXTS)? {
        let name = stem(&f);
        match out.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) if has_ext(&f, &["song"]) => slot.1 = f,
            Some(_) => {}
            None => out.push((name, f)),
        }
    }
    Ok(out)
}

/// A `.song` file as is, or a MIDI file quantized and compressed to the six
/// instrument classes.
pub fn load_song(path: &Path) -> Result<Song> {
    if has_ext(path, &["song"]) {
        return Ok(Song::from_text(&read_text(path)?)?);
    }
    let raw = parse_midi(&read_bytes(path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(quantize_song(&compress_instruments(&raw).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?))
}

fn load_bpe(path: Option<&Path>, vocab: &Vocab) -> Result<Option<BpeModel>> {
    path.map(|p| Ok(BpeModel::from_text(&read_text(p)?, vocab.base_size())?)).transpose()
}

fn encode_seqs(seqs: TrackTokenSeqs, vocab: &Vocab, bpe: Option<&BpeModel>) -> Result<TrackTokenSeqs> {
    let Some(bpe) = bpe else { return Ok(seqs) };
    let ids = (0..seqs.n_tracks()).map(|i| bpe.encode(seqs.unpadded(i))).collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(TrackTokenSeqs::from_ids(ids, &vocab.with_merges(bpe.merges().len())))
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global();
    }
    match cli.command {
        Command::Preprocess(a) => preprocess(&a),
        Command::Tokenize(a) => tokenize(&a),
        Command::BpeTrain(a) => bpe_train(&a),
        Command::Features(a) => features(&a),
        Command::Train(a) => train(&a),
        Command::Generate(a) => generate_cmd(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Stats(a) => stats(&a),
        Command::Synth(a) => synth(&a),
    }
}

/// Parse `args`, run the command and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn preprocess(a: &PreprocessArgs) -> Result<()> {
    if a.min_bars == 0 || a.min_bars > a.max_bars || a.stride == 0 {
        return Err(CliError::Usage("need 0 < min-bars <= max-bars and stride > 0".into()));
    }
    let start = Instant::now();
    let files = list_files(&a.input, &SONG_EXTS)?;
    let mut windows: Vec<(String, Song)> = Vec::new();
    let mut rejected = 0;
    for f in &files {
        let song = match load_song(f) {
            Ok(s) => s,
            Err(e) => {
                eprintln!("skip {}: {e}", f.display());
                rejected += 1;
                continue;
            }
        };
        let verdict = filter_song(&song);
        if !verdict.accepted {
            eprintln!("skip {}: {:?}", f.display(), verdict.reasons);
            rejected += 1;
            continue;
        }
        for (k, w) in split_windows(&song, a.min_bars, a.max_bars, a.stride).into_iter().enumerate() {
            windows.push((format!("{}_w{k:03}", stem(f)), w));
        }
    }
    let before = windows.len();
    let kept = dedupe_corpus(windows.iter().map(|(_, s)| s.clone()).collect());
    let mut named = Vec::with_capacity(kept.len());
    let mut cursor = windows.into_iter();
    for song in kept {
        // dedupe keeps order, so walk forward to the matching window
        for (name, w) in cursor.by_ref() {
            if w == song {
                named.push((name, w));
                break;
            }
        }
    }
    let mut manifest = RunManifest::new("preprocess");
    manifest.inputs = files;
    for (name, song) in &named {
        let path = a.out.join(format!("{name}.song"));
        write_atomic(&path, song.to_text().as_bytes())?;
        manifest.outputs.push(path);
    }
    manifest.extra = vec![
        ("rejected_songs".into(), rejected.to_string()),
        ("windows".into(), before.to_string()),
        ("duplicates".into(), (before - named.len()).to_string()),
    ];
    eprintln!("{} windows written, {} duplicates dropped, {rejected} songs rejected", named.len(), before - named.len());
    finish(manifest, start, &a.out.join("MANIFEST"))
}

fn tokenize(a: &TokenizeArgs) -> Result<()> {
    let start = Instant::now();
    let vocab = Vocab::default_vocab();
    let bpe = load_bpe(a.bpe.as_deref(), &vocab)?;
    let files = list_files(&a.input, &SONG_EXTS)?;
    let mut records = Vec::new();
    for f in &files {
        let id = stem(f);
        let keep = match a.split {
            Split::All => true,
            Split::Train => !is_test_song(&id),
            Split::Test => is_test_song(&id),
        };
        if !keep {
            continue;
        }
        let seqs = encode_seqs(tokenize_song(&load_song(f)?, &vocab)?, &vocab, bpe.as_ref())?;
        let tracks = (0..seqs.n_tracks()).map(|i| seqs.unpadded(i).to_vec()).collect();
        records.push(TokenRecord { id, tracks });
    }
    if records.is_empty() {
        return Err(CliError::MissingInput(format!("no songs of the {:?} split in {}", a.split, a.input.display())));
    }
    let vocab_path = a.out.with_extension("vocab");
    write_atomic(&a.out, write_token_corpus(&records).as_bytes())?;
    write_atomic(&vocab_path, vocab.to_text().as_bytes())?;
    let mut manifest = RunManifest::new("tokenize");
    manifest.inputs = files;
    manifest.inputs.extend(a.bpe.clone());
    manifest.outputs = vec![a.out.clone(), vocab_path];
    manifest.extra = vec![("songs".into(), records.len().to_string())];
    finish(manifest, start, &manifest_path(&a.out))
}

fn bpe_train(a: &BpeTrainArgs) -> Result<()> {
    let start = Instant::now();
    let vocab = Vocab::default_vocab();
    let records = read_token_corpus(&read_text(&a.corpus)?)?;
    let seqs: Vec<&Vec<u32>> = records.iter().flat_map(|r| &r.tracks).collect();
    if seqs.is_empty() {
        return Err(CliError::MissingInput(format!("{} holds no sequences", a.corpus.display())));
    }
    let model = learn_bpe(&seqs, &vocab, a.vocab_size)?;
    write_atomic(&a.out, model.to_text().as_bytes())?;
    eprintln!("{} merges learned, vocabulary {}", model.merges().len(), model.vocab_size());
    let mut manifest = RunManifest::new("bpe-train");
    manifest.inputs = vec![a.corpus.clone()];
    manifest.outputs = vec![a.out.clone()];
    manifest.extra = vec![("merges".into(), model.merges().len().to_string())];
    finish(manifest, start, &manifest_path(&a.out))
}

fn features(a: &FeaturesArgs) -> Result<()> {
    let start = Instant::now();
    let files = list_files(&a.input, &SONG_EXTS)?;
    let grids = files.iter().map(|f| Ok((stem(f), extract_expert_features(&load_song(f)?)))).collect::<Result<Vec<_>>>()?;
    let mut manifest = RunManifest::new("features");
    manifest.inputs = files;
    for (name, grid) in grids {
        let path = a.out.join(format!("{name}.feat"));
        write_atomic(&path, grid.to_text().as_bytes())?;
        manifest.outputs.push(path);
    }
    finish(manifest, start, &a.out.join("MANIFEST"))
}

fn vq_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().map(OsString::from).unwrap_or_default();
    name.push(".vq");
    checkpoint.with_file_name(name)
}

fn train(a: &TrainArgs) -> Result<()> {
    let start = Instant::now();
    let vocab = Vocab::default_vocab();
    let mut config = match a.preset {
        Preset::Toy => ModelConfig::toy(),
        Preset::Paper => ModelConfig::paper(),
    };
    if let Some(p) = &a.config {
        config = ModelConfig::from_text(&read_text(p)?, config)?;
    }
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    let bpe = load_bpe(a.bpe.as_deref(), &vocab)?;
    config.vocab_size = bpe.as_ref().map_or(vocab.size(), BpeModel::vocab_size);
    config.validate()?;

    let files = list_files(&a.input, &SONG_EXTS)?;
    let mut samples = Vec::new();
    let mut skipped = 0;
    for f in files.iter().filter(|f| !is_test_song(&stem(f))) {
        let song = load_song(f)?;
        let mut s = Sample::from_song(&song, &vocab)?;
        s.seqs = encode_seqs(s.seqs, &vocab, bpe.as_ref())?;
        if song.n_bars > config.max_bars || s.seqs.max_len() > config.max_len || s.seqs.n_tracks() > config.tracks {
            skipped += 1;
            continue;
        }
        samples.push(s);
    }
    if samples.is_empty() {
        return Err(CliError::MissingInput(format!("no trainable songs in the training split of {}", a.input.display())));
    }

    let seqs: Vec<TrackTokenSeqs> = samples.iter().map(|s| s.seqs.clone()).collect();
    let (vq, vq_report) = train_vqvae(&seqs, &config, a.vq_steps, config.batch_size)?;
    for s in &mut samples {
        fill_vq_codes(&vq, &mut s.grid, &s.seqs)?;
    }

    let mut model = BandControlNet::new(config.clone())?;
    let mut opt = Adam::new(&model.params);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut cursor = order.len();
    let batch = config.batch_size.max(1).min(samples.len());
    let mut log = String::from("step,epoch,lr,loss\n");
    for step in 0..a.steps {
        let mut picked = Vec::with_capacity(batch);
        while picked.len() < batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(samples[order[cursor]].clone());
            cursor += 1;
        }
        let epoch = (step * batch) as f64 / samples.len() as f64;
        let stats = train_step(&mut model, &mut opt, &picked, config.lr_at(epoch))?;
        writeln!(log, "{step},{epoch:.4},{:.6e},{:.6}", stats.lr, stats.mean_loss).unwrap();
        if step % 10 == 0 || step + 1 == a.steps {
            eprintln!("step {step:>5}  loss {:.4}", stats.mean_loss);
        }
    }

    let mut ckpt = Vec::new();
    model.save(&mut ckpt).map_err(io_err(&a.out))?;
    let mut vq_bytes = Vec::new();
    vq.save(&mut vq_bytes).map_err(io_err(&a.out))?;
    let log_path = a.out.with_extension("log.csv");
    write_atomic(&a.out, &ckpt)?;
    write_atomic(&vq_path(&a.out), &vq_bytes)?;
    write_atomic(&log_path, log.as_bytes())?;

    let mut manifest = RunManifest::new("train");
    manifest.config = a.config.clone();
    manifest.inputs = files;
    manifest.inputs.extend(a.bpe.clone());
    manifest.outputs = vec![a.out.clone(), vq_path(&a.out), log_path];
    manifest.seed = Some(config.seed);
    manifest.extra = vec![
        ("samples".into(), samples.len().to_string()),
        ("skipped".into(), skipped.to_string()),
        ("steps".into(), a.steps.to_string()),
        ("vq_codebook_usage".into(), format!("{:.4}", vq_report.codebook_usage)),
    ];
    finish(manifest, start, &manifest_path(&a.out))
}

fn generate_cmd(a: &GenerateArgs) -> Result<()> {
    let start = Instant::now();
    let vocab = Vocab::default_vocab();
    let model = BandControlNet::load(&mut read_bytes(&a.checkpoint)?.as_slice())?;
    let bpe = load_bpe(a.bpe.as_deref(), &vocab)?;
    let expected = bpe.as_ref().map_or(vocab.size(), BpeModel::vocab_size);
    if expected != model.config.vocab_size {
        return Err(CliError::Data(format!(
            "checkpoint vocabulary is {} but the tokenizer gives {expected}; pass the merge file used in training",
            model.config.vocab_size
        )));
    }
    let reference = load_song(&a.reference)?;
    if reference.tracks.is_empty() || reference.n_bars == 0 {
        return Err(CliError::Data(format!("{} has no notes", a.reference.display())));
    }
    if reference.n_bars > model.config.max_bars {
        return Err(CliError::Data(format!("reference has {} bars, the model takes at most {}", reference.n_bars, model.config.max_bars)));
    }
    let mut sample = Sample::from_song(&reference, &vocab)?;
    let vq_file = vq_path(&a.checkpoint);
    if vq_file.exists() {
        let vq = VqVae::load(&mut read_bytes(&vq_file)?.as_slice())?;
        let seqs = encode_seqs(sample.seqs.clone(), &vocab, bpe.as_ref())?;
        fill_vq_codes(&vq, &mut sample.grid, &seqs)?;
    }
    let opts = GenerateOptions { seed: a.seed, max_len: a.max_len, ..Default::default() };
    let out = generate(&model, &sample.grid, &sample.instruments, &vocab, bpe.as_ref(), &opts)?;
    let song = detokenize(&out.seqs, &vocab)?;

    let tokens_path = a.out.with_extension("tokens");
    let song_path = a.out.with_extension("song");
    let record = TokenRecord {
        id: stem(&a.out),
        tracks: (0..out.seqs.n_tracks()).map(|i| out.seqs.unpadded(i).to_vec()).collect(),
    };
    write_atomic(&a.out, &write_midi(&song))?;
    write_atomic(&tokens_path, write_token_corpus(&[record]).as_bytes())?;
    write_atomic(&song_path, song.to_text().as_bytes())?;

    let mut manifest = RunManifest::new("generate");
    manifest.inputs = vec![a.checkpoint.clone(), a.reference.clone()];
    manifest.inputs.extend(a.bpe.clone());
    manifest.outputs = vec![a.out.clone(), tokens_path, song_path.clone()];
    manifest.seed = Some(a.seed);
    manifest.extra = vec![
        ("bars".into(), song.n_bars.to_string()),
        ("tokens".into(), out.tokens.to_string()),
        ("notes".into(), song.note_count().to_string()),
        ("generation_seconds".into(), format!("{:.6}", out.seconds)),
    ];
    finish(manifest, start, &manifest_path(&a.out))
}

/// Generation timing recorded in a cover's manifest, if any.
fn read_timing(cover: &Path) -> Option<Timing> {
    let text = [cover.to_path_buf(), cover.with_extension("mid")].iter().find_map(|p| fs::read_to_string(manifest_path(p)).ok())?;
    let kv = RunManifest::parse(&text);
    let get = |k: &str| kv.iter().find(|(key, _)| key == k).map(|(_, v)| v.clone());
    Some(Timing { tokens: get("tokens")?.parse().ok()?, notes: get("notes")?.parse().ok()?, seconds: get("generation_seconds")?.parse().ok()? })
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let start = Instant::now();
    let refs = songs_by_stem(&a.reference)?;
    let covs = songs_by_stem(&a.cov)?;
    let find = |files: &[(String, PathBuf)], name: &str| files.iter().find(|(n, _)| n == name).map(|(_, p)| p.clone());
    for (name, c) in &covs {
        if find(&refs, name).is_none() {
            return Err(CliError::PairMismatch(c.display().to_string()));
        }
    }
    let mut csv = format!("{CSV_HEADER}\n");
    let mut reports = Vec::new();
    for (name, r) in &refs {
        let c = find(&covs, name).ok_or_else(|| CliError::PairMismatch(r.display().to_string()))?;
        let report = evaluate_pair(&load_song(r)?, &load_song(&c)?, read_timing(&c))
            .map_err(|e| CliError::Data(format!("{name}: {e}")))?;
        writeln!(csv, "{}", report.csv_row(name)).unwrap();
        reports.push(report);
    }
    let mean = mean_report(&reports).expect("at least one pair");
    writeln!(csv, "{}", mean.csv_row("MEAN")).unwrap();
    print!("{}", mean.to_text());
    write_atomic(&a.out, csv.as_bytes())?;
    let mut manifest = RunManifest::new("evaluate");
    manifest.inputs = refs.into_iter().chain(covs).map(|(_, p)| p).collect();
    manifest.outputs = vec![a.out.clone()];
    finish(manifest, start, &manifest_path(&a.out))
}

/// Table rows for every requested representation of the songs under `dirs`.
pub fn stats_table(songs: &[Song], bpe_size: Option<usize>) -> Result<String> {
    if songs.is_empty() {
        return Err(CliError::MissingInput("empty corpus".into()));
    }
    let vocab = Vocab::default_vocab();
    let mut track = Vec::new();
    let mut plus = Vec::new();
    for s in songs {
        let seqs = tokenize_song(s, &vocab)?;
        track.push((0..seqs.n_tracks()).map(|i| seqs.unpadded(i).to_vec()).collect::<Vec<_>>());
        plus.push(vec![tokenize_remi_plus(s, &vocab)?]);
    }
    let entries = |seqs: &[Vec<Vec<u32>>]| -> Vec<StatsEntry> {
        seqs.iter()
            .zip(songs)
            .map(|(t, s)| StatsEntry {
                lengths: t.iter().map(Vec::len).collect(),
                notes: s.note_count(),
                beats: s.n_bars * BEATS_PER_BAR,
            })
            .collect()
    };
    let mut out = format!("{:<12} {:<5} {:>7} {:>8} {:>8} {:>10}\n", "repr", "bpe", "vocab", "tok/beat", "tok/note", "avg_len");
    for (label, seqs) in [("remi_track", &track), ("remi_plus", &plus)] {
        let mut rows = vec![("raw", corpus_stats(&entries(seqs), vocab.size())?)];
        if let Some(target) = bpe_size {
            let flat: Vec<&Vec<u32>> = seqs.iter().flatten().collect();
            let model = learn_bpe(&flat, &vocab, target)?;
            let encoded =
                seqs.iter().map(|t| t.iter().map(|x| model.encode(x)).collect::<std::result::Result<Vec<_>, _>>()).collect::<std::result::Result<Vec<_>, _>>()?;
            rows.push(("bpe", corpus_stats(&entries(&encoded), model.vocab_size())?));
        }
        for (kind, st) in rows {
            writeln!(out, "{label:<12} {kind:<5} {:>7} {:>8.3} {:>8.3} {:>10.1}", st.vocab_size, st.tok_per_beat, st.tok_per_note, st.avg_len).unwrap();
        }
    }
    Ok(out)
}

fn stats(a: &StatsArgs) -> Result<()> {
    let mut songs = Vec::new();
    for dir in &a.corpus {
        for f in list_files(dir, &SONG_EXTS)? {
            songs.push(load_song(&f)?);
        }
    }
    print!("{}", stats_table(&songs, a.bpe_size)?);
    Ok(())
}

fn synth(a: &SynthArgs) -> Result<()> {
    let start = Instant::now();
    let mut manifest = RunManifest::new("synth");
    manifest.seed = Some(a.seed);
    for (i, song) in synth_corpus(a.n, a.seed).iter().enumerate() {
        let path = a.out.join(format!("synth_{i:04}.mid"));
        write_atomic(&path, &write_midi(song))?;
        manifest.outputs.push(path);
    }
    finish(manifest, start, &a.out.join("MANIFEST"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_about_a_tenth_and_stable() {
        let test = (0..2000).filter(|i| is_test_song(&format!("song{i}"))).count();
        assert!((150..250).contains(&test), "{test}");
        assert_eq!(is_test_song("abc"), is_test_song("abc"));
    }

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(main_with_args(["bandcontrol", "no-such-command"]), 1);
        assert_eq!(main_with_args(["bandcontrol", "--help"]), 0);
    }

    #[test]
    fn manifest_round_trips_its_pairs() {
        let mut m = RunManifest::new("x");
        m.seed = Some(3);
        m.extra.push(("tokens".into(), "12".into()));
        let kv = RunManifest::parse(&m.to_text());
        assert!(kv.contains(&("seed".into(), "3".into())));
        assert!(kv.contains(&("tokens".into(), "12".into())));
    }

    #[test]
    fn empty_corpus_is_missing_input() {
        assert!(matches!(stats_table(&[], None), Err(CliError::MissingInput(_))));
    }
}
