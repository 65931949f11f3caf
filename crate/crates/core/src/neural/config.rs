use std::fmt::Write as _;

use super::NeuralError;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub ffn: usize,
    pub layers_enc: usize,
    pub layers_bottom: usize,
    pub layers_top: usize,
    pub layers_ctt: usize,
    pub tracks: usize,
    pub max_bars: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub codebook_size: usize,
    pub latent_dim: usize,
    /// Base width of the feature embeddings; most tables use a multiple of it.
    pub emb_unit: usize,
    pub seed: u64,
    pub use_ctt: bool,
    pub use_se_sa: bool,
    pub lr: f64,
    pub lr_min: f64,
    pub warmup_epochs: f64,
    pub decay_epochs: f64,
    pub batch_size: usize,
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            d: 32,
            heads: 2,
            ffn: 64,
            layers_enc: 1,
            layers_bottom: 1,
            layers_top: 1,
            layers_ctt: 1,
            tracks: 4,
            max_bars: 64,
            max_len: 512,
            vocab_size: 282,
            codebook_size: 16,
            latent_dim: 16,
            emb_unit: 8,
            seed: 0,
            use_ctt: true,
            use_se_sa: true,
            lr: 1e-3,
            lr_min: 1e-3,
            warmup_epochs: 0.0,
            decay_epochs: 0.0,
            batch_size: 8,
        }
    }

    pub fn paper() -> Self {
        Self {
            d: 256,
            heads: 8,
            ffn: 1024,
            layers_enc: 4,
            layers_bottom: 3,
            layers_top: 3,
            layers_ctt: 2,
            tracks: 4,
            max_bars: 64,
            max_len: 4096,
            vocab_size: 10_000,
            codebook_size: 1024,
            latent_dim: 256,
            emb_unit: 64,
            seed: 0,
            use_ctt: true,
            use_se_sa: true,
            lr: 4e-4,
            lr_min: 4e-5,
            warmup_epochs: 20.0,
            decay_epochs: 100.0,
            batch_size: 4,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "toy" => Some(Self::toy()),
            "paper" => Some(Self::paper()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), NeuralError> {
        let bad = |m: &str| Err(NeuralError::Config(m.to_string()));
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad("d must be a positive multiple of heads");
        }
        if self.latent_dim == 0 || !self.latent_dim.is_multiple_of(8) {
            return bad("latent_dim must be a positive multiple of 8");
        }
        if self.emb_unit < 2 || !self.emb_unit.is_multiple_of(2) {
            return bad("emb_unit must be even and at least 2");
        }
        if self.ffn == 0 || self.tracks == 0 || self.max_bars == 0 || self.max_len < 2 || self.batch_size == 0 {
            return bad("ffn, tracks, max_bars, batch_size must be positive and max_len at least 2");
        }
        if self.vocab_size == 0 {
            return Err(NeuralError::DegenerateVocab);
        }
        if self.codebook_size == 0 {
            return Err(NeuralError::EmptyCodebook);
        }
        if !(self.lr > 0.0 && self.lr_min > 0.0) {
            return bad("learning rates must be positive");
        }
        Ok(())
    }

    /// Learning rate after `epoch` epochs (fractional): linear warmup to `lr`,
    /// then linear decay to `lr_min` at `decay_epochs`. Constant when
    /// `decay_epochs` is zero.
    pub fn lr_at(&self, epoch: f64) -> f64 {
        if self.decay_epochs <= 0.0 {
            return self.lr;
        }
        if epoch < self.warmup_epochs {
            return self.lr * (epoch / self.warmup_epochs).max(1e-3);
        }
        let span = (self.decay_epochs - self.warmup_epochs).max(f64::EPSILON);
        let t = ((epoch - self.warmup_epochs) / span).clamp(0.0, 1.0);
        self.lr + (self.lr_min - self.lr) * t
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("d", self.d.to_string());
        kv("heads", self.heads.to_string());
        kv("ffn", self.ffn.to_string());
        kv("layers_enc", self.layers_enc.to_string());
        kv("layers_bottom", self.layers_bottom.to_string());
        kv("layers_top", self.layers_top.to_string());
        kv("layers_ctt", self.layers_ctt.to_string());
        kv("tracks", self.tracks.to_string());
        kv("max_bars", self.max_bars.to_string());
        kv("max_len", self.max_len.to_string());
        kv("vocab_size", self.vocab_size.to_string());
        kv("codebook_size", self.codebook_size.to_string());
        kv("latent_dim", self.latent_dim.to_string());
        kv("emb_unit", self.emb_unit.to_string());
        kv("seed", self.seed.to_string());
        kv("use_ctt", self.use_ctt.to_string());
        kv("use_se_sa", self.use_se_sa.to_string());
        kv("lr", format!("{:?}", self.lr));
        kv("lr_min", format!("{:?}", self.lr_min));
        kv("warmup_epochs", format!("{:?}", self.warmup_epochs));
        kv("decay_epochs", format!("{:?}", self.decay_epochs));
        kv("batch_size", self.batch_size.to_string());
        s
    }

    /// Parse `key = value` lines over a base config. A `preset = toy|paper`
    /// line, if present, must come first and replaces the base.
    pub fn from_text(text: &str, base: ModelConfig) -> Result<Self, NeuralError> {
        let mut c = base;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |m: String| NeuralError::Config(format!("line {}: {m}", n + 1));
            let (k, v) = line.split_once('=').ok_or_else(|| bad("expected key = value".into()))?;
            let (k, v) = (k.trim(), v.trim());
            let int = || v.parse::<usize>().map_err(|_| bad(format!("{k} needs an integer")));
            let real = || v.parse::<f64>().map_err(|_| bad(format!("{k} needs a number")));
            let flag = || v.parse::<bool>().map_err(|_| bad(format!("{k} needs true or false")));
            match k {
                "preset" => c = ModelConfig::preset(v).ok_or_else(|| bad(format!("unknown preset {v}")))?,
                "d" => c.d = int()?,
                "heads" => c.heads = int()?,
                "ffn" => c.ffn = int()?,
                "layers_enc" => c.layers_enc = int()?,
                "layers_bottom" => c.layers_bottom = int()?,
                "layers_top" => c.layers_top = int()?,
                "layers_ctt" => c.layers_ctt = int()?,
                "tracks" => c.tracks = int()?,
                "max_bars" => c.max_bars = int()?,
                "max_len" => c.max_len = int()?,
                "vocab_size" => c.vocab_size = int()?,
                "codebook_size" => c.codebook_size = int()?,
                "latent_dim" => c.latent_dim = int()?,
                "emb_unit" => c.emb_unit = int()?,
                "seed" => c.seed = v.parse().map_err(|_| bad("seed needs an integer".into()))?,
                "use_ctt" => c.use_ctt = flag()?,
                "use_se_sa" => c.use_se_sa = flag()?,
                "lr" => c.lr = real()?,
                "lr_min" => c.lr_min = real()?,
                "warmup_epochs" => c.warmup_epochs = real()?,
                "decay_epochs" => c.decay_epochs = real()?,
                "batch_size" => c.batch_size = int()?,
                _ => return Err(bad(format!("unknown key {k}"))),
            }
        }
        c.validate()?;
        Ok(c)
    }
}
