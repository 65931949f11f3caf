//! The control-conditioned transformer and its VQ-VAE feature tokenizer,
//! on a small f64 autodiff tape.

mod config;
mod generate;
mod graph;
mod model;
mod params;
mod tensor;
mod train;
mod vq;

pub use config::ModelConfig;
pub use generate::{generate, repair_track, top_k_size, AuditEntry, GenerateOptions, Generation};
pub use graph::{Gradients, Graph, Mask, Var};
pub use model::{attention, bar_similarity, expand_similarity, se_attention, BandControlNet, Sample, TrackContext};
pub use params::{read_checkpoint, write_checkpoint, ParamStore};
pub use tensor::{sinusoidal, Tensor};
pub use train::{train, train_step, Adam, StepStats};
pub use vq::{fill_vq_codes, train_vqvae, vq_quantize, VqTrainReport, VqVae};

#[derive(Debug, thiserror::Error)]
pub enum NeuralError {
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("feature bin out of vocabulary at track {track}, bar {bar}")]
    BinOutOfVocab { track: usize, bar: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    IdOutOfVocab { id: u32, vocab: usize },
    #[error("bar index {bar} outside 0..{bars}")]
    BarIndexOutOfRange { bar: usize, bars: usize },
    #[error("tracks disagree on bar-token counts {counts:?}")]
    BarCountMismatch { counts: Vec<usize> },
    #[error("codebook is empty")]
    EmptyCodebook,
    #[error("vocabulary is empty")]
    DegenerateVocab,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn check_blocks(fresh: &ParamStore, loaded: &ParamStore) -> Result<(), NeuralError> {
    if fresh.len() != loaded.len() {
        return Err(NeuralError::Checkpoint(format!("expected {} blocks, found {}", fresh.len(), loaded.len())));
    }
    for (name, t) in fresh.iter() {
        match loaded.get(name) {
            Some(p) if p.shape == t.shape => {}
            Some(p) => return Err(NeuralError::Checkpoint(format!("{name} has shape {:?}, expected {:?}", p.shape, t.shape))),
            None => return Err(NeuralError::Checkpoint(format!("missing block {name}"))),
        }
    }
    Ok(())
}

impl BandControlNet {
    pub fn save(&self, out: &mut impl std::io::Write) -> std::io::Result<()> {
        write_checkpoint(out, &self.config.to_text(), &self.params)
    }

    /// Load a checkpoint and check every block against the shapes its
    /// config implies.
    pub fn load(input: &mut impl std::io::Read) -> Result<Self, NeuralError> {
        let (header, params) = read_checkpoint(input)?;
        let config = ModelConfig::from_text(&header, ModelConfig::toy())?;
        check_blocks(&BandControlNet::new(config.clone())?.params, &params)?;
        Ok(Self { config, params })
    }
}

impl VqVae {
    pub fn save(&self, out: &mut impl std::io::Write) -> std::io::Result<()> {
        write_checkpoint(out, &self.config.to_text(), &self.params)
    }

    pub fn load(input: &mut impl std::io::Read) -> Result<Self, NeuralError> {
        let (header, params) = read_checkpoint(input)?;
        let config = ModelConfig::from_text(&header, ModelConfig::toy())?;
        check_blocks(&VqVae::new(config.clone())?.params, &params)?;
        Ok(Self { config, params })
    }
}
