//! Corpus and vocabulary files.

use std::path::Path;

use rtd_core::data::{encode, PhasePacker, TokenSequence, Vocabulary};

use crate::config::TrainPlan;
use crate::error::{io_err, Error, Result};

/// A corpus held in memory, one document per line, with its vocabulary.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub documents: Vec<String>,
}

impl Corpus {
    /// Uses the plan's vocabulary file if it names one, otherwise builds a
    /// frequency vocabulary of the model's size from the documents.
    pub fn new(documents: Vec<String>, plan: &TrainPlan) -> Result<Self> {
        let size = plan.model.vocab_size;
        let vocab = match &plan.vocab {
            Some(path) => load_vocab(path)?,
            None => Vocabulary::build(documents.iter().map(String::as_str), size)?,
        };
        if vocab.len() > size {
            return Err(Error::Config(format!(
                "vocabulary has {} tokens but the model holds {size}",
                vocab.len()
            )));
        }
        Ok(Self { vocab, documents })
    }

    pub fn load(path: &Path, plan: &TrainPlan) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::new(text.lines().map(str::to_string).collect(), plan)
    }

    pub fn encode_all(&self, max_len: usize) -> Result<Vec<TokenSequence>> {
        self.documents
            .iter()
            .map(|d| encode(d, &self.vocab, max_len).map_err(Error::from))
            .collect()
    }

    pub fn packer(&self, max_len: usize) -> Result<PhasePacker> {
        Ok(PhasePacker::new(self.encode_all(max_len)?, max_len)?)
    }
}

pub fn load_vocab(path: &Path) -> Result<Vocabulary> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(Vocabulary::parse(&text)?)
}

pub fn save_vocab(vocab: &Vocabulary, path: &Path) -> Result<()> {
    std::fs::write(path, vocab.to_text()).map_err(io_err(path))
}
