//! Seeded stand-in for a text encoder: template prompts are tokenized on
//! whitespace and each token id maps to a fixed unit-norm vector.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const DEFAULT_CONTEXT: usize = 8;
pub const DEFAULT_TEXT_DIM: usize = 32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptTemplate {
    #[default]
    DamagedBroken,
    Anomalous,
    Hole,
}

impl PromptTemplate {
    pub const ALL: [PromptTemplate; 3] = [Self::DamagedBroken, Self::Anomalous, Self::Hole];

    fn pattern(self) -> &'static str {
        match self {
            Self::DamagedBroken => "a {cls} that is damaged and broken",
            Self::Anomalous => "a {cls} that is anomalous",
            Self::Hole => "a {cls} that has a hole",
        }
    }

    pub fn render(self, cls: &str) -> String {
        self.pattern().replace("{cls}", cls)
    }
}

impl FromStr for PromptTemplate {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "damaged-broken" => Ok(Self::DamagedBroken),
            "anomalous" => Ok(Self::Anomalous),
            "hole" => Ok(Self::Hole),
            other => Err(Error::config(format!("unknown prompt template `{other}`"))),
        }
    }
}

impl fmt::Display for PromptTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::DamagedBroken => "damaged-broken",
            Self::Anomalous => "anomalous",
            Self::Hole => "hole",
        })
    }
}

/// Default-template prompt for a class name.
pub fn render_prompt(cls: &str) -> String {
    PromptTemplate::DamagedBroken.render(cls)
}

/// Word → id map. Serializes as a plain JSON object.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vocabulary {
    ids: BTreeMap<String, u32>,
}

impl Vocabulary {
    /// Special tokens, every template word, then `classes` in order.
    pub fn new<S: AsRef<str>>(classes: &[S]) -> Self {
        let mut vocab = Self { ids: BTreeMap::new() };
        vocab.insert(PAD);
        vocab.insert(UNK);
        for template in PromptTemplate::ALL {
            for word in template.pattern().split_whitespace() {
                if word != "{cls}" {
                    vocab.insert(word);
                }
            }
        }
        for cls in classes {
            for word in cls.as_ref().split_whitespace() {
                vocab.insert(&word.to_lowercase());
            }
        }
        vocab
    }

    fn insert(&mut self, word: &str) {
        let next = self.ids.len() as u32;
        self.ids.entry(word.to_string()).or_insert(next);
    }

    pub fn id(&self, word: &str) -> u32 {
        self.ids.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.ids.contains_key(word)
    }

    /// Checks that ids are dense from zero with the special tokens first.
    pub fn validate(&self) -> Result<()> {
        let mut seen: Vec<u32> = self.ids.values().copied().collect();
        seen.sort_unstable();
        let dense = seen.iter().enumerate().all(|(i, &id)| i as u32 == id);
        if !dense || self.ids.get(PAD) != Some(&PAD_ID) || self.ids.get(UNK) != Some(&UNK_ID) {
            return Err(Error::config("vocabulary ids must be dense with <pad>=0, <unk>=1"));
        }
        Ok(())
    }

    pub fn tokenize(&self, prompt: &str, context: usize) -> Result<Vec<u32>> {
        let words: Vec<String> = prompt.split_whitespace().map(str::to_lowercase).collect();
        if words.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        let mut tokens: Vec<u32> = words.iter().map(|w| self.id(w)).take(context).collect();
        tokens.resize(context, PAD_ID);
        Ok(tokens)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding {
    pub tokens: Vec<u32>,
    /// `[context, dim]`.
    pub matrix: Tensor,
}

/// Settings that fully determine the encoder; stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub dim: usize,
    pub context: usize,
    pub seed: u64,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            dim: DEFAULT_TEXT_DIM,
            context: DEFAULT_CONTEXT,
            seed: 0,
        }
    }
}

/// Unit-norm vector for `token`, a pure function of `(token, seed)`.
pub fn token_vector(token: u32, dim: usize, seed: u64) -> Vec<f32> {
    let mut rng = Rng::substream(seed, token as u64);
    let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / norm) as f32).collect()
}

pub fn encode(prompt: &str, vocab: &Vocabulary, cfg: &TextEncoderConfig) -> Result<PromptEmbedding> {
    if cfg.dim == 0 || cfg.context == 0 {
        return Err(Error::config("text dim and context must be positive"));
    }
    let tokens = vocab.tokenize(prompt, cfg.context)?;
    let data = tokens
        .iter()
        .flat_map(|&tok| token_vector(tok, cfg.dim, cfg.seed))
        .collect();
    Ok(PromptEmbedding {
        matrix: Tensor::new(&[cfg.context, cfg.dim], data)?,
        tokens,
    })
}
