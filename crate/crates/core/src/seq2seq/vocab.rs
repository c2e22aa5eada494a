use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
const SEPARATORS: [&str; 2] = ["|", "&&"];

/// Word-level vocabulary shared by the encoder and decoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Reserved tokens, then the triple separators, then every other
    /// whitespace-separated word of `texts` in sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        for t in texts {
            words.extend(t.split_whitespace());
        }
        let fixed: Vec<&str> = RESERVED.iter().chain(SEPARATORS.iter()).copied().collect();
        let tokens = fixed
            .iter()
            .copied()
            .chain(words.into_iter().filter(|w| !fixed.contains(w)))
            .map(str::to_string)
            .collect();
        Self::from_tokens(tokens).expect("built vocabulary is well formed")
    }

    /// Restores a vocabulary from its token list, checking the fixed prefix
    /// and uniqueness.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, String> {
        let fixed = RESERVED.iter().chain(SEPARATORS.iter());
        if tokens.len() < RESERVED.len() + SEPARATORS.len()
            || tokens.iter().zip(fixed).any(|(a, b)| a != b)
        {
            return Err("vocabulary must start with the reserved and separator tokens".into());
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(format!("duplicate token {t:?}"));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_reserved(id: usize) -> bool {
        id < RESERVED.len()
    }
}

impl Serialize for Vocab {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(d)?;
        Self::from_tokens(tokens).map_err(serde::de::Error::custom)
    }
}

/// Token ids from `BOS` through `EOS`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        Self { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Whitespace split with `BOS`/`EOS` framing. Sequences longer than
/// `max_len` lose their trailing words; the final `EOS` is kept.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> TokenSequence {
    let budget = max_len.saturating_sub(2);
    let mut ids = vec![BOS];
    ids.extend(text.split_whitespace().take(budget).map(|w| vocab.id(w)));
    ids.push(EOS);
    TokenSequence { ids }
}

/// Joins non-reserved tokens with single spaces.
pub fn detokenize(seq: &TokenSequence, vocab: &Vocab) -> String {
    seq.ids
        .iter()
        .filter(|&&id| !Vocab::is_reserved(id))
        .filter_map(|&id| vocab.token(id))
        .collect::<Vec<_>>()
        .join(" ")
}
