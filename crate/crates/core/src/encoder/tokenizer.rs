use serde::{Deserialize, Serialize};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
const FIRST_TERM_ID: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerMode {
    /// Lowercased maximal alphanumeric runs.
    #[default]
    Word,
    /// Consecutive character pairs within each whitespace-separated chunk;
    /// suited to scripts without word delimiters.
    CharBigram,
}

/// Hash tokenizer shared by every model built from one [`EncoderConfig`].
///
/// [`EncoderConfig`]: super::EncoderConfig
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerSpec {
    pub mode: TokenizerMode,
    pub vocab_size: usize,
    pub max_seq: usize,
}

/// 64-bit FNV-1a over the UTF-8 bytes of `s`.
pub fn fnv1a64(s: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    s.bytes().fold(OFFSET, |h, b| (h ^ b as u64).wrapping_mul(PRIME))
}

impl TokenizerSpec {
    fn term_id(&self, term: &str) -> u32 {
        let buckets = (self.vocab_size - FIRST_TERM_ID as usize) as u64;
        FIRST_TERM_ID + (fnv1a64(term) % buckets) as u32
    }

    /// Term ids without `bos`/`eos` and without truncation.
    pub fn terms(&self, text: &str) -> Vec<u32> {
        let lower = text.to_lowercase();
        match self.mode {
            TokenizerMode::Word => lower
                .split(|c: char| !c.is_alphanumeric())
                .filter(|w| !w.is_empty())
                .map(|w| self.term_id(w))
                .collect(),
            TokenizerMode::CharBigram => {
                let mut ids = Vec::new();
                let mut buf = String::new();
                for chunk in lower.split_whitespace() {
                    let chars: Vec<char> = chunk.chars().collect();
                    if chars.len() == 1 {
                        ids.push(self.term_id(chunk));
                        continue;
                    }
                    for pair in chars.windows(2) {
                        buf.clear();
                        buf.extend(pair);
                        ids.push(self.term_id(&buf));
                    }
                }
                ids
            }
        }
    }

    /// `bos ++ terms ++ eos`, cut to `max_seq` ids with `eos` kept last.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let terms = self.terms(text);
        let room = self.max_seq.saturating_sub(2);
        let mut ids = Vec::with_capacity(terms.len().min(room) + 2);
        ids.push(BOS_ID);
        ids.extend(terms.into_iter().take(room));
        ids.push(EOS_ID);
        ids
    }
}

pub fn tokenize(text: &str, spec: &TokenizerSpec) -> Vec<u32> {
    spec.tokenize(text)
}
