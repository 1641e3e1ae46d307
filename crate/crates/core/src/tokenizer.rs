//! WordPiece tokenizer trained on the question/answer corpus.
//!
//! Normalisation lowercases, splits on whitespace and isolates the
//! punctuation marks `. , ? !`. Training keeps frequent whole words, then
//! covers the remaining words with greedy pair merges written with the `##`
//! continuation prefix. Encoding is greedy longest-match-first.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const START: usize = 4;
pub const END: usize = 5;

pub const SPECIAL_TOKENS: [&str; 6] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[start]", "[end]"];
pub const CONTINUATION: &str = "##";
pub const DEFAULT_VOCAB_SIZE: usize = 1000;

const PUNCTUATION: [char; 4] = ['.', ',', '?', '!'];
const MAX_WORD_CHARS: usize = 100;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len()
            || tokens.iter().zip(SPECIAL_TOKENS).any(|(t, s)| t != s)
        {
            return Err(Error::Contract(format!(
                "vocabulary must start with {SPECIAL_TOKENS:?}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Contract(format!("invalid vocabulary token {t:?}")));
            }
            if index.insert(t.clone(), id).is_some() {
                return Err(Error::Contract(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Lowercase, whitespace split, punctuation isolated.
pub fn normalize(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    for chunk in text.to_lowercase().split_whitespace() {
        let mut current = String::new();
        for c in chunk.chars() {
            if PUNCTUATION.contains(&c) {
                if !current.is_empty() {
                    words.push(std::mem::take(&mut current));
                }
                words.push(c.to_string());
            } else {
                current.push(c);
            }
        }
        if !current.is_empty() {
            words.push(current);
        }
    }
    words
}

fn symbols_of(word: &str) -> Vec<String> {
    word.chars()
        .enumerate()
        .map(|(i, c)| if i == 0 { c.to_string() } else { format!("{CONTINUATION}{c}") })
        .collect()
}

fn merged(left: &str, right: &str) -> String {
    format!("{left}{}", right.strip_prefix(CONTINUATION).unwrap_or(right))
}

/// Trains a vocabulary of at most `target_size` tokens.
///
/// Layout: the six special tokens, the sorted character alphabet (initial
/// and `##` forms), whole words with frequency `>= min_freq` (most frequent
/// first, ties lexicographic), then merged subwords. A merge is only taken
/// when its pair count reaches `min_freq`.
pub fn train_vocab<S: AsRef<str>>(corpus: &[S], target_size: usize, min_freq: usize) -> Result<Vocab> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for line in corpus {
        for w in normalize(line.as_ref()) {
            *counts.entry(w).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::Contract("cannot train a vocabulary on an empty corpus".into()));
    }
    let min_freq = min_freq.max(1);

    let alphabet: BTreeSet<String> = counts.keys().flat_map(|w| symbols_of(w)).collect();
    let minimum = SPECIAL_TOKENS.len() + alphabet.len();
    if target_size <= minimum {
        return Err(Error::Config(format!(
            "target vocabulary size {target_size} must exceed {minimum} (6 specials + {} alphabet symbols)",
            alphabet.len()
        )));
    }

    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(alphabet);
    let mut present: BTreeSet<String> = tokens.iter().cloned().collect();

    let mut frequent: Vec<(&String, usize)> = counts
        .iter()
        .filter(|(w, &c)| c >= min_freq && !present.contains(*w))
        .map(|(w, &c)| (w, c))
        .collect();
    frequent.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    for (w, _) in frequent {
        if tokens.len() >= target_size {
            break;
        }
        present.insert(w.clone());
        tokens.push(w.clone());
    }

    let mut residual: Vec<(Vec<String>, usize)> = counts
        .iter()
        .filter(|(w, _)| !present.contains(*w))
        .map(|(w, &c)| (symbols_of(w), c))
        .collect();
    while tokens.len() < target_size {
        let mut pairs: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (syms, c) in &residual {
            for win in syms.windows(2) {
                *pairs.entry((&win[0], &win[1])).or_default() += c;
            }
        }
        // BTreeMap iteration is lexicographic, so the first maximum wins ties.
        let best = pairs
            .iter()
            .filter(|(_, &c)| c >= min_freq)
            .fold(None::<(&(&str, &str), usize)>, |acc, (p, &c)| match acc {
                Some((_, bc)) if bc >= c => acc,
                _ => Some((p, c)),
            });
        let Some((&(left, right), _)) = best else { break };
        let (left, right) = (left.to_string(), right.to_string());
        let token = merged(&left, &right);
        for (syms, _) in &mut residual {
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == left && syms[i + 1] == right {
                    out.push(token.clone());
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut syms[i]));
                    i += 1;
                }
            }
            *syms = out;
        }
        if present.insert(token.clone()) {
            tokens.push(token);
        }
    }
    Vocab::from_tokens(tokens)
}

/// Token stream for one text segment with the three embedding index streams.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedText {
    pub ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
}

impl EncodedText {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-pad tokens.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    /// Ids of the non-pad prefix.
    pub fn real_ids(&self) -> &[usize] {
        &self.ids[..self.real_len()]
    }
}

/// Greedy longest-match-first segmentation of one normalised word.
pub fn wordpiece(word: &str, vocab: &Vocab) -> Vec<usize> {
    let chars: Vec<char> = word.chars().collect();
    if chars.len() > MAX_WORD_CHARS {
        return vec![UNK];
    }
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while start < end {
            let body: String = chars[start..end].iter().collect();
            let candidate = if start > 0 { format!("{CONTINUATION}{body}") } else { body };
            if let Some(id) = vocab.id(&candidate) {
                found = Some(id);
                break;
            }
            end -= 1;
        }
        match found {
            Some(id) => pieces.push(id),
            None => return vec![UNK],
        }
        start = end;
    }
    pieces
}

fn pieces_of(text: &str, vocab: &Vocab) -> Vec<usize> {
    normalize(text).iter().flat_map(|w| wordpiece(w, vocab)).collect()
}

fn framed(open: usize, close: usize, pieces: Vec<usize>, max_len: usize) -> Result<EncodedText> {
    if max_len < 3 {
        return Err(Error::Config(format!("max_len {max_len} must be at least 3")));
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(open);
    ids.extend(pieces.into_iter().take(max_len - 2));
    ids.push(close);
    let real = ids.len();
    ids.resize(max_len, PAD);
    Ok(EncodedText {
        ids,
        segment_ids: vec![0; max_len],
        position_ids: (0..max_len).collect(),
        attention_mask: (0..max_len).map(|i| u8::from(i < real)).collect(),
    })
}

/// `[CLS] pieces [SEP]` padded or truncated to `max_len`.
pub fn encode(text: &str, vocab: &Vocab, max_len: usize) -> Result<EncodedText> {
    framed(CLS, SEP, pieces_of(text, vocab), max_len)
}

/// `[start] pieces [end]` padded or truncated to `max_len`: an answer
/// sentence as consumed by the decoder.
pub fn encode_target(text: &str, vocab: &Vocab, max_len: usize) -> Result<EncodedText> {
    framed(START, END, pieces_of(text, vocab), max_len)
}

/// Drops special tokens (keeping `[UNK]`), fuses `##` continuations and
/// joins words with single spaces.
pub fn decode(ids: &[usize], vocab: &Vocab) -> Result<String> {
    let mut out = String::new();
    for &id in ids {
        let token = vocab.token(id).ok_or(Error::Index {
            what: "vocabulary",
            index: id,
            size: vocab.len(),
        })?;
        if id < SPECIAL_TOKENS.len() && id != UNK {
            continue;
        }
        match token.strip_prefix(CONTINUATION) {
            Some(rest) if !out.is_empty() => out.push_str(rest),
            _ => {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(token);
            }
        }
    }
    Ok(out)
}
