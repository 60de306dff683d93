//! Character-level token inventory with special and language-ID tokens.
//!
//! Layout: alphabet characters in the given order, the space token, then
//! `BOS`, `EOS`, `PAD`, then one language-ID token per language. Tokens added
//! later are appended, so existing ids never move.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const BOS: &str = "<|bos|>";
pub const EOS: &str = "<|eos|>";
pub const PAD: &str = "<|pad|>";

const TEXT_HEADER: &str = "#dcl-vocab v1";
const TEXT_SEPARATOR: &str = "%%";

pub fn lid_token_string(lang: &str) -> String {
    format!("<|{lang}|>")
}

pub(crate) fn validate_language_name(lang: &str) -> Result<()> {
    if lang.is_empty()
        || !lang
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
    {
        return Err(Error::Vocab(format!("invalid language name {lang:?}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    char_ids: HashMap<char, TokenId>,
    space_id: TokenId,
    bos_id: TokenId,
    eos_id: TokenId,
    pad_id: TokenId,
    /// Language-ID tokens in insertion order.
    lid_ids: Vec<(String, TokenId)>,
    frozen_base_size: usize,
}

impl Vocab {
    pub fn build(alphabet: &[char], languages: &[&str]) -> Result<Self> {
        if alphabet.is_empty() {
            return Err(Error::Vocab("alphabet is empty".into()));
        }
        let mut tokens = Vec::with_capacity(alphabet.len() + 4 + languages.len());
        let mut char_ids = HashMap::new();
        for &c in alphabet {
            if c == ' ' || c.is_control() || c == '<' || c == '|' || c == '>' {
                return Err(Error::Vocab(format!("character {c:?} cannot be an alphabet token")));
            }
            if char_ids.insert(c, tokens.len()).is_some() {
                return Err(Error::Vocab(format!("duplicate alphabet entry {c:?}")));
            }
            tokens.push(c.to_string());
        }
        let space_id = tokens.len();
        tokens.push(" ".into());
        let bos_id = tokens.len();
        tokens.push(BOS.into());
        let eos_id = tokens.len();
        tokens.push(EOS.into());
        let pad_id = tokens.len();
        tokens.push(PAD.into());
        let mut vocab = Self {
            tokens,
            char_ids,
            space_id,
            bos_id,
            eos_id,
            pad_id,
            lid_ids: Vec::new(),
            frozen_base_size: 0,
        };
        for lang in languages {
            vocab.add_language_token(lang)?;
        }
        vocab.frozen_base_size = vocab.len();
        Ok(vocab)
    }

    /// Appends a language-ID token and returns its id.
    pub fn add_language_token(&mut self, lang: &str) -> Result<TokenId> {
        validate_language_name(lang)?;
        if self.lid_id(lang).is_some() {
            return Err(Error::AlreadyExists(lang.to_string()));
        }
        let id = self.tokens.len();
        self.tokens.push(lid_token_string(lang));
        self.lid_ids.push((lang.to_string(), id));
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn bos_id(&self) -> TokenId {
        self.bos_id
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    pub fn pad_id(&self) -> TokenId {
        self.pad_id
    }

    pub fn space_id(&self) -> TokenId {
        self.space_id
    }

    pub fn frozen_base_size(&self) -> usize {
        self.frozen_base_size
    }

    pub fn lid_id(&self, lang: &str) -> Option<TokenId> {
        self.lid_ids.iter().find(|(l, _)| l == lang).map(|(_, id)| *id)
    }

    pub fn lid_ids(&self) -> impl Iterator<Item = (&str, TokenId)> {
        self.lid_ids.iter().map(|(l, id)| (l.as_str(), *id))
    }

    pub fn languages(&self) -> Vec<&str> {
        self.lid_ids.iter().map(|(l, _)| l.as_str()).collect()
    }

    pub fn is_lid(&self, id: TokenId) -> bool {
        self.lid_ids.iter().any(|(_, i)| *i == id)
    }

    pub fn lid_language(&self, id: TokenId) -> Option<&str> {
        self.lid_ids
            .iter()
            .find(|(_, i)| *i == id)
            .map(|(l, _)| l.as_str())
    }

    /// BOS, EOS, PAD and every language-ID token.
    pub fn special_ids(&self) -> Vec<TokenId> {
        let mut ids = vec![self.bos_id, self.eos_id, self.pad_id];
        ids.extend(self.lid_ids.iter().map(|(_, id)| *id));
        ids
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id == self.bos_id || id == self.eos_id || id == self.pad_id || self.is_lid(id)
    }

    pub fn char_id(&self, c: char) -> Option<TokenId> {
        if c == ' ' {
            Some(self.space_id)
        } else {
            self.char_ids.get(&c).copied()
        }
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.chars()
            .enumerate()
            .map(|(pos, ch)| self.char_id(ch).ok_or(Error::Encoding { ch, pos }))
            .collect()
    }

    /// Concatenates token strings; special tokens render as `<|name|>`.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self
                .tokens
                .get(id)
                .ok_or_else(|| Error::Vocab(format!("token id {id} out of range")))?;
            out.push_str(tok);
        }
        Ok(out)
    }

    pub fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        match ids.iter().find(|&&id| id >= self.len()) {
            Some(id) => Err(Error::Vocab(format!("token id {id} out of range for |V|={}", self.len()))),
            None => Ok(()),
        }
    }

    /// Union of tokens seen in `corpora` plus every special and LID token.
    pub fn used_token_set(&self, corpora: &[&[TokenId]]) -> Result<TokenSet> {
        let mut members: BTreeSet<TokenId> = self.special_ids().into_iter().collect();
        for seq in corpora {
            self.check_ids(seq)?;
            members.extend(seq.iter().copied());
        }
        Ok(TokenSet {
            members,
            source: TokenSetSource::NewLanguageUnion,
        })
    }

    pub fn specials_only(&self) -> TokenSet {
        TokenSet {
            members: self.special_ids().into_iter().collect(),
            source: TokenSetSource::SpecialsOnly,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(TEXT_HEADER);
        s.push('\n');
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s.push_str(TEXT_SEPARATOR);
        s.push('\n');
        let _ = writeln!(s, "space:{}", self.space_id);
        let _ = writeln!(s, "bos:{}", self.bos_id);
        let _ = writeln!(s, "eos:{}", self.eos_id);
        let _ = writeln!(s, "pad:{}", self.pad_id);
        let _ = writeln!(s, "frozen_base_size:{}", self.frozen_base_size);
        for (lang, id) in &self.lid_ids {
            let _ = writeln!(s, "lid:{lang}={id}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Format(format!("vocab file: {msg}"));
        let body = text.strip_suffix('\n').ok_or_else(|| bad("missing trailing newline"))?;
        let mut lines = body.split('\n');
        if lines.next() != Some(TEXT_HEADER) {
            return Err(bad("missing header"));
        }
        let mut tokens = Vec::new();
        for line in lines.by_ref() {
            if line == TEXT_SEPARATOR {
                break;
            }
            tokens.push(line.to_string());
        }
        let mut kv: BTreeMap<&str, usize> = BTreeMap::new();
        let mut lid_ids = Vec::new();
        for line in lines {
            let (key, value) = line.split_once(':').ok_or_else(|| bad("malformed key:value line"))?;
            if key == "lid" {
                let (lang, id) = value.split_once('=').ok_or_else(|| bad("malformed lid entry"))?;
                let id: usize = id.parse().map_err(|_| bad("bad lid id"))?;
                lid_ids.push((lang.to_string(), id));
            } else {
                let v: usize = value.parse().map_err(|_| bad("bad id"))?;
                kv.insert(key, v);
            }
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(&format!("missing key {k}")));
        let (space_id, bos_id, eos_id, pad_id) = (get("space")?, get("bos")?, get("eos")?, get("pad")?);
        let frozen_base_size = get("frozen_base_size")?;
        let mut char_ids = HashMap::new();
        for (id, tok) in tokens.iter().enumerate().take(space_id) {
            let mut cs = tok.chars();
            match (cs.next(), cs.next()) {
                (Some(c), None) => {
                    char_ids.insert(c, id);
                }
                _ => return Err(bad("alphabet token is not a single character")),
            }
        }
        let n = tokens.len();
        let vocab = Self {
            tokens,
            char_ids,
            space_id,
            bos_id,
            eos_id,
            pad_id,
            lid_ids,
            frozen_base_size,
        };
        let mut seen = BTreeSet::new();
        for id in vocab.special_ids() {
            if id >= n || !seen.insert(id) {
                return Err(bad("special ids must be distinct and in range"));
            }
        }
        for (lang, id) in &vocab.lid_ids {
            if vocab.tokens[*id] != lid_token_string(lang) {
                return Err(bad("lid token string does not match its language"));
            }
        }
        Ok(vocab)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenSetSource {
    SpecialsOnly,
    NewLanguageUnion,
}

/// Token ids whose embedding rows stay trainable under partial update.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSet {
    pub members: BTreeSet<TokenId>,
    pub source: TokenSetSource,
}

impl TokenSet {
    pub fn contains(&self, id: TokenId) -> bool {
        self.members.contains(&id)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}
