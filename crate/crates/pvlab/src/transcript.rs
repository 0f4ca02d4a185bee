//! Role-annotated conversations over an explicit symbol-table vocabulary.
//!
//! Tokenization is whitespace symbol lookup with no subword machinery, so
//! experiments control exactly which token carries which planted feature.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Token id into a vocabulary's symbol table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub usize);

/// Who produced a turn (and, per position, a token).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TurnRole {
    System,
    User,
    Assistant,
}

impl TurnRole {
    pub fn as_byte(self) -> u8 {
        match self {
            TurnRole::System => 0,
            TurnRole::User => 1,
            TurnRole::Assistant => 2,
        }
    }

    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(TurnRole::System),
            1 => Ok(TurnRole::User),
            2 => Ok(TurnRole::Assistant),
            other => Err(Error::InvalidArg(format!("unknown role byte {other}"))),
        }
    }
}

impl fmt::Display for TurnRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TurnRole::System => write!(f, "system"),
            TurnRole::User => write!(f, "user"),
            TurnRole::Assistant => write!(f, "assistant"),
        }
    }
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

/// Ordered symbol table. The id is a content hash, so two vocabularies with
/// the same symbols in the same order are interchangeable.
#[derive(Debug, Clone)]
pub struct Vocab {
    id: String,
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if s.chars().any(|c| c.is_whitespace()) {
                return Err(Error::InvalidArg(format!("symbol {s:?} contains whitespace")));
            }
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::InvalidArg(format!("duplicate symbol {s:?}")));
            }
        }
        let id = content_id(&symbols);
        Ok(Vocab { id, symbols, index })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbol(&self, token: TokenId) -> Result<&str> {
        self.symbols
            .get(token.0)
            .map(String::as_str)
            .ok_or(Error::TokenOutOfRange { id: token.0, vocab: self.symbols.len() })
    }

    pub fn lookup(&self, symbol: &str) -> Option<TokenId> {
        self.index.get(symbol).copied().map(TokenId)
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    /// Vocabulary file: a JSON ordered symbol list.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let symbols: Vec<String> = serde_json::from_str(&text)?;
        Vocab::new(symbols)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.symbols)?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

fn content_id(symbols: &[String]) -> String {
    let mut hasher = Sha256::new();
    for s in symbols {
        hasher.update(s.as_bytes());
        hasher.update([0u8]);
    }
    let digest = hasher.finalize();
    let mut id = String::with_capacity(16);
    for byte in digest.iter().take(8) {
        id.push_str(&format!("{byte:02x}"));
    }
    id
}

/// Exact symbol-table lookup per whitespace-separated item. Reports the
/// offending symbol and its byte offset on failure.
pub fn tokenize(vocab: &Vocab, text: &str) -> Result<Vec<TokenId>> {
    let mut out = Vec::new();
    let mut offset = 0;
    let bytes = text.as_bytes();
    while offset < bytes.len() {
        if bytes[offset].is_ascii_whitespace() {
            offset += 1;
            continue;
        }
        let start = offset;
        while offset < bytes.len() && !bytes[offset].is_ascii_whitespace() {
            offset += 1;
        }
        let symbol = &text[start..offset];
        match vocab.lookup(symbol) {
            Some(id) => out.push(id),
            None => {
                return Err(Error::UnknownSymbol { symbol: symbol.to_string(), offset: start })
            }
        }
    }
    Ok(out)
}

/// Inverse of [`tokenize`] for in-vocabulary text: symbols joined by single
/// spaces.
pub fn detokenize(vocab: &Vocab, tokens: &[TokenId]) -> Result<String> {
    let mut parts = Vec::with_capacity(tokens.len());
    for &t in tokens {
        parts.push(vocab.symbol(t)?.to_string());
    }
    Ok(parts.join(" "))
}

// ---------------------------------------------------------------------------
// Transcript
// ---------------------------------------------------------------------------

/// One conversation turn: role, raw text, and its tokenization.
#[derive(Debug, Clone)]
pub struct Turn {
    pub role: TurnRole,
    pub text: String,
    pub tokens: Vec<TokenId>,
}

/// Role-annotated token sequence: the persistent conversational record.
///
/// Invariant: after an optional leading system turn, roles alternate
/// user/assistant starting with user.
#[derive(Debug, Clone)]
pub struct Transcript {
    pub vocab_id: String,
    pub turns: Vec<Turn>,
}

#[derive(Serialize, Deserialize)]
struct TranscriptFile {
    vocab_id: String,
    turns: Vec<TurnFile>,
}

#[derive(Serialize, Deserialize)]
struct TurnFile {
    role: TurnRole,
    text: String,
}

impl Transcript {
    pub fn new(vocab: &Vocab) -> Self {
        Transcript { vocab_id: vocab.id().to_string(), turns: Vec::new() }
    }

    /// Builds a transcript from (role, text) pairs, validating role order.
    pub fn from_turns(vocab: &Vocab, turns: &[(TurnRole, &str)]) -> Result<Self> {
        let mut t = Transcript::new(vocab);
        for &(role, text) in turns {
            t.push(vocab, role, text)?;
        }
        Ok(t)
    }

    /// Appends a turn, enforcing role alternation.
    pub fn push(&mut self, vocab: &Vocab, role: TurnRole, text: &str) -> Result<()> {
        self.check_role_order(role)?;
        let tokens = tokenize(vocab, text)?;
        self.turns.push(Turn { role, text: text.to_string(), tokens });
        Ok(())
    }

    fn check_role_order(&self, next: TurnRole) -> Result<()> {
        let index = self.turns.len();
        match (self.turns.last().map(|t| t.role), next) {
            (None, _) => Ok(()),
            (Some(_), TurnRole::System) => Err(Error::RoleOrder {
                index,
                detail: "system turn only allowed at the start".into(),
            }),
            (Some(TurnRole::System), _) => Ok(()),
            (Some(TurnRole::User), TurnRole::Assistant) => Ok(()),
            (Some(TurnRole::Assistant), TurnRole::User) => Ok(()),
            (Some(prev), _) => Err(Error::RoleOrder {
                index,
                detail: format!("{next} cannot follow {prev}"),
            }),
        }
    }

    /// Total token count across turns.
    pub fn len_tokens(&self) -> usize {
        self.turns.iter().map(|t| t.tokens.len()).sum()
    }

    /// Flattens to (token, role, turn index) triples in position order.
    pub fn positions(&self) -> Vec<(TokenId, TurnRole, usize)> {
        let mut out = Vec::with_capacity(self.len_tokens());
        for (i, turn) in self.turns.iter().enumerate() {
            for &tok in &turn.tokens {
                out.push((tok, turn.role, i));
            }
        }
        out
    }

    /// Turn index for a flat token position, if in range.
    pub fn turn_of_position(&self, pos: usize) -> Option<usize> {
        let mut seen = 0;
        for (i, turn) in self.turns.iter().enumerate() {
            seen += turn.tokens.len();
            if pos < seen {
                return Some(i);
            }
        }
        None
    }

    /// Stable content hash over roles and texts, used by traces and reports
    /// to reference the conversation they came from.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.vocab_id.as_bytes());
        for turn in &self.turns {
            hasher.update([turn.role.as_byte()]);
            hasher.update(turn.text.as_bytes());
            hasher.update([0u8]);
        }
        let digest = hasher.finalize();
        let mut id = String::with_capacity(16);
        for byte in digest.iter().take(8) {
            id.push_str(&format!("{byte:02x}"));
        }
        id
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = TranscriptFile {
            vocab_id: self.vocab_id.clone(),
            turns: self
                .turns
                .iter()
                .map(|t| TurnFile { role: t.role, text: t.text.clone() })
                .collect(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }
}

/// Loads a transcript script file, validating the vocabulary id, role order,
/// and every symbol.
pub fn load_script(path: &Path, vocab: &Vocab) -> Result<Transcript> {
    let text = std::fs::read_to_string(path)?;
    parse_script(&text, vocab)
}

/// Same as [`load_script`] but from an in-memory JSON string.
pub fn parse_script(json: &str, vocab: &Vocab) -> Result<Transcript> {
    let file: TranscriptFile = serde_json::from_str(json)?;
    if file.vocab_id != vocab.id() {
        return Err(Error::VocabMismatch(format!(
            "script expects vocabulary {}, loaded {}",
            file.vocab_id,
            vocab.id()
        )));
    }
    let mut t = Transcript::new(vocab);
    for turn in &file.turns {
        t.push(vocab, turn.role, &turn.text)?;
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_vocab() -> Vocab {
        Vocab::new(vec!["hello".into(), "world".into(), "hi".into()]).unwrap()
    }

    #[test]
    fn tokenize_empty_and_basic() {
        let v = small_vocab();
        assert!(tokenize(&v, "").unwrap().is_empty());
        let toks = tokenize(&v, "hello world").unwrap();
        assert_eq!(toks, vec![TokenId(0), TokenId(1)]);
    }

    #[test]
    fn tokenize_unknown_symbol_reports_offset() {
        let v = small_vocab();
        let err = tokenize(&v, "hello martian").unwrap_err();
        match err {
            Error::UnknownSymbol { symbol, offset } => {
                assert_eq!(symbol, "martian");
                assert_eq!(offset, 6);
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn detokenize_round_trip() {
        let v = small_vocab();
        let text = "hi hello world hello";
        let toks = tokenize(&v, text).unwrap();
        assert_eq!(detokenize(&v, &toks).unwrap(), text);
    }

    #[test]
    fn role_order_enforced() {
        let v = small_vocab();
        let ok = Transcript::from_turns(
            &v,
            &[
                (TurnRole::System, "hello"),
                (TurnRole::User, "hi"),
                (TurnRole::Assistant, "world"),
                (TurnRole::User, "hi hi"),
            ],
        );
        assert!(ok.is_ok());

        let bad = Transcript::from_turns(&v, &[(TurnRole::User, "hi"), (TurnRole::User, "hi")]);
        assert!(matches!(bad, Err(Error::RoleOrder { .. })));

        let late_system = Transcript::from_turns(
            &v,
            &[(TurnRole::User, "hi"), (TurnRole::System, "hello")],
        );
        assert!(matches!(late_system, Err(Error::RoleOrder { .. })));
    }

    #[test]
    fn system_only_script_is_valid() {
        let v = small_vocab();
        let t = Transcript::from_turns(&v, &[(TurnRole::System, "hello world")]).unwrap();
        assert_eq!(t.turns.len(), 1);
        assert_eq!(t.len_tokens(), 2);
    }

    #[test]
    fn script_file_round_trip_and_vocab_check() {
        let v = small_vocab();
        let t = Transcript::from_turns(
            &v,
            &[(TurnRole::User, "hello"), (TurnRole::Assistant, "world")],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("script.json");
        t.save(&path).unwrap();
        let loaded = load_script(&path, &v).unwrap();
        assert_eq!(loaded.turns.len(), 2);
        assert_eq!(loaded.turns[1].text, "world");

        let other = Vocab::new(vec!["different".into()]).unwrap();
        assert!(matches!(load_script(&path, &other), Err(Error::VocabMismatch(_))));
    }

    #[test]
    fn positions_cover_every_token_once() {
        let v = small_vocab();
        let t = Transcript::from_turns(
            &v,
            &[
                (TurnRole::System, "hello"),
                (TurnRole::User, "hi hi"),
                (TurnRole::Assistant, "world"),
            ],
        )
        .unwrap();
        let pos = t.positions();
        assert_eq!(pos.len(), 4);
        assert_eq!(pos[0].1, TurnRole::System);
        assert_eq!(pos[1].1, TurnRole::User);
        assert_eq!(pos[2].1, TurnRole::User);
        assert_eq!(pos[3].1, TurnRole::Assistant);
        assert_eq!(t.turn_of_position(2), Some(1));
        assert_eq!(t.turn_of_position(3), Some(2));
        assert_eq!(t.turn_of_position(4), None);
    }

    proptest! {
        #[test]
        fn tokenize_round_trips_in_vocab_text(indices in proptest::collection::vec(0usize..3, 0..20)) {
            let v = small_vocab();
            let text = indices
                .iter()
                .map(|&i| v.symbols()[i].clone())
                .collect::<Vec<_>>()
                .join(" ");
            let toks = tokenize(&v, &text).unwrap();
            prop_assert_eq!(detokenize(&v, &toks).unwrap(), text);
        }
    }
}
