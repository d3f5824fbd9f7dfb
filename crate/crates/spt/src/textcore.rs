//! Word-level tokenizer and vocabulary, including the extension region that
//! houses schema tokens and the `<Rej>` / `<Gen>` helper tokens.
//!
//! Ids are laid out as `[0, |V|)` for base tokens followed by a contiguous
//! extension region: schema tokens in pool order, then `<Rej>`, then `<Gen>`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SptError};

pub type TokenId = usize;
pub type TokenSeq = Vec<TokenId>;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
pub const SEP: &str = "<sep>";
pub const OPEN_BRACE: &str = "{";
pub const CLOSE_BRACE: &str = "}";
pub const QUOTE: &str = "\"";
pub const COLON: &str = ":";
pub const COMMA: &str = ",";
/// Newline literal used by the output grammar. A visible surface form is used
/// so that whitespace splitting stays the only tokenization rule.
pub const NEWLINE: &str = "<nl>";

pub const REJ: &str = "<Rej>";
pub const GEN: &str = "<Gen>";

/// Reserved tokens always present at the front of the base region.
pub const STRUCTURAL_TOKENS: [&str; 10] = [
    BOS,
    EOS,
    UNK,
    SEP,
    OPEN_BRACE,
    CLOSE_BRACE,
    QUOTE,
    COLON,
    COMMA,
    NEWLINE,
];

/// Surface form of a schema token: the schema name wrapped in angle brackets.
pub fn schema_surface(name: &str) -> String {
    format!("<{name}>")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    base: Vec<String>,
    extension: Vec<String>,
    #[serde(skip)]
    lookup: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds the vocabulary from a corpus and the schema pool's names.
    ///
    /// Base tokens are the structural tokens followed by corpus word types
    /// sorted by descending frequency then lexicographically, so that id
    /// assignment is deterministic. The extension region holds one token per
    /// schema name plus `<Rej>` and `<Gen>`.
    pub fn build(corpus: &[String], schema_names: &[String]) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for name in schema_names {
            if !seen.insert(name.as_str()) {
                return Err(SptError::DuplicateSchema(name.clone()));
            }
        }

        let mut freq: HashMap<&str, u64> = HashMap::new();
        for line in corpus {
            for word in line.split_whitespace() {
                *freq.entry(word).or_insert(0) += 1;
            }
        }
        let structural: std::collections::HashSet<&str> =
            STRUCTURAL_TOKENS.iter().copied().collect();
        let mut words: Vec<(&str, u64)> = freq
            .into_iter()
            .filter(|(w, _)| !structural.contains(w))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));

        let mut base: Vec<String> = STRUCTURAL_TOKENS.iter().map(|s| s.to_string()).collect();
        base.extend(words.into_iter().map(|(w, _)| w.to_string()));

        let mut extension: Vec<String> =
            schema_names.iter().map(|n| schema_surface(n)).collect();
        extension.push(REJ.to_string());
        extension.push(GEN.to_string());

        let mut v = Self {
            base,
            extension,
            lookup: HashMap::new(),
        };
        v.rebuild_lookup();
        Ok(v)
    }

    /// Rebuilds the token-to-id map; must be called after deserialization.
    pub fn rebuild_lookup(&mut self) {
        self.lookup = self
            .base
            .iter()
            .chain(self.extension.iter())
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn base_len(&self) -> usize {
        self.base.len()
    }

    pub fn ext_len(&self) -> usize {
        self.extension.len()
    }

    /// Total number of ids: |V| + |S| + 2.
    pub fn size(&self) -> usize {
        self.base.len() + self.extension.len()
    }

    pub fn n_schemas(&self) -> usize {
        self.extension.len() - 2
    }

    pub fn rej_id(&self) -> TokenId {
        self.base.len() + self.n_schemas()
    }

    pub fn gen_id(&self) -> TokenId {
        self.base.len() + self.n_schemas() + 1
    }

    /// Id of the i-th schema token (pool order).
    pub fn schema_token_id(&self, index: usize) -> TokenId {
        debug_assert!(index < self.n_schemas());
        self.base.len() + index
    }

    /// Pool index of a schema-token id, if it is one.
    pub fn schema_index(&self, id: TokenId) -> Option<usize> {
        if id >= self.base.len() && id < self.base.len() + self.n_schemas() {
            Some(id - self.base.len())
        } else {
            None
        }
    }

    pub fn is_base(&self, id: TokenId) -> bool {
        id < self.base.len()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.lookup.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Result<&str> {
        if id < self.base.len() {
            Ok(&self.base[id])
        } else if id < self.size() {
            Ok(&self.extension[id - self.base.len()])
        } else {
            Err(SptError::InvalidTokenId(id, self.size()))
        }
    }

    pub fn unk_id(&self) -> TokenId {
        self.id(UNK).expect("structural token")
    }

    /// Whitespace tokenization; unknown word types map to `<unk>`.
    pub fn encode(&self, text: &str) -> TokenSeq {
        text.split_whitespace()
            .map(|w| self.lookup.get(w).copied().unwrap_or_else(|| self.unk_id()))
            .collect()
    }

    /// Inverse of `encode` on in-vocabulary text; tokens join with single
    /// spaces (the spacing table is the identity: every literal is its own
    /// whitespace-delimited word).
    pub fn decode(&self, seq: &[TokenId]) -> Result<String> {
        let mut parts = Vec::with_capacity(seq.len());
        for &id in seq {
            parts.push(self.token(id)?);
        }
        Ok(parts.join(" "))
    }

    /// Standalone JSON export: {"base": [...], "extension": [...]}.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({ "base": self.base, "extension": self.extension })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(lines: &[&str]) -> Vec<String> {
        lines.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn extension_layout() {
        let v = Vocabulary::build(&corpus(&["a b", "b c"]), &["S1".into()]).unwrap();
        assert_eq!(v.ext_len(), 3);
        assert_eq!(v.token(v.schema_token_id(0)).unwrap(), "<S1>");
        assert_eq!(v.token(v.rej_id()).unwrap(), REJ);
        assert_eq!(v.token(v.gen_id()).unwrap(), GEN);
        assert_eq!(v.rej_id(), v.base_len() + v.n_schemas());
        assert_eq!(v.gen_id(), v.base_len() + v.n_schemas() + 1);
        for w in ["a", "b", "c"] {
            assert!(v.id(w).is_some(), "missing {w}");
        }
    }

    #[test]
    fn empty_schema_list() {
        let v = Vocabulary::build(&corpus(&["x"]), &[]).unwrap();
        assert_eq!(v.ext_len(), 2);
        assert_eq!(v.token(v.rej_id()).unwrap(), REJ);
    }

    #[test]
    fn twenty_six_schemas_give_28_extension_tokens() {
        let names: Vec<String> = (0..26).map(|i| format!("s{i}")).collect();
        let v = Vocabulary::build(&corpus(&["w"]), &names).unwrap();
        assert_eq!(v.ext_len(), 28);
    }

    #[test]
    fn duplicate_schema_rejected() {
        let err = Vocabulary::build(&corpus(&["x"]), &["A".into(), "A".into()]);
        assert!(matches!(err, Err(SptError::DuplicateSchema(_))));
    }

    #[test]
    fn encode_unknown_maps_to_unk() {
        let v = Vocabulary::build(&corpus(&["a"]), &[]).unwrap();
        assert_eq!(v.encode("zzz"), vec![v.unk_id()]);
        assert_eq!(v.encode(""), Vec::<TokenId>::new());
        let ids = v.encode("a a");
        assert_eq!(ids.len(), 2);
        assert_eq!(ids[0], ids[1]);
    }

    #[test]
    fn roundtrip_in_vocabulary() {
        let v = Vocabulary::build(&corpus(&["a b", "b c"]), &["S1".into()]).unwrap();
        for s in ["a b c", "", "c b a", "<S1>", "a <S1> b"] {
            assert_eq!(v.decode(&v.encode(s)).unwrap(), s);
        }
    }

    #[test]
    fn decode_out_of_range() {
        let v = Vocabulary::build(&corpus(&["a"]), &[]).unwrap();
        assert!(matches!(
            v.decode(&[v.size()]),
            Err(SptError::InvalidTokenId(_, _))
        ));
    }

    #[test]
    fn deterministic_id_assignment() {
        let c = corpus(&["b a a", "c b a"]);
        let v1 = Vocabulary::build(&c, &["X".into()]).unwrap();
        let v2 = Vocabulary::build(&c, &["X".into()]).unwrap();
        assert_eq!(v1.base, v2.base);
        // a (freq 3) before b (freq 2) before c (freq 1)
        assert!(v1.id("a").unwrap() < v1.id("b").unwrap());
        assert!(v1.id("b").unwrap() < v1.id("c").unwrap());
    }

    #[test]
    fn serde_roundtrip_rebuilds_lookup() {
        let v = Vocabulary::build(&corpus(&["a b"]), &["S".into()]).unwrap();
        let json = serde_json::to_string(&v).unwrap();
        let mut v2: Vocabulary = serde_json::from_str(&json).unwrap();
        v2.rebuild_lookup();
        assert_eq!(v2.id("a"), v.id("a"));
        assert_eq!(v2.id("<S>"), v.id("<S>"));
    }
}
