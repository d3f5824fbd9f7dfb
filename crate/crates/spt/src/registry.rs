//! Schema pool: definitions, descriptions used by the retrieval baseline, and
//! governance validation.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SptError};
use crate::textcore::{self, TokenSeq, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "NER")]
    Ner,
    #[serde(rename = "RE")]
    Re,
    #[serde(rename = "EE")]
    Ee,
    #[serde(rename = "ODIE")]
    OdieLike,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaDef {
    pub name: String,
    pub description: String,
    pub roles: Vec<String>,
    pub task_kind: TaskKind,
}

impl SchemaDef {
    /// Words of the schema name, for plain-text expansion. Multi-word names
    /// are hyphenated ("company-founding") so the angle-bracket surface form
    /// stays a single whitespace token.
    pub fn name_words(&self) -> Vec<&str> {
        self.name.split('-').collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaPool {
    pub schemas: Vec<SchemaDef>,
}

impl SchemaPool {
    pub fn len(&self) -> usize {
        self.schemas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.schemas.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.schemas.iter().map(|s| s.name.clone()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.schemas.iter().position(|s| s.name == name)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let doc = serde_json::json!({ "format_version": 1, "schemas": self.schemas });
        std::fs::write(path, serde_json::to_string_pretty(&doc)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        #[derive(serde::Deserialize)]
        struct Doc {
            format_version: u32,
            schemas: Vec<SchemaDef>,
        }
        let text = std::fs::read_to_string(path)?;
        let doc: Doc = serde_json::from_str(&text)?;
        if doc.format_version != 1 {
            return Err(SptError::Parse {
                line: 1,
                msg: format!("unsupported pool format_version {}", doc.format_version),
            });
        }
        Ok(Self { schemas: doc.schemas })
    }
}

/// Checks name uniqueness (always) and, in strict mode, that no two schemas
/// share the same case-insensitive role multiset. Violations are data, not
/// errors.
pub fn validate_pool(pool: &SchemaPool, strict: bool) -> Vec<String> {
    let mut violations = Vec::new();
    for (i, a) in pool.schemas.iter().enumerate() {
        if a.name.is_empty() {
            violations.push(format!("schema #{i} has an empty name"));
        }
        if a.roles.is_empty() {
            violations.push(format!("schema {:?} has no roles", a.name));
        }
        let mut seen = std::collections::HashSet::new();
        for r in &a.roles {
            if !seen.insert(r.to_lowercase()) {
                violations.push(format!("schema {:?} repeats role {:?}", a.name, r));
            }
        }
        for b in pool.schemas.iter().skip(i + 1) {
            if a.name == b.name {
                violations.push(format!("duplicate schema name {:?}", a.name));
            }
            if strict && role_multiset(a) == role_multiset(b) {
                violations.push(format!(
                    "schemas {:?} and {:?} share a role multiset",
                    a.name, b.name
                ));
            }
        }
    }
    violations
}

fn role_multiset(s: &SchemaDef) -> Vec<String> {
    let mut roles: Vec<String> = s.roles.iter().map(|r| r.to_lowercase()).collect();
    roles.sort();
    roles
}

/// A slot in a tokenized schema template: where the value for one role goes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSlot {
    pub role_index: usize,
    /// Position in the template token list where value tokens are inserted.
    pub insert_at: usize,
}

#[derive(Debug, Clone)]
pub struct SchemaTemplate {
    pub tokens: TokenSeq,
    pub slots: Vec<TemplateSlot>,
}

/// Tokenized infilling template:
/// `{ " <name> " : { " role1 " : " <slot> " , ... } }`
/// with one empty slot per role, in role order. `name_tokens` lets callers
/// substitute either the spelled-out name words or a single schema/<Gen>
/// token.
pub fn schema_template(
    schema: &SchemaDef,
    vocab: &Vocabulary,
    name_tokens: &[usize],
) -> Result<SchemaTemplate> {
    let t = |s: &str| vocab.id(s).expect("structural token");
    let obr = t(textcore::OPEN_BRACE);
    let cbr = t(textcore::CLOSE_BRACE);
    let q = t(textcore::QUOTE);
    let colon = t(textcore::COLON);
    let comma = t(textcore::COMMA);
    let structural: std::collections::HashSet<&str> =
        textcore::STRUCTURAL_TOKENS.iter().copied().collect();

    let mut tokens = vec![obr, q];
    tokens.extend_from_slice(name_tokens);
    tokens.extend([q, colon, obr]);
    let mut slots = Vec::with_capacity(schema.roles.len());
    for (ri, role) in schema.roles.iter().enumerate() {
        if ri > 0 {
            tokens.push(comma);
        }
        tokens.push(q);
        for word in role.split_whitespace() {
            if structural.contains(word) {
                return Err(SptError::InvalidRoleName(role.clone()));
            }
            tokens.push(vocab.id(word).unwrap_or_else(|| vocab.unk_id()));
        }
        tokens.extend([q, colon, q]);
        slots.push(TemplateSlot {
            role_index: ri,
            insert_at: tokens.len(),
        });
        tokens.push(q);
    }
    tokens.extend([cbr, cbr]);
    Ok(SchemaTemplate { tokens, slots })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema(name: &str, roles: &[&str]) -> SchemaDef {
        SchemaDef {
            name: name.into(),
            description: format!("{name} description"),
            roles: roles.iter().map(|r| r.to_string()).collect(),
            task_kind: TaskKind::Ee,
        }
    }

    fn vocab_for(pool: &SchemaPool) -> Vocabulary {
        let mut corpus = Vec::new();
        for s in &pool.schemas {
            corpus.push(s.name_words().join(" "));
            corpus.push(s.roles.join(" "));
        }
        Vocabulary::build(&corpus, &pool.names()).unwrap()
    }

    #[test]
    fn duplicate_name_is_one_violation() {
        let pool = SchemaPool {
            schemas: vec![schema("a", &["x"]), schema("a", &["y"])],
        };
        assert_eq!(validate_pool(&pool, false).len(), 1);
    }

    #[test]
    fn empty_pool_passes() {
        let pool = SchemaPool { schemas: vec![] };
        assert!(validate_pool(&pool, true).is_empty());
    }

    #[test]
    fn strict_mode_flags_shared_role_multiset() {
        let pool = SchemaPool {
            schemas: vec![schema("a", &["Person", "Year"]), schema("b", &["year", "person"])],
        };
        assert_eq!(validate_pool(&pool, true).len(), 1);
        assert_eq!(validate_pool(&pool, false).len(), 0);
    }

    #[test]
    fn template_slot_count_matches_roles() {
        for roles in [vec!["A"], vec!["A", "B", "C"]] {
            let s = schema("f", &roles);
            let pool = SchemaPool { schemas: vec![s.clone()] };
            let v = vocab_for(&pool);
            let name: Vec<usize> = vec![v.id("f").unwrap()];
            let t = schema_template(&s, &v, &name).unwrap();
            assert_eq!(t.slots.len(), roles.len());
            for (i, slot) in t.slots.iter().enumerate() {
                assert_eq!(slot.role_index, i);
            }
        }
    }

    #[test]
    fn template_matches_appendix_shape() {
        let s = schema("company-founding", &["Founder", "Organization", "Year"]);
        let pool = SchemaPool { schemas: vec![s.clone()] };
        let v = vocab_for(&pool);
        let name: Vec<usize> = s
            .name_words()
            .iter()
            .map(|w| v.id(w).unwrap())
            .collect();
        let t = schema_template(&s, &v, &name).unwrap();
        assert_eq!(t.slots.len(), 3);
        let text = v.decode(&t.tokens).unwrap();
        assert_eq!(
            text,
            "{ \" company founding \" : { \" Founder \" : \" \" , \" Organization \" : \" \" , \" Year \" : \" \" } }"
        );
    }

    #[test]
    fn structural_literal_in_role_rejected() {
        let s = schema("f", &["a { b"]);
        let pool = SchemaPool { schemas: vec![schema("f", &["ok"])] };
        let v = vocab_for(&pool);
        assert!(matches!(
            schema_template(&s, &v, &[]),
            Err(SptError::InvalidRoleName(_))
        ));
    }

    #[test]
    fn pool_serialization_roundtrip() {
        let pool = SchemaPool {
            schemas: vec![schema("a", &["x", "y"]), schema("b", &["z"])],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.json");
        pool.save(&path).unwrap();
        let loaded = SchemaPool::load(&path).unwrap();
        assert_eq!(loaded, pool);
    }
}
