//! Deterministic synthetic corpus generator: closed-schema, schema-free, and
//! open-generation samples with exact gold labels.
//!
//! Closed queries are built from per-schema trigger lexicons; schema
//! descriptions draw from a disjoint description vocabulary, so at
//! `contextual_cue_strength = 1` a query shares no word types with its gold
//! schema's description. That separation is what makes lexical retrieval
//! (BM25) weak on this data while contextual retrieval stays learnable.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SptError};
use crate::registry::{SchemaDef, SchemaPool, TaskKind};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleKind {
    Closed,
    SchemaFree,
    Open,
}

pub type Fills = BTreeMap<String, BTreeMap<String, String>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub query: String,
    pub kind: SampleKind,
    /// Gold schema names in first-occurrence order (Closed only).
    pub gold_schemas: Vec<String>,
    /// schema -> role -> span (Closed and Open).
    pub gold_fills: Fills,
    pub gold_open_schema: Option<SchemaDef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub n_schemas: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub schema_free_ratio: f64,
    pub open_ratio: f64,
    pub avg_schemas_per_sample: f64,
    pub contextual_cue_strength: f64,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            n_schemas: 26,
            n_train: 600,
            n_test: 160,
            schema_free_ratio: 0.30,
            open_ratio: 0.20,
            avg_schemas_per_sample: 2.2,
            contextual_cue_strength: 1.0,
            seed: 7,
        }
    }
}

const TRIGGERS: [&str; 40] = [
    "surge", "plunge", "merger", "acquisition", "strike", "launch", "recall", "spill", "outage",
    "verdict", "election", "ceasefire", "default", "upgrade", "downgrade", "layoff", "hiring",
    "discovery", "epidemic", "drought", "flood", "wildfire", "embargo", "tariff", "bailout",
    "audit", "breach", "ransom", "settlement", "expansion", "closure", "spinoff", "buyback",
    "dividend", "split", "delisting", "indictment", "pardon", "treaty", "summit",
];

const ROLE_DEFS: [(&str, [&str; 6]); 16] = [
    ("agent", ["traders", "farmers", "miners", "pilots", "nurses", "dock workers"]),
    ("item", ["copper", "wheat", "software", "vaccines", "timber", "crude oil"]),
    ("place", ["berlin", "oslo", "cairo", "lima", "quito", "porto alegre"]),
    ("amount", ["twelve", "forty", "ninety", "seven", "thirty", "two hundred"]),
    ("source", ["refinery", "harbor", "mine", "factory", "clinic", "rail yard"]),
    ("target", ["exports", "wages", "pensions", "contracts", "routes", "tax rates"]),
    ("owner", ["acme", "globex", "initech", "umbrella", "cyberdyne", "stark industries"]),
    ("time", ["monday", "april", "autumn", "midnight", "friday", "early june"]),
    ("cause", ["storm", "shortage", "lawsuit", "protest", "glut", "cyber attack"]),
    ("partner", ["denmark", "kenya", "peru", "vietnam", "malta", "new zealand"]),
    ("vehicle", ["tanker", "freighter", "convoy", "pipeline", "barge", "cargo plane"]),
    ("sector", ["energy", "banking", "retail", "shipping", "telecom", "heavy industry"]),
    ("region", ["baltic", "sahel", "andes", "gulf", "arctic", "east asia"]),
    ("asset", ["bonds", "futures", "land", "patents", "shares", "oil stockpiles"]),
    ("buyer", ["brokers", "funds", "states", "firms", "unions", "retail chains"]),
    ("seller", ["opec", "cartels", "vendors", "estates", "banks", "oil majors"]),
];

/// Closed clause patterns; the first value slot is always role 1, the second
/// role 2, so the value order is stable across patterns.
const CLOSED_PATTERNS: [[&str; 3]; 3] = [
    ["the {T} of ", " hit ", ""],
    ["", " saw a {T} near ", ""],
    ["a {T} involving ", " reached ", ""],
];

const DESC_WORDS: [&str; 30] = [
    "fiscal", "monetary", "municipal", "ceremonial", "diplomatic", "agrarian", "maritime",
    "judicial", "parliamentary", "ecclesiastical", "botanical", "geological", "culinary",
    "theatrical", "archival", "orbital", "glacial", "volcanic", "pastoral", "nomadic", "insular",
    "alpine", "coastal", "riparian", "tropical", "boreal", "provincial", "imperial", "lunar",
    "antique",
];

const TOPIC_WORDS: [&str; 20] = [
    "sonata", "mural", "haiku", "quilt", "marathon", "chess", "origami", "samba", "garden",
    "lantern", "pottery", "ballad", "kayak", "meadow", "puppet", "violin", "tapestry", "picnic",
    "snorkel", "bonfire",
];

struct OpenFamily {
    trigger: &'static str,
    roles: &'static [&'static str],
    /// Text fragments interleaved with one value per role.
    parts: &'static [&'static str],
}

const OPEN_ROLE_VALUES: [(&str, [&str; 6]); 8] = [
    ("person", ["julia", "marco", "aisha", "chen", "noor", "priya"]),
    ("organization", ["techcorp", "novalabs", "greenworks", "bluepeak", "redstone", "quietware"]),
    ("year", ["2004", "2008", "2011", "2014", "2017", "2019"]),
    ("city", ["geneva", "austin", "kyoto", "dublin", "mumbai", "seville"]),
    ("degree", ["physics", "law", "medicine", "history", "botany", "sculpture"]),
    ("prize", ["medal", "trophy", "grant", "scholarship", "ribbon", "plaque"]),
    ("spouse", ["elena", "ravi", "sofia", "omar", "greta", "felix"]),
    ("school", ["westlake", "northgate", "riverdale", "hillcrest", "lakeside", "brookfield"]),
];

const OPEN_FAMILIES: [OpenFamily; 8] = [
    OpenFamily {
        trigger: "founded",
        roles: &["person", "organization", "year"],
        parts: &["", " founded ", " in ", ""],
    },
    OpenFamily {
        trigger: "married",
        roles: &["person", "spouse", "year"],
        parts: &["", " married ", " in ", ""],
    },
    OpenFamily {
        trigger: "graduated",
        roles: &["person", "school", "degree"],
        parts: &["", " graduated from ", " with honors in ", ""],
    },
    OpenFamily {
        trigger: "donated",
        roles: &["person", "organization"],
        parts: &["", " donated a large sum to ", ""],
    },
    OpenFamily {
        trigger: "awarded",
        roles: &["person", "prize", "year"],
        parts: &["", " was awarded the ", " in ", ""],
    },
    OpenFamily {
        trigger: "relocated",
        roles: &["organization", "city", "year"],
        parts: &["", " relocated to ", " in ", ""],
    },
    OpenFamily {
        trigger: "enrolled",
        roles: &["person", "school", "year"],
        parts: &["", " enrolled at ", " in ", ""],
    },
    OpenFamily {
        trigger: "retired",
        roles: &["person", "organization", "city"],
        parts: &["", " retired from ", " and moved to ", ""],
    },
];

fn open_role_values(role: &str) -> &'static [&'static str] {
    OPEN_ROLE_VALUES
        .iter()
        .find(|(r, _)| *r == role)
        .map(|(_, vs)| vs.as_slice())
        .expect("known open role")
}

/// Role pair for schema `i`: the i-th 2-combination of the role lexicon in
/// lexicographic index order; multisets are distinct by construction.
fn role_pair(i: usize) -> (usize, usize) {
    let mut idx = 0;
    for a in 0..ROLE_DEFS.len() {
        for b in (a + 1)..ROLE_DEFS.len() {
            if idx == i {
                return (a, b);
            }
            idx += 1;
        }
    }
    unreachable!("checked against capacity")
}

fn schema_name(i: usize) -> String {
    format!("{}-event", TRIGGERS[i])
}

fn build_pool(spec: &GenSpec, rng: &mut SplitMix64) -> SchemaPool {
    let schemas = (0..spec.n_schemas)
        .map(|i| {
            let (a, b) = role_pair(i);
            let d1 = DESC_WORDS[i % DESC_WORDS.len()];
            let d2 = DESC_WORDS[(i * 7 + 3) % DESC_WORDS.len()];
            let d3 = DESC_WORDS[(i * 13 + 11) % DESC_WORDS.len()];
            let mut description = format!("covers {d1} {d2} matters regarding {d3} themes");
            // below full cue strength, lexical cues leak into the description
            if rng.next_f64() >= spec.contextual_cue_strength {
                description.push(' ');
                description.push_str(TRIGGERS[i]);
            }
            SchemaDef {
                name: schema_name(i),
                description,
                roles: vec![ROLE_DEFS[a].0.to_string(), ROLE_DEFS[b].0.to_string()],
                task_kind: TaskKind::Ee,
            }
        })
        .collect();
    SchemaPool { schemas }
}

fn closed_clause(schema_idx: usize, pool: &SchemaPool, rng: &mut SplitMix64) -> (String, BTreeMap<String, String>) {
    let (a, b) = role_pair(schema_idx);
    let va = *rng.pick(&ROLE_DEFS[a].1);
    let vb = *rng.pick(&ROLE_DEFS[b].1);
    let pattern = &CLOSED_PATTERNS[rng.below(CLOSED_PATTERNS.len())];
    let trigger = TRIGGERS[schema_idx];
    let clause = format!(
        "{}{va}{}{vb}{}",
        pattern[0].replace("{T}", trigger),
        pattern[1].replace("{T}", trigger),
        pattern[2]
    );
    let schema = &pool.schemas[schema_idx];
    let mut fills = BTreeMap::new();
    fills.insert(schema.roles[0].clone(), va.to_string());
    fills.insert(schema.roles[1].clone(), vb.to_string());
    (clause, fills)
}

fn make_closed(n_gold: usize, spec: &GenSpec, pool: &SchemaPool, rng: &mut SplitMix64) -> Sample {
    let mut indices: Vec<usize> = (0..spec.n_schemas).collect();
    rng.shuffle(&mut indices);
    indices.truncate(n_gold);
    let mut clauses = Vec::new();
    let mut gold_schemas = Vec::new();
    let mut gold_fills: Fills = BTreeMap::new();
    for &si in &indices {
        let (clause, fills) = closed_clause(si, pool, rng);
        clauses.push(clause);
        gold_schemas.push(pool.schemas[si].name.clone());
        gold_fills.insert(pool.schemas[si].name.clone(), fills);
    }
    Sample {
        query: clauses.join(" and "),
        kind: SampleKind::Closed,
        gold_schemas,
        gold_fills,
        gold_open_schema: None,
    }
}

fn make_schema_free(rng: &mut SplitMix64) -> Sample {
    let t1 = *rng.pick(&TOPIC_WORDS);
    let t2 = *rng.pick(&TOPIC_WORDS);
    let t3 = *rng.pick(&TOPIC_WORDS);
    let query = match rng.below(3) {
        0 => format!("a calm {t1} evening with {t2} and {t3}"),
        1 => format!("the {t1} group enjoyed {t2} beside the {t3}"),
        _ => format!("{t1} lessons featured {t2} and gentle {t3}"),
    };
    Sample {
        query,
        kind: SampleKind::SchemaFree,
        gold_schemas: Vec::new(),
        gold_fills: BTreeMap::new(),
        gold_open_schema: None,
    }
}

fn make_open(rng: &mut SplitMix64) -> Sample {
    let family = &OPEN_FAMILIES[rng.below(OPEN_FAMILIES.len())];
    let values: Vec<&str> = family
        .roles
        .iter()
        .map(|r| *rng.pick(open_role_values(r)))
        .collect();
    let mut query = String::new();
    for (i, part) in family.parts.iter().enumerate() {
        query.push_str(part);
        if i < values.len() {
            query.push_str(values[i]);
        }
    }
    let schema = SchemaDef {
        name: family.trigger.to_string(),
        description: String::new(),
        roles: family.roles.iter().map(|r| r.to_string()).collect(),
        task_kind: TaskKind::OdieLike,
    };
    let mut fills = BTreeMap::new();
    for (r, v) in family.roles.iter().zip(values.iter()) {
        fills.insert(r.to_string(), v.to_string());
    }
    let mut gold_fills = BTreeMap::new();
    gold_fills.insert(family.trigger.to_string(), fills);
    Sample {
        query,
        kind: SampleKind::Open,
        gold_schemas: Vec::new(),
        gold_fills,
        gold_open_schema: Some(schema),
    }
}

/// Per-closed-sample gold counts hitting the requested mean exactly (up to
/// rounding), capped at 3 schemas and at the pool size.
fn gold_counts(n_closed: usize, avg: f64, n_schemas: usize) -> Vec<usize> {
    let cap = 3.min(n_schemas);
    let target = (avg * n_closed as f64).round() as usize;
    let mut counts = vec![1usize; n_closed];
    let mut remaining = target.saturating_sub(n_closed);
    for level in 0..(cap - 1) {
        let _ = level;
        for c in counts.iter_mut() {
            if remaining == 0 {
                break;
            }
            if *c < cap {
                *c += 1;
                remaining -= 1;
            }
        }
    }
    counts
}

fn validate_spec(spec: &GenSpec) -> Result<()> {
    let max_schemas = TRIGGERS.len().min(ROLE_DEFS.len() * (ROLE_DEFS.len() - 1) / 2);
    if spec.n_schemas == 0 || spec.n_schemas > max_schemas {
        return Err(SptError::Spec(format!(
            "n_schemas must be in [1, {max_schemas}], got {}",
            spec.n_schemas
        )));
    }
    if spec.n_train == 0 || spec.n_test == 0 {
        return Err(SptError::Spec("n_train and n_test must be positive".into()));
    }
    for (name, v) in [
        ("schema_free_ratio", spec.schema_free_ratio),
        ("open_ratio", spec.open_ratio),
        ("contextual_cue_strength", spec.contextual_cue_strength),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(SptError::Spec(format!("{name} must be in [0,1], got {v}")));
        }
    }
    if spec.schema_free_ratio + spec.open_ratio >= 1.0 {
        return Err(SptError::Spec(
            "schema_free_ratio + open_ratio must leave room for closed samples".into(),
        ));
    }
    if !(1.0..=3.0).contains(&spec.avg_schemas_per_sample) {
        return Err(SptError::Spec(
            "avg_schemas_per_sample must be in [1,3]".into(),
        ));
    }
    Ok(())
}

fn make_split(
    spec: &GenSpec,
    pool: &SchemaPool,
    n: usize,
    stream: u64,
    taken: &mut BTreeSet<String>,
) -> Vec<Sample> {
    let root = SplitMix64::new(spec.seed).derive(stream);
    let n_free = (spec.schema_free_ratio * n as f64).round() as usize;
    let n_open = (spec.open_ratio * n as f64).round() as usize;
    let n_closed = n - n_free - n_open;
    let counts = gold_counts(n_closed, spec.avg_schemas_per_sample, spec.n_schemas);

    let mut samples = Vec::with_capacity(n);
    let mut emit = |make: &mut dyn FnMut(&mut SplitMix64) -> Sample, idx: u64| {
        // resample on query collision so splits stay disjoint
        for attempt in 0..64u64 {
            let mut rng = root.derive(idx * 64 + attempt + 1);
            let s = make(&mut rng);
            if taken.insert(s.query.clone()) {
                return s;
            }
        }
        // lexicon exhaustion: keep the duplicate rather than loop forever
        let mut rng = root.derive(idx * 64);
        make(&mut rng)
    };
    for (i, &c) in counts.iter().enumerate() {
        samples.push(emit(&mut |rng| make_closed(c, spec, pool, rng), i as u64));
    }
    for i in 0..n_free {
        samples.push(emit(&mut |rng| make_schema_free(rng), (n_closed + i) as u64));
    }
    for i in 0..n_open {
        samples.push(emit(&mut |rng| make_open(rng), (n_closed + n_free + i) as u64));
    }
    let mut order_rng = root.derive(u64::MAX);
    order_rng.shuffle(&mut samples);
    samples
}

/// Generates the schema pool and both splits. Deterministic in `spec`.
pub fn generate(spec: &GenSpec) -> Result<(SchemaPool, Vec<Sample>, Vec<Sample>)> {
    validate_spec(spec)?;
    let mut pool_rng = SplitMix64::new(spec.seed).derive(0xB00);
    let pool = build_pool(spec, &mut pool_rng);
    let mut taken = BTreeSet::new();
    let train = make_split(spec, &pool, spec.n_train, 1, &mut taken);
    let test = make_split(spec, &pool, spec.n_test, 2, &mut taken);
    Ok((pool, train, test))
}

/// Every lexicon word, ensuring vocabulary coverage for values that happen
/// not to occur in the training split.
pub fn lexicon_coverage_lines() -> Vec<String> {
    let mut lines = Vec::new();
    lines.push(TRIGGERS.join(" "));
    for (role, values) in &ROLE_DEFS {
        lines.push(format!("{role} {}", values.join(" ")));
    }
    lines.push(DESC_WORDS.join(" "));
    lines.push(TOPIC_WORDS.join(" "));
    for (role, values) in &OPEN_ROLE_VALUES {
        lines.push(format!("{role} {}", values.join(" ")));
    }
    for f in &OPEN_FAMILIES {
        let mut words: Vec<&str> = vec![f.trigger];
        for p in f.parts {
            words.extend(p.split_whitespace());
        }
        lines.push(words.join(" "));
    }
    lines
}

pub fn write_jsonl(samples: &[Sample], path: &std::path::Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    // version header line, skipped by read_jsonl
    out.write_all(b"{\"format_version\":1}\n")?;
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &std::path::Path) -> Result<Vec<Sample>> {
    let file = std::fs::File::open(path)?;
    let mut samples = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if i == 0 {
            if let Ok(v) = serde_json::from_str::<serde_json::Value>(&line) {
                if v.get("format_version").is_some() && v.get("query").is_none() {
                    continue;
                }
            }
        }
        let s: Sample = serde_json::from_str(&line).map_err(|e| SptError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        samples.push(s);
    }
    Ok(samples)
}
