//! Corpus-level evaluation tracks and the inference-cost benchmark, built
//! on the metric primitives in the parent module.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde::Serialize;

use crate::baselines::{self, Bm25Index};
use crate::datagen::{Sample, SampleKind};
use crate::decoder::{parse_generated_header, render_generated_header, Decoder};
use crate::error::Result;
use crate::parallel::{par_map, worker_threads};

use super::{header_soft_f1, recall_at_k, rejection_score, rouge_l_f1, span_macro_f1};

/// One evaluation track's scores, with per-kind breakdowns and counts.
/// Scores live in [0,1]; timing and token fields carry their own units.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub track: String,
    pub metrics: BTreeMap<String, f64>,
    pub per_kind: BTreeMap<String, BTreeMap<String, f64>>,
    pub counts: BTreeMap<String, u64>,
    pub config: serde_json::Value,
}

impl EvalReport {
    fn new(track: &str, config: serde_json::Value) -> Self {
        Self {
            format_version: 1,
            track: track.to_string(),
            metrics: BTreeMap::new(),
            per_kind: BTreeMap::new(),
            counts: BTreeMap::new(),
            config,
        }
    }

    /// Plain-text table rendering for human reading.
    pub fn render_table(&self) -> String {
        let mut out = format!("== {} ==\n", self.track);
        let width = self
            .metrics
            .keys()
            .chain(self.counts.keys())
            .map(|k| k.len())
            .max()
            .unwrap_or(0)
            .max(6);
        for (k, v) in &self.metrics {
            out.push_str(&format!("{k:<width$}  {v:.4}\n"));
        }
        for (kind, metrics) in &self.per_kind {
            out.push_str(&format!("-- {kind} --\n"));
            for (k, v) in metrics {
                out.push_str(&format!("{k:<width$}  {v:.4}\n"));
            }
        }
        for (k, v) in &self.counts {
            out.push_str(&format!("{k:<width$}  {v}\n"));
        }
        out
    }
}

fn kind_label(kind: SampleKind) -> &'static str {
    match kind {
        SampleKind::Closed => "closed",
        SampleKind::SchemaFree => "schema_free",
        SampleKind::Open => "open",
    }
}

/// Extraction with truncation tolerance: a sample that exhausts the token
/// or context budget scores zero instead of aborting the whole track.
fn try_extract(dec: &Decoder, query: &str) -> Result<Option<crate::decoder::DecodeTrace>> {
    match dec.extract(query) {
        Ok(out) => Ok(Some(out)),
        Err(crate::error::SptError::TruncatedGeneration(_))
        | Err(crate::error::SptError::SeqTooLong(_, _)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// BM25 index over the pool: one document of description text per schema,
/// keyed by schema name.
pub fn pool_bm25(pool: &crate::registry::SchemaPool) -> Result<Bm25Index> {
    let docs: Vec<(String, String)> = pool
        .schemas
        .iter()
        .map(|s| (s.name.clone(), s.description.clone()))
        .collect();
    baselines::build_index(&docs, baselines::DEFAULT_K1, baselines::DEFAULT_B)
}

/// Retrieval track: Recall@k for the schema-token ranking vs BM25 over
/// descriptions, on samples with nonempty gold schema sets.
pub fn eval_retrieval(dec: &Decoder, test: &[Sample], k: usize) -> Result<EvalReport> {
    let bm25 = pool_bm25(dec.pool)?;
    let per_sample = par_map(test, worker_threads(), |sample| {
        let gold: BTreeSet<String> = sample.gold_schemas.iter().cloned().collect();
        if gold.is_empty() {
            return Ok(None);
        }
        let ranked = dec.rank_schemas(&sample.query)?;
        let spt = recall_at_k(&ranked, &gold, k).expect("nonempty gold");
        let bm_ranked = bm25.topk(&sample.query, dec.pool.len());
        let bm = recall_at_k(&bm_ranked, &gold, k).expect("nonempty gold");
        Ok(Some((spt, bm)))
    })?;
    let mut spt_scores = Vec::new();
    let mut bm25_scores = Vec::new();
    let mut skipped = 0u64;
    for entry in per_sample {
        match entry {
            Some((s, b)) => {
                spt_scores.push(s);
                bm25_scores.push(b);
            }
            None => skipped += 1,
        }
    }
    let mut report = EvalReport::new("retrieval", serde_json::json!({ "k": k }));
    report.metrics.insert("spt_recall_at_k".into(), mean(&spt_scores));
    report.metrics.insert("bm25_recall_at_k".into(), mean(&bm25_scores));
    report.counts.insert("scored".into(), spt_scores.len() as u64);
    report.counts.insert("skipped_empty_gold".into(), skipped);
    Ok(report)
}

/// Extraction track: span macro-F1 and exact slot match on Closed samples,
/// rejection F1/accuracy over Closed + SchemaFree decisions.
pub fn eval_extraction(dec: &Decoder, test: &[Sample]) -> Result<EvalReport> {
    let outputs = par_map(test, worker_threads(), |sample| {
        try_extract(dec, &sample.query)
    })?;
    let mut decisions: Vec<(bool, bool)> = Vec::new();
    let mut macro_scores: Vec<f64> = Vec::new();
    let mut exact: Vec<f64> = Vec::new();
    let mut truncated = 0u64;
    let mut slot_hits = 0u64;
    let mut slot_total = 0u64;
    let mut n_by_kind: BTreeMap<&str, u64> = BTreeMap::new();
    for (sample, out) in test.iter().zip(&outputs) {
        *n_by_kind.entry(kind_label(sample.kind)).or_insert(0) += 1;
        let out = match out {
            Some(out) => out,
            None => {
                // truncated run: zero credit, counted as a non-rejection
                truncated += 1;
                if sample.kind != SampleKind::Open {
                    decisions.push((false, sample.kind == SampleKind::SchemaFree));
                }
                if sample.kind == SampleKind::Closed {
                    macro_scores.push(0.0);
                    exact.push(0.0);
                    slot_total += sample.gold_fills.values().map(|f| f.len() as u64).sum::<u64>();
                }
                continue;
            }
        };
        match sample.kind {
            SampleKind::Closed | SampleKind::SchemaFree => {
                decisions.push((
                    out.selected.is_empty(),
                    sample.kind == SampleKind::SchemaFree,
                ));
            }
            // <Rej> is the correct first decision on Open samples, so they
            // are excluded from the rejection measurement
            SampleKind::Open => {}
        }
        if sample.kind == SampleKind::Closed {
            let pred: Vec<(String, String)> = out
                .fills
                .iter()
                .flat_map(|f| {
                    f.arguments
                        .iter()
                        .map(move |(role, v)| (format!("{}::{}", f.schema, role), v.clone()))
                })
                .collect();
            let gold: Vec<(String, String)> = sample
                .gold_fills
                .iter()
                .flat_map(|(schema, fills)| {
                    fills
                        .iter()
                        .map(move |(role, v)| (format!("{schema}::{role}"), v.clone()))
                })
                .collect();
            macro_scores.push(span_macro_f1(&pred, &gold).macro_f1);
            let pred_map: BTreeMap<String, BTreeMap<String, String>> = out
                .fills
                .iter()
                .map(|f| (f.schema.clone(), f.arguments.clone()))
                .collect();
            exact.push(if pred_map == sample.gold_fills { 1.0 } else { 0.0 });
            // per-slot exact rate: each gold (schema, role, value) triple
            // scores when the decoded value matches it verbatim
            for (schema, fills) in &sample.gold_fills {
                for (role, value) in fills {
                    slot_total += 1;
                    let hit = pred_map
                        .get(schema)
                        .and_then(|args| args.get(role))
                        .is_some_and(|v| v == value);
                    if hit {
                        slot_hits += 1;
                    }
                }
            }
        }
    }
    let (rej, rej_acc) = rejection_score(&decisions);
    let mut report = EvalReport::new("extraction", serde_json::json!({}));
    report.metrics.insert("span_macro_f1".into(), mean(&macro_scores));
    report.metrics.insert("exact_slot_match".into(), mean(&exact));
    report.metrics.insert(
        "slot_value_exact".into(),
        if slot_total > 0 {
            slot_hits as f64 / slot_total as f64
        } else {
            0.0
        },
    );
    report.metrics.insert("rejection_f1".into(), rej.f1);
    report.metrics.insert("rejection_precision".into(), rej.precision);
    report.metrics.insert("rejection_recall".into(), rej.recall);
    report.metrics.insert("rejection_accuracy".into(), rej_acc);
    for (kind, n) in n_by_kind {
        report
            .per_kind
            .entry(kind.to_string())
            .or_default()
            .insert("samples".into(), n as f64);
    }
    report.counts.insert("rejection_decisions".into(), decisions.len() as u64);
    report.counts.insert("truncated".into(), truncated);
    Ok(report)
}

/// Generation track over Open samples: grammar validity of the generated
/// header, header soft-match F1 against the gold role set, and ROUGE-L of
/// extracted content against the gold fills.
pub fn eval_generation(dec: &Decoder, test: &[Sample], threshold: f64) -> Result<EvalReport> {
    let open: Vec<&Sample> = test
        .iter()
        .filter(|s| s.kind == SampleKind::Open && s.gold_open_schema.is_some())
        .collect();
    let outputs = par_map(&open, worker_threads(), |sample| {
        try_extract(dec, &sample.query)
    })?;
    let mut validity: Vec<f64> = Vec::new();
    let mut header: Vec<f64> = Vec::new();
    let mut rouge: Vec<f64> = Vec::new();
    let mut entered_generation = 0u64;
    let n_open = open.len() as u64;
    for (sample, out) in open.iter().zip(&outputs) {
        let gold_schema = sample.gold_open_schema.as_ref().expect("filtered");
        let out = match out {
            Some(out) => out,
            None => {
                validity.push(0.0);
                header.push(0.0);
                rouge.push(0.0);
                continue;
            }
        };
        let generated = match &out.generated {
            Some(g) => {
                entered_generation += 1;
                g
            }
            None => {
                // selected a pool schema instead: zero credit on all three
                validity.push(0.0);
                header.push(0.0);
                rouge.push(0.0);
                continue;
            }
        };
        let rendered = render_generated_header(generated);
        let parsed = parse_generated_header(&rendered);
        validity.push(if parsed.is_ok() { 1.0 } else { 0.0 });
        header.push(header_soft_f1(&generated.roles, &gold_schema.roles, threshold));
        let pred_content: Vec<String> = out
            .fills
            .iter()
            .flat_map(|f| f.arguments.values().cloned())
            .collect();
        let gold_content: Vec<String> = sample
            .gold_fills
            .values()
            .flat_map(|m| m.values().cloned())
            .collect();
        rouge.push(rouge_l_f1(&pred_content.join(" "), &gold_content.join(" ")));
    }
    let mut report = EvalReport::new(
        "generation",
        serde_json::json!({ "soft_match_threshold": threshold }),
    );
    report.metrics.insert("grammar_valid_rate".into(), mean(&validity));
    report.metrics.insert("header_soft_f1".into(), mean(&header));
    report.metrics.insert("content_rouge_l".into(), mean(&rouge));
    report.counts.insert("open_samples".into(), n_open);
    report.counts.insert("entered_generation".into(), entered_generation);
    Ok(report)
}

/// Inference-cost benchmark: mean generated tokens and per-token wall time
/// for the schema-token pipeline vs the plain-text baseline pipeline, over
/// the same queries.
pub fn eval_bench(dec: &Decoder, queries: &[String]) -> Result<EvalReport> {
    let mut spt_tokens = Vec::new();
    let mut base_tokens = Vec::new();
    let mut spt_secs = 0.0f64;
    let mut base_secs = 0.0f64;
    let mut skipped = 0u64;
    for q in queries {
        let t0 = Instant::now();
        let out = match try_extract(dec, q)? {
            Some(out) => out,
            None => {
                skipped += 1;
                continue;
            }
        };
        spt_secs += t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let bout = match dec.extract_baseline(q) {
            Ok(b) => b,
            Err(crate::error::SptError::TruncatedGeneration(_))
            | Err(crate::error::SptError::SeqTooLong(_, _)) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        base_secs += t1.elapsed().as_secs_f64();
        spt_tokens.push(out.generated_tokens() as f64);
        base_tokens.push(bout.generated_tokens() as f64);
    }
    let spt_total: f64 = spt_tokens.iter().sum();
    let base_total: f64 = base_tokens.iter().sum();
    let mut report = EvalReport::new("bench", serde_json::json!({ "queries": queries.len() }));
    report.metrics.insert("spt_mean_tokens".into(), mean(&spt_tokens));
    report.metrics.insert("baseline_mean_tokens".into(), mean(&base_tokens));
    report.metrics.insert(
        "spt_ms_per_token".into(),
        if spt_total > 0.0 { spt_secs * 1e3 / spt_total } else { 0.0 },
    );
    report.metrics.insert(
        "baseline_ms_per_token".into(),
        if base_total > 0.0 { base_secs * 1e3 / base_total } else { 0.0 },
    );
    report.counts.insert("queries".into(), queries.len() as u64);
    report.counts.insert("skipped_truncated".into(), skipped);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, GenSpec};
    use crate::decoder::DecodeOptions;
    use crate::model::{ModelConfig, ModelParams};
    use crate::textcore::Vocabulary;
    use crate::trainer::vocab_corpus;

    fn world() -> (
        crate::registry::SchemaPool,
        Vec<Sample>,
        Vocabulary,
        ModelParams<f32>,
    ) {
        let spec = GenSpec {
            n_schemas: 4,
            n_train: 24,
            n_test: 12,
            ..GenSpec::default()
        };
        let (pool, train, test) = generate(&spec).unwrap();
        let vocab = Vocabulary::build(&vocab_corpus(&pool, &train), &pool.names()).unwrap();
        let cfg = ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 256,
            tie_embeddings: false,
        };
        let params = ModelParams::init(cfg, vocab.base_len(), vocab.ext_len(), 5).unwrap();
        (pool, test, vocab, params)
    }

    #[test]
    fn reports_have_scores_in_range_and_render() {
        let (pool, test, vocab, params) = world();
        let dec = Decoder::new(&params, &vocab, &pool, DecodeOptions::default());
        let r1 = eval_retrieval(&dec, &test, 5).unwrap();
        let r2 = eval_extraction(&dec, &test).unwrap();
        let r3 = eval_generation(&dec, &test, 0.5).unwrap();
        for r in [&r1, &r2, &r3] {
            for (k, v) in &r.metrics {
                assert!((0.0..=1.0).contains(v), "{k} = {v}");
            }
            assert!(r.render_table().contains(&r.track));
            serde_json::to_string(r).unwrap();
        }
    }

    #[test]
    fn bench_counts_tokens_for_both_methods() {
        let (pool, test, vocab, params) = world();
        let dec = Decoder::new(&params, &vocab, &pool, DecodeOptions::default());
        let queries: Vec<String> = test.iter().take(4).map(|s| s.query.clone()).collect();
        let r = eval_bench(&dec, &queries).unwrap();
        assert!(r.metrics["spt_mean_tokens"] > 0.0);
        assert!(r.metrics["baseline_mean_tokens"] > 0.0);
    }

    #[test]
    fn retrieval_order_permutation_invariant() {
        let (pool, test, vocab, params) = world();
        let dec = Decoder::new(&params, &vocab, &pool, DecodeOptions::default());
        let a = eval_retrieval(&dec, &test, 5).unwrap();
        let mut rev: Vec<Sample> = test.to_vec();
        rev.reverse();
        let b = eval_retrieval(&dec, &rev, 5).unwrap();
        assert_eq!(a.metrics["spt_recall_at_k"], b.metrics["spt_recall_at_k"]);
        assert_eq!(a.metrics["bm25_recall_at_k"], b.metrics["bm25_recall_at_k"]);
    }
}
