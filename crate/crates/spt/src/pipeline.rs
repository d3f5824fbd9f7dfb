//! End-to-end pipelines shared by the CLI and the integration tests:
//! data generation, pretraining, the three-phase schedule, evaluation
//! tracks, and single-query extraction — all against the artifact layout
//! in [`crate::config::PathsConfig`].

use std::io::Write;

use crate::checkpoint::{self, Stage};
use crate::config::{Config, StageConfig};
use crate::datagen::{self, Sample, SampleKind};
use crate::decoder::{DecodeOptions, DecodeTrace, Decoder};
use crate::error::{Result, SptError};
use crate::eval::{eval_bench, eval_extraction, eval_generation, eval_retrieval, EvalReport};
use crate::model::ModelParams;
use crate::registry::{validate_pool, SchemaPool};
use crate::textcore::Vocabulary;
use crate::trainer::{
    self, MetricRecord, Phase, TrainPlan,
};

/// Generates the pool and splits, writes them to the run directory, and
/// returns dataset statistics.
pub fn gen_data(cfg: &Config) -> Result<serde_json::Value> {
    cfg.validate()?;
    let (pool, train, test) = datagen::generate(&cfg.data)?;
    let violations = validate_pool(&pool, true);
    if !violations.is_empty() {
        return Err(SptError::Spec(format!(
            "generated pool fails strict validation: {}",
            violations.join("; ")
        )));
    }
    std::fs::create_dir_all(&cfg.paths.run_dir)?;
    pool.save(&cfg.paths.pool())?;
    datagen::write_jsonl(&train, &cfg.paths.train())?;
    datagen::write_jsonl(&test, &cfg.paths.test())?;
    let count = |set: &[Sample], kind: SampleKind| set.iter().filter(|s| s.kind == kind).count();
    let free = count(&train, SampleKind::SchemaFree);
    Ok(serde_json::json!({
        "format_version": 1,
        "n_schemas": pool.len(),
        "train": {
            "total": train.len(),
            "closed": count(&train, SampleKind::Closed),
            "schema_free": free,
            "open": count(&train, SampleKind::Open),
            "schema_free_ratio": free as f64 / train.len() as f64,
        },
        "test": {
            "total": test.len(),
            "closed": count(&test, SampleKind::Closed),
            "schema_free": count(&test, SampleKind::SchemaFree),
            "open": count(&test, SampleKind::Open),
        },
    }))
}

fn load_data(cfg: &Config) -> Result<(SchemaPool, Vec<Sample>, Vec<Sample>)> {
    let pool = SchemaPool::load(&cfg.paths.pool())?;
    let train = datagen::read_jsonl(&cfg.paths.train())?;
    let test = datagen::read_jsonl(&cfg.paths.test())?;
    Ok((pool, train, test))
}

fn append_metrics(cfg: &Config, records: &[MetricRecord]) -> Result<()> {
    let path = cfg.paths.metrics();
    let fresh = !path.exists();
    let mut out = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)?;
    if fresh {
        writeln!(out, "{{\"format_version\":1}}")?;
    }
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

/// Number of trainable extension parameters: (|S|+2) · d.
pub fn trainable_parameters(params: &ModelParams<f32>) -> usize {
    params.ext.rows * params.ext.cols
}

/// Pretrains the base model on the demo-format corpus and writes the
/// `pretrained` checkpoint. Returns the per-epoch records (including the
/// unigram-oracle perplexity for reference).
pub fn pretrain(cfg: &Config) -> Result<Vec<MetricRecord>> {
    cfg.validate()?;
    let (pool, train, _) = load_data(cfg)?;
    let vocab = Vocabulary::build(&trainer::vocab_corpus(&pool, &train), &pool.names())?;
    let mut params = ModelParams::init(
        cfg.model.clone(),
        vocab.base_len(),
        vocab.ext_len(),
        cfg.seed,
    )?;
    let corpus = trainer::pretrain_sequences(&train, &pool, &vocab);
    let stage = cfg.train.pretrain;
    let mut records = trainer::pretrain(
        &mut params,
        &corpus,
        stage.epochs,
        stage.lr,
        stage.optimizer,
        cfg.seed,
    )?;
    // unigram oracle on the same split, for the per-epoch comparison
    let (tr, val): (Vec<_>, Vec<_>) = corpus
        .iter()
        .enumerate()
        .partition(|(i, _)| i % 10 != 9);
    let tr: Vec<_> = tr.into_iter().map(|(_, s)| s.clone()).collect();
    let val: Vec<_> = val.into_iter().map(|(_, s)| s.clone()).collect();
    let unigram = trainer::unigram_perplexity(&tr, &val, vocab.base_len() + vocab.ext_len());
    if let Some(last) = records.last_mut() {
        last.metrics.insert("unigram_val_perplexity".into(), unigram);
        last.metrics
            .insert("trainable_parameters".into(), trainable_parameters(&params) as f64);
    }
    append_metrics(cfg, &records)?;
    checkpoint::save(&cfg.paths.checkpoint(Stage::Pretrained), &params, &vocab, Stage::Pretrained)?;
    Ok(records)
}

fn phase_stage(phase: Phase) -> Stage {
    match phase {
        Phase::P1 => Stage::Phase1,
        Phase::P2 => Stage::Phase2,
        Phase::P3 => Stage::Phase3,
    }
}

fn prev_stage(phase: Phase) -> Stage {
    match phase {
        Phase::P1 => Stage::Pretrained,
        Phase::P2 => Stage::Phase1,
        Phase::P3 => Stage::Phase2,
    }
}

fn stage_config(cfg: &Config, phase: Phase) -> StageConfig {
    match phase {
        Phase::P1 => cfg.train.phase1,
        Phase::P2 => cfg.train.phase2,
        Phase::P3 => cfg.train.phase3,
    }
}

/// Runs one phase of the compositional schedule on top of the previous
/// stage's checkpoint; enforces the phase order.
pub fn train_phase(cfg: &Config, phase: Phase) -> Result<Vec<MetricRecord>> {
    cfg.validate()?;
    let prev = prev_stage(phase);
    let path = cfg.paths.checkpoint(prev);
    let (mut params, vocab, stage) = checkpoint::load(&path)?;
    if stage != prev {
        return Err(SptError::PhaseOrder(format!(
            "{} holds a {} checkpoint, expected {}",
            path.display(),
            stage.label(),
            prev.label()
        )));
    }
    let (pool, train, _) = load_data(cfg)?;
    // cap the schema-free fraction of the training set
    let train = trainer::downsample_schema_free(&train, cfg.train.schema_free_cap, cfg.seed);
    let sc = stage_config(cfg, phase);
    let plan = TrainPlan {
        phase,
        epochs: sc.epochs,
        lr: sc.lr,
        optimizer: sc.optimizer,
    };
    let records = trainer::run_phase(&mut params, &plan, &train, &pool, &vocab, cfg.seed)?;
    append_metrics(cfg, &records)?;
    checkpoint::save(
        &cfg.paths.checkpoint(phase_stage(phase)),
        &params,
        &vocab,
        phase_stage(phase),
    )?;
    Ok(records)
}

/// Convenience: all three phases in order.
pub fn train_all(cfg: &Config) -> Result<Vec<MetricRecord>> {
    let mut records = Vec::new();
    for phase in [Phase::P1, Phase::P2, Phase::P3] {
        records.extend(train_phase(cfg, phase)?);
    }
    Ok(records)
}

/// Loads a trained checkpoint and wraps it in a decoder over the pool.
pub struct World {
    pub params: ModelParams<f32>,
    pub vocab: Vocabulary,
    pub pool: SchemaPool,
    pub test: Vec<Sample>,
    pub stage: Stage,
}

impl World {
    pub fn decoder(&self, cfg: &Config) -> Decoder<'_> {
        Decoder::new(
            &self.params,
            &self.vocab,
            &self.pool,
            DecodeOptions {
                copy_constraint: cfg.eval.copy_constraint,
                ..DecodeOptions::default()
            },
        )
    }
}

/// Loads the artifacts needed for evaluation: the checkpoint for `stage`
/// plus the pool and test split.
pub fn load_world(cfg: &Config, stage: Stage) -> Result<World> {
    let (params, vocab, got) = checkpoint::load(&cfg.paths.checkpoint(stage))?;
    if got != stage {
        return Err(SptError::PhaseOrder(format!(
            "checkpoint holds stage {}, expected {}",
            got.label(),
            stage.label()
        )));
    }
    let (pool, _, test) = load_data(cfg)?;
    Ok(World {
        params,
        vocab,
        pool,
        test,
        stage,
    })
}

/// One evaluation track against the phase-3 checkpoint; writes the report
/// to `report.json`.
pub fn evaluate(cfg: &Config, track: &str) -> Result<EvalReport> {
    cfg.validate()?;
    let world = load_world(cfg, Stage::Phase3)?;
    let dec = world.decoder(cfg);
    let report = match track {
        "retrieval" => eval_retrieval(&dec, &world.test, cfg.eval.k)?,
        "extraction" => eval_extraction(&dec, &world.test)?,
        "generation" => eval_generation(&dec, &world.test, cfg.eval.soft_match_threshold)?,
        "bench" => {
            let queries: Vec<String> = world
                .test
                .iter()
                .map(|s| s.query.clone())
                .take(cfg.eval.bench_queries)
                .collect();
            eval_bench(&dec, &queries)?
        }
        other => return Err(SptError::Spec(format!("unknown eval track {other:?}"))),
    };
    std::fs::write(&cfg.paths.report(), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Full extraction for one query against the phase-3 checkpoint.
pub fn extract(cfg: &Config, query: &str) -> Result<DecodeTrace> {
    cfg.validate()?;
    let world = load_world(cfg, Stage::Phase3)?;
    let dec = world.decoder(cfg);
    dec.extract(query)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_config(dir: &std::path::Path) -> Config {
        let mut cfg = Config::default();
        cfg.data.n_schemas = 3;
        cfg.data.n_train = 30;
        cfg.data.n_test = 9;
        cfg.model = ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 512,
            tie_embeddings: false,
        };
        cfg.train.pretrain.epochs = 1;
        cfg.train.phase1.epochs = 1;
        cfg.train.phase2.epochs = 1;
        cfg.train.phase3.epochs = 1;
        cfg.eval.bench_queries = 3;
        cfg.paths.run_dir = dir.to_path_buf();
        cfg
    }

    #[test]
    fn end_to_end_pipeline_runs_and_enforces_order() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        // phase training before any checkpoint exists -> missing checkpoint
        match train_phase(&cfg, Phase::P1) {
            Err(SptError::MissingCheckpoint(_)) => {}
            other => panic!("expected MissingCheckpoint, got {other:?}"),
        }
        let stats = gen_data(&cfg).unwrap();
        assert_eq!(stats["n_schemas"], 3);
        pretrain(&cfg).unwrap();
        // phase 2 before phase 1 -> missing phase1 checkpoint
        match train_phase(&cfg, Phase::P2) {
            Err(SptError::MissingCheckpoint(_)) => {}
            other => panic!("expected MissingCheckpoint, got {other:?}"),
        }
        train_all(&cfg).unwrap();
        let report = evaluate(&cfg, "retrieval").unwrap();
        assert!(report.metrics.contains_key("spt_recall_at_k"));
        assert!(cfg.paths.report().exists());
        let trace = extract(&cfg, "a plain query with no schema cues").unwrap();
        serde_json::to_string(&trace).unwrap();
        // metrics file exists, is versioned, and parses line by line
        let text = std::fs::read_to_string(cfg.paths.metrics()).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "{\"format_version\":1}");
        for line in lines {
            serde_json::from_str::<serde_json::Value>(line).unwrap();
        }
    }

    #[test]
    fn gen_data_is_deterministic_on_disk() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let c1 = tiny_config(d1.path());
        let c2 = tiny_config(d2.path());
        gen_data(&c1).unwrap();
        gen_data(&c2).unwrap();
        for f in ["pool.json", "train.jsonl", "test.jsonl"] {
            let a = std::fs::read(d1.path().join(f)).unwrap();
            let b = std::fs::read(d2.path().join(f)).unwrap();
            assert_eq!(a, b, "{f} differs between identical runs");
        }
    }
}
