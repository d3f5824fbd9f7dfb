//! Base-LM pretraining and the three-phase schema-token training schedule,
//! plus the canonical prompt/sequence formats shared with the decoder.
//!
//! Sequence layout (word-level tokens; one space per token in rendered
//! form):
//!
//! ```text
//! <bos> select functions to extract structured information <sep> {query}
//! <sep> selected function : {schema mentions | none} <nl>
//! [generation cue + schema header, open samples only]
//! extraction results : <nl> { " name " : { " role " : " value " , ... } } <nl> ...
//! ```
//!
//! Schema tokens and `<Rej>` exist only in the output head: a schema
//! mention is supervised as a schema-token target at the position *before*
//! the mention, while the input itself carries the spelled-out name words.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::{Sample, SampleKind};
use crate::error::{Result, SptError};
use crate::model::{
    adam_step, forward, loss_and_grads, sgd_step, AdamState, ModelParams, SupervisedSeq, TrainMask,
};
use crate::registry::{SchemaDef, SchemaPool};
use crate::rng::SplitMix64;
use crate::textcore::{self, TokenId, TokenSeq, Vocabulary};

/// Instruction line that opens every prompt.
pub const PROMPT_PREFIX: &str = "select functions to extract structured information";
/// Cue after which schema selection happens.
pub const SELECT_CUE: &str = "selected function :";
/// Marker emitted on the selection line when no schema applies.
pub const NONE_WORD: &str = "none";
/// Cue that opens generation mode.
pub const GEN_CUE: &str = "based on the query , i should extract using schema :";
/// Cue that opens the infilling section.
pub const EXTRACT_CUE: &str = "extraction results :";
/// Key words of the generated-schema header object.
pub const GEN_KEYS: [&str; 2] = ["name", "arguments"];

pub const DEFAULT_BATCH_SIZE: usize = 32;

/// Update rule. Adam is the default everywhere: plain SGD (with or without
/// momentum) fails to form the query-copying attention circuits the
/// selection task needs at this scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algo", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd { momentum: f64 },
    Adam,
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    P1,
    P2,
    P3,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::P1 => "phase1",
            Phase::P2 => "phase2",
            Phase::P3 => "phase3",
        }
    }
}

/// One phase of the compositional schedule. The trainable groups and data
/// filter are functions of the phase, so the invariants cannot be violated
/// by construction.
#[derive(Debug, Clone)]
pub struct TrainPlan {
    pub phase: Phase,
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
}

impl TrainPlan {
    pub fn mask(&self) -> TrainMask {
        match self.phase {
            Phase::P1 => TrainMask::W_S_ONLY,
            Phase::P2 => TrainMask::HELPERS_ONLY,
            Phase::P3 => TrainMask::EXT_ALL,
        }
    }

    pub fn admits(&self, kind: SampleKind) -> bool {
        match self.phase {
            Phase::P1 => kind == SampleKind::Closed,
            Phase::P2 => kind != SampleKind::Closed,
            Phase::P3 => true,
        }
    }
}

/// Per-epoch training record, written as one JSONL line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRecord {
    pub phase: String,
    pub epoch: usize,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, f64>,
}

fn push_words(ids: &mut TokenSeq, vocab: &Vocabulary, text: &str) {
    ids.extend(vocab.encode(text));
}

/// Tokenized prompt up to (and including) the selection cue; the next
/// predicted token is the first selection decision.
pub fn prompt_prefix_ids(vocab: &Vocabulary, query: &str) -> TokenSeq {
    let mut ids = vec![vocab.id(textcore::BOS).expect("bos")];
    push_words(&mut ids, vocab, PROMPT_PREFIX);
    ids.push(vocab.id(textcore::SEP).expect("sep"));
    push_words(&mut ids, vocab, query);
    ids.push(vocab.id(textcore::SEP).expect("sep"));
    push_words(&mut ids, vocab, SELECT_CUE);
    ids
}

struct StructIds {
    obr: TokenId,
    cbr: TokenId,
    quote: TokenId,
    colon: TokenId,
    comma: TokenId,
    nl: TokenId,
}

fn struct_ids(vocab: &Vocabulary) -> StructIds {
    let t = |s: &str| vocab.id(s).expect("structural token");
    StructIds {
        obr: t(textcore::OPEN_BRACE),
        cbr: t(textcore::CLOSE_BRACE),
        quote: t(textcore::QUOTE),
        colon: t(textcore::COLON),
        comma: t(textcore::COMMA),
        nl: t(textcore::NEWLINE),
    }
}

/// Appends one filled template object for `schema`, supervising the value
/// spans and each slot-end quote. `name_tokens` is either the spelled-out
/// name words or the `<Gen>` soft-prompt token.
fn push_filled_template(
    ids: &mut TokenSeq,
    targets: &mut Vec<(usize, TokenId)>,
    vocab: &Vocabulary,
    s: &StructIds,
    schema: &SchemaDef,
    name_tokens: &[TokenId],
    fills: Option<&BTreeMap<String, String>>,
) {
    ids.extend([s.obr, s.quote]);
    ids.extend_from_slice(name_tokens);
    ids.extend([s.quote, s.colon, s.obr]);
    for (ri, role) in schema.roles.iter().enumerate() {
        if ri > 0 {
            ids.push(s.comma);
        }
        ids.push(s.quote);
        push_words(ids, vocab, role);
        ids.extend([s.quote, s.colon, s.quote]);
        let value = fills.and_then(|f| f.get(role)).map(String::as_str).unwrap_or("");
        for tok in vocab.encode(value) {
            targets.push((ids.len() - 1, tok));
            ids.push(tok);
        }
        targets.push((ids.len() - 1, s.quote));
        ids.push(s.quote);
    }
    ids.extend([s.cbr, s.cbr]);
}

/// Builds the supervised training sequence for one sample.
///
/// Supervision covers: the selection decisions (schema tokens, the list
/// separator/terminator, or `<Rej>`), the generated-schema header span for
/// open samples, and every infilling value span including its closing
/// quote. Structural tokens outside those spans are forced by the decoding
/// grammar and carry no loss.
pub fn build_training_sequence(
    sample: &Sample,
    pool: &SchemaPool,
    vocab: &Vocabulary,
) -> Result<SupervisedSeq> {
    let s = struct_ids(vocab);
    let mut ids = prompt_prefix_ids(vocab, &sample.query);
    let mut targets: Vec<(usize, TokenId)> = Vec::new();

    match sample.kind {
        SampleKind::Closed => {
            let n = sample.gold_schemas.len();
            for (i, name) in sample.gold_schemas.iter().enumerate() {
                let si = pool
                    .index_of(name)
                    .ok_or_else(|| SptError::LabelMismatch(name.clone()))?;
                // set-valued selection supervision: every not-yet-emitted
                // gold schema is a target here, so the first-position
                // distribution ranks the whole gold set, which is what
                // retrieval reads off
                for later in &sample.gold_schemas[i..] {
                    let li = pool
                        .index_of(later)
                        .ok_or_else(|| SptError::LabelMismatch(later.clone()))?;
                    targets.push((ids.len() - 1, vocab.schema_token_id(li)));
                }
                push_words(&mut ids, vocab, &pool.schemas[si].name_words().join(" "));
                let next = if i + 1 < n { s.comma } else { s.nl };
                targets.push((ids.len() - 1, next));
                ids.push(next);
            }
            push_words(&mut ids, vocab, EXTRACT_CUE);
            ids.push(s.nl);
            for name in &sample.gold_schemas {
                let si = pool.index_of(name).expect("checked above");
                let schema = &pool.schemas[si];
                let name_tokens = vocab.encode(&schema.name_words().join(" "));
                push_filled_template(
                    &mut ids,
                    &mut targets,
                    vocab,
                    &s,
                    schema,
                    &name_tokens,
                    sample.gold_fills.get(name),
                );
                ids.push(s.nl);
            }
        }
        SampleKind::SchemaFree => {
            targets.push((ids.len() - 1, vocab.rej_id()));
            push_words(&mut ids, vocab, NONE_WORD);
            ids.push(s.nl);
        }
        SampleKind::Open => {
            let schema = sample
                .gold_open_schema
                .as_ref()
                .ok_or_else(|| SptError::LabelMismatch("open sample without gold schema".into()))?;
            targets.push((ids.len() - 1, vocab.rej_id()));
            push_words(&mut ids, vocab, NONE_WORD);
            ids.push(s.nl);
            push_words(&mut ids, vocab, GEN_CUE);
            ids.push(s.nl);
            // generated-schema header: { " name " : " <Gen> " , " arguments " : { ... } }
            ids.extend([s.obr, s.quote]);
            push_words(&mut ids, vocab, GEN_KEYS[0]);
            ids.extend([s.quote, s.colon, s.quote]);
            ids.push(vocab.gen_id());
            ids.extend([s.quote, s.comma, s.quote]);
            push_words(&mut ids, vocab, GEN_KEYS[1]);
            ids.extend([s.quote, s.colon]);
            // every token of the arguments object is supervised: this is the
            // span generation mode decodes
            let mut span = vec![s.obr];
            for (ri, role) in schema.roles.iter().enumerate() {
                if ri > 0 {
                    span.push(s.comma);
                }
                span.push(s.quote);
                span.extend(vocab.encode(role));
                span.extend([s.quote, s.colon, s.quote, s.quote]);
            }
            span.extend([s.cbr, s.cbr]);
            for tok in span {
                targets.push((ids.len() - 1, tok));
                ids.push(tok);
            }
            ids.push(s.nl);
            push_words(&mut ids, vocab, EXTRACT_CUE);
            ids.push(s.nl);
            push_filled_template(
                &mut ids,
                &mut targets,
                vocab,
                &s,
                schema,
                &[vocab.gen_id()],
                sample.gold_fills.get(&schema.name),
            );
            ids.push(s.nl);
        }
    }
    Ok(SupervisedSeq { ids, targets })
}

/// Plain-text rendering of a sample as a fully worked demonstration; the
/// pretraining corpus is made of these. Schema names are spelled out and
/// the open-kind header carries the gold trigger word where `<Gen>` sits at
/// inference time.
pub fn render_demo(sample: &Sample, pool: &SchemaPool) -> String {
    fn words_into(w: &mut Vec<String>, text: &str) {
        w.extend(text.split_whitespace().map(String::from));
    }
    fn template(
        w: &mut Vec<String>,
        name: &str,
        schema: &SchemaDef,
        fills: Option<&BTreeMap<String, String>>,
    ) {
        w.extend(["{", "\""].map(String::from));
        words_into(w, name);
        w.extend(["\"", ":", "{"].map(String::from));
        for (ri, role) in schema.roles.iter().enumerate() {
            if ri > 0 {
                w.push(",".into());
            }
            w.push("\"".into());
            words_into(w, role);
            w.extend(["\"", ":", "\""].map(String::from));
            if let Some(v) = fills.and_then(|f| f.get(role)) {
                words_into(w, v);
            }
            w.push("\"".into());
        }
        w.extend(["}", "}"].map(String::from));
    }

    let mut w: Vec<String> = Vec::new();
    words_into(&mut w, PROMPT_PREFIX);
    w.push(textcore::SEP.into());
    words_into(&mut w, &sample.query);
    w.push(textcore::SEP.into());
    words_into(&mut w, SELECT_CUE);
    match sample.kind {
        SampleKind::Closed => {
            for (i, name) in sample.gold_schemas.iter().enumerate() {
                if i > 0 {
                    w.push(",".into());
                }
                let si = pool.index_of(name).expect("gold schema in pool");
                words_into(&mut w, &pool.schemas[si].name_words().join(" "));
            }
            w.push(textcore::NEWLINE.into());
            words_into(&mut w, EXTRACT_CUE);
            w.push(textcore::NEWLINE.into());
            for name in &sample.gold_schemas {
                let si = pool.index_of(name).expect("gold schema in pool");
                let schema = &pool.schemas[si];
                template(
                    &mut w,
                    &schema.name_words().join(" "),
                    schema,
                    sample.gold_fills.get(name),
                );
                w.push(textcore::NEWLINE.into());
            }
        }
        SampleKind::SchemaFree => {
            words_into(&mut w, NONE_WORD);
            w.push(textcore::NEWLINE.into());
        }
        SampleKind::Open => {
            let schema = sample.gold_open_schema.as_ref().expect("gold open schema");
            words_into(&mut w, NONE_WORD);
            w.push(textcore::NEWLINE.into());
            words_into(&mut w, GEN_CUE);
            w.push(textcore::NEWLINE.into());
            w.extend(["{", "\"", GEN_KEYS[0], "\"", ":", "\""].map(String::from));
            words_into(&mut w, &schema.name);
            w.extend(["\"", ",", "\"", GEN_KEYS[1], "\"", ":", "{"].map(String::from));
            for (ri, role) in schema.roles.iter().enumerate() {
                if ri > 0 {
                    w.push(",".into());
                }
                w.push("\"".into());
                words_into(&mut w, role);
                w.extend(["\"", ":", "\"", "\""].map(String::from));
            }
            w.extend(["}", "}", textcore::NEWLINE].map(String::from));
            words_into(&mut w, EXTRACT_CUE);
            w.push(textcore::NEWLINE.into());
            template(&mut w, &schema.name, schema, sample.gold_fills.get(&schema.name));
            w.push(textcore::NEWLINE.into());
        }
    }
    w.join(" ")
}

/// Text lines the vocabulary is built from: prompt scaffolding, schema
/// pool text, training demos, and full lexicon coverage so held-out value
/// words are never `<unk>`.
pub fn vocab_corpus(pool: &SchemaPool, train: &[Sample]) -> Vec<String> {
    let mut lines = vec![
        PROMPT_PREFIX.to_string(),
        SELECT_CUE.to_string(),
        GEN_CUE.to_string(),
        EXTRACT_CUE.to_string(),
        format!("{NONE_WORD} {} {}", GEN_KEYS[0], GEN_KEYS[1]),
    ];
    for s in &pool.schemas {
        lines.push(s.name_words().join(" "));
        lines.push(s.description.clone());
        lines.push(s.roles.join(" "));
    }
    for sample in train {
        lines.push(render_demo(sample, pool));
    }
    lines.extend(crate::datagen::lexicon_coverage_lines());
    lines
}

/// Pretraining sequences: `<bos>` + demo with every next-token position
/// supervised (plain language-model objective).
///
/// Multi-schema demos are rendered once per rotation of their selection
/// list. Retrieval ranks schemas by the distribution at the single
/// selection-cue position, so that distribution must cover every gold
/// schema, and decoding must stay on-distribution no matter which gold
/// the argmax picks first; seeing every rotation gives both.
pub fn pretrain_sequences(samples: &[Sample], pool: &SchemaPool, vocab: &Vocabulary) -> Vec<SupervisedSeq> {
    let mut seqs = Vec::new();
    for sample in samples {
        let rotations = sample.gold_schemas.len().max(1);
        for rot in 0..rotations {
            let rendered = if rot == 0 {
                render_demo(sample, pool)
            } else {
                let mut rotated = sample.clone();
                rotated.gold_schemas.rotate_left(rot);
                render_demo(&rotated, pool)
            };
            let mut ids = vec![vocab.id(textcore::BOS).expect("bos")];
            ids.extend(vocab.encode(&rendered));
            let targets = (0..ids.len() - 1).map(|p| (p, ids[p + 1])).collect();
            seqs.push(SupervisedSeq { ids, targets });
        }
    }
    seqs
}

/// Mean NLL over all supervised positions (forward only).
pub fn mean_nll(params: &ModelParams<f32>, seqs: &[SupervisedSeq]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for seq in seqs {
        let positions: Vec<usize> = seq.targets.iter().map(|&(p, _)| p).collect();
        let fwd = forward(params, &seq.ids, Some(&positions))?;
        for &(pos, target) in &seq.targets {
            total -= crate::model::log_softmax_at(fwd.logits.row(pos), target) as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Err(SptError::EmptyDataset("no supervised positions".into()));
    }
    Ok(total / n as f64)
}

/// Perplexity of an add-one-smoothed unigram model estimated on the train
/// targets and scored on the validation targets; the floor pretraining must
/// beat.
pub fn unigram_perplexity(train: &[SupervisedSeq], val: &[SupervisedSeq], vocab_size: usize) -> f64 {
    let mut counts = vec![0u64; vocab_size];
    let mut total = 0u64;
    for seq in train {
        for &(_, t) in &seq.targets {
            counts[t] += 1;
            total += 1;
        }
    }
    let denom = (total + vocab_size as u64) as f64;
    let mut nll = 0.0;
    let mut n = 0usize;
    for seq in val {
        for &(_, t) in &seq.targets {
            nll -= (((counts[t] + 1) as f64) / denom).ln();
            n += 1;
        }
    }
    (nll / n.max(1) as f64).exp()
}

fn train_epochs(
    params: &mut ModelParams<f32>,
    seqs: &[SupervisedSeq],
    mask: TrainMask,
    epochs: usize,
    lr: f64,
    optimizer: Optimizer,
    seed: u64,
    phase_label: &str,
    mut per_epoch: impl FnMut(&ModelParams<f32>, usize, f64) -> Result<MetricRecord>,
) -> Result<Vec<MetricRecord>> {
    let mut records = Vec::new();
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut rng = SplitMix64::new(seed).derive(0x7A17);
    let mut velocity = match optimizer {
        Optimizer::Sgd { momentum } if momentum != 0.0 => Some(params.zeros_like()),
        _ => None,
    };
    let mut adam = matches!(optimizer, Optimizer::Adam).then(|| AdamState::new(params));
    for epoch in 1..=epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut position_count = 0usize;
        for chunk in order.chunks(DEFAULT_BATCH_SIZE) {
            let batch: Vec<SupervisedSeq> = chunk.iter().map(|&i| seqs[i].clone()).collect();
            let (loss, grads) = loss_and_grads(params, &batch, mask).map_err(|e| match e {
                SptError::Numerical(msg) => {
                    SptError::Numerical(format!("{phase_label} epoch {epoch}: {msg}"))
                }
                other => other,
            })?;
            let n: usize = batch.iter().map(|s| s.targets.len()).sum();
            loss_sum += loss * n as f64;
            position_count += n;
            match (&optimizer, velocity.as_mut(), adam.as_mut()) {
                (Optimizer::Sgd { momentum }, Some(v), _) => {
                    v.scale_add_assign(&grads, *momentum as f32)?;
                    sgd_step(params, v, lr, mask)?;
                }
                (_, _, Some(state)) => adam_step(params, &grads, state, lr, mask)?,
                _ => sgd_step(params, &grads, lr, mask)?,
            }
        }
        let mean_loss = loss_sum / position_count.max(1) as f64;
        records.push(per_epoch(params, epoch, mean_loss)?);
    }
    Ok(records)
}

/// Base-LM pretraining on the demo corpus. Every 10th sequence is held out
/// for validation perplexity; extension rows are untouched (base-only
/// mask). Record at epoch 0 is the untrained loss.
pub fn pretrain(
    params: &mut ModelParams<f32>,
    corpus: &[SupervisedSeq],
    epochs: usize,
    lr: f64,
    optimizer: Optimizer,
    seed: u64,
) -> Result<Vec<MetricRecord>> {
    if corpus.is_empty() {
        return Err(SptError::EmptyDataset("pretrain".into()));
    }
    let (train, val): (Vec<_>, Vec<_>) = corpus
        .iter()
        .enumerate()
        .map(|(i, s)| (i, s.clone()))
        .partition(|(i, _)| i % 10 != 9);
    let train: Vec<SupervisedSeq> = train.into_iter().map(|(_, s)| s).collect();
    let val: Vec<SupervisedSeq> = val.into_iter().map(|(_, s)| s).collect();
    let mut records = vec![MetricRecord {
        phase: "pretrain".into(),
        epoch: 0,
        loss: mean_nll(params, &train)?,
        metrics: BTreeMap::new(),
    }];
    let val_for_metric = val.clone();
    records.extend(train_epochs(
        params,
        &train,
        TrainMask::BASE_ONLY,
        epochs,
        lr,
        optimizer,
        seed,
        "pretrain",
        |p, epoch, loss| {
            let mut metrics = BTreeMap::new();
            if !val_for_metric.is_empty() {
                metrics.insert("val_perplexity".to_string(), mean_nll(p, &val_for_metric)?.exp());
            }
            Ok(MetricRecord {
                phase: "pretrain".into(),
                epoch,
                loss,
                metrics,
            })
        },
    )?);
    Ok(records)
}

/// Accuracy over supervised positions whose target satisfies `select`,
/// by argmax restricted to `allowed` — mirroring the decoder's selection
/// mask (schema tokens and <Rej>), which is what inference actually uses.
fn target_accuracy(
    params: &ModelParams<f32>,
    seqs: &[SupervisedSeq],
    allowed: &[TokenId],
    select: impl Fn(TokenId) -> bool,
) -> Result<Option<f64>> {
    let mut hits = 0usize;
    let mut n = 0usize;
    for seq in seqs {
        // positions may carry set-valued targets; a position counts as a
        // hit when the masked argmax lands anywhere in its target set
        let mut by_pos: BTreeMap<usize, Vec<TokenId>> = BTreeMap::new();
        for &(p, t) in seq.targets.iter().filter(|&&(_, t)| select(t)) {
            by_pos.entry(p).or_default().push(t);
        }
        if by_pos.is_empty() {
            continue;
        }
        let positions: Vec<usize> = by_pos.keys().copied().collect();
        let fwd = forward(params, &seq.ids, Some(&positions))?;
        for (&pos, targets) in &by_pos {
            let row = fwd.logits.row(pos);
            let argmax = allowed
                .iter()
                .copied()
                .max_by(|&a, &b| row[a].partial_cmp(&row[b]).expect("finite logits"))
                .expect("nonempty mask");
            if targets.contains(&argmax) {
                hits += 1;
            }
            n += 1;
        }
    }
    Ok((n > 0).then(|| hits as f64 / n as f64))
}

/// Runs one phase of the schedule. Filters the dataset to the phase's
/// sample kinds, trains only the phase's parameter groups, and reports the
/// phase-relevant accuracy per epoch.
pub fn run_phase(
    params: &mut ModelParams<f32>,
    plan: &TrainPlan,
    samples: &[Sample],
    pool: &SchemaPool,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<Vec<MetricRecord>> {
    let filtered: Vec<&Sample> = samples.iter().filter(|s| plan.admits(s.kind)).collect();
    if filtered.is_empty() {
        return Err(SptError::EmptyDataset(plan.phase.label().into()));
    }
    let seqs: Vec<SupervisedSeq> = filtered
        .iter()
        .map(|s| build_training_sequence(s, pool, vocab))
        .collect::<Result<_>>()?;
    let metric_cap = 200.min(seqs.len());
    let n_schemas = vocab.n_schemas();
    let base_len = vocab.base_len();
    let rej = vocab.rej_id();
    let label = plan.phase.label().to_string();
    let phase = plan.phase;
    train_epochs(
        params,
        &seqs,
        plan.mask(),
        plan.epochs,
        plan.lr,
        plan.optimizer,
        seed ^ plan.phase.label().len() as u64,
        &label,
        |p, epoch, loss| {
            let probe = &seqs[..metric_cap];
            // the decoder's first-position selection mask
            let mut mask: Vec<TokenId> = (base_len..base_len + n_schemas).collect();
            mask.push(rej);
            let mut metrics = BTreeMap::new();
            if phase != Phase::P2 {
                if let Some(acc) = target_accuracy(p, probe, &mask, |t| {
                    t >= base_len && t < base_len + n_schemas
                })? {
                    metrics.insert("schema_token_accuracy".to_string(), acc);
                }
            }
            if phase != Phase::P1 {
                if let Some(acc) = target_accuracy(p, probe, &mask, |t| t == rej)? {
                    metrics.insert("rejection_accuracy".to_string(), acc);
                }
            }
            Ok(MetricRecord {
                phase: label.clone(),
                epoch,
                loss,
                metrics,
            })
        },
    )
}

/// Caps schema-free samples at `ratio` of the training set, dropping a
/// deterministic excess. A no-op when the set is already at or under the
/// cap.
pub fn downsample_schema_free(samples: &[Sample], ratio: f64, seed: u64) -> Vec<Sample> {
    let free_indices: Vec<usize> = samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.kind == SampleKind::SchemaFree)
        .map(|(i, _)| i)
        .collect();
    let others = samples.len() - free_indices.len();
    // keep / (others + keep) <= ratio  =>  keep <= ratio * others / (1 - ratio)
    let keep = if ratio >= 1.0 {
        free_indices.len()
    } else {
        (((ratio * others as f64 / (1.0 - ratio)) + 1e-9).floor() as usize).min(free_indices.len())
    };
    let mut order = free_indices.clone();
    let mut rng = SplitMix64::new(seed).derive(0xD05A);
    rng.shuffle(&mut order);
    let kept: std::collections::BTreeSet<usize> = order.into_iter().take(keep).collect();
    samples
        .iter()
        .enumerate()
        .filter(|(i, s)| s.kind != SampleKind::SchemaFree || kept.contains(i))
        .map(|(_, s)| s.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, GenSpec};
    use crate::model::ModelConfig;

    fn small_world() -> (SchemaPool, Vec<Sample>, Vec<Sample>, Vocabulary) {
        let spec = GenSpec {
            n_schemas: 6,
            n_train: 40,
            n_test: 12,
            ..GenSpec::default()
        };
        let (pool, train, test) = generate(&spec).unwrap();
        let vocab = Vocabulary::build(&vocab_corpus(&pool, &train), &pool.names()).unwrap();
        (pool, train, test, vocab)
    }

    fn tiny_params(vocab: &Vocabulary) -> ModelParams<f32> {
        let cfg = ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 256,
            tie_embeddings: false,
        };
        ModelParams::init(cfg, vocab.base_len(), vocab.ext_len(), 11).unwrap()
    }

    #[test]
    fn schema_free_sample_has_single_rej_target() {
        let (pool, train, _, vocab) = small_world();
        let s = train
            .iter()
            .find(|s| s.kind == SampleKind::SchemaFree)
            .unwrap();
        let seq = build_training_sequence(s, &pool, &vocab).unwrap();
        let sel: Vec<_> = seq
            .targets
            .iter()
            .filter(|&&(_, t)| !vocab.is_base(t))
            .collect();
        assert_eq!(sel.len(), 1);
        assert_eq!(sel[0].1, vocab.rej_id());
    }

    #[test]
    fn closed_sample_selection_targets_match_gold_order() {
        let (pool, train, _, vocab) = small_world();
        let s = train
            .iter()
            .find(|s| s.kind == SampleKind::Closed && s.gold_schemas.len() == 2)
            .unwrap();
        let seq = build_training_sequence(s, &pool, &vocab).unwrap();
        // set-valued selection supervision: grouped by position, the
        // target sets are the not-yet-emitted golds, in gold order
        let mut by_pos: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &(p, t) in seq.targets.iter().filter(|&&(_, t)| !vocab.is_base(t)) {
            by_pos.entry(p).or_default().push(t);
        }
        let gold_ids: Vec<usize> = s
            .gold_schemas
            .iter()
            .map(|n| vocab.schema_token_id(pool.index_of(n).unwrap()))
            .collect();
        let sets: Vec<Vec<usize>> = by_pos.values().cloned().collect();
        assert_eq!(sets.len(), gold_ids.len());
        for (i, set) in sets.iter().enumerate() {
            assert_eq!(set, &gold_ids[i..].to_vec(), "position {i}");
        }
        // two selection decisions separated by the list separator
        let comma = vocab.id(",").unwrap();
        let seps: Vec<usize> = seq
            .targets
            .iter()
            .filter(|&&(_, t)| t == comma)
            .map(|&(_, t)| t)
            .collect();
        assert_eq!(seps.len(), 1);
    }

    #[test]
    fn unknown_gold_schema_is_label_mismatch() {
        let (pool, train, _, vocab) = small_world();
        let mut s = train
            .iter()
            .find(|s| s.kind == SampleKind::Closed)
            .unwrap()
            .clone();
        s.gold_schemas[0] = "phantom-event".into();
        assert!(matches!(
            build_training_sequence(&s, &pool, &vocab),
            Err(SptError::LabelMismatch(_))
        ));
    }

    #[test]
    fn open_sample_supervises_gen_span_and_uses_soft_prompt() {
        let (pool, train, _, vocab) = small_world();
        let s = train.iter().find(|s| s.kind == SampleKind::Open).unwrap();
        let seq = build_training_sequence(s, &pool, &vocab).unwrap();
        // <Gen> appears as an input token (soft prompt); <Rej> never does
        assert!(seq.ids.contains(&vocab.gen_id()));
        assert!(!seq.ids.contains(&vocab.rej_id()));
        // role words of the gold open schema are supervised targets
        let gold = s.gold_open_schema.as_ref().unwrap();
        for role in &gold.roles {
            let rid = vocab.id(role).unwrap();
            assert!(seq.targets.iter().any(|&(_, t)| t == rid), "role {role}");
        }
    }

    #[test]
    fn demo_tokens_cover_training_inputs() {
        // pretraining text and training sequences draw from the same
        // vocabulary: no <unk> anywhere
        let (pool, train, test, vocab) = small_world();
        let unk = vocab.unk_id();
        for s in train.iter().chain(test.iter()) {
            assert!(!vocab.encode(&render_demo(s, &pool)).contains(&unk));
            let seq = build_training_sequence(s, &pool, &vocab).unwrap();
            assert!(!seq.ids.contains(&unk), "query: {}", s.query);
        }
    }

    #[test]
    fn pretrain_epoch_zero_records_initial_loss() {
        let (pool, train, _, vocab) = small_world();
        let mut params = tiny_params(&vocab);
        let corpus = pretrain_sequences(&train[..20], &pool, &vocab);
        let ext_before = params.ext.clone();
        let records = pretrain(&mut params, &corpus, 2, 1e-2, Optimizer::Adam, 9).unwrap();
        assert_eq!(records[0].epoch, 0);
        assert!(records[2].loss < records[0].loss, "loss should drop");
        assert!(records[1].metrics.contains_key("val_perplexity"));
        // extension rows untouched by pretraining
        assert_eq!(ext_before, params.ext);
    }

    #[test]
    fn phase_filters_and_freezing() {
        let (pool, train, _, vocab) = small_world();
        let mut params = tiny_params(&vocab);
        let p1 = TrainPlan {
            phase: Phase::P1,
            epochs: 1,
            lr: 5e-4,
            optimizer: Optimizer::Adam,
        };
        let embed_before = params.embed.clone();
        let helpers_before: Vec<f32> = params.ext.row(vocab.n_schemas()).to_vec();
        run_phase(&mut params, &p1, &train, &pool, &vocab, 3).unwrap();
        assert_eq!(embed_before, params.embed, "base frozen in P1");
        assert_eq!(
            helpers_before,
            params.ext.row(vocab.n_schemas()),
            "<Rej> frozen in P1"
        );

        let ws_before: Vec<f32> = params.ext.row(0).to_vec();
        let p2 = TrainPlan {
            phase: Phase::P2,
            epochs: 1,
            lr: 5e-4,
            optimizer: Optimizer::Adam,
        };
        run_phase(&mut params, &p2, &train, &pool, &vocab, 3).unwrap();
        let ws_after: Vec<f32> = params.ext.row(0).to_vec();
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&ws_before), bits(&ws_after), "W_S bit-frozen in P2");
    }

    #[test]
    fn empty_filter_is_empty_dataset() {
        let (pool, train, _, vocab) = small_world();
        let mut params = tiny_params(&vocab);
        let closed_only: Vec<Sample> = train
            .iter()
            .filter(|s| s.kind == SampleKind::Closed)
            .cloned()
            .collect();
        let p2 = TrainPlan {
            phase: Phase::P2,
            epochs: 1,
            lr: 5e-4,
            optimizer: Optimizer::Adam,
        };
        assert!(matches!(
            run_phase(&mut params, &p2, &closed_only, &pool, &vocab, 3),
            Err(SptError::EmptyDataset(_))
        ));
    }

    #[test]
    fn downsample_caps_schema_free_fraction() {
        let (_, train, _, _) = small_world();
        let out = downsample_schema_free(&train, 0.10, 5);
        let free = out.iter().filter(|s| s.kind == SampleKind::SchemaFree).count();
        assert!(free as f64 / out.len() as f64 <= 0.10 + 1e-9);
        // default ratio matches the generator: no-op
        let same = downsample_schema_free(&train, 0.30, 5);
        assert_eq!(same.len(), train.len());
    }

    #[test]
    fn zero_epochs_leaves_params_unchanged() {
        let (pool, train, _, vocab) = small_world();
        let mut params = tiny_params(&vocab);
        let before = params.clone();
        let corpus = pretrain_sequences(&train[..10], &pool, &vocab);
        pretrain(&mut params, &corpus, 0, 0.5, Optimizer::Adam, 9).unwrap();
        assert_eq!(before, params);
    }
}
