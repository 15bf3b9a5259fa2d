//! Training loop and the end-user commands built on it.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{ensure_compatible, AugmentConfig, RunConfig, SynthKind};
use crate::error::{Result, TiltError};
use crate::layout::synth::{font_cue_document, layout_qa_document, relation_qa_document, FormSpec};
use crate::layout::{load_dataset, Document, TaskInstance};
use crate::metrics::{EvalRecord, EvalReport, Metric};
use crate::model::{Tilt, TiltConfig};
use crate::numerics::{adamw_step, clip_grad_norm, OptimizerState, Tensor};
use crate::objectives::{case_augment, corrupt_with_image, select_spans, span_corrupt, to_seq2seq, CaseMode, Seq2SeqExample};
use crate::spatial_bias::spatial_scale_augment;
use crate::vision::affine_augment;

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Indexed training examples; `rng` is the example's own stream.
pub trait ExampleSource: Sync {
    fn len(&self) -> usize;
    fn example(&self, index: usize, rng: &mut ChaCha8Rng) -> Result<Seq2SeqExample>;
}

fn geometric_augment(doc: &Document, aug: &AugmentConfig, rng: &mut ChaCha8Rng) -> Document {
    let mut doc = if aug.affine {
        affine_augment(doc, &aug.affine_bounds, rng).0
    } else {
        doc.clone()
    };
    if aug.spatial && rng.random_bool(aug.spatial_p) {
        doc = spatial_scale_augment(&doc, rng);
    }
    doc
}

fn case_modes(aug: &AugmentConfig) -> &'static [CaseMode] {
    if aug.case {
        &CaseMode::ALL
    } else {
        &CaseMode::ALL[..1]
    }
}

/// Question/answer pairs from document annotations, with case copies.
pub struct SupervisedSource {
    docs: Vec<Document>,
    items: Vec<(usize, usize, CaseMode)>,
    augment: AugmentConfig,
}

impl SupervisedSource {
    pub fn new(docs: Vec<Document>, augment: AugmentConfig) -> Result<Self> {
        let mut items = Vec::new();
        for (d, doc) in docs.iter().enumerate() {
            for a in 0..doc.annotations.len() {
                for &mode in case_modes(&augment) {
                    items.push((d, a, mode));
                }
            }
        }
        if items.is_empty() {
            return Err(TiltError::Validation("no annotated examples to train on".into()));
        }
        Ok(SupervisedSource { docs, items, augment })
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }
}

impl ExampleSource for SupervisedSource {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn example(&self, index: usize, rng: &mut ChaCha8Rng) -> Result<Seq2SeqExample> {
        let (d, a, mode) = self.items[index];
        let doc = geometric_augment(&self.docs[d], &self.augment, rng);
        let ex = to_seq2seq(&doc, &self.docs[d].annotations[a])?;
        Ok(case_augment(&ex, mode))
    }
}

/// Freshly generated synthetic pages, one question per index.
pub struct SynthSource {
    pub kind: SynthKind,
    pub first_seed: u64,
    pub pages: usize,
    pub items: usize,
    pub augment: AugmentConfig,
}

impl SynthSource {
    fn questions_per_page(&self) -> usize {
        match self.kind {
            SynthKind::LayoutQa => self.items,
            SynthKind::RelationQa | SynthKind::FontCue => 1,
        }
    }
}

impl ExampleSource for SynthSource {
    fn len(&self) -> usize {
        self.pages * self.questions_per_page() * case_modes(&self.augment).len()
    }

    fn example(&self, index: usize, rng: &mut ChaCha8Rng) -> Result<Seq2SeqExample> {
        let modes = case_modes(&self.augment);
        let (rest, mode) = (index / modes.len(), modes[index % modes.len()]);
        let q = self.questions_per_page();
        let doc = synth_docs(self.kind, self.first_seed + (rest / q) as u64, 1, self.items)?.remove(0);
        let ex = to_seq2seq(&geometric_augment(&doc, &self.augment, rng), &doc.annotations[rest % q])?;
        Ok(case_augment(&ex, mode))
    }
}

/// Salient-span corruption over an unlabelled corpus.
pub struct PretrainSource {
    docs: Vec<Document>,
    items: Vec<(usize, CaseMode)>,
    augment: AugmentConfig,
}

impl PretrainSource {
    pub fn new(docs: Vec<Document>, augment: AugmentConfig) -> Result<Self> {
        let docs: Vec<Document> = docs.into_iter().filter(|d| d.word_count() > 0).collect();
        if docs.is_empty() {
            return Err(TiltError::Validation("pretraining corpus has no documents with text".into()));
        }
        let items = (0..docs.len())
            .flat_map(|d| case_modes(&augment).iter().map(move |&m| (d, m)))
            .collect();
        Ok(PretrainSource { docs, items, augment })
    }
}

impl ExampleSource for PretrainSource {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn example(&self, index: usize, rng: &mut ChaCha8Rng) -> Result<Seq2SeqExample> {
        let (d, mode) = self.items[index];
        let doc = geometric_augment(&self.docs[d], &self.augment, rng);
        let spans = select_spans(&doc, rng);
        let ex = if self.augment.image_mask {
            corrupt_with_image(&doc, &spans, self.augment.image_mask_p, rng)?
        } else {
            span_corrupt(&doc, &spans)?
        };
        Ok(case_augment(&ex, mode))
    }
}

pub struct TrainOutcome {
    pub model: Tilt<f32>,
    pub optimizer: OptimizerState<f32>,
    /// Mean batch loss per executed step.
    pub losses: Vec<f64>,
    /// Last value returned by the monitor, if it ran.
    pub monitor: Option<f64>,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new(self.model.clone(), Some(self.optimizer.clone()))
    }
}

/// Called every `eval_every` steps when `early_stop_em` is set; training stops
/// once it returns at least that value.
pub type Monitor<'m> = &'m (dyn Fn(&Tilt<f32>) -> Result<f64> + Sync);

/// Runs `cfg.steps` AdamW steps of mean-over-batch loss.
pub fn train(
    cfg: &RunConfig,
    mut model: Tilt<f32>,
    source: &dyn ExampleSource,
    log: &mut dyn Write,
    monitor: Option<Monitor<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if source.len() == 0 {
        return Err(TiltError::Validation("empty training set".into()));
    }
    let mut optimizer = OptimizerState::new(cfg.optimizer, &model.params);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut drawn = 0u64;
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    let mut last_monitor = None;

    for step in 0..cfg.steps {
        // each example draws augmentation and dropout from its own stream
        let mut batch = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            if cursor == order.len() {
                order = (0..source.len()).collect();
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push((order[cursor], drawn));
            cursor += 1;
            drawn += 1;
        }
        let results: Vec<Result<(f32, Vec<Tensor<f32>>)>> = batch
            .par_iter()
            .map(|&(index, stream)| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(stream);
                let ex = source.example(index, &mut rng)?;
                let prep = model.prepare(&ex, true)?;
                let dropout = (model.config.dropout > 0.0).then_some(&mut rng);
                model.loss_and_grads(&prep, dropout)
            })
            .collect();

        let mut total = 0.0f64;
        let mut grads: Option<Vec<Tensor<f32>>> = None;
        for r in results {
            let (loss, g) = r?;
            total += f64::from(loss);
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
            }
        }
        let mut grads = grads.expect("batch is non-empty");
        let inv = 1.0 / cfg.batch as f32;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= inv));
        if let Some(max) = cfg.grad_clip {
            clip_grad_norm(&mut grads, max);
        }
        let lr = cfg.schedule.lr(step, cfg.steps, cfg.optimizer.lr)?;
        adamw_step(&mut model.params, &grads, &mut optimizer, lr)?;

        let loss = total / cfg.batch as f64;
        if !loss.is_finite() {
            return Err(TiltError::Validation(format!("loss diverged at step {}", step + 1)));
        }
        losses.push(loss);
        let record = StepRecord { step: step + 1, loss, lr };
        writeln!(log, "{}", serde_json::to_string(&record)?)?;

        if let (Some(target), Some(m)) = (cfg.early_stop_em, monitor) {
            if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps {
                let value = m(&model)?;
                last_monitor = Some(value);
                if value >= target {
                    break;
                }
            }
        }
    }
    Ok(TrainOutcome {
        model,
        optimizer,
        losses,
        monitor: last_monitor,
    })
}

/// Every (document, annotation) pair as an un-augmented example.
pub fn task_examples(docs: &[Document]) -> Result<Vec<(Seq2SeqExample, TaskInstance)>> {
    let mut out = Vec::new();
    for doc in docs {
        for ann in &doc.annotations {
            out.push((to_seq2seq(doc, ann)?, ann.clone()));
        }
    }
    Ok(out)
}

/// Greedy predictions for every annotated prompt, in dataset order.
pub fn predict(model: &Tilt<f32>, docs: &[Document], max_len: usize) -> Result<Vec<EvalRecord>> {
    let examples = task_examples(docs)?;
    examples
        .par_iter()
        .map(|(ex, ann)| {
            Ok(EvalRecord {
                id: ex.id.clone(),
                prompt: ann.prompt.clone(),
                prediction: model.generate(ex, max_len)?,
                golds: ann.answers.clone(),
                score: 0.0,
            })
        })
        .collect()
}

pub fn evaluate(model: &Tilt<f32>, docs: &[Document], metric: Metric, max_len: usize) -> Result<EvalReport> {
    let mut records = predict(model, docs, max_len)?;
    if metric == Metric::Anls {
        // unanswerable questions are scored against the literal "None"
        for r in &mut records {
            if r.golds.is_empty() {
                r.golds.push(crate::objectives::NONE_ANSWER.to_string());
            }
        }
    }
    EvalReport::build(metric, records)
}

fn read_docs(path: Option<&Path>, what: &str) -> Result<Vec<Document>> {
    let path = path.ok_or_else(|| TiltError::Config(format!("no {what} dataset path configured")))?;
    load_dataset(path)?.collect()
}

fn init_model(cfg: &RunConfig) -> Result<Tilt<f32>> {
    match &cfg.data.init {
        Some(path) => load_compatible(path, &cfg.model),
        None => Tilt::new(cfg.model.clone(), cfg.seed),
    }
}

/// Loads a checkpoint whose configuration matches `expected`.
pub fn load_compatible(path: &Path, expected: &TiltConfig) -> Result<Tilt<f32>> {
    let ck = Checkpoint::load(path)?;
    ensure_compatible(expected, &ck.model.config)?;
    let mut model = ck.into_model();
    model.config = expected.clone();
    Ok(model)
}

pub fn cmd_pretrain(cfg: &RunConfig, log: &mut dyn Write) -> Result<TrainOutcome> {
    let docs = read_docs(cfg.data.train.as_deref(), "training")?;
    if docs.is_empty() {
        return Err(TiltError::Validation("pretraining corpus is empty".into()));
    }
    let source = PretrainSource::new(docs, cfg.augment.clone())?;
    train(cfg, init_model(cfg)?, &source, log, None)
}

pub fn train_exact_match(model: &Tilt<f32>, docs: &[Document], max_len: usize) -> Result<f64> {
    Ok(evaluate(model, docs, Metric::Accuracy, max_len)?.value)
}

pub fn finetune_on(cfg: &RunConfig, model: Tilt<f32>, docs: Vec<Document>, log: &mut dyn Write) -> Result<TrainOutcome> {
    let source = SupervisedSource::new(docs, cfg.augment.clone())?;
    let max_len = cfg.max_answer_len;
    let monitor = |m: &Tilt<f32>| train_exact_match(m, source.docs(), max_len);
    train(cfg, model, &source, log, Some(&monitor))
}

pub fn cmd_finetune(cfg: &RunConfig, log: &mut dyn Write) -> Result<TrainOutcome> {
    let docs = read_docs(cfg.data.train.as_deref(), "training")?;
    finetune_on(cfg, init_model(cfg)?, docs, log)
}

fn eval_model(cfg: &RunConfig) -> Result<Tilt<f32>> {
    let path = cfg
        .data
        .init
        .as_deref()
        .ok_or_else(|| TiltError::Config("no checkpoint configured (data.init)".into()))?;
    load_compatible(path, &cfg.model)
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport> {
    let docs = read_docs(cfg.data.eval.as_deref(), "evaluation")?;
    evaluate(&eval_model(cfg)?, &docs, cfg.metric, cfg.max_answer_len)
}

pub fn cmd_predict(cfg: &RunConfig) -> Result<Vec<EvalRecord>> {
    let docs = read_docs(cfg.data.eval.as_deref(), "evaluation")?;
    predict(&eval_model(cfg)?, &docs, cfg.max_answer_len)
}

pub fn synth_docs(kind: SynthKind, first_seed: u64, count: usize, items: usize) -> Result<Vec<Document>> {
    let spec = FormSpec::default();
    (0..count as u64)
        .map(|i| match kind {
            SynthKind::LayoutQa => layout_qa_document(first_seed + i, items, &spec),
            SynthKind::RelationQa => relation_qa_document(first_seed + i, items, &spec),
            SynthKind::FontCue => font_cue_document(first_seed + i, items, &spec),
        })
        .collect()
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<Vec<Document>> {
    let s = &cfg.synth;
    synth_docs(s.kind, s.first_seed, s.docs, s.items)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoSpatialBias,
    NoVision,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoSpatialBias, Variant::NoVision];

    pub fn apply(self, model: &TiltConfig) -> TiltConfig {
        let mut m = model.clone();
        match self {
            Variant::Full => {}
            Variant::NoSpatialBias => m.disable_spatial_bias = true,
            Variant::NoVision => m.disable_vision = true,
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub task: SynthKind,
    pub variant: Variant,
    pub seeds: Vec<u64>,
    /// Held-out exact match per seed.
    pub scores: Vec<f64>,
    pub mean: f64,
    pub half_range: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn get(&self, task: SynthKind, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.task == task && r.variant == variant)
    }
}

/// Mean and half the spread of `xs`.
pub fn mean_half_range(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, (hi - lo) / 2.0)
}

/// Trains one run per (task, variant, seed) and scores held-out exact match.
/// Training pages are generated on demand; evaluation pages come from a
/// disjoint range of generator seeds.
pub fn cmd_ablate(cfg: &RunConfig, log: &mut dyn Write) -> Result<AblationReport> {
    let a = &cfg.ablate;
    if a.seeds.is_empty() {
        return Err(TiltError::Config("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    let tasks = [
        (SynthKind::RelationQa, a.relation_items, a.relation_steps),
        (SynthKind::FontCue, a.font_items, a.font_steps),
    ];
    for (kind, items, steps) in tasks {
        let eval_docs = synth_docs(kind, cfg.synth.first_seed + 1_000_000, a.eval_docs, items)?;
        for variant in Variant::ALL {
            let mut scores = Vec::new();
            for &seed in &a.seeds {
                let mut run = RunConfig {
                    model: variant.apply(&cfg.model),
                    seed,
                    steps,
                    schedule: a.schedule,
                    early_stop_em: None,
                    ..cfg.clone()
                };
                run.optimizer.lr = a.lr;
                run.validate()?;
                let model = Tilt::new(run.model.clone(), seed)?;
                let source = SynthSource {
                    kind,
                    first_seed: cfg.synth.first_seed,
                    pages: a.train_docs,
                    items,
                    augment: run.augment.clone(),
                };
                let out = train(&run, model, &source, &mut std::io::sink(), None)?;
                let score = train_exact_match(&out.model, &eval_docs, run.max_answer_len)?;
                writeln!(
                    log,
                    "{}",
                    serde_json::json!({"task": kind, "variant": variant, "seed": seed, "exact_match": score})
                )?;
                scores.push(score);
            }
            let (mean, half_range) = mean_half_range(&scores);
            rows.push(AblationRow {
                task: kind,
                variant,
                seeds: a.seeds.clone(),
                scores,
                mean,
                half_range,
            });
        }
    }
    Ok(AblationReport { rows })
}
