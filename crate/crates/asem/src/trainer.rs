//! Training orchestration: chunk-sampling epoch plans, cross-entropy
//! pretraining of E and C, and the three-step adversarial update.
//!
//! Per mini-batch the adversarial phase runs exactly three updates:
//! (1) the task loss over E and C, (2) the discriminator objective over D,
//! (3) the generator objective over E with D frozen — so E is updated twice.
//! Fresh embeddings are recomputed at every stage. Stages 2 and 3 encode
//! source and target as one concatenated batch so train-mode BatchNorm sees
//! both domains; BN running statistics are blended only during task-loss
//! forwards (pretraining and stage 1).

use crate::error::{Error, Result};
use crate::eval;
use crate::graph::Graph;
use crate::losses::{
    am_softmax_loss, aux_classifier_loss, discriminator_loss, generator_loss, AmSoftmaxConfig,
    GanVariant,
};
use crate::network::{classify, discriminate, encode, Mode, ModelState, SpeakerBatch};
use crate::optim::{OptimKind, Optimizer};
use crate::rng;
use crate::synthdata::{Corpus, Domain, Recording};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    /// Pretraining learning rate (RMSprop).
    pub pretrain_lr: f64,
    /// Classifier learning rate in the adversarial phase (RMSprop).
    pub classifier_lr: f64,
    /// Learning rate for E and D in the adversarial phase (SGD).
    pub adv_lr: f64,
    /// Optional two-time-scale overrides: discriminator (stage 2) and
    /// generator (stage 3) rates. Default to `adv_lr`.
    pub disc_lr: Option<f64>,
    pub gen_lr: Option<f64>,
    /// Optimizer for the GAN-phase E and D updates. The paper's setting is
    /// plain SGD; rmsprop converges the game at small scales.
    pub adv_optimizer: OptimKind,
    pub batch_size: usize,
    pub chunk_frames_min: usize,
    pub chunk_frames_max: usize,
    /// Chunks drawn per source recording per epoch.
    pub samples_per_recording: usize,
    pub pretrain_epochs: usize,
    pub max_epochs: usize,
    /// Adversarial epochs without validation improvement before stopping.
    pub patience: usize,
    /// Margin used during pretraining (0 = plain cosine cross-entropy).
    pub pretrain_margin: f64,
    pub seed: u64,
    pub variant: GanVariant,
    pub am: AmSoftmaxConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            pretrain_lr: 0.001,
            classifier_lr: 0.003,
            adv_lr: 0.001,
            disc_lr: None,
            gen_lr: None,
            adv_optimizer: OptimKind::Sgd,
            batch_size: 64,
            chunk_frames_min: 30,
            chunk_frames_max: 80,
            samples_per_recording: 10,
            pretrain_epochs: 20,
            max_epochs: 50,
            patience: 5,
            pretrain_margin: 0.0,
            seed: 7,
            variant: GanVariant::default(),
            am: AmSoftmaxConfig::default(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_frames_min == 0 || self.chunk_frames_min > self.chunk_frames_max {
            return Err(Error::invalid(
                "trainer_config",
                "need 0 < chunk_frames_min <= chunk_frames_max",
            ));
        }
        if self.batch_size == 0 || self.samples_per_recording == 0 {
            return Err(Error::invalid(
                "trainer_config",
                "batch_size and samples_per_recording must be positive",
            ));
        }
        self.am.validate()?;
        if !(0.0..1.0).contains(&self.pretrain_margin) {
            return Err(Error::invalid("trainer_config", "pretrain_margin must be in [0, 1)"));
        }
        Ok(())
    }
}

/// One chunk of one recording.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkSpec {
    pub recording: String,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub chunk_len: usize,
    pub source: Vec<ChunkSpec>,
    /// Drawn with replacement from the target corpus; empty during pretraining.
    pub target: Vec<ChunkSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EpochPlan {
    pub batches: Vec<BatchPlan>,
}

impl EpochPlan {
    pub fn num_source_chunks(&self) -> usize {
        self.batches.iter().map(|b| b.source.len()).sum()
    }
}

fn check_chunkable(corpus: &Corpus, min: usize) -> Result<()> {
    let offenders: Vec<String> = corpus
        .recordings
        .iter()
        .filter(|r| r.frames.shape()[0] < min)
        .map(|r| r.id.clone())
        .collect();
    if offenders.is_empty() {
        Ok(())
    } else {
        Err(Error::RecordingTooShort { min, offenders })
    }
}

/// Deterministic epoch plan: `samples_per_recording` chunks per source
/// recording, shuffled, grouped into batches of `batch_size`, one chunk
/// length per batch, plus one with-replacement target draw per source batch.
pub fn build_epoch_plan(
    source: &Corpus,
    target: Option<&Corpus>,
    cfg: &TrainerConfig,
    epoch_index: usize,
) -> Result<EpochPlan> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::invalid("epoch_plan", "source corpus is empty"));
    }
    check_chunkable(source, cfg.chunk_frames_min)?;
    if let Some(t) = target {
        if t.is_empty() {
            return Err(Error::EmptyTargetCorpus);
        }
        check_chunkable(t, cfg.chunk_frames_min)?;
    }

    let mut r = rng::rng_from(cfg.seed, "epoch-plan", epoch_index as u64);
    let mut slots: Vec<usize> = (0..source.len())
        .flat_map(|i| std::iter::repeat(i).take(cfg.samples_per_recording))
        .collect();
    rng::shuffle(&mut r, &mut slots);

    let mut batches = Vec::new();
    for group in slots.chunks(cfg.batch_size) {
        let drawn = rng::uniform_range(&mut r, cfg.chunk_frames_min, cfg.chunk_frames_max);
        let target_idx: Vec<usize> = match target {
            Some(t) => (0..group.len())
                .map(|_| rng::uniform_usize(&mut r, t.len()))
                .collect(),
            None => Vec::new(),
        };
        // keep the batch rectangular: never longer than its shortest recording
        let mut len = drawn;
        for &i in group {
            len = len.min(source.recordings[i].frames.shape()[0]);
        }
        if let Some(t) = target {
            for &i in &target_idx {
                len = len.min(t.recordings[i].frames.shape()[0]);
            }
        }
        let source_chunks = group
            .iter()
            .map(|&i| {
                let rec = &source.recordings[i];
                let max_start = rec.frames.shape()[0] - len;
                ChunkSpec {
                    recording: rec.id.clone(),
                    start: rng::uniform_usize(&mut r, max_start + 1),
                    len,
                }
            })
            .collect();
        let target_chunks = match target {
            Some(t) => target_idx
                .iter()
                .map(|&i| {
                    let rec = &t.recordings[i];
                    let max_start = rec.frames.shape()[0] - len;
                    ChunkSpec {
                        recording: rec.id.clone(),
                        start: rng::uniform_usize(&mut r, max_start + 1),
                        len,
                    }
                })
                .collect(),
            None => Vec::new(),
        };
        batches.push(BatchPlan {
            chunk_len: len,
            source: source_chunks,
            target: target_chunks,
        });
    }
    Ok(EpochPlan { batches })
}

/// Map sorted speaker ids to contiguous class indices.
pub fn speaker_label_map(corpus: &Corpus) -> BTreeMap<u32, usize> {
    corpus
        .speakers()
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s, i))
        .collect()
}

fn assemble_batch(
    corpus: &Corpus,
    chunks: &[ChunkSpec],
    labels: &BTreeMap<u32, usize>,
    domain: Domain,
) -> Result<SpeakerBatch> {
    let index: BTreeMap<&str, &Recording> = corpus
        .recordings
        .iter()
        .map(|r| (r.id.as_str(), r))
        .collect();
    let n = chunks.len();
    let len = chunks.first().map(|c| c.len).unwrap_or(0);
    let dim = corpus.recordings[0].frames.shape()[1];
    let mut data = Vec::with_capacity(n * len * dim);
    let mut speaker_labels = Vec::with_capacity(n);
    for chunk in chunks {
        let rec = index.get(chunk.recording.as_str()).ok_or_else(|| {
            Error::invalid("assemble_batch", format!("unknown recording `{}`", chunk.recording))
        })?;
        let from = chunk.start * dim;
        let to = (chunk.start + chunk.len) * dim;
        data.extend_from_slice(&rec.frames.data()[from..to]);
        // label slot is present for target batches but never read by any loss
        speaker_labels.push(*labels.get(&rec.speaker).unwrap_or(&0));
    }
    Ok(SpeakerBatch {
        frames: Tensor::from_vec(&[n, len, dim], data)?,
        speaker_labels,
        domain,
    })
}

// ----- history -----

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub task: f64,
    pub disc: Option<f64>,
    pub gen: Option<f64>,
    pub aux: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub val_eer: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Step(StepRecord),
    Epoch(EpochRecord),
}

/// Chronological loss and validation records of one training run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<Record>,
    /// Set when training stopped early on a non-finite loss.
    pub aborted: bool,
}

impl TrainHistory {
    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter_map(|r| match r {
            Record::Step(s) => Some(s),
            _ => None,
        })
    }

    pub fn epochs(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter_map(|r| match r {
            Record::Epoch(e) => Some(e),
            _ => None,
        })
    }

    pub fn best_val_eer(&self) -> Option<f64> {
        self.epochs().map(|e| e.val_eer).reduce(f64::min)
    }

    /// Line-oriented text: `step <i> task <v> [disc <v> gen <v>] [aux <v>]`
    /// and `epoch <e> val_eer <v>`, floats as shortest round-trip decimals.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for record in &self.records {
            match record {
                Record::Step(s) => {
                    out.push_str(&format!("step {} task {}", s.step, s.task));
                    if let Some(d) = s.disc {
                        out.push_str(&format!(" disc {d}"));
                    }
                    if let Some(gv) = s.gen {
                        out.push_str(&format!(" gen {gv}"));
                    }
                    if let Some(a) = s.aux {
                        out.push_str(&format!(" aux {a}"));
                    }
                    out.push('\n');
                }
                Record::Epoch(e) => {
                    out.push_str(&format!("epoch {} val_eer {}\n", e.epoch, e.val_eer));
                }
            }
        }
        if self.aborted {
            out.push_str("aborted\n");
        }
        out
    }

    pub fn parse(text: &str) -> Result<TrainHistory> {
        let mut history = TrainHistory::default();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            if line == "aborted" {
                history.aborted = true;
                continue;
            }
            let bad = |msg: &str| Error::Config(format!("history line {}: {msg}", lineno + 1));
            let fields: Vec<&str> = line.split(' ').collect();
            if fields.len() % 2 != 0 {
                return Err(bad("odd field count"));
            }
            let mut kv = BTreeMap::new();
            for pair in fields.chunks(2) {
                kv.insert(pair[0], pair[1]);
            }
            let num = |key: &str| -> Result<f64> {
                kv.get(key)
                    .ok_or_else(|| bad(&format!("missing `{key}`")))?
                    .parse()
                    .map_err(|_| bad(&format!("unparseable `{key}`")))
            };
            if kv.contains_key("step") {
                history.records.push(Record::Step(StepRecord {
                    step: num("step")? as usize,
                    task: num("task")?,
                    disc: kv.get("disc").map(|_| num("disc")).transpose()?,
                    gen: kv.get("gen").map(|_| num("gen")).transpose()?,
                    aux: kv.get("aux").map(|_| num("aux")).transpose()?,
                }));
            } else if kv.contains_key("epoch") {
                history.records.push(Record::Epoch(EpochRecord {
                    epoch: num("epoch")? as usize,
                    val_eer: num("val_eer")?,
                }));
            } else {
                return Err(bad("expected a step or epoch record"));
            }
        }
        Ok(history)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn read(path: &Path) -> Result<TrainHistory> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        TrainHistory::parse(&text)
    }
}

// ----- the three-step update -----

/// Optimizer bundle for the adversarial phase. The classifier uses RMSprop;
/// the embedding function and discriminator use SGD.
#[derive(Debug, Clone)]
pub struct AdvOptimizers {
    pub classifier: Optimizer,
    pub embedding: Optimizer,
    pub discriminator: Optimizer,
}

impl AdvOptimizers {
    pub fn new(cfg: &TrainerConfig) -> AdvOptimizers {
        AdvOptimizers {
            classifier: Optimizer::rmsprop(cfg.classifier_lr),
            embedding: cfg.adv_optimizer.build(cfg.adv_lr),
            discriminator: cfg.adv_optimizer.build(cfg.disc_lr.unwrap_or(cfg.adv_lr)),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepMetrics {
    pub task: f64,
    pub disc: f64,
    pub gen: f64,
    pub aux: Option<f64>,
}

fn at_stage<T>(stage: &str, result: Result<T>) -> Result<T> {
    result.map_err(|e| match e {
        Error::NonFinite { .. } | Error::NonFiniteUpdate(_) | Error::NonFiniteLoss { .. } => {
            Error::NonFiniteLoss {
                stage: format!("{stage} ({e})"),
            }
        }
        other => other,
    })
}

fn step_subset(
    model: &mut ModelState,
    grads: &BTreeMap<String, Tensor>,
    prefix: &str,
    opt: &mut Optimizer,
) -> Result<()> {
    let names: Vec<String> = model.param_names_with_prefix(prefix);
    let mut subset = BTreeMap::new();
    for name in &names {
        let tensor = model.params.remove(name).expect("listed parameter exists");
        subset.insert(name.clone(), tensor);
    }
    let result = opt.step(&mut subset, grads);
    for (name, tensor) in subset {
        model.params.insert(name, tensor);
    }
    result
}

/// Stage 1: minimize the task loss over E and C on the source batch.
/// `apply` receives the gradient map and performs the optimizer updates.
fn task_stage(
    model: &mut ModelState,
    batch: &SpeakerBatch,
    am: &AmSoftmaxConfig,
    apply: impl FnOnce(&mut ModelState, &BTreeMap<String, Tensor>) -> Result<()>,
) -> Result<f64> {
    let run = || -> Result<f64> {
        let mut g = Graph::new();
        let nodes = model.insert_params(&mut g)?;
        let frames = g.constant(batch.frames.clone())?;
        let enc = encode(&mut g, model, &nodes, frames, Mode::Train)?;
        let cosines = classify(&mut g, enc.embeddings, nodes["c.w"])?;
        let loss = am_softmax_loss(&mut g, cosines, &batch.speaker_labels, am)?;
        let value = g.value(loss).item();
        g.backward(loss)?;
        let grads = model.collect_grads(&g, &nodes);
        let stats: Vec<(String, Tensor, Tensor)> = enc
            .batch_stats
            .iter()
            .map(|(name, m, v)| (name.clone(), g.value(*m).clone(), g.value(*v).clone()))
            .collect();
        drop(g);
        apply(model, &grads)?;
        model.update_running_stats(&stats);
        Ok(value)
    };
    at_stage("task", run())
}

/// Stages 2 and 3 share one forward construction: concatenated source+target
/// encode, discriminator scores split back per domain.
struct GanForward {
    graph: Graph,
    nodes: BTreeMap<String, crate::graph::NodeId>,
    raw_source: crate::graph::NodeId,
    raw_target: crate::graph::NodeId,
    aux_source: Option<crate::graph::NodeId>,
}

fn gan_forward(
    model: &ModelState,
    source: &SpeakerBatch,
    target: &SpeakerBatch,
) -> Result<GanForward> {
    let mut g = Graph::new();
    let nodes = model.insert_params(&mut g)?;
    let (b_s, b_t) = (source.frames.shape()[0], target.frames.shape()[0]);
    let src = g.constant(source.frames.clone())?;
    let tgt = g.constant(target.frames.clone())?;
    let both = g.concat(&[src, tgt], 0)?;
    let enc = encode(&mut g, model, &nodes, both, Mode::Train)?;
    // the game is played in the geometry scoring uses: unit-norm embeddings
    let normalized = g.l2_normalize(enc.embeddings, 1)?;
    let disc = discriminate(&mut g, model, &nodes, normalized)?;
    let raw_source = g.narrow(disc.raw, 0, 0, b_s)?;
    let raw_target = g.narrow(disc.raw, 0, b_s, b_t)?;
    let aux_source = match disc.aux_logits {
        Some(logits) => Some(g.narrow(logits, 0, 0, b_s)?),
        None => None,
    };
    Ok(GanForward {
        graph: g,
        nodes,
        raw_source,
        raw_target,
        aux_source,
    })
}

/// Which of the three per-batch stages to run. Training always runs all
/// three; single stages exist for schedule audits and diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageMask {
    pub task: bool,
    pub discriminator: bool,
    pub generator: bool,
}

impl StageMask {
    pub const ALL: StageMask = StageMask {
        task: true,
        discriminator: true,
        generator: true,
    };

    pub fn only(stage: &str) -> StageMask {
        StageMask {
            task: stage == "task",
            discriminator: stage == "discriminator",
            generator: stage == "generator",
        }
    }
}

fn step_impl(
    model: &mut ModelState,
    source: &SpeakerBatch,
    target: &SpeakerBatch,
    cfg: &TrainerConfig,
    opts: &mut AdvOptimizers,
    mask: StageMask,
) -> Result<(Option<f64>, Option<f64>, Option<f64>, Option<f64>)> {
    if cfg.variant.aux && !model.config.aux_head {
        return Err(Error::AuxHeadAbsent);
    }

    let task = if mask.task {
        let (class_opt, emb_opt) = (&mut opts.classifier, &mut opts.embedding);
        Some(task_stage(model, source, &cfg.am, |m, grads| {
            step_subset(m, grads, "c.", class_opt)?;
            step_subset(m, grads, "e.", emb_opt)
        })?)
    } else {
        None
    };

    let mut aux = None;
    let disc = if mask.discriminator {
        let value = at_stage("discriminator", {
            (|| -> Result<f64> {
                let mut fwd = gan_forward(model, source, target)?;
                let g = &mut fwd.graph;
                let mut loss =
                    discriminator_loss(g, fwd.raw_source, fwd.raw_target, cfg.variant)?;
                let disc_value = g.value(loss).item();
                if cfg.variant.aux {
                    let aux_loss = aux_classifier_loss(g, fwd.aux_source, &source.speaker_labels)?;
                    aux = Some(g.value(aux_loss).item());
                    loss = g.add(loss, aux_loss)?;
                }
                g.backward(loss)?;
                let grads = model.collect_grads(g, &fwd.nodes);
                step_subset(model, &grads, "d.", &mut opts.discriminator)?;
                Ok(disc_value)
            })()
        })?;
        Some(value)
    } else {
        None
    };

    let gen = if mask.generator {
        let saved_lr = opts.embedding.lr;
        opts.embedding.lr = cfg.gen_lr.unwrap_or(cfg.adv_lr);
        let value = at_stage("generator", {
            (|| -> Result<f64> {
                let mut fwd = gan_forward(model, source, target)?;
                let g = &mut fwd.graph;
                let mut loss = generator_loss(g, fwd.raw_target, fwd.raw_source, cfg.variant)?;
                let gen_value = g.value(loss).item();
                if cfg.variant.aux {
                    let aux_loss = aux_classifier_loss(g, fwd.aux_source, &source.speaker_labels)?;
                    loss = g.add(loss, aux_loss)?;
                }
                g.backward(loss)?;
                let grads = model.collect_grads(g, &fwd.nodes);
                step_subset(model, &grads, "e.", &mut opts.embedding)?;
                Ok(gen_value)
            })()
        });
        opts.embedding.lr = saved_lr;
        Some(value?)
    } else {
        None
    };

    Ok((task, disc, gen, aux))
}

/// One adversarial mini-batch update: task stage, discriminator stage,
/// generator stage, in that order, with fresh embeddings at each stage.
pub fn adversarial_step(
    model: &mut ModelState,
    source: &SpeakerBatch,
    target: &SpeakerBatch,
    cfg: &TrainerConfig,
    opts: &mut AdvOptimizers,
) -> Result<StepMetrics> {
    let (task, disc, gen, aux) = step_impl(model, source, target, cfg, opts, StageMask::ALL)?;
    Ok(StepMetrics {
        task: task.expect("task stage ran"),
        disc: disc.expect("discriminator stage ran"),
        gen: gen.expect("generator stage ran"),
        aux,
    })
}

/// Run a subset of the three stages; parameter-diff audits use this to
/// verify which player each stage updates.
pub fn adversarial_step_masked(
    model: &mut ModelState,
    source: &SpeakerBatch,
    target: &SpeakerBatch,
    cfg: &TrainerConfig,
    opts: &mut AdvOptimizers,
    mask: StageMask,
) -> Result<()> {
    step_impl(model, source, target, cfg, opts, mask).map(|_| ())
}

// ----- pretraining -----

/// Cross-entropy pretraining of E and C (margin `pretrain_margin`, RMSprop at
/// `pretrain_lr`). D is untouched. On a non-finite loss the model rolls back
/// to the end of the last completed epoch and the history is marked aborted.
pub fn pretrain(
    mut model: ModelState,
    corpus: &Corpus,
    cfg: &TrainerConfig,
) -> Result<(ModelState, TrainHistory)> {
    cfg.validate()?;
    let labels = speaker_label_map(corpus);
    if labels.len() != model.config.num_speakers {
        return Err(Error::invalid(
            "pretrain",
            format!(
                "corpus has {} speakers but the model expects {}",
                labels.len(),
                model.config.num_speakers
            ),
        ));
    }
    let am = AmSoftmaxConfig {
        scale: cfg.am.scale,
        margin: cfg.pretrain_margin,
    };
    let mut opt = Optimizer::rmsprop(cfg.pretrain_lr);
    let mut history = TrainHistory::default();
    let mut step = 0usize;

    for epoch in 0..cfg.pretrain_epochs {
        let snapshot = model.clone();
        let plan = build_epoch_plan(corpus, None, cfg, epoch)?;
        let mut failed = false;
        for batch_plan in &plan.batches {
            let batch = assemble_batch(corpus, &batch_plan.source, &labels, Domain::Source)?;
            let result = task_stage(&mut model, &batch, &am, |m, grads| {
                step_subset(m, grads, "e.", &mut opt)?;
                step_subset(m, grads, "c.", &mut opt)
            });
            match result {
                Ok(task) => {
                    history.records.push(Record::Step(StepRecord {
                        step,
                        task,
                        disc: None,
                        gen: None,
                        aux: None,
                    }));
                    step += 1;
                }
                Err(Error::NonFiniteLoss { .. }) => {
                    failed = true;
                    break;
                }
                Err(other) => return Err(other),
            }
        }
        if failed {
            model = snapshot;
            history.aborted = true;
            break;
        }
    }
    Ok((model, history))
}

// ----- the full adversarial loop -----

/// Recordings and trials used for per-epoch validation EER.
#[derive(Debug, Clone)]
pub struct ValidationSet {
    pub corpus: Corpus,
    pub trials: eval::TrialList,
}

/// Held-out validation split: a deterministic subset of source speakers plus
/// every other target recording, with all-pairs within-domain trials.
pub struct Split {
    pub train_source: Corpus,
    pub validation: ValidationSet,
}

pub fn make_validation_split(
    source: &Corpus,
    target: &Corpus,
    cfg: &TrainerConfig,
) -> Result<Split> {
    let speakers = source.speakers();
    let n_holdout = ((speakers.len() as f64) * 0.1).ceil() as usize;
    let n_holdout = n_holdout.max(2);
    if speakers.len() < n_holdout + 2 {
        return Err(Error::invalid(
            "validation_split",
            format!(
                "{} source speakers is too few to hold out {n_holdout} and keep 2 for training",
                speakers.len()
            ),
        ));
    }
    let mut order = speakers.clone();
    let mut r = rng::rng_from(cfg.seed, "val-split", 0);
    rng::shuffle(&mut r, &mut order);
    let holdout: std::collections::BTreeSet<u32> = order[..n_holdout].iter().copied().collect();

    let train_source = source.filter(|rec| !holdout.contains(&rec.speaker));
    let mut val_recs: Vec<Recording> = source
        .filter(|rec| holdout.contains(&rec.speaker))
        .recordings;
    val_recs.extend(target.recordings.iter().step_by(2).cloned());
    let corpus = Corpus::new(val_recs)?;
    let trials = eval::make_trials(&corpus)?;
    Ok(Split {
        train_source,
        validation: ValidationSet { corpus, trials },
    })
}

/// Adversarial training with validation-based model selection: runs epochs
/// of [`adversarial_step`], tracks validation EER after each, keeps the best
/// checkpoint and stops after `patience` epochs without improvement.
pub fn train(
    model: ModelState,
    source: &Corpus,
    target: &Corpus,
    validation: &ValidationSet,
    cfg: &TrainerConfig,
) -> Result<(ModelState, TrainHistory)> {
    cfg.validate()?;
    if target.is_empty() {
        return Err(Error::EmptyTargetCorpus);
    }
    if cfg.variant.aux && !model.config.aux_head {
        return Err(Error::AuxHeadAbsent);
    }
    let labels = speaker_label_map(source);
    if labels.len() != model.config.num_speakers {
        return Err(Error::invalid(
            "train",
            format!(
                "corpus has {} speakers but the model expects {}",
                labels.len(),
                model.config.num_speakers
            ),
        ));
    }

    let mut model = model;
    let mut opts = AdvOptimizers::new(cfg);
    let mut history = TrainHistory::default();
    let mut best: Option<(ModelState, f64)> = None;
    let mut stale = 0usize;
    let mut step = 0usize;

    for epoch in 0..cfg.max_epochs {
        let plan = build_epoch_plan(source, Some(target), cfg, epoch)?;
        for batch_plan in &plan.batches {
            let src = assemble_batch(source, &batch_plan.source, &labels, Domain::Source)?;
            let tgt = assemble_batch(target, &batch_plan.target, &labels, Domain::Target)?;
            let metrics = adversarial_step(&mut model, &src, &tgt, cfg, &mut opts)?;
            history.records.push(Record::Step(StepRecord {
                step,
                task: metrics.task,
                disc: Some(metrics.disc),
                gen: Some(metrics.gen),
                aux: metrics.aux,
            }));
            step += 1;
        }

        let table = eval::extract(&validation.corpus, &model)?;
        let scores = eval::score_trials(&validation.trials, &table)?;
        let val_eer = eval::compute_eer(&scores, &validation.trials)?;
        history.records.push(Record::Epoch(EpochRecord { epoch, val_eer }));

        let improved = best.as_ref().map(|(_, e)| val_eer < *e).unwrap_or(true);
        if improved {
            best = Some((model.clone(), val_eer));
            stale = 0;
        } else {
            stale += 1;
        }
        if stale >= cfg.patience {
            break;
        }
    }

    let (best_model, _) = best.expect("max_epochs >= 1 ran at least one epoch");
    Ok((best_model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::GanKind;
    use crate::network::NetworkConfig;
    use crate::synthdata::{generate, SynthSpec};

    fn tiny_synth(seed: u64) -> SynthSpec {
        SynthSpec {
            num_source_speakers: 4,
            num_target_speakers: 3,
            recordings_per_speaker: 3,
            frames_min: 12,
            frames_max: 20,
            frame_dim: 4,
            speaker_scatter: 3.0,
            channel_noise: 1.0,
            shift_rotation_angle: std::f64::consts::FRAC_PI_2,
            shift_offset_scale: 4.0,
            seed,
        }
    }

    fn tiny_network(num_speakers: usize) -> NetworkConfig {
        NetworkConfig {
            frame_dim: 4,
            encoder_hidden: vec![8],
            residual_blocks: 1,
            post_pool_widths: [8, 8],
            embedding_dim: 4,
            num_speakers,
            disc_widths: vec![6],
            attention_hidden: 4,
            use_batchnorm: true,
            aux_head: true,
        }
    }

    fn tiny_trainer(seed: u64) -> TrainerConfig {
        TrainerConfig {
            batch_size: 8,
            chunk_frames_min: 6,
            chunk_frames_max: 10,
            samples_per_recording: 3,
            pretrain_epochs: 2,
            max_epochs: 3,
            patience: 1,
            seed,
            ..TrainerConfig::default()
        }
    }

    fn bits(params: &BTreeMap<String, Tensor>) -> Vec<(String, Vec<u64>)> {
        params
            .iter()
            .map(|(k, t)| (k.clone(), t.data().iter().map(|v| v.to_bits()).collect()))
            .collect()
    }

    #[test]
    fn plan_has_samples_per_recording_chunks_each() {
        let (source, _) = generate(&SynthSpec {
            num_source_speakers: 4,
            recordings_per_speaker: 3, // 12 recordings
            ..tiny_synth(1)
        })
        .unwrap();
        let cfg = TrainerConfig {
            samples_per_recording: 10,
            batch_size: 16,
            chunk_frames_min: 6,
            chunk_frames_max: 10,
            ..TrainerConfig::default()
        };
        let plan = build_epoch_plan(&source, None, &cfg, 0).unwrap();
        assert_eq!(plan.num_source_chunks(), 120);
        // every recording appears exactly 10 times
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for b in &plan.batches {
            for c in &b.source {
                *counts.entry(c.recording.as_str()).or_default() += 1;
            }
        }
        assert!(counts.values().all(|&n| n == 10));
        assert_eq!(counts.len(), 12);
    }

    #[test]
    fn degenerate_chunk_interval_pins_the_length() {
        let (source, target) = generate(&tiny_synth(2)).unwrap();
        let cfg = TrainerConfig {
            chunk_frames_min: 7,
            chunk_frames_max: 7,
            batch_size: 8,
            samples_per_recording: 2,
            ..TrainerConfig::default()
        };
        let plan = build_epoch_plan(&source, Some(&target), &cfg, 3).unwrap();
        for b in &plan.batches {
            assert_eq!(b.chunk_len, 7);
            for c in b.source.iter().chain(&b.target) {
                assert_eq!(c.len, 7);
            }
            assert_eq!(b.source.len(), b.target.len());
        }
    }

    #[test]
    fn plans_are_deterministic_in_seed_and_epoch() {
        let (source, target) = generate(&tiny_synth(3)).unwrap();
        let cfg = tiny_trainer(11);
        let a = build_epoch_plan(&source, Some(&target), &cfg, 5).unwrap();
        let b = build_epoch_plan(&source, Some(&target), &cfg, 5).unwrap();
        assert_eq!(a, b);
        let c = build_epoch_plan(&source, Some(&target), &cfg, 6).unwrap();
        assert_ne!(a, c, "different epochs must shuffle differently");
    }

    #[test]
    fn chunks_fit_inside_their_recordings() {
        let (source, target) = generate(&tiny_synth(4)).unwrap();
        let cfg = tiny_trainer(12);
        for epoch in 0..3 {
            let plan = build_epoch_plan(&source, Some(&target), &cfg, epoch).unwrap();
            for b in &plan.batches {
                assert!((cfg.chunk_frames_min..=cfg.chunk_frames_max).contains(&b.chunk_len));
                for (corpus, chunks) in [(&source, &b.source), (&target, &b.target)] {
                    for c in chunks {
                        let t = corpus.get(&c.recording).unwrap().frames.shape()[0];
                        assert!(c.start + c.len <= t);
                    }
                }
            }
        }
    }

    #[test]
    fn too_short_recordings_are_listed() {
        let (mut source, _) = generate(&tiny_synth(5)).unwrap();
        source.recordings[2].frames = Tensor::zeros(&[3, 4]);
        source.recordings[5].frames = Tensor::zeros(&[2, 4]);
        let short_ids = [
            source.recordings[2].id.clone(),
            source.recordings[5].id.clone(),
        ];
        match build_epoch_plan(&source, None, &tiny_trainer(0), 0) {
            Err(Error::RecordingTooShort { min, offenders }) => {
                assert_eq!(min, 6);
                assert_eq!(offenders, short_ids);
            }
            other => panic!("expected RecordingTooShort, got {other:?}"),
        }
    }

    #[test]
    fn pretraining_never_touches_the_discriminator() {
        let (source, _) = generate(&tiny_synth(6)).unwrap();
        let model = ModelState::init(tiny_network(4), 21).unwrap();
        let d_before: Vec<_> = bits(&model.params)
            .into_iter()
            .filter(|(k, _)| k.starts_with("d."))
            .collect();
        let (trained, history) = pretrain(model, &source, &tiny_trainer(21)).unwrap();
        let d_after: Vec<_> = bits(&trained.params)
            .into_iter()
            .filter(|(k, _)| k.starts_with("d."))
            .collect();
        assert_eq!(d_before, d_after, "D must be bitwise untouched");
        assert!(history.steps().count() > 0);
        assert!(history.steps().all(|s| s.task.is_finite()
            && s.disc.is_none()
            && s.gen.is_none()
            && s.aux.is_none()));
    }

    #[test]
    fn zero_pretrain_epochs_returns_the_model_unchanged() {
        let (source, _) = generate(&tiny_synth(7)).unwrap();
        let model = ModelState::init(tiny_network(4), 22).unwrap();
        let before = bits(&model.params);
        let cfg = TrainerConfig {
            pretrain_epochs: 0,
            ..tiny_trainer(22)
        };
        let (after, history) = pretrain(model, &source, &cfg).unwrap();
        assert_eq!(before, bits(&after.params));
        assert_eq!(history.steps().count(), 0);
    }

    #[test]
    fn pretraining_learns_well_separated_speakers() {
        // 4 speakers, strong separation: loss must fall below 0.25 * ln(4)
        let spec = SynthSpec {
            num_source_speakers: 4,
            num_target_speakers: 2,
            recordings_per_speaker: 4,
            frames_min: 16,
            frames_max: 24,
            frame_dim: 4,
            speaker_scatter: 4.0,
            channel_noise: 0.5,
            ..tiny_synth(8)
        };
        let (source, _) = generate(&spec).unwrap();
        let cfg = TrainerConfig {
            pretrain_epochs: 20,
            batch_size: 16,
            chunk_frames_min: 8,
            chunk_frames_max: 14,
            samples_per_recording: 4,
            ..TrainerConfig::default()
        };
        let model = ModelState::init(tiny_network(4), 23).unwrap();
        let (_, history) = pretrain(model, &source, &cfg).unwrap();
        let last = history.steps().last().unwrap().task;
        let bound = 0.25 * 4.0_f64.ln();
        assert!(
            last < bound,
            "final pretrain loss {last} not below {bound} (uniform baseline ln 4)"
        );
        assert!(!history.aborted);
    }

    fn batches_from_plan(
        plan: &EpochPlan,
        source: &Corpus,
        target: &Corpus,
        labels: &BTreeMap<u32, usize>,
    ) -> (SpeakerBatch, SpeakerBatch) {
        let b = &plan.batches[0];
        (
            assemble_batch(source, &b.source, labels, Domain::Source).unwrap(),
            assemble_batch(target, &b.target, labels, Domain::Target).unwrap(),
        )
    }

    #[test]
    fn stage_isolation_for_every_variant_and_aux_combination() {
        let (source, target) = generate(&tiny_synth(9)).unwrap();
        let labels = speaker_label_map(&source);
        for kind in [GanKind::Sgan, GanKind::Lsgan, GanKind::Relgan, GanKind::Gradrev] {
            for aux in [false, true] {
                let cfg = TrainerConfig {
                    variant: GanVariant { kind, aux },
                    ..tiny_trainer(30)
                };
                let plan = build_epoch_plan(&source, Some(&target), &cfg, 0).unwrap();
                let (src_batch, tgt_batch) =
                    batches_from_plan(&plan, &source, &target, &labels);
                let base = ModelState::init(tiny_network(4), 31).unwrap();

                let changed = |mask: StageMask| -> (bool, bool, bool) {
                    let mut model = base.clone();
                    let mut opts = AdvOptimizers::new(&cfg);
                    adversarial_step_masked(&mut model, &src_batch, &tgt_batch, &cfg, &mut opts, mask)
                        .unwrap();
                    let diff = |prefix: &str| {
                        base.params.iter().any(|(k, t)| {
                            k.starts_with(prefix) && model.params[k].data() != t.data()
                        })
                    };
                    (diff("c."), diff("d."), diff("e."))
                };

                // stage 1 alone: C and E move, D frozen
                assert_eq!(
                    changed(StageMask::only("task")),
                    (true, false, true),
                    "{kind:?} aux={aux}: task stage must update C and E only"
                );
                // stage 2 alone: D moves, C and E frozen
                assert_eq!(
                    changed(StageMask::only("discriminator")),
                    (false, true, false),
                    "{kind:?} aux={aux}: discriminator stage must update D only"
                );
                // stage 3 alone: E moves, C and D frozen
                assert_eq!(
                    changed(StageMask::only("generator")),
                    (false, false, true),
                    "{kind:?} aux={aux}: generator stage must update E only"
                );

                // full step: E is updated twice (differs from the task-only update)
                let mut once = base.clone();
                let mut opts = AdvOptimizers::new(&cfg);
                adversarial_step_masked(
                    &mut once,
                    &src_batch,
                    &tgt_batch,
                    &cfg,
                    &mut opts,
                    StageMask::only("task"),
                )
                .unwrap();
                let mut full = base.clone();
                let mut opts = AdvOptimizers::new(&cfg);
                adversarial_step(&mut full, &src_batch, &tgt_batch, &cfg, &mut opts).unwrap();
                let e_differs = full
                    .params
                    .iter()
                    .any(|(k, t)| k.starts_with("e.") && once.params[k].data() != t.data());
                assert!(e_differs, "{kind:?} aux={aux}: E must receive a second update");
            }
        }
    }

    #[test]
    fn gradrev_generator_gradient_negates_discriminator_gradient() {
        let (source, target) = generate(&tiny_synth(10)).unwrap();
        let labels = speaker_label_map(&source);
        let cfg = TrainerConfig {
            variant: GanVariant { kind: GanKind::Gradrev, aux: false },
            ..tiny_trainer(32)
        };
        let plan = build_epoch_plan(&source, Some(&target), &cfg, 0).unwrap();
        let (src_batch, tgt_batch) = batches_from_plan(&plan, &source, &target, &labels);
        let model = ModelState::init(tiny_network(4), 33).unwrap();

        let e_grads = |generator_side: bool| -> BTreeMap<String, Tensor> {
            let mut fwd = gan_forward(&model, &src_batch, &tgt_batch).unwrap();
            let g = &mut fwd.graph;
            let loss = if generator_side {
                generator_loss(g, fwd.raw_target, fwd.raw_source, cfg.variant).unwrap()
            } else {
                discriminator_loss(
                    g,
                    fwd.raw_source,
                    fwd.raw_target,
                    GanVariant { kind: GanKind::Sgan, aux: false },
                )
                .unwrap()
            };
            g.backward(loss).unwrap();
            fwd.nodes
                .iter()
                .filter(|(k, _)| k.starts_with("e."))
                .map(|(k, &id)| (k.clone(), g.grad(id)))
                .collect()
        };
        let gen_grads = e_grads(true);
        let disc_grads = e_grads(false);
        for (name, gg) in &gen_grads {
            let dg = &disc_grads[name];
            for (a, b) in gg.data().iter().zip(dg.data()) {
                assert!(
                    (a + b).abs() <= 1e-10,
                    "{name}: generator grad {a} must negate discriminator grad {b}"
                );
            }
        }
    }

    #[test]
    fn zero_adv_lr_reduces_to_the_task_stage() {
        let (source, target) = generate(&tiny_synth(11)).unwrap();
        let labels = speaker_label_map(&source);
        let cfg = TrainerConfig {
            adv_lr: 0.0,
            ..tiny_trainer(34)
        };
        let plan = build_epoch_plan(&source, Some(&target), &cfg, 0).unwrap();
        let (src_batch, tgt_batch) = batches_from_plan(&plan, &source, &target, &labels);
        let base = ModelState::init(tiny_network(4), 35).unwrap();

        let mut full = base.clone();
        let mut opts = AdvOptimizers::new(&cfg);
        adversarial_step(&mut full, &src_batch, &tgt_batch, &cfg, &mut opts).unwrap();

        let mut task_only = base.clone();
        let mut opts = AdvOptimizers::new(&cfg);
        adversarial_step_masked(
            &mut task_only,
            &src_batch,
            &tgt_batch,
            &cfg,
            &mut opts,
            StageMask::only("task"),
        )
        .unwrap();

        assert_eq!(bits(&full.params), bits(&task_only.params));
        for (layer, stats) in &full.running_stats {
            let other = &task_only.running_stats[layer];
            assert_eq!(stats.mean, other.mean);
            assert_eq!(stats.var, other.var);
        }
    }

    fn quick_setup(seed: u64) -> (Corpus, Corpus, ValidationSet, ModelState, TrainerConfig) {
        let spec = SynthSpec {
            num_source_speakers: 5,
            num_target_speakers: 3,
            recordings_per_speaker: 3,
            ..tiny_synth(seed)
        };
        let (source, target) = generate(&spec).unwrap();
        let cfg = tiny_trainer(seed);
        let split = make_validation_split(&source, &target, &cfg).unwrap();
        let k = speaker_label_map(&split.train_source).len();
        let model = ModelState::init(tiny_network(k), seed).unwrap();
        let (model, _) = pretrain(model, &split.train_source, &cfg).unwrap();
        (split.train_source, target, split.validation, model, cfg)
    }

    #[test]
    fn zero_patience_runs_exactly_one_epoch() {
        let (source, target, validation, model, mut cfg) = quick_setup(40);
        cfg.patience = 0;
        cfg.max_epochs = 9;
        let (_, history) = train(model, &source, &target, &validation, &cfg).unwrap();
        assert_eq!(history.epochs().count(), 1);
    }

    #[test]
    fn returned_model_is_the_best_checkpoint() {
        let (source, target, validation, model, mut cfg) = quick_setup(41);
        cfg.max_epochs = 3;
        cfg.patience = 3;
        let (best, history) = train(model, &source, &target, &validation, &cfg).unwrap();
        let min_eer = history.best_val_eer().unwrap();
        // re-evaluate the returned model; it must reproduce the minimum
        let table = eval::extract(&validation.corpus, &best).unwrap();
        let scores = eval::score_trials(&validation.trials, &table).unwrap();
        let eer = eval::compute_eer(&scores, &validation.trials).unwrap();
        assert_eq!(eer, min_eer);
    }

    #[test]
    fn training_histories_are_deterministic() {
        let run = || {
            let (source, target, validation, model, cfg) = quick_setup(42);
            let (_, history) = train(model, &source, &target, &validation, &cfg).unwrap();
            history.render()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn target_labels_are_never_read() {
        let run = |scramble: bool| {
            let (source, mut target, validation, model, cfg) = quick_setup(43);
            if scramble {
                for (i, rec) in target.recordings.iter_mut().enumerate() {
                    rec.speaker = 7000 + (i as u32 * 13) % 5;
                }
            }
            let (_, history) = train(model, &source, &target, &validation, &cfg).unwrap();
            history.render()
        };
        assert_eq!(run(false), run(true), "scrambled target labels must not change training");
    }

    #[test]
    fn adversarial_records_carry_exactly_the_active_losses() {
        for aux in [false, true] {
            let (source, target, validation, model, mut cfg) = quick_setup(44);
            cfg.variant = GanVariant { kind: GanKind::Sgan, aux };
            cfg.max_epochs = 1;
            let (_, history) = train(model, &source, &target, &validation, &cfg).unwrap();
            for s in history.steps() {
                assert!(s.task.is_finite());
                assert!(s.disc.is_some_and(|v| v.is_finite()));
                assert!(s.gen.is_some_and(|v| v.is_finite()));
                assert_eq!(s.aux.is_some(), aux);
                if let Some(a) = s.aux {
                    assert!(a.is_finite());
                }
            }
        }
    }

    #[test]
    fn empty_target_corpus_is_rejected() {
        let (source, _, validation, model, cfg) = quick_setup(45);
        let empty = Corpus::default();
        assert!(matches!(
            train(model, &source, &empty, &validation, &cfg),
            Err(Error::EmptyTargetCorpus)
        ));
    }

    #[test]
    fn aux_variant_requires_the_aux_head() {
        let (source, target, validation, model, mut cfg) = quick_setup(46);
        let mut no_aux = model.clone();
        no_aux.config.aux_head = false;
        no_aux.params.retain(|k, _| !k.starts_with("d.aux"));
        cfg.variant = GanVariant { kind: GanKind::Sgan, aux: true };
        assert!(matches!(
            train(no_aux, &source, &target, &validation, &cfg),
            Err(Error::AuxHeadAbsent)
        ));
    }

    #[test]
    fn history_text_round_trips() {
        let history = TrainHistory {
            records: vec![
                Record::Step(StepRecord {
                    step: 0,
                    task: 1.25,
                    disc: Some(0.6931471805599453),
                    gen: Some(0.7),
                    aux: None,
                }),
                Record::Step(StepRecord {
                    step: 1,
                    task: 0.5,
                    disc: None,
                    gen: None,
                    aux: None,
                }),
                Record::Epoch(EpochRecord { epoch: 0, val_eer: 0.125 }),
                Record::Step(StepRecord {
                    step: 2,
                    task: 0.25,
                    disc: Some(1.0),
                    gen: Some(2.0),
                    aux: Some(0.1),
                }),
                Record::Epoch(EpochRecord { epoch: 1, val_eer: 0.0625 }),
            ],
            aborted: true,
        };
        let text = history.render();
        let parsed = TrainHistory::parse(&text).unwrap();
        assert_eq!(parsed, history);
        assert_eq!(parsed.best_val_eer(), Some(0.0625));
    }

    #[test]
    fn validation_split_holds_out_speakers_and_slices_target() {
        let (source, target) = generate(&SynthSpec {
            num_source_speakers: 8,
            num_target_speakers: 6,
            recordings_per_speaker: 6,
            ..tiny_synth(50)
        })
        .unwrap();
        let cfg = tiny_trainer(50);
        let split = make_validation_split(&source, &target, &cfg).unwrap();
        // 10% of 8 speakers rounds up to 1 but the floor is 2
        let train_speakers = split.train_source.speakers();
        assert_eq!(train_speakers.len(), 6);
        let val_sources: Vec<u32> = split
            .validation
            .corpus
            .recordings
            .iter()
            .filter(|r| r.domain == Domain::Source)
            .map(|r| r.speaker)
            .collect();
        assert!(val_sources.iter().all(|s| !train_speakers.contains(s)));
        // every other target recording lands in validation
        let n_target_val = split
            .validation
            .corpus
            .recordings
            .iter()
            .filter(|r| r.domain == Domain::Target)
            .count();
        assert_eq!(n_target_val, 18);
        // within-domain pairs only
        for t in &split.validation.trials.trials {
            let a = split.validation.corpus.get(&t.enroll).unwrap();
            let b = split.validation.corpus.get(&t.test).unwrap();
            assert_eq!(a.domain, b.domain);
            assert_eq!(t.target, a.speaker == b.speaker);
        }
    }
}
