//! Verification harness: embedding extraction, cosine trial scoring, EER,
//! score fusion and the domain-probe invariance diagnostic.
//!
//! Score polarity is cosine similarity — higher means same speaker — and
//! score files carry a `# polarity=similarity` header saying so.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::network::{embed_batch, Mode, ModelState};
use crate::rng;
use crate::synthdata::Corpus;
use crate::tensor::Tensor;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

/// Unit-norm embeddings keyed by recording id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingTable {
    map: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new() -> EmbeddingTable {
        EmbeddingTable::default()
    }

    /// Insert an embedding, L2-normalizing it. Zero vectors are rejected.
    pub fn insert(&mut self, id: impl Into<String>, raw: Vec<f64>) -> Result<()> {
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 || !norm.is_finite() {
            return Err(Error::ZeroNorm {
                what: "embedding at insertion".to_string(),
            });
        }
        self.map
            .insert(id.into(), raw.into_iter().map(|v| v / norm).collect());
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.map.get(id).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.map.iter()
    }

    /// Embedding file: one `id<TAB>v1,v2,...,vd` line per entry, f32 values.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (id, emb) in &self.map {
            out.push_str(id);
            out.push('\t');
            for (i, &v) in emb.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&format!("{}", v as f32));
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn read(path: &Path) -> Result<EmbeddingTable> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut table = EmbeddingTable::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (id, values) = line.split_once('\t').ok_or_else(|| Error::MalformedFile {
                file: path.display().to_string(),
                offset: lineno as u64 + 1,
                msg: "expected id<TAB>values".to_string(),
            })?;
            let emb: std::result::Result<Vec<f64>, _> = values
                .split(',')
                .map(|v| v.parse::<f32>().map(f64::from))
                .collect();
            let emb = emb.map_err(|_| Error::MalformedFile {
                file: path.display().to_string(),
                offset: lineno as u64 + 1,
                msg: "unparseable embedding value".to_string(),
            })?;
            table.insert(id, emb)?;
        }
        Ok(table)
    }
}

/// One verification trial: does `test` contain the speaker enrolled as `enroll`?
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    /// true = same-speaker (target) trial.
    pub target: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn new(trials: Vec<Trial>) -> Result<TrialList> {
        let mut seen = BTreeSet::new();
        for t in &trials {
            if !seen.insert((t.enroll.as_str(), t.test.as_str())) {
                return Err(Error::DuplicateTrial {
                    enroll: t.enroll.clone(),
                    test: t.test.clone(),
                });
            }
        }
        Ok(TrialList { trials })
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    /// Trial file: `enroll<TAB>test<TAB>target|nontarget`, one per line.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.trials {
            let label = if t.target { "target" } else { "nontarget" };
            out.push_str(&format!("{}\t{}\t{}\n", t.enroll, t.test, label));
        }
        std::fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn read(path: &Path) -> Result<TrialList> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut trials = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::MalformedFile {
                file: path.display().to_string(),
                offset: lineno as u64 + 1,
                msg: msg.to_string(),
            };
            let mut parts = line.split('\t');
            let enroll = parts.next().ok_or_else(|| bad("missing enroll id"))?;
            let test = parts.next().ok_or_else(|| bad("missing test id"))?;
            let label = parts.next().ok_or_else(|| bad("missing label"))?;
            let target = match label {
                "target" => true,
                "nontarget" => false,
                _ => return Err(bad("label must be target|nontarget")),
            };
            trials.push(Trial {
                enroll: enroll.to_string(),
                test: test.to_string(),
                target,
            });
        }
        TrialList::new(trials)
    }
}

/// Build the all-pairs trial list of a corpus, pairing recordings within the
/// same domain only: same speaker = target, different speaker = nontarget.
pub fn make_trials(corpus: &Corpus) -> Result<TrialList> {
    let mut trials = Vec::new();
    for (i, a) in corpus.recordings.iter().enumerate() {
        for b in corpus.recordings.iter().skip(i + 1) {
            if a.domain != b.domain {
                continue;
            }
            trials.push(Trial {
                enroll: a.id.clone(),
                test: b.id.clone(),
                target: a.speaker == b.speaker,
            });
        }
    }
    TrialList::new(trials)
}

/// Scores aligned index-for-index with a trial list.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    pub scores: Vec<TrialScore>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialScore {
    pub enroll: String,
    pub test: String,
    pub score: f64,
}

impl ScoreSet {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Score file: `# polarity=similarity` header, then
    /// `enroll<TAB>test<TAB>score` with shortest round-trip decimals.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::from("# polarity=similarity\n");
        for s in &self.scores {
            out.push_str(&format!("{}\t{}\t{}\n", s.enroll, s.test, s.score));
        }
        std::fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn read(path: &Path) -> Result<ScoreSet> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut scores = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: &str| Error::MalformedFile {
                file: path.display().to_string(),
                offset: lineno as u64 + 1,
                msg: msg.to_string(),
            };
            let mut parts = line.split('\t');
            let enroll = parts.next().ok_or_else(|| bad("missing enroll id"))?;
            let test = parts.next().ok_or_else(|| bad("missing test id"))?;
            let score: f64 = parts
                .next()
                .ok_or_else(|| bad("missing score"))?
                .parse()
                .map_err(|_| bad("unparseable score"))?;
            if !score.is_finite() {
                return Err(bad("non-finite score"));
            }
            scores.push(TrialScore {
                enroll: enroll.to_string(),
                test: test.to_string(),
                score,
            });
        }
        Ok(ScoreSet { scores })
    }
}

/// Extract one unit-norm embedding per recording with an eval-mode forward
/// pass over the full recording. The discriminator branch is unused.
pub fn extract(corpus: &Corpus, model: &ModelState) -> Result<EmbeddingTable> {
    let mut table = EmbeddingTable::new();
    for rec in &corpus.recordings {
        let (t, d) = (rec.frames.shape()[0], rec.frames.shape()[1]);
        if t == 0 {
            return Err(Error::invalid(
                "extract",
                format!("recording `{}` has zero frames", rec.id),
            ));
        }
        let batch = Tensor::from_vec(&[1, t, d], rec.frames.data().to_vec())?;
        let emb = embed_batch(model, &batch, Mode::Eval)?;
        table.insert(rec.id.clone(), emb.data().to_vec())?;
    }
    Ok(table)
}

/// Cosine-score every trial: inner product of the two unit embeddings.
pub fn score_trials(trials: &TrialList, table: &EmbeddingTable) -> Result<ScoreSet> {
    let mut missing = BTreeSet::new();
    for t in &trials.trials {
        if table.get(&t.enroll).is_none() {
            missing.insert(t.enroll.clone());
        }
        if table.get(&t.test).is_none() {
            missing.insert(t.test.clone());
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingIds(missing.into_iter().collect()));
    }
    let scores = trials
        .trials
        .iter()
        .map(|t| {
            let a = table.get(&t.enroll).expect("checked above");
            let b = table.get(&t.test).expect("checked above");
            TrialScore {
                enroll: t.enroll.clone(),
                test: t.test.clone(),
                score: a.iter().zip(b).map(|(x, y)| x * y).sum(),
            }
        })
        .collect();
    Ok(ScoreSet { scores })
}

fn check_alignment(scores: &ScoreSet, trials: &TrialList) -> Result<()> {
    if scores.len() != trials.len() {
        return Err(Error::MisalignedScores(scores.len().min(trials.len())));
    }
    for (i, (s, t)) in scores.scores.iter().zip(&trials.trials).enumerate() {
        if s.enroll != t.enroll || s.test != t.test {
            return Err(Error::MisalignedScores(i));
        }
    }
    Ok(())
}

/// Equal error rate: the operating point where false-accept rate equals
/// false-reject rate, with `accept iff score >= threshold`. The threshold
/// sweep walks the sorted unique scores; when the crossing falls between
/// two ROC points it is resolved by linear interpolation.
pub fn compute_eer(scores: &ScoreSet, trials: &TrialList) -> Result<f64> {
    check_alignment(scores, trials)?;
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for (s, t) in scores.scores.iter().zip(&trials.trials) {
        if t.target {
            targets.push(s.score);
        } else {
            nontargets.push(s.score);
        }
    }
    if targets.is_empty() || nontargets.is_empty() {
        return Err(Error::SingleClassTrials);
    }
    targets.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    nontargets.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));

    let mut thresholds: Vec<f64> = targets.iter().chain(nontargets.iter()).copied().collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    thresholds.dedup();

    let (n_tar, n_non) = (targets.len() as f64, nontargets.len() as f64);
    // counts of scores strictly below the current threshold
    let mut tar_below = 0usize;
    let mut non_below = 0usize;
    // ROC points from threshold -inf (accept all: FAR 1, FRR 0) upward
    let mut prev = (1.0_f64, 0.0_f64);
    if prev.0 == prev.1 {
        return Ok(prev.0);
    }
    let mut points = Vec::with_capacity(thresholds.len() + 2);
    points.push(prev);
    for &t in &thresholds {
        while tar_below < targets.len() && targets[tar_below] < t {
            tar_below += 1;
        }
        while non_below < nontargets.len() && nontargets[non_below] < t {
            non_below += 1;
        }
        let far = (nontargets.len() - non_below) as f64 / n_non;
        let frr = tar_below as f64 / n_tar;
        points.push((far, frr));
    }
    points.push((0.0, 1.0)); // threshold above every score

    for i in 1..points.len() {
        let (far, frr) = points[i];
        if frr >= far {
            if (frr - far).abs() == 0.0 {
                return Ok(far);
            }
            let (pfar, pfrr) = points[i - 1];
            // solve pfar + a*(far-pfar) = pfrr + a*(frr-pfrr) for a in [0,1]
            let denom = (frr - pfrr) - (far - pfar);
            let alpha = (pfar - pfrr) / denom;
            return Ok(pfar + alpha * (far - pfar));
        }
        prev = (far, frr);
    }
    // FRR never reached FAR; can only happen at the synthetic endpoint,
    // which the loop always visits.
    let _ = prev;
    unreachable!("EER crossing not found");
}

/// Unweighted per-trial mean of several aligned score sets.
pub fn fuse(score_sets: &[ScoreSet]) -> Result<ScoreSet> {
    let first = score_sets
        .first()
        .ok_or_else(|| Error::invalid("fuse", "no score sets given"))?;
    for set in score_sets.iter().skip(1) {
        if set.len() != first.len() {
            return Err(Error::MisalignedScores(set.len().min(first.len())));
        }
        for (i, (a, b)) in first.scores.iter().zip(&set.scores).enumerate() {
            if a.enroll != b.enroll || a.test != b.test {
                return Err(Error::MisalignedScores(i));
            }
        }
    }
    let n = score_sets.len() as f64;
    let scores = first
        .scores
        .iter()
        .enumerate()
        .map(|(i, s)| {
            // mean centered on the first score: exact when all inputs agree
            let delta: f64 = score_sets
                .iter()
                .map(|set| set.scores[i].score - s.score)
                .sum();
            TrialScore {
                enroll: s.enroll.clone(),
                test: s.test.clone(),
                score: s.score + delta / n,
            }
        })
        .collect();
    Ok(ScoreSet { scores })
}

#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub train_frac: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 32,
            epochs: 200,
            lr: 0.01,
            train_frac: 0.7,
            seed: 0,
        }
    }
}

/// Train a fresh 2-layer ELU classifier on frozen embeddings to predict the
/// domain and return held-out accuracy. 0.5 means domain-invariant; high
/// accuracy means the domains are separable in embedding space.
pub fn domain_probe(
    source: &[Vec<f64>],
    target: &[Vec<f64>],
    cfg: &ProbeConfig,
) -> Result<f64> {
    if source.len() < 20 || target.len() < 20 {
        return Err(Error::ProbeData(format!(
            "need >= 20 embeddings per domain, got {} source / {} target",
            source.len(),
            target.len()
        )));
    }
    let ratio = source.len().max(target.len()) as f64 / source.len().min(target.len()) as f64;
    if ratio > 10.0 {
        return Err(Error::ProbeData(format!(
            "class imbalance {ratio:.1}:1 exceeds 10:1"
        )));
    }
    let dim = source[0].len();
    if dim == 0 || source.iter().chain(target).any(|e| e.len() != dim) {
        return Err(Error::ProbeData("inconsistent embedding dimensions".to_string()));
    }

    // stratified 70/30 split, seeded per domain
    let split = |items: &[Vec<f64>], label: &str| -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut r = rng::rng_from(cfg.seed, label, 0);
        rng::shuffle(&mut r, &mut order);
        let n_train = ((items.len() as f64) * cfg.train_frac).round() as usize;
        let n_train = n_train.clamp(1, items.len() - 1);
        let train = order[..n_train].iter().map(|&i| items[i].clone()).collect();
        let test = order[n_train..].iter().map(|&i| items[i].clone()).collect();
        (train, test)
    };
    let (src_train, src_test) = split(source, "probe-split-source");
    let (tgt_train, tgt_test) = split(target, "probe-split-target");

    let matrix = |rows: &[Vec<f64>]| -> Result<Tensor> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            data.extend_from_slice(row);
        }
        Tensor::from_vec(&[rows.len(), dim], data)
    };
    let mut train_rows: Vec<Vec<f64>> = src_train;
    let n_src_train = train_rows.len();
    train_rows.extend(tgt_train);
    let x_train = matrix(&train_rows)?;
    let n_train = train_rows.len();
    // label 1 = target domain
    let y: Vec<f64> = (0..n_train)
        .map(|i| if i < n_src_train { 0.0 } else { 1.0 })
        .collect();
    let y_pos = Tensor::from_vec(&[n_train], y.clone())?;
    let y_neg = Tensor::from_vec(&[n_train], y.iter().map(|v| 1.0 - v).collect())?;

    let mut r = rng::rng_from(cfg.seed, "probe-init", 0);
    let mut params: BTreeMap<String, Tensor> = BTreeMap::new();
    params.insert(
        "w1".into(),
        Tensor::randn(&[dim, cfg.hidden], (2.0 / dim as f64).sqrt(), &mut r),
    );
    params.insert("b1".into(), Tensor::zeros(&[cfg.hidden]));
    params.insert(
        "w2".into(),
        Tensor::randn(&[cfg.hidden, 1], (2.0 / cfg.hidden as f64).sqrt(), &mut r),
    );
    params.insert("b2".into(), Tensor::zeros(&[1]));

    let forward = |g: &mut Graph,
                   nodes: &BTreeMap<String, crate::graph::NodeId>,
                   x: crate::graph::NodeId,
                   n: usize|
     -> Result<crate::graph::NodeId> {
        let h = g.matmul(x, nodes["w1"])?;
        let h = g.add_row(h, nodes["b1"])?;
        let h = g.elu(h)?;
        let raw = g.matmul(h, nodes["w2"])?;
        let raw = g.add_row(raw, nodes["b2"])?;
        g.reshape(raw, &[n])
    };

    let mut opt = crate::optim::Optimizer::rmsprop(cfg.lr);
    for _ in 0..cfg.epochs {
        let mut g = Graph::new();
        let mut nodes = BTreeMap::new();
        for (name, tensor) in &params {
            nodes.insert(name.clone(), g.param(tensor.clone())?);
        }
        let x = g.constant(x_train.clone())?;
        let raw = forward(&mut g, &nodes, x, n_train)?;
        // BCE with logits: y*softplus(-raw) + (1-y)*softplus(raw)
        let yp = g.constant(y_pos.clone())?;
        let yn = g.constant(y_neg.clone())?;
        let neg_raw = g.neg(raw)?;
        let sp_neg = g.softplus(neg_raw)?;
        let sp_pos = g.softplus(raw)?;
        let term_pos = g.mul(yp, sp_neg)?;
        let term_neg = g.mul(yn, sp_pos)?;
        let total = g.add(term_pos, term_neg)?;
        let loss = g.mean_all(total)?;
        g.backward(loss)?;
        let grads: BTreeMap<String, Tensor> = nodes
            .iter()
            .map(|(name, &id)| (name.clone(), g.grad(id)))
            .collect();
        opt.step(&mut params, &grads)?;
    }

    // held-out accuracy; predict target iff raw score >= 0
    let mut correct = 0usize;
    let mut total = 0usize;
    for (rows, label) in [(&src_test, 0.0), (&tgt_test, 1.0)] {
        if rows.is_empty() {
            continue;
        }
        let x = matrix(rows)?;
        let mut g = Graph::new();
        let mut nodes = BTreeMap::new();
        for (name, tensor) in &params {
            nodes.insert(name.clone(), g.constant(tensor.clone())?);
        }
        let xn = g.constant(x)?;
        let raw = forward(&mut g, &nodes, xn, rows.len())?;
        for &v in g.value(raw).data() {
            let pred = if v >= 0.0 { 1.0 } else { 0.0 };
            if pred == label {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}
