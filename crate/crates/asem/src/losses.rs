//! Training objectives: additive-margin softmax for the speaker task, the
//! four adversarial variants for the domain game, and the auxiliary speaker
//! classifier loss.
//!
//! Adversarial scores arrive pre-activation; each variant applies its own
//! output nonlinearity. Binary cross-entropy terms are built from softplus
//! (`-log sigmoid(x) = softplus(-x)`) so saturated discriminators cannot
//! produce non-finite losses.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AmSoftmaxConfig {
    /// Cosine scale factor s.
    pub scale: f64,
    /// Additive margin m in [0, 1).
    pub margin: f64,
}

impl Default for AmSoftmaxConfig {
    fn default() -> Self {
        AmSoftmaxConfig {
            scale: 30.0,
            margin: 0.6,
        }
    }
}

impl AmSoftmaxConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale <= 0.0 {
            return Err(Error::invalid("am_softmax", "scale must be positive"));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(Error::invalid("am_softmax", "margin must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GanKind {
    /// Standard GAN: BCE discriminator, inverted-label generator loss.
    Sgan,
    /// Least-squares GAN with identity output activation.
    Lsgan,
    /// Relativistic GAN over position-paired score differences.
    Relgan,
    /// Generator loss is the exact negation of the discriminator loss.
    Gradrev,
}

impl GanKind {
    pub fn name(&self) -> &'static str {
        match self {
            GanKind::Sgan => "sgan",
            GanKind::Lsgan => "lsgan",
            GanKind::Relgan => "relgan",
            GanKind::Gradrev => "gradrev",
        }
    }
}

impl std::str::FromStr for GanKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<GanKind> {
        match s {
            "sgan" => Ok(GanKind::Sgan),
            "lsgan" => Ok(GanKind::Lsgan),
            "relgan" => Ok(GanKind::Relgan),
            "gradrev" => Ok(GanKind::Gradrev),
            other => Err(Error::invalid(
                "gan_variant",
                format!("unknown variant `{other}` (expected sgan|lsgan|relgan|gradrev)"),
            )),
        }
    }
}

/// Adversarial objective selector; `aux` composes onto any kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GanVariant {
    pub kind: GanKind,
    pub aux: bool,
}

impl Default for GanVariant {
    fn default() -> Self {
        GanVariant {
            kind: GanKind::Sgan,
            aux: false,
        }
    }
}

impl GanVariant {
    pub fn label(&self) -> String {
        if self.aux {
            format!("{}+aux", self.kind.name())
        } else {
            self.kind.name().to_string()
        }
    }
}

/// One-hot [n, k] selector matrix for a label vector.
fn one_hot(n: usize, k: usize, labels: &[usize]) -> Tensor {
    let mut t = Tensor::zeros(&[n, k]);
    for (row, &label) in labels.iter().enumerate() {
        t.data_mut()[row * k + label] = 1.0;
    }
    t
}

fn check_labels(op: &'static str, n: usize, k: usize, labels: &[usize]) -> Result<()> {
    if k < 2 {
        return Err(Error::invalid(op, format!("need at least 2 classes, got {k}")));
    }
    if labels.len() != n {
        return Err(Error::invalid(
            op,
            format!("{n} rows but {} labels", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(op, format!("label {bad} out of range [0, {k})")));
    }
    Ok(())
}

/// Mean softmax cross-entropy of `logits` against `labels`, via
/// `logsumexp(row) - row[label]`.
fn cross_entropy(
    g: &mut Graph,
    op: &'static str,
    logits: NodeId,
    labels: &[usize],
) -> Result<NodeId> {
    let shape = g.value(logits).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::invalid(op, format!("expected [n, k] logits, got {shape:?}")));
    }
    let (n, k) = (shape[0], shape[1]);
    check_labels(op, n, k, labels)?;
    let mask = g.constant(one_hot(n, k, labels))?;
    let lse = g.logsumexp(logits, 1)?;
    let picked_terms = g.mul(logits, mask)?;
    let picked = g.sum_axis(picked_terms, 1)?;
    let per_row = g.sub(lse, picked)?;
    g.mean_all(per_row)
}

/// Additive-margin softmax over cosine logits:
/// mean of `-log( e^{s(cos_y - m)} / (e^{s(cos_y - m)} + sum_{j!=y} e^{s cos_j}) )`.
pub fn am_softmax_loss(
    g: &mut Graph,
    cosines: NodeId,
    labels: &[usize],
    cfg: &AmSoftmaxConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let shape = g.value(cosines).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::invalid(
            "am_softmax_loss",
            format!("expected [n, k] cosines, got {shape:?}"),
        ));
    }
    let (n, k) = (shape[0], shape[1]);
    check_labels("am_softmax_loss", n, k, labels)?;
    // s * cos - s*m on the label coordinate only
    let margins = one_hot(n, k, labels).map(|v| v * cfg.scale * cfg.margin);
    let margins = g.constant(margins)?;
    let scaled = g.scale(cosines, cfg.scale)?;
    let logits = g.sub(scaled, margins)?;
    cross_entropy(g, "am_softmax_loss", logits, labels)
}

fn check_raw(op: &'static str, g: &Graph, raw: NodeId) -> Result<usize> {
    let v = g.value(raw);
    if v.rank() != 1 {
        return Err(Error::invalid(
            op,
            format!("expected rank-1 raw scores, got shape {:?}", v.shape()),
        ));
    }
    if v.is_empty() {
        return Err(Error::invalid(op, "empty batch"));
    }
    Ok(v.len())
}

/// `-mean log sigmoid(x)` — one BCE term, stabilized through softplus.
fn bce_toward_one(g: &mut Graph, raw: NodeId) -> Result<NodeId> {
    let neg = g.neg(raw)?;
    let sp = g.softplus(neg)?;
    g.mean_all(sp)
}

/// `-mean log(1 - sigmoid(x))`.
fn bce_toward_zero(g: &mut Graph, raw: NodeId) -> Result<NodeId> {
    let sp = g.softplus(raw)?;
    g.mean_all(sp)
}

fn relativistic_pairs(
    g: &mut Graph,
    op: &'static str,
    lead: NodeId,
    trail: NodeId,
) -> Result<NodeId> {
    let (n_lead, n_trail) = (check_raw(op, g, lead)?, check_raw(op, g, trail)?);
    if n_lead != n_trail {
        return Err(Error::ShapeMismatch {
            op: format!("{op} (relativistic pairing)"),
            lhs: vec![n_lead],
            rhs: vec![n_trail],
        });
    }
    let diff = g.sub(lead, trail)?;
    bce_toward_one(g, diff)
}

/// Discriminator objective: push source scores toward the source label and
/// target scores toward the target label.
pub fn discriminator_loss(
    g: &mut Graph,
    raw_source: NodeId,
    raw_target: NodeId,
    variant: GanVariant,
) -> Result<NodeId> {
    check_raw("discriminator_loss", g, raw_source)?;
    check_raw("discriminator_loss", g, raw_target)?;
    match variant.kind {
        GanKind::Sgan | GanKind::Gradrev => {
            let real = bce_toward_one(g, raw_source)?;
            let fake = bce_toward_zero(g, raw_target)?;
            g.add(real, fake)
        }
        GanKind::Lsgan => {
            // 1/2 mean (D(s) - 1)^2 + 1/2 mean D(t)^2, identity output
            let s_shift = g.add_scalar(raw_source, -1.0)?;
            let s_sq = g.square(s_shift)?;
            let s_term = g.mean_all(s_sq)?;
            let t_sq = g.square(raw_target)?;
            let t_term = g.mean_all(t_sq)?;
            let sum = g.add(s_term, t_term)?;
            g.scale(sum, 0.5)
        }
        GanKind::Relgan => relativistic_pairs(g, "discriminator_loss", raw_source, raw_target),
    }
}

/// Generator objective for the embedding function: fool the discriminator.
/// Argument order follows the direction of the push: the target batch comes
/// first, the source batch second.
pub fn generator_loss(
    g: &mut Graph,
    raw_target: NodeId,
    raw_source: NodeId,
    variant: GanVariant,
) -> Result<NodeId> {
    check_raw("generator_loss", g, raw_target)?;
    match variant.kind {
        GanKind::Sgan => bce_toward_one(g, raw_target),
        GanKind::Lsgan => {
            let shifted = g.add_scalar(raw_target, -1.0)?;
            let sq = g.square(shifted)?;
            let mean = g.mean_all(sq)?;
            g.scale(mean, 0.5)
        }
        GanKind::Relgan => relativistic_pairs(g, "generator_loss", raw_target, raw_source),
        GanKind::Gradrev => {
            check_raw("generator_loss", g, raw_source)?;
            let disc = discriminator_loss(
                g,
                raw_source,
                raw_target,
                GanVariant {
                    kind: GanKind::Sgan,
                    aux: variant.aux,
                },
            )?;
            g.neg(disc)
        }
    }
}

/// Auxiliary speaker classifier loss: mean cross-entropy of the
/// discriminator's aux head over true source-speaker labels. Added to both
/// the discriminator and the generator objectives when aux is enabled.
pub fn aux_classifier_loss(
    g: &mut Graph,
    aux_logits: Option<NodeId>,
    labels: &[usize],
) -> Result<NodeId> {
    let logits = aux_logits.ok_or(Error::AuxHeadAbsent)?;
    cross_entropy(g, "aux_classifier_loss", logits, labels)
}
