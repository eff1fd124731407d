//! The three players of the adversarial game: embedding extractor E
//! (generator), cosine classifier head C, and domain discriminator D.
//!
//! All forwards are expressed as graph builders over a caller-owned tape so
//! the trainer can differentiate any loss through any subset of players.
//! The frame encoder is a per-frame feedforward stack with residual blocks
//! (`y = x + fc2(elu(fc1(x)))`), followed by attention-weighted mean/std
//! pooling, two fully connected layers and a final linear embedding layer
//! ("fc3"). BatchNorm sits on the encoder and post-pool layers only.

use crate::error::{Error, Result};
use crate::fileio::{write_f32s, write_string, write_u32, TrackedReader};
use crate::graph::{Graph, NodeId};
use crate::rng;
use crate::synthdata::Domain;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Epsilon inside the pooled-std sqrt.
pub const POOL_VAR_EPS: f64 = 1e-6;

const CHECKPOINT_MAGIC: &[u8; 4] = b"ASEM";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Input feature dimension per frame.
    pub frame_dim: usize,
    /// Hidden widths of the per-frame encoder stack.
    pub encoder_hidden: Vec<usize>,
    /// Residual feedforward blocks appended to the encoder.
    pub residual_blocks: usize,
    /// The two fully connected widths after pooling.
    pub post_pool_widths: [usize; 2],
    /// Final embedding width ("fc3").
    pub embedding_dim: usize,
    /// Number of source speakers K; 0 means "derive from the corpus".
    pub num_speakers: usize,
    /// Discriminator hidden widths.
    pub disc_widths: Vec<usize>,
    /// Width of the attention scorer MLP.
    pub attention_hidden: usize,
    pub use_batchnorm: bool,
    /// Auxiliary speaker classifier on the discriminator trunk.
    pub aux_head: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            frame_dim: 8,
            encoder_hidden: vec![64, 64],
            residual_blocks: 2,
            post_pool_widths: [512, 512],
            embedding_dim: 64,
            num_speakers: 0,
            disc_widths: vec![256, 256],
            attention_hidden: 64,
            use_batchnorm: true,
            aux_head: false,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = self
            .encoder_hidden
            .iter()
            .chain(self.disc_widths.iter())
            .chain(self.post_pool_widths.iter())
            .chain([&self.frame_dim, &self.attention_hidden]);
        for &w in widths {
            if w < 1 {
                return Err(Error::invalid("network_config", "all widths must be >= 1"));
            }
        }
        if self.embedding_dim < 2 {
            return Err(Error::invalid("network_config", "embedding_dim must be >= 2"));
        }
        if self.num_speakers < 2 {
            return Err(Error::invalid("network_config", "num_speakers must be >= 2"));
        }
        Ok(())
    }

    /// Encoder output width per frame.
    fn encoder_out(&self) -> usize {
        *self.encoder_hidden.last().unwrap_or(&self.frame_dim)
    }
}

/// Running mean/variance of one BatchNorm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Tensor,
    pub var: Tensor,
}

/// All parameters of the three subnetworks, keyed `e.*`, `c.*`, `d.*`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: NetworkConfig,
    pub params: BTreeMap<String, Tensor>,
    pub running_stats: BTreeMap<String, BnStats>,
}

/// A mini-batch of equal-length frame sequences.
#[derive(Debug, Clone)]
pub struct SpeakerBatch {
    /// `[batch, time, frame_dim]`
    pub frames: Tensor,
    /// Class indices; present but never read for target-domain batches.
    pub speaker_labels: Vec<usize>,
    pub domain: Domain,
}

impl ModelState {
    pub fn init(config: NetworkConfig, seed: u64) -> Result<ModelState> {
        config.validate()?;
        let mut r = rng::rng_from(seed, "model-init", 0);
        let mut params = BTreeMap::new();
        let mut running_stats = BTreeMap::new();

        let linear = |params: &mut BTreeMap<String, Tensor>,
                          name: &str,
                          fan_in: usize,
                          fan_out: usize,
                          r: &mut rand_chacha::ChaCha8Rng| {
            let std = (2.0 / fan_in as f64).sqrt();
            params.insert(format!("{name}.w"), Tensor::randn(&[fan_in, fan_out], std, r));
            params.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        };
        let bn = |params: &mut BTreeMap<String, Tensor>,
                      stats: &mut BTreeMap<String, BnStats>,
                      layer: &str,
                      dim: usize| {
            params.insert(format!("{layer}.bn.g"), Tensor::filled(&[dim], 1.0));
            params.insert(format!("{layer}.bn.b"), Tensor::zeros(&[dim]));
            stats.insert(
                layer.to_string(),
                BnStats {
                    mean: Tensor::zeros(&[dim]),
                    var: Tensor::filled(&[dim], 1.0),
                },
            );
        };

        let mut dim = config.frame_dim;
        for (i, &w) in config.encoder_hidden.iter().enumerate() {
            linear(&mut params, &format!("e.enc{i}"), dim, w, &mut r);
            if config.use_batchnorm {
                bn(&mut params, &mut running_stats, &format!("e.enc{i}"), w);
            }
            dim = w;
        }
        for i in 0..config.residual_blocks {
            linear(&mut params, &format!("e.res{i}.fc1"), dim, dim, &mut r);
            linear(&mut params, &format!("e.res{i}.fc2"), dim, dim, &mut r);
        }
        linear(&mut params, "e.attn.fc1", dim, config.attention_hidden, &mut r);
        linear(&mut params, "e.attn.fc2", config.attention_hidden, 1, &mut r);

        let mut post_dim = 2 * dim;
        for (i, &w) in config.post_pool_widths.iter().enumerate() {
            linear(&mut params, &format!("e.post{i}"), post_dim, w, &mut r);
            if config.use_batchnorm {
                bn(&mut params, &mut running_stats, &format!("e.post{i}"), w);
            }
            post_dim = w;
        }
        linear(&mut params, "e.emb", post_dim, config.embedding_dim, &mut r);

        let std = (1.0 / config.embedding_dim as f64).sqrt();
        params.insert(
            "c.w".to_string(),
            Tensor::randn(&[config.embedding_dim, config.num_speakers], std, &mut r),
        );

        let mut ddim = config.embedding_dim;
        for (i, &w) in config.disc_widths.iter().enumerate() {
            linear(&mut params, &format!("d.fc{i}"), ddim, w, &mut r);
            ddim = w;
        }
        linear(&mut params, "d.out", ddim, 1, &mut r);
        if config.aux_head {
            linear(&mut params, "d.aux", ddim, config.num_speakers, &mut r);
        }

        Ok(ModelState {
            config,
            params,
            running_stats,
        })
    }

    /// Insert every parameter into a graph as a differentiable leaf.
    pub fn insert_params(&self, g: &mut Graph) -> Result<BTreeMap<String, NodeId>> {
        let mut nodes = BTreeMap::new();
        for (name, tensor) in &self.params {
            nodes.insert(name.clone(), g.param(tensor.clone())?);
        }
        Ok(nodes)
    }

    /// Gradients of the last backward pass, keyed by parameter name.
    pub fn collect_grads(
        &self,
        g: &Graph,
        nodes: &BTreeMap<String, NodeId>,
    ) -> BTreeMap<String, Tensor> {
        nodes
            .iter()
            .map(|(name, &id)| (name.clone(), g.grad(id)))
            .collect()
    }

    /// Blend fresh batch statistics into the running BN statistics.
    pub fn update_running_stats(&mut self, batch_stats: &[(String, Tensor, Tensor)]) {
        for (layer, mean, var) in batch_stats {
            if let Some(stats) = self.running_stats.get_mut(layer) {
                for (r, &b) in stats.mean.data_mut().iter_mut().zip(mean.data()) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
                for (r, &b) in stats.var.data_mut().iter_mut().zip(var.data()) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
        }
    }

    pub fn param_names_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.params
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect()
    }

    // ----- checkpoint format -----
    //
    // magic "ASEM", version u32, config (u32-length-prefixed UTF-8 TOML),
    // record count u32, then per record in sorted name order:
    // name (u32 + bytes), rank u32, extents u32*, payload f32 LE.

    fn flat_tensors(&self) -> BTreeMap<String, &Tensor> {
        let mut all: BTreeMap<String, &Tensor> = BTreeMap::new();
        for (name, t) in &self.params {
            all.insert(name.clone(), t);
        }
        for (layer, stats) in &self.running_stats {
            all.insert(format!("rs.{layer}.mean"), &stats.mean);
            all.insert(format!("rs.{layer}.var"), &stats.var);
        }
        all
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ctx = || format!("writing {}", path.display());
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        write_u32(&mut out, CHECKPOINT_VERSION).map_err(|e| Error::io(ctx(), e))?;
        let config_text = toml::to_string(&self.config)
            .map_err(|e| Error::Config(format!("serializing network config: {e}")))?;
        write_string(&mut out, &config_text).map_err(|e| Error::io(ctx(), e))?;
        let tensors = self.flat_tensors();
        write_u32(&mut out, tensors.len() as u32).map_err(|e| Error::io(ctx(), e))?;
        for (name, tensor) in tensors {
            write_string(&mut out, &name).map_err(|e| Error::io(ctx(), e))?;
            write_u32(&mut out, tensor.rank() as u32).map_err(|e| Error::io(ctx(), e))?;
            for &extent in tensor.shape() {
                write_u32(&mut out, extent as u32).map_err(|e| Error::io(ctx(), e))?;
            }
            write_f32s(&mut out, tensor.data()).map_err(|e| Error::io(ctx(), e))?;
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(ctx(), e))?;
        file.write_all(&out).map_err(|e| Error::io(ctx(), e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ModelState> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        let mut r = TrackedReader::new(std::io::BufReader::new(file), path.display().to_string());

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(r.malformed("bad magic, expected ASEM"));
        }
        let version = r.read_u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.malformed(format!("unsupported version {version}")));
        }
        let config_text = r.read_string("config block")?;
        let config: NetworkConfig = toml::from_str(&config_text)
            .map_err(|e| Error::Config(format!("checkpoint config: {e}")))?;

        let count = r.read_u32()? as usize;
        let mut params = BTreeMap::new();
        let mut running: BTreeMap<String, (Option<Tensor>, Option<Tensor>)> = BTreeMap::new();
        for _ in 0..count {
            let name = r.read_string("tensor name")?;
            let rank = r.read_u32()? as usize;
            if rank > 8 {
                return Err(r.malformed(format!("implausible rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.read_u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let data: Vec<f64> = r.read_f32s(n)?.into_iter().map(f64::from).collect();
            let tensor = Tensor::from_vec(&shape, data)
                .map_err(|_| r.malformed(format!("non-finite payload in `{name}`")))?;
            if let Some(rest) = name.strip_prefix("rs.") {
                if let Some(layer) = rest.strip_suffix(".mean") {
                    running.entry(layer.to_string()).or_default().0 = Some(tensor);
                } else if let Some(layer) = rest.strip_suffix(".var") {
                    running.entry(layer.to_string()).or_default().1 = Some(tensor);
                } else {
                    return Err(r.malformed(format!("unrecognized running-stat record `{name}`")));
                }
            } else {
                params.insert(name, tensor);
            }
        }
        r.expect_eof()?;

        let mut running_stats = BTreeMap::new();
        for (layer, (mean, var)) in running {
            match (mean, var) {
                (Some(mean), Some(var)) => {
                    running_stats.insert(layer, BnStats { mean, var });
                }
                _ => {
                    return Err(Error::MalformedFile {
                        file: path.display().to_string(),
                        offset: 0,
                        msg: format!("incomplete running stats for layer `{layer}`"),
                    })
                }
            }
        }
        Ok(ModelState {
            config,
            params,
            running_stats,
        })
    }
}

fn param(nodes: &BTreeMap<String, NodeId>, name: &str) -> Result<NodeId> {
    nodes
        .get(name)
        .copied()
        .ok_or_else(|| Error::invalid("network", format!("missing parameter node `{name}`")))
}

fn fc(
    g: &mut Graph,
    nodes: &BTreeMap<String, NodeId>,
    name: &str,
    x: NodeId,
) -> Result<NodeId> {
    let h = g.matmul(x, param(nodes, &format!("{name}.w"))?)?;
    g.add_row(h, param(nodes, &format!("{name}.b"))?)
}

pub struct AttentionParams {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// Attention-weighted mean and standard deviation over time.
///
/// Scores come from a small MLP (`fc -> elu -> fc(1)`) applied per frame,
/// softmaxed over the time axis. Output is `concat(mu, sigma)` of shape
/// `[batch, 2d]` with `sigma = sqrt(weighted_m2 - mu^2 + 1e-6)`.
pub fn attentive_stats_pool(
    g: &mut Graph,
    frames: NodeId,
    attn: &AttentionParams,
) -> Result<NodeId> {
    let shape = g.value(frames).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::invalid(
            "attentive_stats_pool",
            format!("expected [batch, time, d], got {shape:?}"),
        ));
    }
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    if t < 1 {
        return Err(Error::invalid("attentive_stats_pool", "time axis is empty"));
    }
    let flat = g.reshape(frames, &[b * t, d])?;
    let s1 = g.matmul(flat, attn.w1)?;
    let s1 = g.add_row(s1, attn.b1)?;
    let s1 = g.elu(s1)?;
    let s2 = g.matmul(s1, attn.w2)?;
    let s2 = g.add_row(s2, attn.b2)?;
    let scores = g.reshape(s2, &[b, t])?;
    let attn_weights = g.softmax(scores, 1)?;

    let weighted = g.scale_slices(frames, attn_weights)?;
    let mu = g.sum_axis(weighted, 1)?;
    let squared = g.square(frames)?;
    let weighted_sq = g.scale_slices(squared, attn_weights)?;
    let m2 = g.sum_axis(weighted_sq, 1)?;
    let mu_sq = g.square(mu)?;
    let var = g.sub(m2, mu_sq)?;
    let var = g.add_scalar(var, POOL_VAR_EPS)?;
    let sigma = g.sqrt(var)?;
    g.concat(&[mu, sigma], 1)
}

pub struct EncodeOutput {
    /// `[batch, embedding_dim]`, not L2-normalized.
    pub embeddings: NodeId,
    /// Train-mode batch statistics per BN layer, for running-stat updates.
    pub batch_stats: Vec<(String, NodeId, NodeId)>,
}

struct BnContext<'a> {
    model: &'a ModelState,
    mode: Mode,
    collected: Vec<(String, NodeId, NodeId)>,
}

impl<'a> BnContext<'a> {
    fn apply(
        &mut self,
        g: &mut Graph,
        nodes: &BTreeMap<String, NodeId>,
        layer: &str,
        x: NodeId,
    ) -> Result<NodeId> {
        if !self.model.config.use_batchnorm {
            return Ok(x);
        }
        let gamma = param(nodes, &format!("{layer}.bn.g"))?;
        let beta = param(nodes, &format!("{layer}.bn.b"))?;
        let (mean, var) = match self.mode {
            Mode::Train => {
                let mean = g.mean_axis(x, 0)?;
                let centered = g.sub_row(x, mean)?;
                let sq = g.square(centered)?;
                let var = g.mean_axis(sq, 0)?;
                self.collected.push((layer.to_string(), mean, var));
                (mean, var)
            }
            Mode::Eval => {
                let stats = self.model.running_stats.get(layer).ok_or_else(|| {
                    Error::invalid("batch_norm", format!("missing running stats for `{layer}`"))
                })?;
                let mean = g.constant(stats.mean.clone())?;
                let var = g.constant(stats.var.clone())?;
                (mean, var)
            }
        };
        let centered = g.sub_row(x, mean)?;
        let var_eps = g.add_scalar(var, BN_EPS)?;
        let std = g.sqrt(var_eps)?;
        let inv = g.recip(std)?;
        let normalized = g.mul_row(centered, inv)?;
        let scaled = g.mul_row(normalized, gamma)?;
        g.add_row(scaled, beta)
    }
}

/// Forward pass of the embedding function E.
pub fn encode(
    g: &mut Graph,
    model: &ModelState,
    nodes: &BTreeMap<String, NodeId>,
    frames: NodeId,
    mode: Mode,
) -> Result<EncodeOutput> {
    let cfg = &model.config;
    let shape = g.value(frames).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::invalid(
            "encode",
            format!("expected [batch, time, frame_dim], got {shape:?}"),
        ));
    }
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    if d != cfg.frame_dim {
        return Err(Error::ShapeMismatch {
            op: "encode".to_string(),
            lhs: vec![cfg.frame_dim],
            rhs: vec![d],
        });
    }
    if t == 0 {
        return Err(Error::invalid("encode", "recording has zero frames"));
    }

    let mut bn = BnContext {
        model,
        mode,
        collected: Vec::new(),
    };

    let mut x = g.reshape(frames, &[b * t, d])?;
    for i in 0..cfg.encoder_hidden.len() {
        let name = format!("e.enc{i}");
        x = fc(g, nodes, &name, x)?;
        x = bn.apply(g, nodes, &name, x)?;
        x = g.elu(x)?;
    }
    for i in 0..cfg.residual_blocks {
        let h = fc(g, nodes, &format!("e.res{i}.fc1"), x)?;
        let h = g.elu(h)?;
        let h = fc(g, nodes, &format!("e.res{i}.fc2"), h)?;
        x = g.add(x, h)?;
    }

    let h = cfg.encoder_out();
    let frames3 = g.reshape(x, &[b, t, h])?;
    let attn = AttentionParams {
        w1: param(nodes, "e.attn.fc1.w")?,
        b1: param(nodes, "e.attn.fc1.b")?,
        w2: param(nodes, "e.attn.fc2.w")?,
        b2: param(nodes, "e.attn.fc2.b")?,
    };
    let mut x = attentive_stats_pool(g, frames3, &attn)?;

    for i in 0..cfg.post_pool_widths.len() {
        let name = format!("e.post{i}");
        x = fc(g, nodes, &name, x)?;
        x = bn.apply(g, nodes, &name, x)?;
        x = g.elu(x)?;
    }
    let embeddings = fc(g, nodes, "e.emb", x)?;
    Ok(EncodeOutput {
        embeddings,
        batch_stats: bn.collected,
    })
}

/// Cosine logits of the classifier head: `cos(theta_j)` per class, in [-1, 1].
/// Scale and margin are applied by the loss, not here.
pub fn classify(g: &mut Graph, embeddings: NodeId, weight: NodeId) -> Result<NodeId> {
    let emb = g.value(embeddings);
    let w = g.value(weight);
    if emb.rank() != 2 || w.rank() != 2 || emb.shape()[1] != w.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "classify".to_string(),
            lhs: emb.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let (n, d) = (emb.shape()[0], emb.shape()[1]);
    let k = w.shape()[1];
    for row in 0..n {
        let norm: f64 = emb.data()[row * d..(row + 1) * d]
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if norm < 1e-12 {
            return Err(Error::ZeroNorm {
                what: format!("embedding row {row}"),
            });
        }
    }
    for col in 0..k {
        let norm: f64 = (0..d).map(|i| w.data()[i * k + col].powi(2)).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::ZeroNorm {
                what: format!("weight column {col}"),
            });
        }
    }
    let nf = g.l2_normalize(embeddings, 1)?;
    let nw = g.l2_normalize(weight, 0)?;
    g.matmul(nf, nw)
}

pub struct DiscOutput {
    /// Pre-activation domain score, `[batch]`.
    pub raw: NodeId,
    /// `[batch, K]` when the aux head is enabled.
    pub aux_logits: Option<NodeId>,
}

/// Forward pass of the domain discriminator D.
pub fn discriminate(
    g: &mut Graph,
    model: &ModelState,
    nodes: &BTreeMap<String, NodeId>,
    embeddings: NodeId,
) -> Result<DiscOutput> {
    let cfg = &model.config;
    let emb = g.value(embeddings);
    if emb.rank() != 2 || emb.shape()[1] != cfg.embedding_dim {
        return Err(Error::ShapeMismatch {
            op: "discriminate".to_string(),
            lhs: vec![cfg.embedding_dim],
            rhs: emb.shape().to_vec(),
        });
    }
    let n = emb.shape()[0];
    let mut x = embeddings;
    for i in 0..cfg.disc_widths.len() {
        x = fc(g, nodes, &format!("d.fc{i}"), x)?;
        x = g.elu(x)?;
    }
    let raw2 = fc(g, nodes, "d.out", x)?;
    let raw = g.reshape(raw2, &[n])?;
    let aux_logits = if cfg.aux_head {
        Some(fc(g, nodes, "d.aux", x)?)
    } else {
        None
    };
    Ok(DiscOutput { raw, aux_logits })
}

/// Convenience eval-mode embedding of a full batch, returning plain tensors.
pub fn embed_batch(model: &ModelState, frames: &Tensor, mode: Mode) -> Result<Tensor> {
    let mut g = Graph::new();
    let nodes = model.insert_params(&mut g)?;
    let input = g.constant(frames.clone())?;
    let out = encode(&mut g, model, &nodes, input, mode)?;
    Ok(g.value(out.embeddings).clone())
}
