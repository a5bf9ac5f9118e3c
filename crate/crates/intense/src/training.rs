//! End-to-end optimization: encoders, projections, normalization, fusion
//! head, mini-batch training with adaptive moments, validation-based model
//! selection, and evaluation with running statistics.

use std::collections::BTreeMap;
use std::path::Path;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::{self, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::fusion::{
    self, interaction_project, FusionConfig, FusionHead, InteractionSet, RelevanceReport,
};
use crate::normalization::{
    self, centering_coefficients, iterbn_normalize_with, vbn_apply, vbn_graph, MomentCache,
    VbnStats,
};
use crate::synthdata::{SequenceSample, Split};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Normalization applied to representations before fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    None,
    Vbn,
    IterBn,
    Naive,
}

impl std::str::FromStr for Normalization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Normalization::None),
            "vbn" => Ok(Normalization::Vbn),
            "iterbn" => Ok(Normalization::IterBn),
            "naive" => Ok(Normalization::Naive),
            other => Err(Error::InvalidConfig(format!(
                "unknown normalization {other:?} (expected none|vbn|iterbn|naive)"
            ))),
        }
    }
}

/// Training hyperparameters. Defaults follow the synthetic-experiment
/// settings: lr 1e-3 decayed by 0.9 per epoch, 20 epochs, batch 32,
/// weight decay 0.01 on encoder-side parameters, block regularization
/// 0.05, p = 1, latent width 8.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub scheduler_gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub lambda_reg: f64,
    pub p: f64,
    pub seed: u64,
    pub normalization: Normalization,
    pub latent_dim: usize,
    pub tf_latent_dim: usize,
    pub kernel_width: usize,
    pub interaction_sets: Vec<InteractionSet>,
    pub epsilon: f64,
    /// Decay of the running statistics used at evaluation time.
    pub running_decay: f64,
    /// Fraction of training steps over which the block-regularization
    /// strength ramps linearly from zero to `lambda_reg`. The ramp turns
    /// the run into a regularization-path sweep: encoders learn while all
    /// blocks are alive, then blocks drop out weakest-first and the
    /// validation minimum lands where noise blocks are gone but weak
    /// informative blocks still live.
    pub lambda_warmup_frac: f64,
}

impl TrainConfig {
    /// Singleton sets over `m` modalities (the additive fusion model).
    pub fn mnl(m: usize, seed: u64) -> Self {
        let sets = (1..=m).map(InteractionSet::singleton).collect();
        TrainConfig::with_sets(sets, Normalization::Vbn, seed)
    }

    /// Singletons plus the given interactions.
    pub fn intense(m: usize, interactions: Vec<InteractionSet>, seed: u64) -> Self {
        let mut sets: Vec<InteractionSet> = (1..=m).map(InteractionSet::singleton).collect();
        sets.extend(interactions);
        TrainConfig::with_sets(sets, Normalization::IterBn, seed)
    }

    pub fn with_sets(sets: Vec<InteractionSet>, normalization: Normalization, seed: u64) -> Self {
        TrainConfig {
            lr: 1e-3,
            scheduler_gamma: 0.9,
            epochs: 20,
            batch_size: 32,
            weight_decay: 0.01,
            lambda_reg: 0.05,
            p: 1.0,
            seed,
            normalization,
            latent_dim: 8,
            tf_latent_dim: 8,
            kernel_width: 5,
            interaction_sets: sets,
            epsilon: 1e-8,
            running_decay: 0.9,
            lambda_warmup_frac: 1.0,
        }
    }

    pub fn q(&self) -> f64 {
        2.0 * self.p / (self.p + 1.0)
    }

    /// Stable hash of the full configuration, recorded in checkpoints.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        let mut hex = String::with_capacity(16);
        for b in &digest[..8] {
            hex.push_str(&format!("{b:02x}"));
        }
        hex
    }
}

/// Running statistics of one representation, tracked as the element-wise
/// mean and the squared scale.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunningVbn {
    pub mu: Tensor,
    pub sigma_sq: f64,
}

impl RunningVbn {
    fn new(shape: &[usize]) -> Self {
        RunningVbn {
            mu: Tensor::zeros(shape),
            sigma_sq: 1.0,
        }
    }

    fn update(&mut self, mu: &Tensor, sigma_sq: f64, decay: f64) {
        self.mu = self.mu.scale(decay).add(&mu.scale(1.0 - decay));
        self.sigma_sq = decay * self.sigma_sq + (1.0 - decay) * sigma_sq;
    }

    pub fn stats(&self) -> VbnStats {
        VbnStats {
            mu: self.mu.clone(),
            sigma: self.sigma_sq.sqrt(),
        }
    }
}

/// Running state of one interaction set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunningSet {
    /// Moment averages for the generalized centering.
    pub moments: Option<MomentCache>,
    /// Mean squared Frobenius norm of the centered tensor.
    pub scale_sq: f64,
    /// Per-stage statistics of the iterated-pairwise construction.
    pub stages: Vec<RunningVbn>,
}

/// All running statistics frozen at evaluation time.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunningStats {
    pub vbn: Vec<RunningVbn>,
    pub proj_vbn: Vec<RunningVbn>,
    pub sets: BTreeMap<InteractionSet, RunningSet>,
    pub decay: f64,
}

/// A trainable multimodal classifier.
#[derive(Clone, Debug)]
pub struct Model {
    pub n_modalities: usize,
    pub encoder_config: EncoderConfig,
    pub fusion: FusionConfig,
    pub normalization: Normalization,
    pub epsilon: f64,
    pub encoders: Vec<EncoderParams>,
    /// Per-modality projection `[tf_latent_dim, latent_dim]`; empty when no
    /// interaction set has order above one.
    pub projections: Vec<Tensor>,
    pub head: FusionHead,
    pub running: RunningStats,
}

/// Builds a freshly initialized model for the configuration.
pub fn init_model(n_modalities: usize, config: &TrainConfig) -> Result<Model> {
    let fusion = FusionConfig::new(
        config.interaction_sets.clone(),
        config.p,
        config.lambda_reg,
        config.tf_latent_dim,
    )?;
    if fusion.n_modalities() > n_modalities {
        return Err(Error::InvalidConfig(format!(
            "interaction sets reference modality {}, dataset has {}",
            fusion.n_modalities(),
            n_modalities
        )));
    }
    let encoder_config = EncoderConfig {
        kernel_width: config.kernel_width,
        channels: config.latent_dim,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let encoders: Vec<EncoderParams> = (0..n_modalities)
        .map(|_| encoders::init_params(&encoder_config, &mut rng))
        .collect();
    let projections: Vec<Tensor> = if fusion.has_interactions() {
        let bound = 1.0 / (config.latent_dim as f64).sqrt();
        (0..n_modalities)
            .map(|_| {
                let data: Vec<f64> = (0..config.tf_latent_dim * config.latent_dim)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect();
                Tensor::new(vec![config.tf_latent_dim, config.latent_dim], data)
                    .expect("projection shape")
            })
            .collect()
    } else {
        Vec::new()
    };
    let blocks: Vec<(InteractionSet, Tensor)> = fusion
        .interaction_sets
        .iter()
        .map(|set| {
            let len = if set.order() == 1 {
                config.latent_dim
            } else {
                config.tf_latent_dim.pow(set.order() as u32)
            };
            let bound = 1.0 / (len as f64).sqrt();
            let data: Vec<f64> = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
            (set.clone(), Tensor::vector(&data))
        })
        .collect();
    let head = FusionHead::new(blocks, 0.0);

    let mut sets = BTreeMap::new();
    for set in &fusion.interaction_sets {
        if set.order() < 2 {
            continue;
        }
        let dims = vec![config.tf_latent_dim; set.order()];
        let running = match config.normalization {
            Normalization::IterBn => RunningSet {
                moments: Some(MomentCache::new_running(
                    set.clone(),
                    &dims,
                    config.running_decay,
                )?),
                scale_sq: 1.0,
                stages: Vec::new(),
            },
            Normalization::Naive => RunningSet {
                moments: None,
                scale_sq: 1.0,
                stages: (2..=set.order())
                    .map(|k| RunningVbn::new(&vec![config.tf_latent_dim; k]))
                    .collect(),
            },
            Normalization::Vbn => RunningSet {
                moments: None,
                scale_sq: 1.0,
                stages: vec![RunningVbn::new(&dims)],
            },
            Normalization::None => RunningSet {
                moments: None,
                scale_sq: 1.0,
                stages: Vec::new(),
            },
        };
        sets.insert(set.clone(), running);
    }
    let running = RunningStats {
        vbn: (0..n_modalities)
            .map(|_| RunningVbn::new(&[config.latent_dim]))
            .collect(),
        proj_vbn: if fusion.has_interactions() {
            (0..n_modalities)
                .map(|_| RunningVbn::new(&[config.tf_latent_dim]))
                .collect()
        } else {
            Vec::new()
        },
        sets,
        decay: config.running_decay,
    };

    Ok(Model {
        n_modalities,
        encoder_config,
        fusion,
        normalization: config.normalization,
        epsilon: config.epsilon,
        encoders,
        projections,
        head,
        running,
    })
}

/// Parameter order used by flattening, gradients and the optimizer:
/// encoder weights and bias per modality, projections, head blocks in
/// canonical set order, head bias.
fn param_names(model: &Model) -> Vec<String> {
    let mut names = Vec::new();
    for m in 0..model.n_modalities {
        names.push(format!("enc{m}.w"));
        names.push(format!("enc{m}.b"));
    }
    for m in 0..model.projections.len() {
        names.push(format!("proj{m}"));
    }
    for (set, _) in model.head.blocks() {
        names.push(format!("head.{set}"));
    }
    names.push("head.bias".into());
    names
}

impl Model {
    /// All parameters flattened in the canonical order.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        for enc in &self.encoders {
            flat.extend_from_slice(enc.weights.data());
            flat.extend_from_slice(enc.bias.data());
        }
        for p in &self.projections {
            flat.extend_from_slice(p.data());
        }
        for (_, w) in self.head.blocks() {
            flat.extend_from_slice(w.data());
        }
        flat.push(self.head.bias);
        flat
    }

    /// Writes back parameters flattened by `flatten_params`.
    pub fn set_params(&mut self, flat: &[f64]) {
        let mut off = 0;
        let mut take = |len: usize| {
            let slice = &flat[off..off + len];
            off += len;
            slice
        };
        for enc in &mut self.encoders {
            let len = enc.weights.len();
            enc.weights.data_mut().copy_from_slice(take(len));
            let len = enc.bias.len();
            enc.bias.data_mut().copy_from_slice(take(len));
        }
        for p in &mut self.projections {
            let len = p.len();
            p.data_mut().copy_from_slice(take(len));
        }
        for (_, w) in self.head.blocks_mut() {
            let len = w.len();
            w.data_mut().copy_from_slice(take(len));
        }
        self.head.bias = take(1)[0];
        assert_eq!(off, flat.len(), "parameter length mismatch");
    }
}

/// Letter-index view of a batch, one entry per modality.
fn batch_sequences(samples: &[&SequenceSample], n_modalities: usize) -> Result<Vec<Rc<Vec<Vec<u8>>>>> {
    let mut per_modality = vec![Vec::with_capacity(samples.len()); n_modalities];
    for s in samples {
        if s.mods.len() < n_modalities {
            return Err(Error::Contract(format!(
                "sample has {} modalities, model expects {}",
                s.mods.len(),
                n_modalities
            )));
        }
        for (m, slot) in per_modality.iter_mut().enumerate() {
            slot.push(encoders::sequence_indices(&s.mods[m])?);
        }
    }
    Ok(per_modality.into_iter().map(Rc::new).collect())
}

/// Node ids of the training graph whose values feed running statistics.
struct GraphStats {
    raw_vbn: Vec<Option<(NodeId, NodeId)>>,
    proj_vbn: Vec<Option<(NodeId, NodeId)>>,
    sets: Vec<(InteractionSet, SetGraphStats)>,
}

enum SetGraphStats {
    IterBn {
        moments: Vec<(InteractionSet, NodeId)>,
        scale_sq: NodeId,
    },
    Stages(Vec<(NodeId, NodeId)>),
}

struct BatchGraph {
    loss: NodeId,
    params: Vec<NodeId>,
    stats: GraphStats,
}

/// Builds the forward graph of one batch: encoders, normalization per the
/// configured mode, fusion logits, mean logistic loss and the block-norm
/// penalty. With `include_weight_decay` the encoder-side squared-norm term
/// enters the graph too (the full objective; training instead applies that
/// decay decoupled in the optimizer).
fn build_batch_graph(
    tape: &mut Tape,
    model: &Model,
    samples: &[&SequenceSample],
    include_weight_decay: bool,
    weight_decay: f64,
    lambda_scale: f64,
) -> Result<BatchGraph> {
    if samples.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let m = model.n_modalities;
    let seqs = batch_sequences(samples, m)?;
    let labels: Rc<Vec<f64>> = Rc::new(samples.iter().map(|s| s.label_f64()).collect());
    let eps = model.epsilon;
    let needs_batch_stats = model.normalization != Normalization::None;
    if needs_batch_stats && samples.len() < 2 {
        return Err(Error::BatchTooSmall(samples.len()));
    }

    // parameters, in the canonical order
    let mut params = Vec::new();
    let mut enc_nodes = Vec::with_capacity(m);
    for enc in &model.encoders {
        let w = tape.leaf(enc.weights.clone());
        let b = tape.leaf(enc.bias.clone());
        params.push(w);
        params.push(b);
        enc_nodes.push((w, b));
    }
    let mut proj_nodes = Vec::new();
    for p in &model.projections {
        let node = tape.leaf(p.clone());
        params.push(node);
        proj_nodes.push(node);
    }
    let mut head_nodes = Vec::new();
    for (_, w) in model.head.blocks() {
        let node = tape.leaf(w.clone());
        params.push(node);
        head_nodes.push(node);
    }
    let bias_node = tape.leaf(Tensor::scalar(model.head.bias));
    params.push(bias_node);

    // raw representations
    let mut raw = Vec::with_capacity(m);
    for (idx, &(w, b)) in enc_nodes.iter().enumerate() {
        raw.push(encoders::encode_batch_graph(
            tape,
            seqs[idx].clone(),
            w,
            b,
        )?);
    }

    let mut stats = GraphStats {
        raw_vbn: vec![None; m],
        proj_vbn: vec![None; m],
        sets: Vec::new(),
    };

    // singleton representations
    let mut singleton = vec![None; m];
    for set in &model.fusion.interaction_sets {
        if set.order() != 1 {
            continue;
        }
        let idx = set.indices()[0] - 1;
        let rep = match model.normalization {
            Normalization::None => raw[idx],
            _ => {
                let g = vbn_graph(tape, raw[idx], eps);
                stats.raw_vbn[idx] = Some((g.mu, g.sigma_sq));
                g.out
            }
        };
        singleton[idx] = Some(rep);
    }

    // projected (and normalized) inputs for interaction products
    let mut proj_inputs = vec![None; m];
    if model.fusion.has_interactions() {
        let interacting: Vec<usize> = (0..m)
            .filter(|&idx| {
                model
                    .fusion
                    .interaction_sets
                    .iter()
                    .any(|s| s.order() > 1 && s.contains(idx + 1))
            })
            .collect();
        for idx in interacting {
            let projected = tape.linear(raw[idx], proj_nodes[idx]);
            let rep = match model.normalization {
                // the iterated ablation feeds raw projections into its
                // products; normalization happens after each product only
                Normalization::None | Normalization::Naive => projected,
                _ => {
                    let g = vbn_graph(tape, projected, eps);
                    stats.proj_vbn[idx] = Some((g.mu, g.sigma_sq));
                    g.out
                }
            };
            proj_inputs[idx] = Some(rep);
        }
    }

    // per-set representations and fusion logits
    let mut logits: Option<NodeId> = None;
    for (k, set) in model.fusion.interaction_sets.iter().enumerate() {
        let rep = if set.order() == 1 {
            singleton[set.indices()[0] - 1].expect("singleton rep")
        } else {
            let inputs: Vec<NodeId> = set
                .indices()
                .iter()
                .map(|&mi| proj_inputs[mi - 1].expect("projected rep"))
                .collect();
            match model.normalization {
                Normalization::None => {
                    let mut t = inputs[0];
                    for &n in &inputs[1..] {
                        t = tape.batch_outer(t, n);
                    }
                    t
                }
                Normalization::Vbn => {
                    let mut t = inputs[0];
                    for &n in &inputs[1..] {
                        t = tape.batch_outer(t, n);
                    }
                    let g = vbn_graph(tape, t, eps);
                    stats
                        .sets
                        .push((set.clone(), SetGraphStats::Stages(vec![(g.mu, g.sigma_sq)])));
                    g.out
                }
                Normalization::Naive => {
                    let g = normalization::naive_graph(tape, &inputs, eps);
                    stats
                        .sets
                        .push((set.clone(), SetGraphStats::Stages(g.stages)));
                    g.out
                }
                Normalization::IterBn => {
                    let g = normalization::iterbn_graph(tape, set, &inputs, eps);
                    stats.sets.push((
                        set.clone(),
                        SetGraphStats::IterBn {
                            moments: g.moments,
                            scale_sq: g.scale_sq,
                        },
                    ));
                    g.out
                }
            }
        };
        let term = tape.batch_dot(rep, head_nodes[k]);
        logits = Some(match logits {
            None => term,
            Some(prev) => tape.add(prev, term),
        });
    }
    let logits = logits.expect("at least one set");
    let logits = tape.add_broadcast(logits, bias_node);

    let data_loss = tape.logistic_loss_mean(logits, labels)?;

    // block-norm penalty: lambda * (sum_I ||w_I||^q)^(2/q)
    let q = model.fusion.q();
    let mut norm_sum: Option<NodeId> = None;
    for &w in &head_nodes {
        let fs = tape.frobenius_sq(w);
        let nq = tape.pow_scalar(fs, q / 2.0);
        norm_sum = Some(match norm_sum {
            None => nq,
            Some(prev) => tape.add(prev, nq),
        });
    }
    let norm_sum = norm_sum.expect("at least one block");
    let powed = tape.pow_scalar(norm_sum, 2.0 / q);
    let penalty = tape.scale(powed, lambda_scale * model.fusion.lambda_reg);
    let mut loss = tape.add(data_loss, penalty);

    if include_weight_decay && weight_decay > 0.0 {
        let mut decay_sum: Option<NodeId> = None;
        let decayed: Vec<NodeId> = enc_nodes
            .iter()
            .flat_map(|&(w, b)| [w, b])
            .chain(proj_nodes.iter().copied())
            .collect();
        for node in decayed {
            let fs = tape.frobenius_sq(node);
            decay_sum = Some(match decay_sum {
                None => fs,
                Some(prev) => tape.add(prev, fs),
            });
        }
        if let Some(sum) = decay_sum {
            let term = tape.scale(sum, weight_decay);
            loss = tape.add(loss, term);
        }
    }

    Ok(BatchGraph {
        loss,
        params,
        stats,
    })
}

/// Full training objective of a batch: mean logistic loss, encoder-side
/// weight decay, block-norm penalty. Normalization follows the model mode.
pub fn objective(model: &Model, samples: &[&SequenceSample], weight_decay: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let graph = build_batch_graph(&mut tape, model, samples, true, weight_decay, 1.0)?;
    Ok(tape.value(graph.loss).scalar_value())
}

/// Objective value plus its gradient in `flatten_params` order.
pub fn objective_and_gradient(
    model: &Model,
    samples: &[&SequenceSample],
    weight_decay: f64,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let graph = build_batch_graph(&mut tape, model, samples, true, weight_decay, 1.0)?;
    let value = tape.value(graph.loss).scalar_value();
    let grads = tape.backward(graph.loss)?;
    let mut flat = Vec::new();
    for &id in &graph.params {
        match grads.get(id) {
            Some(g) => flat.extend_from_slice(g.data()),
            None => flat.extend(std::iter::repeat_n(0.0, tape.value(id).len())),
        }
    }
    Ok((value, flat))
}

/// Adaptive-moment optimizer state with decoupled weight decay.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(shapes: &[Vec<usize>]) -> Self {
        AdamState {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            second: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }
}

/// One optimizer step. `decay_mask[k]` selects the parameters that receive
/// the decoupled decay `w <- w * (1 - lr * weight_decay)`; gradients are
/// folded into bias-corrected first and second moment estimates.
pub fn optimizer_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
    decay_mask: &[bool],
) -> Result<()> {
    if params.len() != grads.len()
        || params.len() != state.first.len()
        || params.len() != decay_mask.len()
    {
        return Err(Error::Contract("optimizer arity mismatch".into()));
    }
    for ((p, g), k) in params.iter().zip(grads).zip(0..) {
        if p.shape() != g.shape() || p.shape() != state.first[k].shape() {
            return Err(Error::Contract(format!(
                "optimizer shape mismatch at parameter {k}"
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if decay_mask[k] && weight_decay > 0.0 {
            let shrink = 1.0 - lr * weight_decay;
            for w in p.data_mut() {
                *w *= shrink;
            }
        }
        let m = state.first[k].data_mut();
        let v = state.second[k].data_mut();
        for ((w, &gi), (mi, vi)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = state.beta1 * *mi + (1.0 - state.beta1) * gi;
            *vi = state.beta2 * *vi + (1.0 - state.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= lr * mhat / (vhat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

/// Per-epoch record of a run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub lr: f64,
    pub relevance: Option<RelevanceReport>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// CSV with one row per epoch; the relevance column packs
    /// `set=display_share` pairs with `|` separators.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_accuracy,lr,relevance\n");
        for r in &self.epochs {
            let relevance = match &r.relevance {
                Some(rep) => rep
                    .entries
                    .iter()
                    .map(|e| format!("{}={}", e.set, e.display_share))
                    .collect::<Vec<_>>()
                    .join("|"),
                None => String::new(),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch, r.train_loss, r.val_loss, r.val_accuracy, r.lr, relevance
            ));
        }
        out
    }
}

fn update_running_stats(model: &mut Model, tape: &Tape, stats: &GraphStats) -> Result<()> {
    let decay = model.running.decay;
    for (idx, entry) in stats.raw_vbn.iter().enumerate() {
        if let Some((mu, sigma_sq)) = entry {
            let mu_v = tape.value(*mu).clone();
            let s_v = tape.value(*sigma_sq).scalar_value();
            model.running.vbn[idx].update(&mu_v, s_v, decay);
        }
    }
    for (idx, entry) in stats.proj_vbn.iter().enumerate() {
        if let Some((mu, sigma_sq)) = entry {
            let mu_v = tape.value(*mu).clone();
            let s_v = tape.value(*sigma_sq).scalar_value();
            model.running.proj_vbn[idx].update(&mu_v, s_v, decay);
        }
    }
    for (set, set_stats) in &stats.sets {
        let running = model
            .running
            .sets
            .get_mut(set)
            .ok_or_else(|| Error::Contract(format!("no running slot for set {set}")))?;
        match set_stats {
            SetGraphStats::IterBn { moments, scale_sq } => {
                let cache = running
                    .moments
                    .as_mut()
                    .ok_or_else(|| Error::Contract("running moments missing".into()))?;
                let mut batch_moments = BTreeMap::new();
                for (subset, node) in moments {
                    batch_moments.insert(subset.clone(), tape.value(*node).clone());
                }
                cache.update_running(&MomentCache::from_parts(
                    set.clone(),
                    batch_moments,
                    crate::normalization::MomentMode::Batch,
                ))?;
                let s = tape.value(*scale_sq).scalar_value();
                running.scale_sq = decay * running.scale_sq + (1.0 - decay) * s;
            }
            SetGraphStats::Stages(stages) => {
                if running.stages.len() != stages.len() {
                    return Err(Error::Contract("running stage arity mismatch".into()));
                }
                for (slot, (mu, sigma_sq)) in running.stages.iter_mut().zip(stages) {
                    let mu_v = tape.value(*mu).clone();
                    let s_v = tape.value(*sigma_sq).scalar_value();
                    slot.update(&mu_v, s_v, decay);
                }
            }
        }
    }
    Ok(())
}

/// Inference-mode forward pass using running statistics. Returns logits.
pub fn eval_logits(model: &Model, samples: &[&SequenceSample]) -> Result<Vec<f64>> {
    let m = model.n_modalities;
    let eps = model.epsilon;
    let normalize = model.normalization != Normalization::None;

    // raw representations per sample and modality
    let mut raw: Vec<Vec<Tensor>> = Vec::with_capacity(m);
    for idx in 0..m {
        let mut col = Vec::with_capacity(samples.len());
        for s in samples {
            col.push(encoders::encode(
                &s.mods[idx],
                &model.encoders[idx],
                &model.encoder_config,
            )?);
        }
        raw.push(col);
    }

    let mut singleton: Vec<Option<Vec<Tensor>>> = vec![None; m];
    for set in &model.fusion.interaction_sets {
        if set.order() != 1 {
            continue;
        }
        let idx = set.indices()[0] - 1;
        let reps = if normalize {
            vbn_apply(&raw[idx], &model.running.vbn[idx].stats(), eps)
        } else {
            raw[idx].clone()
        };
        singleton[idx] = Some(reps);
    }

    let mut proj_inputs: Vec<Option<Vec<Tensor>>> = vec![None; m];
    if model.fusion.has_interactions() {
        for idx in 0..m {
            let used = model
                .fusion
                .interaction_sets
                .iter()
                .any(|s| s.order() > 1 && s.contains(idx + 1));
            if !used {
                continue;
            }
            let projected: Vec<Tensor> = raw[idx]
                .iter()
                .map(|r| interaction_project(r, &model.projections[idx]))
                .collect();
            let reps = if normalize && model.normalization != Normalization::Naive {
                vbn_apply(&projected, &model.running.proj_vbn[idx].stats(), eps)
            } else {
                projected
            };
            proj_inputs[idx] = Some(reps);
        }
    }

    let mut set_reps: BTreeMap<InteractionSet, Vec<Tensor>> = BTreeMap::new();
    for set in &model.fusion.interaction_sets {
        let reps = if set.order() == 1 {
            singleton[set.indices()[0] - 1].clone().expect("singleton")
        } else {
            let inputs: Vec<&Vec<Tensor>> = set
                .indices()
                .iter()
                .map(|&mi| proj_inputs[mi - 1].as_ref().expect("projected"))
                .collect();
            let products: Vec<Tensor> = (0..samples.len())
                .map(|i| {
                    let mut t = inputs[0][i].clone();
                    for col in &inputs[1..] {
                        t = t.outer(&col[i]);
                    }
                    t
                })
                .collect();
            match model.normalization {
                Normalization::None => products,
                Normalization::Vbn => {
                    let running = &model.running.sets[set];
                    vbn_apply(&products, &running.stages[0].stats(), eps)
                }
                Normalization::Naive => {
                    let running = &model.running.sets[set];
                    let mut current: Vec<Tensor> =
                        inputs[0].to_vec();
                    for (stage, col) in running.stages.iter().zip(&inputs[1..]) {
                        let staged: Vec<Tensor> = current
                            .iter()
                            .zip(col.iter())
                            .map(|(a, b)| a.outer(b))
                            .collect();
                        current = vbn_apply(&staged, &stage.stats(), eps);
                    }
                    current
                }
                Normalization::IterBn => {
                    let running = &model.running.sets[set];
                    let cache = running.moments.as_ref().expect("running moments");
                    let coeffs = centering_coefficients(set, cache)?;
                    let views: Vec<&[Tensor]> = set
                        .indices()
                        .iter()
                        .map(|&mi| proj_inputs[mi - 1].as_ref().expect("projected").as_slice())
                        .collect();
                    let centered =
                        normalization::iterbn_center(&products, &coeffs, &views)?;
                    iterbn_normalize_with(&centered, running.scale_sq, eps)
                }
            }
        };
        set_reps.insert(set.clone(), reps);
    }

    let mut logits = Vec::with_capacity(samples.len());
    for i in 0..samples.len() {
        let reps: BTreeMap<InteractionSet, Tensor> = set_reps
            .iter()
            .map(|(s, col)| (s.clone(), col[i].clone()))
            .collect();
        logits.push(fusion::fusion_forward(&reps, &model.head)?);
    }
    Ok(logits)
}

/// Accuracy and mean logistic loss on a split; `sign(0)` predicts +1.
pub fn evaluate(model: &Model, samples: &[&SequenceSample]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Ok((0.0, 0.0));
    }
    let logits = eval_logits(model, samples)?;
    let mut correct = 0usize;
    let mut loss = 0.0;
    for (t, s) in logits.iter().zip(samples) {
        let pred: i8 = if *t >= 0.0 { 1 } else { -1 };
        if pred == s.label {
            correct += 1;
        }
        loss += fusion::logistic_loss(*t, s.label_f64())?;
    }
    Ok((
        correct as f64 / samples.len() as f64,
        loss / samples.len() as f64,
    ))
}

/// Trains a model, keeping the checkpoint with the lowest validation loss;
/// also returns the final optimizer state for checkpointing. The learning
/// rate decays geometrically per epoch; shuffling, batching and every
/// arithmetic reduction are deterministic for a fixed seed.
pub fn train_full(
    mut model: Model,
    split: &Split,
    config: &TrainConfig,
) -> Result<(Model, TrainHistory, AdamState)> {
    let mut history = TrainHistory::default();
    let shapes: Vec<Vec<usize>> = {
        let mut v = Vec::new();
        for enc in &model.encoders {
            v.push(enc.weights.shape().to_vec());
            v.push(enc.bias.shape().to_vec());
        }
        for p in &model.projections {
            v.push(p.shape().to_vec());
        }
        for (_, w) in model.head.blocks() {
            v.push(w.shape().to_vec());
        }
        v.push(vec![]);
        v
    };
    let decay_mask: Vec<bool> = {
        // encoder weights, biases and projections receive decoupled decay;
        // head blocks are governed by the block-norm penalty instead
        let mut v = Vec::new();
        for _ in &model.encoders {
            v.push(true);
            v.push(true);
        }
        for _ in &model.projections {
            v.push(true);
        }
        for _ in model.head.blocks() {
            v.push(false);
        }
        v.push(false);
        v
    };
    let mut adam = AdamState::new(&shapes);
    // stream 1 keeps the shuffle sequence independent of the
    // parameter-initialization draws made from the same seed
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);

    let val_refs: Vec<&SequenceSample> = split.validation.iter().collect();
    let mut best: Option<(f64, Model)> = None;

    let batches_per_epoch = split.train.len().div_ceil(config.batch_size.max(1));
    let total_steps = (config.epochs * batches_per_epoch).max(1);
    let warmup_steps = (total_steps as f64 * config.lambda_warmup_frac).round();
    let mut global_step = 0usize;

    for epoch in 0..config.epochs {
        let lr = config.lr * config.scheduler_gamma.powi(epoch as i32);
        let mut order: Vec<usize> = (0..split.train.len()).collect();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue; // batch statistics need at least two samples
            }
            let batch: Vec<&SequenceSample> = chunk.iter().map(|&i| &split.train[i]).collect();
            let lambda_scale = if warmup_steps > 0.0 {
                (global_step as f64 / warmup_steps).min(1.0)
            } else {
                1.0
            };
            global_step += 1;
            let mut tape = Tape::new();
            let graph = build_batch_graph(&mut tape, &model, &batch, false, 0.0, lambda_scale)?;
            let loss_value = tape.value(graph.loss).scalar_value();
            if !loss_value.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            epoch_loss += loss_value;
            batches += 1;

            let mut grads = tape.backward(graph.loss)?;
            let grad_tensors: Vec<Tensor> = graph
                .params
                .iter()
                .map(|&id| {
                    grads
                        .take(id)
                        .unwrap_or_else(|| Tensor::zeros(tape.value(id).shape()))
                })
                .collect();
            update_running_stats(&mut model, &tape, &graph.stats)?;
            drop(tape);

            let mut param_refs: Vec<&mut Tensor> = Vec::with_capacity(grad_tensors.len());
            let mut bias_holder = Tensor::scalar(model.head.bias);
            {
                for enc in &mut model.encoders {
                    param_refs.push(&mut enc.weights);
                    param_refs.push(&mut enc.bias);
                }
                for p in &mut model.projections {
                    param_refs.push(p);
                }
                for (_, w) in model.head.blocks_mut() {
                    param_refs.push(w);
                }
                param_refs.push(&mut bias_holder);
            }
            optimizer_step(
                &mut param_refs,
                &grad_tensors,
                &mut adam,
                lr,
                config.weight_decay,
                &decay_mask,
            )?;
            model.head.bias = bias_holder.scalar_value();
        }

        let (val_accuracy, val_loss) = evaluate(&model, &val_refs)?;
        let relevance = fusion::recover_relevance(&model.head, config.p).ok();
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: if batches > 0 {
                epoch_loss / batches as f64
            } else {
                f64::NAN
            },
            val_loss,
            val_accuracy,
            lr,
            relevance,
        });
        let better = match &best {
            None => true,
            Some((loss, _)) => val_loss < *loss,
        };
        if better {
            best = Some((val_loss, model.clone()));
        }
    }

    let final_model = best.map(|(_, m)| m).unwrap_or(model);
    Ok((final_model, history, adam))
}

/// `train_full` without the optimizer state.
pub fn train(model: Model, split: &Split, config: &TrainConfig) -> Result<(Model, TrainHistory)> {
    let (model, history, _) = train_full(model, split, config)?;
    Ok((model, history))
}

/// Serializable snapshot of a model plus optimizer and running state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub n_modalities: usize,
    pub encoder_config: EncoderConfig,
    pub fusion: FusionConfig,
    pub normalization: Normalization,
    pub epsilon: f64,
    pub encoders: Vec<EncoderParams>,
    pub projections: Vec<Tensor>,
    pub head: FusionHead,
    pub running: RunningStats,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, config_hash: String, optimizer: Option<AdamState>) -> Self {
        Checkpoint {
            config_hash,
            n_modalities: model.n_modalities,
            encoder_config: model.encoder_config.clone(),
            fusion: model.fusion.clone(),
            normalization: model.normalization,
            epsilon: model.epsilon,
            encoders: model.encoders.clone(),
            projections: model.projections.clone(),
            head: model.head.clone(),
            running: model.running.clone(),
            optimizer,
        }
    }

    pub fn into_model(self) -> Model {
        Model {
            n_modalities: self.n_modalities,
            encoder_config: self.encoder_config,
            fusion: self.fusion,
            normalization: self.normalization,
            epsilon: self.epsilon,
            encoders: self.encoders,
            projections: self.projections,
            head: self.head,
            running: self.running,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        crate::write_atomic(path, json.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&data)?)
    }
}

/// Names of the flattened parameters, for diagnostics.
pub fn parameter_names(model: &Model) -> Vec<String> {
    param_names(model)
}


#[cfg(test)]
mod degeneracy_tests {
    use super::*;
    use crate::synthdata::{generate_synthgene, SynthGeneConfig};

    /// An interaction model configured with only singleton sets reproduces
    /// the additive model bit for bit given identical weights.
    #[test]
    fn singleton_only_interaction_model_is_additive_model() {
        let config = SynthGeneConfig {
            modality_probs: vec![0.5, 0.2],
            n_samples: 40,
            seed: 77,
        };
        let ds = generate_synthgene(&config).unwrap();
        let refs: Vec<&SequenceSample> = ds.samples.iter().collect();

        let mnl_config = TrainConfig::mnl(2, 77);
        let mut degenerate = TrainConfig::intense(2, vec![], 77);
        degenerate.normalization = mnl_config.normalization;

        let a = init_model(2, &mnl_config).unwrap();
        let b = init_model(2, &degenerate).unwrap();
        assert_eq!(a.flatten_params(), b.flatten_params());

        let la = eval_logits(&a, &refs).unwrap();
        let lb = eval_logits(&b, &refs).unwrap();
        assert_eq!(la, lb);

        let (va, ga) = objective_and_gradient(&a, &refs, 0.01).unwrap();
        let (vb, gb) = objective_and_gradient(&b, &refs, 0.01).unwrap();
        assert_eq!(va, vb);
        assert_eq!(ga, gb);

        let ra = fusion::recover_relevance(&a.head, 1.0).unwrap();
        let rb = fusion::recover_relevance(&b.head, 1.0).unwrap();
        for (x, y) in ra.entries.iter().zip(&rb.entries) {
            assert_eq!(x.beta, y.beta);
        }
    }
}
