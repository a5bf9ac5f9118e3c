//! Batch normalization for modality representations and their
//! interaction tensors.
//!
//! VBN centers element-wise over a mini-batch and rescales by one scalar:
//! the square root of the batch-average squared L2 deviation. There is no
//! learned shift or scale afterwards.
//!
//! For an interaction set `I` the centered tensor is the multilinear
//! polynomial `sum_{J subset I} G_J prod_{m in J} f^m`, applied per
//! multi-index component. The coefficients subtract every lower-order
//! moment contribution, so that with batch moments the contribution of any
//! strict subset of `I` has zero batch mean. A Frobenius-scale
//! normalization follows. The iterated pairwise construction (`vbn` after
//! every product) is kept as the biased ablation baseline.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{InteractionSet, MAX_ORDER};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Batch statistics of one representation: element-wise mean and the
/// scalar deviation norm `sigma`, with `sigma^2` the batch mean of
/// `||f - mu||_2^2`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VbnStats {
    pub mu: Tensor,
    pub sigma: f64,
}

/// How the expectations in a `MomentCache` were estimated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum MomentMode {
    /// Plain averages over the current mini-batch.
    Batch,
    /// Exponential running averages, `r <- decay * r + (1 - decay) * batch`.
    Running { decay: f64 },
}

/// Batch (or running) estimates of `E[prod_{m in S} f^m]` for every
/// nonempty `S` inside a target interaction set, one entry per multi-index.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MomentCache {
    set: InteractionSet,
    moments: BTreeMap<InteractionSet, Tensor>,
    mode: MomentMode,
}

impl MomentCache {
    pub fn target_set(&self) -> &InteractionSet {
        &self.set
    }

    pub fn mode(&self) -> MomentMode {
        self.mode
    }

    pub fn moment(&self, subset: &InteractionSet) -> Option<&Tensor> {
        self.moments.get(subset)
    }

    /// Zero-initialized running cache for the given per-modality widths.
    pub fn new_running(set: InteractionSet, dims: &[usize], decay: f64) -> Result<Self> {
        if !(0.0 < decay && decay < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "running decay must lie in (0,1), got {decay}"
            )));
        }
        if dims.len() != set.order() {
            return Err(Error::Contract(
                "per-modality dims must align with the interaction set".into(),
            ));
        }
        let mut moments = BTreeMap::new();
        for subset in set.nonempty_subsets() {
            let shape: Vec<usize> = subset
                .indices()
                .iter()
                .map(|m| dims[position_of(&set, *m)])
                .collect();
            moments.insert(subset, Tensor::zeros(&shape));
        }
        Ok(MomentCache {
            set,
            moments,
            mode: MomentMode::Running { decay },
        })
    }

    /// Assembles a cache from precomputed moment tensors.
    pub fn from_parts(
        set: InteractionSet,
        moments: BTreeMap<InteractionSet, Tensor>,
        mode: MomentMode,
    ) -> Self {
        MomentCache { set, moments, mode }
    }

    /// Folds one batch of moments into a running cache.
    pub fn update_running(&mut self, batch: &MomentCache) -> Result<()> {
        let MomentMode::Running { decay } = self.mode else {
            return Err(Error::Contract(
                "update_running on a batch-mode cache".into(),
            ));
        };
        if batch.set != self.set {
            return Err(Error::Contract("moment cache set mismatch".into()));
        }
        for (subset, running) in self.moments.iter_mut() {
            let fresh = batch
                .moment(subset)
                .ok_or_else(|| Error::Contract(format!("missing moment for {subset}")))?;
            *running = running.scale(decay).add(&fresh.scale(1.0 - decay));
        }
        Ok(())
    }
}

fn position_of(set: &InteractionSet, m: usize) -> usize {
    set.indices()
        .iter()
        .position(|&x| x == m)
        .expect("modality not in set")
}

/// Centering coefficients for a target set: one tensor `G_J` per
/// `J subset I`, indexed by the multi-indices of the modalities in `I \ J`.
/// `G_I` is the scalar 1.
#[derive(Clone, Debug)]
pub struct CenteringCoefficients {
    set: InteractionSet,
    dims: Vec<usize>,
    /// Keyed by the sorted subset `J` (possibly empty).
    coefficients: Vec<(Vec<usize>, Tensor)>,
}

impl CenteringCoefficients {
    pub fn target_set(&self) -> &InteractionSet {
        &self.set
    }

    /// Per-modality representation widths, aligned with the set indices.
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn coefficient(&self, subset: &[usize]) -> Option<&Tensor> {
        self.coefficients
            .iter()
            .find(|(j, _)| j == subset)
            .map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[usize], &Tensor)> {
        self.coefficients.iter().map(|(j, t)| (j.as_slice(), t))
    }
}

/// Normalizes a batch: `(f_i - mu) / (sigma + epsilon)`.
///
/// The batch mean of each output component is zero, and the batch mean of
/// the squared output norm is one whenever `sigma` dominates `epsilon`.
pub fn vbn(batch: &[Tensor], epsilon: f64) -> Result<(Vec<Tensor>, VbnStats)> {
    let stats = vbn_stats(batch)?;
    Ok((vbn_apply(batch, &stats, epsilon), stats))
}

/// Batch statistics used by `vbn`.
pub fn vbn_stats(batch: &[Tensor]) -> Result<VbnStats> {
    if batch.len() < 2 {
        return Err(Error::BatchTooSmall(batch.len()));
    }
    let shape = batch[0].shape().to_vec();
    for t in batch {
        if t.shape() != shape {
            return Err(Error::Contract(
                "all representations in a batch must share one shape".into(),
            ));
        }
    }
    let stacked = Tensor::stack(batch);
    let mu = stacked.mean_axis0();
    let sigma_sq = batch
        .iter()
        .map(|t| t.sub(&mu).frobenius_sq())
        .sum::<f64>()
        / batch.len() as f64;
    Ok(VbnStats {
        mu,
        sigma: sigma_sq.sqrt(),
    })
}

/// Applies given statistics (batch or running) to a batch.
pub fn vbn_apply(batch: &[Tensor], stats: &VbnStats, epsilon: f64) -> Vec<Tensor> {
    let inv = 1.0 / (stats.sigma + epsilon);
    batch.iter().map(|t| t.sub(&stats.mu).scale(inv)).collect()
}

/// Batch-mode moments of `prod_{m in S} f^m` for every nonempty
/// `S subset set`. `batches[k]` is the batch of modality `set[k]`; the
/// reduction order over samples is serial, so results are deterministic.
pub fn compute_moments(batches: &[&[Tensor]], set: &InteractionSet) -> Result<MomentCache> {
    if batches.len() != set.order() {
        return Err(Error::Contract(format!(
            "got {} modality batches for interaction set {set}",
            batches.len()
        )));
    }
    let n = batches
        .first()
        .map(|b| b.len())
        .ok_or_else(|| Error::Contract("empty interaction set".into()))?;
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    for b in batches {
        if b.len() != n {
            return Err(Error::Contract("mismatched batch sizes".into()));
        }
        for t in b.iter() {
            if t.rank() != 1 {
                return Err(Error::Contract(
                    "modality representations must be rank-1 tensors".into(),
                ));
            }
        }
    }
    let mut moments = BTreeMap::new();
    for subset in set.nonempty_subsets() {
        let positions: Vec<usize> = subset
            .indices()
            .iter()
            .map(|&m| position_of(set, m))
            .collect();
        let shape: Vec<usize> = positions.iter().map(|&k| batches[k][0].shape()[0]).collect();
        let mut acc = Tensor::zeros(&shape);
        for i in 0..n {
            let mut prod = batches[positions[0]][i].clone();
            for &k in &positions[1..] {
                prod = prod.outer(&batches[k][i]);
            }
            acc.add_assign(&prod);
        }
        moments.insert(subset, acc.scale(1.0 / n as f64));
    }
    Ok(MomentCache {
        set: set.clone(),
        moments,
        mode: MomentMode::Batch,
    })
}

/// All partitions of `items` into unordered nonempty blocks. Items must be
/// ascending; blocks come out sorted.
pub(crate) fn set_partitions(items: &[usize]) -> Vec<Vec<Vec<usize>>> {
    let mut parts: Vec<Vec<Vec<usize>>> = vec![vec![]];
    for &item in items {
        let mut next = Vec::with_capacity(parts.len() * 2);
        for p in &parts {
            for k in 0..p.len() {
                let mut q = p.clone();
                q[k].push(item);
                next.push(q);
            }
            let mut q = p.clone();
            q.push(vec![item]);
            next.push(q);
        }
        parts = next;
    }
    parts
}

/// Permutation that reorders the axes of `outer(a, b)` — `a` carrying the
/// modalities `first`, `b` the modalities `second` — into ascending
/// modality order. Output axis `k` takes input axis `perm[k]`.
pub(crate) fn interleave_perm(first: &[usize], second: &[usize]) -> Vec<usize> {
    let mut tagged: Vec<(usize, usize)> = first
        .iter()
        .chain(second.iter())
        .copied()
        .enumerate()
        .map(|(pos, m)| (m, pos))
        .collect();
    tagged.sort_unstable();
    tagged.into_iter().map(|(_, pos)| pos).collect()
}

/// Outer product of `(tensor, modalities)` factors with axes interleaved
/// into ascending modality order.
pub(crate) fn interleaved_product(factors: &[(&Tensor, &[usize])]) -> (Tensor, Vec<usize>) {
    let mut acc = Tensor::scalar(1.0);
    let mut mods: Vec<usize> = Vec::new();
    for (t, m) in factors {
        let perm = interleave_perm(&mods, m);
        acc = acc.outer(t).permute_axes(&perm);
        mods.extend_from_slice(m);
        mods.sort_unstable();
    }
    (acc, mods)
}

/// Signed multiplicity of one partition in the coefficient sum: summing
/// ordered tuples of disjoint blocks counts each unordered partition of
/// `ell` blocks `ell!` times, with sign `(-1)^ell`.
fn partition_weight(blocks: usize) -> f64 {
    let fact: f64 = (1..=blocks).map(|k| k as f64).product();
    if blocks.is_multiple_of(2) {
        fact
    } else {
        -fact
    }
}

/// Coefficients `G_J` of the centering polynomial for the target set.
pub fn centering_coefficients(
    set: &InteractionSet,
    moments: &MomentCache,
) -> Result<CenteringCoefficients> {
    if set.order() > MAX_ORDER {
        return Err(Error::UnsupportedOrder {
            order: set.order(),
            max: MAX_ORDER,
        });
    }
    if moments.target_set() != set {
        return Err(Error::Contract("moment cache built for a different set".into()));
    }
    for subset in set.nonempty_subsets() {
        if moments.moment(&subset).is_none() {
            return Err(Error::Contract(format!("missing moment for subset {subset}")));
        }
    }
    let dims: Vec<usize> = set
        .indices()
        .iter()
        .map(|&m| {
            moments
                .moment(&InteractionSet::singleton(m))
                .expect("singleton moment")
                .shape()[0]
        })
        .collect();

    let n = set.order();
    let indices = set.indices();
    let mut coefficients = Vec::with_capacity(1 << n);
    for jmask in 0..(1usize << n) {
        let j: Vec<usize> = (0..n).filter(|k| jmask & (1 << k) != 0).map(|k| indices[k]).collect();
        let comp: Vec<usize> = (0..n).filter(|k| jmask & (1 << k) == 0).map(|k| indices[k]).collect();
        let comp_shape: Vec<usize> = (0..n)
            .filter(|k| jmask & (1 << k) == 0)
            .map(|k| dims[k])
            .collect();
        let mut g = Tensor::zeros(&comp_shape);
        for partition in set_partitions(&comp) {
            let weight = partition_weight(partition.len());
            let factors: Vec<(&Tensor, &[usize])> = partition
                .iter()
                .map(|block| {
                    let key = InteractionSet::new(block.clone()).expect("nonempty block");
                    (moments.moment(&key).expect("moment present"), block.as_slice())
                })
                .collect();
            let (term, _) = interleaved_product(&factors);
            g.add_scaled_assign(&term, weight);
        }
        coefficients.push((j, g));
    }
    Ok(CenteringCoefficients {
        set: set.clone(),
        dims,
        coefficients,
    })
}

/// Centers a batch of interaction tensors:
/// `f_hat_i = sum_{J subset I} G_J * prod_{m in J} f^m_i` per multi-index.
/// `product_batch` supplies the leading `J = I` term; `modality_batches`
/// supply the strict-subset products, aligned with the set indices.
pub fn iterbn_center(
    product_batch: &[Tensor],
    coeffs: &CenteringCoefficients,
    modality_batches: &[&[Tensor]],
) -> Result<Vec<Tensor>> {
    let set = &coeffs.set;
    let n = set.order();
    if modality_batches.len() != n {
        return Err(Error::Contract(
            "modality batches must align with the interaction set".into(),
        ));
    }
    let b = product_batch.len();
    for batch in modality_batches {
        if batch.len() != b {
            return Err(Error::Contract("mismatched batch sizes".into()));
        }
    }
    for t in product_batch {
        if t.shape() != coeffs.dims() {
            return Err(Error::Contract(format!(
                "product tensor shape {:?} does not match coefficient dims {:?}",
                t.shape(),
                coeffs.dims()
            )));
        }
    }
    for (k, batch) in modality_batches.iter().enumerate() {
        for t in batch.iter() {
            if t.shape() != [coeffs.dims[k]] {
                return Err(Error::Contract(format!(
                    "modality {} representation shape {:?} does not match width {}",
                    set.indices()[k],
                    t.shape(),
                    coeffs.dims[k]
                )));
            }
        }
    }

    let indices = set.indices();
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let mut acc = product_batch[i].clone();
        for (j, g) in coeffs.iter() {
            if j.len() == n {
                continue; // leading term already in acc
            }
            let comp: Vec<usize> = indices.iter().copied().filter(|m| !j.contains(m)).collect();
            let prod_j = if j.is_empty() {
                Tensor::scalar(1.0)
            } else {
                let mut p = modality_batches[position_of(set, j[0])][i].clone();
                for &m in &j[1..] {
                    p = p.outer(&modality_batches[position_of(set, m)][i]);
                }
                p
            };
            let (term, _) = interleaved_product(&[(&prod_j, j), (g, comp.as_slice())]);
            acc.add_assign(&term);
        }
        out.push(acc);
    }
    Ok(out)
}

/// Divides a centered batch by `sqrt(mean ||f_hat||_Fr^2) + epsilon`.
/// Returns the normalized batch and the mean squared Frobenius norm.
pub fn iterbn_normalize(centered: &[Tensor], epsilon: f64) -> Result<(Vec<Tensor>, f64)> {
    if centered.len() < 2 {
        return Err(Error::BatchTooSmall(centered.len()));
    }
    let scale_sq = centered.iter().map(Tensor::frobenius_sq).sum::<f64>() / centered.len() as f64;
    Ok((
        iterbn_normalize_with(centered, scale_sq, epsilon),
        scale_sq,
    ))
}

/// Normalization against an externally supplied (e.g. running) scale.
pub fn iterbn_normalize_with(centered: &[Tensor], scale_sq: f64, epsilon: f64) -> Vec<Tensor> {
    let inv = 1.0 / (scale_sq.sqrt() + epsilon);
    centered.iter().map(|t| t.scale(inv)).collect()
}

/// Full batch-mode pipeline for one interaction set: VBN each modality,
/// take the product, center with batch-moment coefficients, normalize.
pub fn iterbn_pipeline(
    modality_batches: &[&[Tensor]],
    set: &InteractionSet,
    epsilon: f64,
) -> Result<Vec<Tensor>> {
    let normalized: Vec<Vec<Tensor>> = modality_batches
        .iter()
        .map(|b| vbn(b, epsilon).map(|(out, _)| out))
        .collect::<Result<_>>()?;
    let views: Vec<&[Tensor]> = normalized.iter().map(|b| b.as_slice()).collect();
    let b = views[0].len();
    let products: Vec<Tensor> = (0..b)
        .map(|i| {
            let mut p = views[0][i].clone();
            for v in &views[1..] {
                p = p.outer(&v[i]);
            }
            p
        })
        .collect();
    let moments = compute_moments(&views, set)?;
    let coeffs = centering_coefficients(set, &moments)?;
    let centered = iterbn_center(&products, &coeffs, &views)?;
    Ok(iterbn_normalize(&centered, epsilon)?.0)
}

/// Ablation baseline: VBN each modality, then left-to-right pairwise outer
/// products with VBN re-applied after every product. Coincides with the
/// generalized pipeline for two modalities but keeps the higher-order
/// interaction bias beyond that.
pub fn naive_iterated_vbn(modality_batches: &[&[Tensor]], epsilon: f64) -> Result<Vec<Tensor>> {
    if modality_batches.is_empty() {
        return Err(Error::Contract("no modality batches".into()));
    }
    let mut current = vbn(modality_batches[0], epsilon)?.0;
    for batch in &modality_batches[1..] {
        let normalized = vbn(batch, epsilon)?.0;
        let products: Vec<Tensor> = current
            .iter()
            .zip(&normalized)
            .map(|(a, b)| a.outer(b))
            .collect();
        current = vbn(&products, epsilon)?.0;
    }
    Ok(current)
}

// ---------------------------------------------------------------------------
// Tape builders: the same computations as differentiable graphs. Gradients
// flow through the batch moments, which preserves the zero-mean identity on
// the training graph.

/// Differentiable VBN over a stacked `[batch, ...]` node.
pub struct VbnGraph {
    pub out: NodeId,
    pub mu: NodeId,
    pub sigma_sq: NodeId,
}

pub fn vbn_graph(tape: &mut Tape, x: NodeId, epsilon: f64) -> VbnGraph {
    let rows = tape.value(x).shape()[0];
    assert!(rows >= 2, "vbn needs a batch of at least 2");
    let mu = tape.mean_axis0(x);
    let centered = tape.sub_broadcast(x, mu);
    let fs = tape.frobenius_sq(centered);
    let sigma_sq = tape.scale(fs, 1.0 / rows as f64);
    let sigma = tape.sqrt(sigma_sq);
    let divisor = tape.add_scalar(sigma, epsilon);
    let out = tape.div_by_scalar(centered, divisor);
    VbnGraph { out, mu, sigma_sq }
}

/// Differentiable generalized pipeline for one interaction set over
/// already-normalized modality nodes (`[batch, d_m]` each, ascending
/// modality order).
pub struct IterBnGraph {
    pub out: NodeId,
    /// Batch-moment node per nonempty subset, for running-average updates.
    pub moments: Vec<(InteractionSet, NodeId)>,
    pub scale_sq: NodeId,
}

pub fn iterbn_graph(
    tape: &mut Tape,
    set: &InteractionSet,
    inputs: &[NodeId],
    epsilon: f64,
) -> IterBnGraph {
    let n = set.order();
    assert_eq!(inputs.len(), n, "inputs must align with the set");
    assert!(n <= MAX_ORDER, "interaction order above supported maximum");
    let rows = tape.value(inputs[0]).shape()[0];
    let indices = set.indices();

    // per-sample products for every nonempty subset, axes ascending
    let full = (1usize << n) - 1;
    let mut products: Vec<Option<NodeId>> = vec![None; full + 1];
    for mask in 1..=full {
        let node = if mask.count_ones() == 1 {
            inputs[mask.trailing_zeros() as usize]
        } else {
            let high = usize::BITS as usize - 1 - mask.leading_zeros() as usize;
            let restmask = mask & !(1 << high);
            let rest = products[restmask].expect("lower mask visited");
            tape.batch_outer(rest, inputs[high])
        };
        products[mask] = Some(node);
    }

    let mods_of = |mask: usize| -> Vec<usize> {
        (0..n).filter(|k| mask & (1 << k) != 0).map(|k| indices[k]).collect()
    };

    let mut moment_nodes: Vec<Option<NodeId>> = vec![None; full + 1];
    let mut moments = Vec::new();
    for mask in 1..=full {
        let m = tape.mean_axis0(products[mask].expect("product"));
        moment_nodes[mask] = Some(m);
        moments.push((
            InteractionSet::new(mods_of(mask)).expect("nonempty subset"),
            m,
        ));
    }

    // coefficient node per strict subset J, over the axes of I \ J
    let mut acc = products[full].expect("full product");
    for jmask in 0..full {
        let compmask = full & !jmask;
        let comp = mods_of(compmask);

        let mut g: Option<NodeId> = None;
        for partition in set_partitions(&comp) {
            let weight = partition_weight(partition.len());
            // interleaved product of the block moments
            let mut term: Option<(NodeId, Vec<usize>)> = None;
            for block in &partition {
                let bmask = block
                    .iter()
                    .map(|m| 1usize << position_of(set, *m))
                    .fold(0usize, |a, b| a | b);
                let mnode = moment_nodes[bmask].expect("moment node");
                term = Some(match term {
                    None => (mnode, block.clone()),
                    Some((acc_node, acc_mods)) => {
                        let outer = tape.outer(acc_node, mnode);
                        let perm = interleave_perm(&acc_mods, block);
                        let permuted = tape.permute_axes(outer, &perm);
                        let mut mods = acc_mods;
                        mods.extend_from_slice(block);
                        mods.sort_unstable();
                        (permuted, mods)
                    }
                });
            }
            let (tnode, _) = term.expect("nonempty partition");
            let scaled = tape.scale(tnode, weight);
            g = Some(match g {
                None => scaled,
                Some(prev) => tape.add(prev, scaled),
            });
        }
        let g = g.expect("at least one partition");

        // term_i = prod_J(i) (x) G_J, axes interleaved back into set order
        let term = if jmask == 0 {
            tape.broadcast_to_batch(g, rows)
        } else {
            let prod_j = products[jmask].expect("subset product");
            let combined = tape.outer_batch_un(prod_j, g);
            let j_mods = mods_of(jmask);
            let inner = interleave_perm(&j_mods, &comp);
            let mut perm = Vec::with_capacity(n + 1);
            perm.push(0);
            perm.extend(inner.iter().map(|&p| p + 1));
            tape.permute_axes(combined, &perm)
        };
        acc = tape.add(acc, term);
    }

    let fs = tape.frobenius_sq(acc);
    let scale_sq = tape.scale(fs, 1.0 / rows as f64);
    let sigma = tape.sqrt(scale_sq);
    let divisor = tape.add_scalar(sigma, epsilon);
    let out = tape.div_by_scalar(acc, divisor);
    IterBnGraph {
        out,
        moments,
        scale_sq,
    }
}

/// Differentiable iterated-pairwise ablation over already-normalized
/// modality nodes: product, VBN, product, VBN, ...
pub struct NaiveGraph {
    pub out: NodeId,
    /// `(mu, sigma_sq)` batch-stat nodes of each post-product VBN stage.
    pub stages: Vec<(NodeId, NodeId)>,
}

pub fn naive_graph(tape: &mut Tape, inputs: &[NodeId], epsilon: f64) -> NaiveGraph {
    assert!(!inputs.is_empty());
    let mut current = inputs[0];
    let mut stages = Vec::new();
    for &next in &inputs[1..] {
        let prod = tape.batch_outer(current, next);
        let stage = vbn_graph(tape, prod, epsilon);
        stages.push((stage.mu, stage.sigma_sq));
        current = stage.out;
    }
    NaiveGraph {
        out: current,
        stages,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(s: &str) -> InteractionSet {
        InteractionSet::parse(s).unwrap()
    }

    fn rand_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize, lo: f64, hi: f64) -> Vec<Tensor> {
        (0..n)
            .map(|_| Tensor::vector(&(0..dim).map(|_| rng.gen_range(lo..hi)).collect::<Vec<_>>()))
            .collect()
    }

    fn center_batch(batch: &[Tensor]) -> Vec<Tensor> {
        let mu = Tensor::stack(batch).mean_axis0();
        batch.iter().map(|t| t.sub(&mu)).collect()
    }

    #[test]
    fn vbn_hand_example() {
        let batch = vec![Tensor::vector(&[2.0, 0.0]), Tensor::vector(&[0.0, 0.0])];
        let (out, stats) = vbn(&batch, 0.0).unwrap();
        assert_eq!(stats.mu.data(), &[1.0, 0.0]);
        assert_relative_eq!(stats.sigma, 1.0, epsilon = 1e-15);
        assert_eq!(out[0].data(), &[1.0, 0.0]);
        assert_eq!(out[1].data(), &[-1.0, 0.0]);
    }

    #[test]
    fn vbn_already_normalized_is_fixed_point() {
        let batch = vec![Tensor::vector(&[1.0, 0.0]), Tensor::vector(&[-1.0, 0.0])];
        let (out, stats) = vbn(&batch, 0.0).unwrap();
        assert_eq!(stats.mu.data(), &[0.0, 0.0]);
        assert_relative_eq!(stats.sigma, 1.0, epsilon = 1e-15);
        assert_eq!(out[0].data(), batch[0].data());
        assert_eq!(out[1].data(), batch[1].data());
    }

    #[test]
    fn vbn_constant_batch_takes_epsilon_path() {
        let batch = vec![Tensor::vector(&[5.0, 5.0]), Tensor::vector(&[5.0, 5.0])];
        let (out, stats) = vbn(&batch, 1e-8).unwrap();
        assert_eq!(stats.sigma, 0.0);
        for t in out {
            assert_eq!(t.data(), &[0.0, 0.0]);
            assert!(t.is_finite());
        }
    }

    #[test]
    fn vbn_batch_of_one_rejected() {
        let err = vbn(&[Tensor::vector(&[1.0])], 0.0);
        assert!(matches!(err, Err(Error::BatchTooSmall(1))));
    }

    #[test]
    fn vbn_shift_scale_invariance_and_idempotence() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..30 {
            let n = rng.gen_range(2..10);
            let d = rng.gen_range(1..5);
            let batch = rand_batch(&mut rng, n, d, -4.0, 4.0);
            let c = rng.gen_range(0.1..5.0);
            let shift = Tensor::vector(&(0..d).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<_>>());
            let moved: Vec<Tensor> = batch.iter().map(|t| t.scale(c).add(&shift)).collect();
            let (a, _) = vbn(&batch, 0.0).unwrap();
            let (b, _) = vbn(&moved, 0.0).unwrap();
            for (x, y) in a.iter().zip(&b) {
                for (u, v) in x.data().iter().zip(y.data()) {
                    assert_relative_eq!(u, v, epsilon = 1e-12, max_relative = 1e-12);
                }
            }
            let (twice, _) = vbn(&a, 0.0).unwrap();
            for (x, y) in a.iter().zip(&twice) {
                for (u, v) in x.data().iter().zip(y.data()) {
                    assert_relative_eq!(u, v, epsilon = 1e-12, max_relative = 1e-12);
                }
            }
        }
    }

    #[test]
    fn moments_hand_example() {
        // scalar features as width-1 vectors: f1 = [1, -1], f2 = [1, 1]
        let f1 = vec![Tensor::vector(&[1.0]), Tensor::vector(&[-1.0])];
        let f2 = vec![Tensor::vector(&[1.0]), Tensor::vector(&[1.0])];
        let cache = compute_moments(&[&f1, &f2], &set("12")).unwrap();
        assert_eq!(cache.moment(&set("1")).unwrap().data(), &[0.0]);
        assert_eq!(cache.moment(&set("2")).unwrap().data(), &[1.0]);
        assert_eq!(cache.moment(&set("12")).unwrap().data(), &[0.0]);
        assert!(matches!(cache.mode(), MomentMode::Batch));
    }

    #[test]
    fn moments_zero_annihilation_and_singleton() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f1 = rand_batch(&mut rng, 4, 2, -1.0, 1.0);
        let zeros: Vec<Tensor> = (0..4).map(|_| Tensor::zeros(&[3])).collect();
        let cache = compute_moments(&[&f1, &zeros], &set("12")).unwrap();
        assert_eq!(cache.moment(&set("2")).unwrap().data(), &[0.0; 3]);
        assert_eq!(cache.moment(&set("12")).unwrap().data(), &[0.0; 6]);

        let single = compute_moments(&[&f1], &set("1")).unwrap();
        let expect = Tensor::stack(&f1).mean_axis0();
        assert_eq!(single.moment(&set("1")).unwrap(), &expect);
    }

    #[test]
    fn moments_mismatched_batches_rejected() {
        let f1 = vec![Tensor::vector(&[1.0]), Tensor::vector(&[2.0])];
        let f2 = vec![Tensor::vector(&[1.0])];
        assert!(matches!(
            compute_moments(&[&f1, &f2], &set("12")),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn coefficients_order_one() {
        let f = vec![Tensor::vector(&[2.0]), Tensor::vector(&[4.0])];
        let moments = compute_moments(&[&f], &set("1")).unwrap();
        let coeffs = centering_coefficients(&set("1"), &moments).unwrap();
        // G_empty = -E(f), G_{1} = 1
        assert_eq!(coeffs.coefficient(&[]).unwrap().data(), &[-3.0]);
        assert_eq!(coeffs.coefficient(&[1]).unwrap().scalar_value(), 1.0);
    }

    #[test]
    fn coefficients_order_two_by_hand() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f1 = rand_batch(&mut rng, 6, 2, -2.0, 2.0);
        let f2 = rand_batch(&mut rng, 6, 3, -2.0, 2.0);
        let moments = compute_moments(&[&f1, &f2], &set("12")).unwrap();
        let coeffs = centering_coefficients(&set("12"), &moments).unwrap();
        let e1 = moments.moment(&set("1")).unwrap();
        let e2 = moments.moment(&set("2")).unwrap();
        let e12 = moments.moment(&set("12")).unwrap();
        // G_empty = -E(f1 f2) + 2 E(f1) E(f2), expanded by hand
        let expect = e12.scale(-1.0).add(&e1.outer(e2).scale(2.0));
        for (a, b) in coeffs.coefficient(&[]).unwrap().data().iter().zip(expect.data()) {
            assert_relative_eq!(a, b, epsilon = 1e-13);
        }
        // G_{1} = -E(f2), G_{2} = -E(f1)
        for (a, b) in coeffs.coefficient(&[1]).unwrap().data().iter().zip(e2.scale(-1.0).data()) {
            assert_relative_eq!(a, b, epsilon = 1e-14);
        }
        for (a, b) in coeffs.coefficient(&[2]).unwrap().data().iter().zip(e1.scale(-1.0).data()) {
            assert_relative_eq!(a, b, epsilon = 1e-14);
        }
        assert_eq!(coeffs.coefficient(&[1, 2]).unwrap().scalar_value(), 1.0);
    }

    #[test]
    fn coefficients_reject_order_above_max() {
        let s = set("[1,2,3,4,5]");
        let f: Vec<Vec<Tensor>> = (0..5)
            .map(|k| vec![Tensor::vector(&[k as f64]), Tensor::vector(&[1.0])])
            .collect();
        let views: Vec<&[Tensor]> = f.iter().map(|b| b.as_slice()).collect();
        let moments = compute_moments(&views, &s).unwrap();
        assert!(matches!(
            centering_coefficients(&s, &moments),
            Err(Error::UnsupportedOrder { order: 5, max: 4 })
        ));
    }

    /// With pre-centered inputs the trimodal centering reduces to
    /// f1 f2 f3 - E(f1 f2) f3 - E(f1 f3) f2 - E(f2 f3) f1 - E(f1 f2 f3).
    #[test]
    fn trimodal_centering_with_precentered_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let s = set("123");
        let batches: Vec<Vec<Tensor>> = (0..3)
            .map(|_| center_batch(&rand_batch(&mut rng, 8, 2, -2.0, 2.0)))
            .collect();
        let views: Vec<&[Tensor]> = batches.iter().map(|b| b.as_slice()).collect();
        let moments = compute_moments(&views, &s).unwrap();
        let coeffs = centering_coefficients(&s, &moments).unwrap();
        let products: Vec<Tensor> = (0..8)
            .map(|i| views[0][i].outer(&views[1][i]).outer(&views[2][i]))
            .collect();
        let centered = iterbn_center(&products, &coeffs, &views).unwrap();

        let e12 = moments.moment(&set("12")).unwrap();
        let e13 = moments.moment(&set("13")).unwrap();
        let e23 = moments.moment(&set("23")).unwrap();
        let e123 = moments.moment(&set("123")).unwrap();
        for i in 0..8 {
            let mut expect = products[i].clone();
            expect.add_assign(&e12.outer(&views[2][i]).scale(-1.0));
            // E(f1 f3) f2: axes (1,3) x (2) -> reorder to (1,2,3)
            expect.add_assign(
                &e13.outer(&views[1][i]).permute_axes(&[0, 2, 1]).scale(-1.0),
            );
            expect.add_assign(
                &e23.outer(&views[0][i]).permute_axes(&[2, 0, 1]).scale(-1.0),
            );
            expect.add_assign(&e123.scale(-1.0));
            for (a, b) in centered[i].data().iter().zip(expect.data()) {
                // pre-centered empirical means are ~1e-17, not exactly zero
                assert_relative_eq!(a, b, epsilon = 1e-12, max_relative = 1e-10);
            }
        }
    }

    /// Full trimodal polynomial on raw (uncentered) inputs, transcribed
    /// term by term as the independent oracle.
    #[test]
    fn trimodal_centering_matches_expanded_polynomial() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let s = set("123");
        let dims = [2usize, 3, 2];
        let batches: Vec<Vec<Tensor>> = dims
            .iter()
            .map(|&d| rand_batch(&mut rng, 10, d, -2.0, 2.0))
            .collect();
        let views: Vec<&[Tensor]> = batches.iter().map(|b| b.as_slice()).collect();
        let moments = compute_moments(&views, &s).unwrap();
        let coeffs = centering_coefficients(&s, &moments).unwrap();
        let products: Vec<Tensor> = (0..10)
            .map(|i| views[0][i].outer(&views[1][i]).outer(&views[2][i]))
            .collect();
        let centered = iterbn_center(&products, &coeffs, &views).unwrap();

        let e1 = moments.moment(&set("1")).unwrap();
        let e2 = moments.moment(&set("2")).unwrap();
        let e3 = moments.moment(&set("3")).unwrap();
        let e12 = moments.moment(&set("12")).unwrap();
        let e13 = moments.moment(&set("13")).unwrap();
        let e23 = moments.moment(&set("23")).unwrap();
        let e123 = moments.moment(&set("123")).unwrap();
        for i in 0..10 {
            let (f1, f2, f3) = (views[0][i].clone(), views[1][i].clone(), views[2][i].clone());
            let mut expect = f1.outer(&f2).outer(&f3);
            // single-expectation terms
            expect.add_assign(&e1.outer(&f2).outer(&f3).scale(-1.0));
            expect.add_assign(&f1.outer(e2).outer(&f3).scale(-1.0));
            expect.add_assign(&f1.outer(&f2).outer(e3).scale(-1.0));
            // pairwise-moment terms
            expect.add_assign(&e12.outer(&f3).scale(-1.0));
            expect.add_assign(&e13.outer(&f2).permute_axes(&[0, 2, 1]).scale(-1.0));
            expect.add_assign(&e23.outer(&f1).permute_axes(&[2, 0, 1]).scale(-1.0));
            // triple moment
            expect.add_assign(&e123.scale(-1.0));
            // products of two expectations enter with +2
            expect.add_assign(&e1.outer(e2).outer(&f3).scale(2.0));
            expect.add_assign(&e1.outer(&f2).outer(e3).scale(2.0));
            expect.add_assign(&f1.outer(e2).outer(e3).scale(2.0));
            expect.add_assign(&e12.outer(e3).scale(2.0));
            expect.add_assign(&e13.outer(e2).permute_axes(&[0, 2, 1]).scale(2.0));
            expect.add_assign(&e23.outer(e1).permute_axes(&[2, 0, 1]).scale(2.0));
            // triple product of means enters with -6
            expect.add_assign(&e1.outer(e2).outer(e3).scale(-6.0));
            for (a, b) in centered[i].data().iter().zip(expect.data()) {
                assert_relative_eq!(a, b, epsilon = 1e-12, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn center_hand_example_vanishes() {
        let f1 = vec![Tensor::vector(&[1.0]), Tensor::vector(&[-1.0])];
        let f2 = vec![Tensor::vector(&[1.0]), Tensor::vector(&[1.0])];
        let s = set("12");
        let moments = compute_moments(&[&f1, &f2], &s).unwrap();
        let coeffs = centering_coefficients(&s, &moments).unwrap();
        let products = vec![f1[0].outer(&f2[0]), f1[1].outer(&f2[1])];
        let centered = iterbn_center(&products, &coeffs, &[&f1, &f2]).unwrap();
        assert_eq!(centered[0].data(), &[0.0]);
        assert_eq!(centered[1].data(), &[0.0]);
    }

    #[test]
    fn center_order_one_is_plain_centering() {
        let f = vec![
            Tensor::vector(&[1.0, 5.0]),
            Tensor::vector(&[3.0, 1.0]),
            Tensor::vector(&[2.0, 0.0]),
        ];
        let s = set("1");
        let moments = compute_moments(&[&f], &s).unwrap();
        let coeffs = centering_coefficients(&s, &moments).unwrap();
        let centered = iterbn_center(&f, &coeffs, &[&f]).unwrap();
        let mu = Tensor::stack(&f).mean_axis0();
        for (c, orig) in centered.iter().zip(&f) {
            let expect = orig.sub(&mu);
            for (a, b) in c.data().iter().zip(expect.data()) {
                assert_relative_eq!(a, b, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn center_precentered_pair_reduces_to_product_minus_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let f1 = center_batch(&rand_batch(&mut rng, 6, 2, -1.0, 1.0));
        let f2 = center_batch(&rand_batch(&mut rng, 6, 2, -1.0, 1.0));
        let s = set("12");
        let moments = compute_moments(&[&f1, &f2], &s).unwrap();
        let coeffs = centering_coefficients(&s, &moments).unwrap();
        let products: Vec<Tensor> = (0..6).map(|i| f1[i].outer(&f2[i])).collect();
        let centered = iterbn_center(&products, &coeffs, &[&f1, &f2]).unwrap();
        let mean = Tensor::stack(&products).mean_axis0();
        for i in 0..6 {
            let expect = products[i].sub(&mean);
            for (a, b) in centered[i].data().iter().zip(expect.data()) {
                assert_relative_eq!(a, b, epsilon = 1e-13, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn center_shape_mismatch_rejected() {
        let f1 = vec![Tensor::vector(&[1.0]), Tensor::vector(&[2.0])];
        let f2 = vec![Tensor::vector(&[1.0]), Tensor::vector(&[1.0])];
        let s = set("12");
        let moments = compute_moments(&[&f1, &f2], &s).unwrap();
        let coeffs = centering_coefficients(&s, &moments).unwrap();
        let bad_products = vec![Tensor::zeros(&[2, 2]), Tensor::zeros(&[2, 2])];
        assert!(matches!(
            iterbn_center(&bad_products, &coeffs, &[&f1, &f2]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn normalize_examples() {
        // Frobenius squares 1 and 3 -> mean 2 -> divisor sqrt(2)
        let centered = vec![Tensor::vector(&[1.0, 0.0]), Tensor::vector(&[1.0, 2.0f64.sqrt()])];
        assert_relative_eq!(centered[1].frobenius_sq(), 3.0, epsilon = 1e-15);
        let (out, scale_sq) = iterbn_normalize(&centered, 0.0).unwrap();
        assert_relative_eq!(scale_sq, 2.0, epsilon = 1e-15);
        for (o, c) in out.iter().zip(&centered) {
            let expect = c.scale(1.0 / 2.0f64.sqrt());
            for (a, b) in o.data().iter().zip(expect.data()) {
                assert_relative_eq!(a, b, epsilon = 1e-15);
            }
        }

        let zeros = vec![Tensor::zeros(&[2, 2]), Tensor::zeros(&[2, 2])];
        let (out, _) = iterbn_normalize(&zeros, 1e-8).unwrap();
        for t in out {
            assert_eq!(t.data(), &[0.0; 4]);
        }

        // already unit mean-square: unchanged
        let unit = vec![Tensor::vector(&[1.0, 0.0]), Tensor::vector(&[0.0, -1.0])];
        let (out, _) = iterbn_normalize(&unit, 0.0).unwrap();
        for (o, c) in out.iter().zip(&unit) {
            for (a, b) in o.data().iter().zip(c.data()) {
                assert_relative_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn exact_zero_mean_after_centering() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for order in 1..=4usize {
            let s = InteractionSet::new((1..=order).collect()).unwrap();
            for _ in 0..3 {
                let batch_size = rng.gen_range(8..20);
                let dims: Vec<usize> = (0..order).map(|_| rng.gen_range(1..5)).collect();
                let batches: Vec<Vec<Tensor>> = dims
                    .iter()
                    .map(|&d| rand_batch(&mut rng, batch_size, d, -3.0, 3.0))
                    .collect();
                let views: Vec<&[Tensor]> = batches.iter().map(|b| b.as_slice()).collect();
                let moments = compute_moments(&views, &s).unwrap();
                let coeffs = centering_coefficients(&s, &moments).unwrap();
                let products: Vec<Tensor> = (0..batch_size)
                    .map(|i| {
                        let mut p = views[0][i].clone();
                        for v in &views[1..] {
                            p = p.outer(&v[i]);
                        }
                        p
                    })
                    .collect();
                let centered = iterbn_center(&products, &coeffs, &views).unwrap();
                let mean = Tensor::stack(&centered).mean_axis0();
                let scale = products
                    .iter()
                    .flat_map(|t| t.data())
                    .fold(0.0f64, |a, &b| a.max(b.abs()))
                    .max(1.0);
                for &v in mean.data() {
                    assert!(
                        v.abs() / scale < 1e-9,
                        "order {order}: residual mean {v} at scale {scale}"
                    );
                }
            }
        }
    }

    #[test]
    fn center_scale_equivariance_and_normalize_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let s = set("123");
        let dims = [2usize, 2, 3];
        let batches: Vec<Vec<Tensor>> = dims
            .iter()
            .map(|&d| rand_batch(&mut rng, 8, d, -2.0, 2.0))
            .collect();
        let run = |views: &[&[Tensor]]| {
            let moments = compute_moments(views, &s).unwrap();
            let coeffs = centering_coefficients(&s, &moments).unwrap();
            let products: Vec<Tensor> = (0..8)
                .map(|i| views[0][i].outer(&views[1][i]).outer(&views[2][i]))
                .collect();
            let centered = iterbn_center(&products, &coeffs, views).unwrap();
            let normalized = iterbn_normalize(&centered, 0.0).unwrap().0;
            (centered, normalized)
        };
        let views: Vec<&[Tensor]> = batches.iter().map(|b| b.as_slice()).collect();
        let (centered, normalized) = run(&views);

        let c = 3.25f64;
        let scaled: Vec<Tensor> = batches[1].iter().map(|t| t.scale(c)).collect();
        let scaled_views: Vec<&[Tensor]> = vec![&batches[0], &scaled, &batches[2]];
        let (centered2, normalized2) = run(&scaled_views);
        for i in 0..8 {
            for (a, b) in centered[i].data().iter().zip(centered2[i].data()) {
                assert_relative_eq!(b, &(c * a), epsilon = 1e-12, max_relative = 1e-12);
            }
            for (a, b) in normalized[i].data().iter().zip(normalized2[i].data()) {
                assert_relative_eq!(a, b, epsilon = 1e-12, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn naive_pair_equals_generalized_pipeline() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let f1 = rand_batch(&mut rng, 8, 3, -2.0, 2.0);
        let f2 = rand_batch(&mut rng, 8, 2, -2.0, 2.0);
        let naive = naive_iterated_vbn(&[&f1, &f2], 1e-8).unwrap();
        let general = iterbn_pipeline(&[&f1, &f2], &set("12"), 1e-8).unwrap();
        for (a, b) in naive.iter().zip(&general) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_relative_eq!(x, y, epsilon = 1e-12, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn naive_rademacher_conspiracy_recovers_first_modality() {
        // f2 = f3 is a balanced sign pattern chosen orthogonal to f1, so the
        // iterated pipeline returns the f1 batch itself.
        let f1 = vec![
            Tensor::vector(&[1.0]),
            Tensor::vector(&[1.0]),
            Tensor::vector(&[-1.0]),
            Tensor::vector(&[-1.0]),
        ];
        let r = vec![
            Tensor::vector(&[1.0]),
            Tensor::vector(&[-1.0]),
            Tensor::vector(&[1.0]),
            Tensor::vector(&[-1.0]),
        ];
        let out = naive_iterated_vbn(&[&f1, &r, &r], 0.0).unwrap();
        for (o, f) in out.iter().zip(&f1) {
            assert_relative_eq!(
                o.data()[0],
                f.data()[0],
                epsilon = 1e-12,
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn naive_single_modality_is_vbn() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let f = rand_batch(&mut rng, 5, 3, -2.0, 2.0);
        let naive = naive_iterated_vbn(&[&f], 1e-8).unwrap();
        let (plain, _) = vbn(&f, 1e-8).unwrap();
        for (a, b) in naive.iter().zip(&plain) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn running_moments_update() {
        let f1 = vec![Tensor::vector(&[1.0]), Tensor::vector(&[3.0])];
        let f2 = vec![Tensor::vector(&[2.0]), Tensor::vector(&[2.0])];
        let s = set("12");
        let batch = compute_moments(&[&f1, &f2], &s).unwrap();
        let mut running = MomentCache::new_running(s.clone(), &[1, 1], 0.9).unwrap();
        running.update_running(&batch).unwrap();
        // r = 0.9 * 0 + 0.1 * batch
        assert_relative_eq!(
            running.moment(&set("1")).unwrap().data()[0],
            0.2,
            epsilon = 1e-15
        );
        // E(f1 f2) = (1*2 + 3*2) / 2 = 4
        assert_relative_eq!(
            running.moment(&set("12")).unwrap().data()[0],
            0.1 * 4.0,
            epsilon = 1e-15
        );
        assert!(running.update_running(&batch).is_ok());
        assert!(MomentCache::new_running(s, &[1, 1], 1.5).is_err());
    }

    #[test]
    fn graph_pipeline_matches_value_pipeline() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for order in 1..=3usize {
            let s = InteractionSet::new((1..=order).collect()).unwrap();
            let dims: Vec<usize> = (0..order).map(|_| rng.gen_range(1..4)).collect();
            let batches: Vec<Vec<Tensor>> = dims
                .iter()
                .map(|&d| rand_batch(&mut rng, 6, d, -2.0, 2.0))
                .collect();
            let views: Vec<&[Tensor]> = batches.iter().map(|b| b.as_slice()).collect();
            let value_out = iterbn_pipeline(&views, &s, 1e-8).unwrap();

            let mut tape = Tape::new();
            let inputs: Vec<NodeId> = batches
                .iter()
                .map(|b| {
                    let stacked = Tensor::stack(b);
                    let leaf = tape.leaf(stacked);
                    vbn_graph(&mut tape, leaf, 1e-8).out
                })
                .collect();
            let graph = iterbn_graph(&mut tape, &s, &inputs, 1e-8);
            let graph_out = tape.value(graph.out).unstack();
            for (a, b) in value_out.iter().zip(&graph_out) {
                for (x, y) in a.data().iter().zip(b.data()) {
                    assert_relative_eq!(x, y, epsilon = 1e-13, max_relative = 1e-12);
                }
            }
        }
    }

    #[test]
    fn naive_graph_matches_value_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(88);
        let f1 = rand_batch(&mut rng, 6, 2, -2.0, 2.0);
        let f2 = rand_batch(&mut rng, 6, 3, -2.0, 2.0);
        let f3 = rand_batch(&mut rng, 6, 2, -2.0, 2.0);
        let value_out = naive_iterated_vbn(&[&f1, &f2, &f3], 1e-8).unwrap();

        let mut tape = Tape::new();
        let inputs: Vec<NodeId> = [&f1, &f2, &f3]
            .iter()
            .map(|b| {
                let leaf = tape.leaf(Tensor::stack(b));
                vbn_graph(&mut tape, leaf, 1e-8).out
            })
            .collect();
        let graph = naive_graph(&mut tape, &inputs, 1e-8);
        assert_eq!(graph.stages.len(), 2);
        let graph_out = tape.value(graph.out).unstack();
        for (a, b) in value_out.iter().zip(&graph_out) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_relative_eq!(x, y, epsilon = 1e-13, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn iterbn_graph_gradients_match_finite_differences() {
        use crate::gradcheck::{central_difference, max_relative_error};
        let s = set("12");
        let dims = [2usize, 2];
        let b = 4usize;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let theta: Vec<f64> = (0..(b * dims[0] + b * dims[1]))
            .map(|_| rng.gen_range(-1.5..1.5))
            .collect();
        let run = |p: &[f64], grad: bool| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let x1 = tape.leaf(Tensor::new(vec![b, dims[0]], p[..b * dims[0]].to_vec()).unwrap());
            let x2 = tape.leaf(Tensor::new(vec![b, dims[1]], p[b * dims[0]..].to_vec()).unwrap());
            let n1 = vbn_graph(&mut tape, x1, 1e-8).out;
            let n2 = vbn_graph(&mut tape, x2, 1e-8).out;
            let g = iterbn_graph(&mut tape, &s, &[n1, n2], 1e-8);
            let probe_shape = tape.value(g.out).shape().to_vec();
            let probe_vals: Vec<f64> = (0..tape.value(g.out).len())
                .map(|k| ((k as f64) * 0.37).cos())
                .collect();
            let probe = tape.leaf(Tensor::new(probe_shape, probe_vals).unwrap());
            let prod = tape.mul(g.out, probe);
            let loss = tape.frobenius_sq(prod);
            let v = tape.value(loss).scalar_value();
            if !grad {
                return (v, Vec::new());
            }
            let grads = tape.backward(loss).unwrap();
            let mut flat = grads.get(x1).unwrap().data().to_vec();
            flat.extend_from_slice(grads.get(x2).unwrap().data());
            (v, flat)
        };
        let (_, analytic) = run(&theta, true);
        let numeric = central_difference(|p| run(p, false).0, &theta, 1e-5);
        let err = max_relative_error(&analytic, &numeric, 1e-6);
        assert!(err < 1e-5, "gradient through batch moments: error {err}");
    }
}
