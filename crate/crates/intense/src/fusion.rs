//! Fusion heads: linear combination over modality and interaction
//! representations, block-norm regularization, and relevance recovery.
//!
//! An interaction set names the modalities whose representations are fused
//! by outer product; singletons are the plain per-modality terms. The head
//! holds one flattened weight block per set plus a shared bias. Relevance
//! scores come from the block norms: `beta_I = ||w_I||^(2/(p+1)) /
//! (sum_J ||w_J||^(2p/(p+1)))^(1/p)`, which makes `||beta||_p = 1`.

use std::collections::BTreeMap;
use std::fmt;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Highest supported interaction order.
pub const MAX_ORDER: usize = 4;

/// Sorted, duplicate-free, nonempty set of 1-based modality indices.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InteractionSet(Vec<usize>);

impl InteractionSet {
    pub fn new(mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if indices.is_empty() {
            return Err(Error::Contract("interaction set must be nonempty".into()));
        }
        if indices[0] == 0 {
            return Err(Error::Contract(
                "modality indices are 1-based; 0 is invalid".into(),
            ));
        }
        Ok(InteractionSet(indices))
    }

    pub fn singleton(m: usize) -> Self {
        assert!(m >= 1, "modality indices are 1-based");
        InteractionSet(vec![m])
    }

    /// Parses the compact digit form ("13" means modalities 1 and 3) or the
    /// bracket form ("[1,13]") needed once indices exceed 9.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() {
            return Err(Error::Contract("empty interaction set".into()));
        }
        if let Some(inner) = s.strip_prefix('[') {
            let inner = inner
                .strip_suffix(']')
                .ok_or_else(|| Error::Contract(format!("unclosed bracket in {s:?}")))?;
            let indices = inner
                .split(',')
                .map(|tok| {
                    tok.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Contract(format!("bad modality index {tok:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            return InteractionSet::new(indices);
        }
        let indices = s
            .chars()
            .map(|c| {
                c.to_digit(10)
                    .map(|d| d as usize)
                    .ok_or_else(|| Error::Contract(format!("bad digit {c:?} in {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        InteractionSet::new(indices)
    }

    pub fn order(&self) -> usize {
        self.0.len()
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn contains(&self, m: usize) -> bool {
        self.0.binary_search(&m).is_ok()
    }

    pub fn is_subset_of(&self, other: &InteractionSet) -> bool {
        self.0.iter().all(|&m| other.contains(m))
    }

    /// All nonempty subsets, smallest first.
    pub fn nonempty_subsets(&self) -> Vec<InteractionSet> {
        let n = self.0.len();
        let mut subsets: Vec<InteractionSet> = (1..(1usize << n))
            .map(|mask| {
                InteractionSet(
                    (0..n)
                        .filter(|k| mask & (1 << k) != 0)
                        .map(|k| self.0[k])
                        .collect(),
                )
            })
            .collect();
        subsets.sort_by(canonical_order);
        subsets
    }

    /// Elements of `self` not in `other`.
    pub fn difference(&self, other: &InteractionSet) -> Vec<usize> {
        self.0
            .iter()
            .copied()
            .filter(|&m| !other.contains(m))
            .collect()
    }

    /// Ordering used for reports: by order, then lexicographically.
    pub fn canonical_cmp(&self, other: &InteractionSet) -> std::cmp::Ordering {
        canonical_order(self, other)
    }
}

fn canonical_order(a: &InteractionSet, b: &InteractionSet) -> std::cmp::Ordering {
    a.order().cmp(&b.order()).then_with(|| a.0.cmp(&b.0))
}

impl fmt::Display for InteractionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.iter().all(|&m| m <= 9) {
            for m in &self.0 {
                write!(f, "{m}")?;
            }
            Ok(())
        } else {
            write!(f, "[")?;
            for (k, m) in self.0.iter().enumerate() {
                if k > 0 {
                    write!(f, ",")?;
                }
                write!(f, "{m}")?;
            }
            write!(f, "]")
        }
    }
}

impl fmt::Debug for InteractionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{self}}}")
    }
}

impl Serialize for InteractionSet {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for InteractionSet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        InteractionSet::parse(&s).map_err(D::Error::custom)
    }
}

/// Which sets are fused and under what regularization.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Interaction sets in canonical order; singletons must cover every
    /// modality referenced by a larger set.
    pub interaction_sets: Vec<InteractionSet>,
    /// Relevance-norm parameter, `p >= 1`.
    pub p: f64,
    /// Block-regularization strength.
    pub lambda_reg: f64,
    /// Width each modality is projected to before outer products.
    pub tf_latent_dim: usize,
}

impl FusionConfig {
    pub fn new(
        mut interaction_sets: Vec<InteractionSet>,
        p: f64,
        lambda_reg: f64,
        tf_latent_dim: usize,
    ) -> Result<Self> {
        if !(p >= 1.0) {
            return Err(Error::InvalidConfig(format!("p must be >= 1, got {p}")));
        }
        if lambda_reg < 0.0 {
            return Err(Error::InvalidConfig("lambda_reg must be >= 0".into()));
        }
        interaction_sets.sort_by(canonical_order);
        interaction_sets.dedup();
        if interaction_sets.is_empty() {
            return Err(Error::InvalidConfig("no interaction sets configured".into()));
        }
        for set in &interaction_sets {
            if set.order() > MAX_ORDER {
                return Err(Error::UnsupportedOrder {
                    order: set.order(),
                    max: MAX_ORDER,
                });
            }
            for &m in set.indices() {
                let singleton = InteractionSet::singleton(m);
                if !interaction_sets.contains(&singleton) {
                    return Err(Error::InvalidConfig(format!(
                        "modality {m} appears in {set} but has no singleton set"
                    )));
                }
            }
        }
        Ok(FusionConfig {
            interaction_sets,
            p,
            lambda_reg,
            tf_latent_dim,
        })
    }

    /// `q = 2p / (p + 1)`, so `1 <= q <= 2`.
    pub fn q(&self) -> f64 {
        2.0 * self.p / (self.p + 1.0)
    }

    /// Largest modality index used by any set.
    pub fn n_modalities(&self) -> usize {
        self.interaction_sets
            .iter()
            .flat_map(|s| s.indices().iter().copied())
            .max()
            .unwrap_or(0)
    }

    pub fn has_interactions(&self) -> bool {
        self.interaction_sets.iter().any(|s| s.order() > 1)
    }
}

/// One weight block per interaction set plus a shared bias.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FusionHead {
    blocks: Vec<(InteractionSet, Tensor)>,
    pub bias: f64,
}

impl FusionHead {
    pub fn new(mut blocks: Vec<(InteractionSet, Tensor)>, bias: f64) -> Self {
        blocks.sort_by(|a, b| canonical_order(&a.0, &b.0));
        FusionHead { blocks, bias }
    }

    pub fn blocks(&self) -> &[(InteractionSet, Tensor)] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [(InteractionSet, Tensor)] {
        &mut self.blocks
    }

    pub fn block(&self, set: &InteractionSet) -> Option<&Tensor> {
        self.blocks
            .iter()
            .find(|(s, _)| s == set)
            .map(|(_, w)| w)
    }

    /// Euclidean norm of each block, in canonical set order.
    pub fn block_norms(&self) -> Vec<(InteractionSet, f64)> {
        self.blocks
            .iter()
            .map(|(s, w)| (s.clone(), w.frobenius_sq().sqrt()))
            .collect()
    }
}

/// Recovered relevance scores; `||beta||_p = 1`, and `display_share`
/// renormalizes the same scores to sum to one for reporting.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RelevanceReport {
    pub p: f64,
    pub entries: Vec<RelevanceEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RelevanceEntry {
    pub set: InteractionSet,
    pub beta: f64,
    pub display_share: f64,
}

impl RelevanceReport {
    pub fn beta(&self, set: &InteractionSet) -> Option<f64> {
        self.entries.iter().find(|e| &e.set == set).map(|e| e.beta)
    }

    pub fn share(&self, set: &InteractionSet) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| &e.set == set)
            .map(|e| e.display_share)
    }
}

/// Logit for one sample: `sum_I <w_I, rep_I> + bias`.
pub fn fusion_forward(
    reps: &BTreeMap<InteractionSet, Tensor>,
    head: &FusionHead,
) -> Result<f64> {
    let mut logit = head.bias;
    for (set, w) in &head.blocks {
        let rep = reps.get(set).ok_or_else(|| {
            Error::Contract(format!("missing representation for interaction set {set}"))
        })?;
        if rep.len() != w.len() {
            return Err(Error::Contract(format!(
                "representation for {set} has {} elements, weight block has {}",
                rep.len(),
                w.len()
            )));
        }
        logit += rep.dot(w);
    }
    Ok(logit)
}

/// `-log sigmoid(t y)` for `y` in `{-1, +1}`, in numerically stable form.
pub fn logistic_loss(t: f64, y: f64) -> Result<f64> {
    if y != 1.0 && y != -1.0 {
        return Err(Error::Contract(format!("label must be -1 or +1, got {y}")));
    }
    if !t.is_finite() {
        return Err(Error::Contract(format!("logit must be finite, got {t}")));
    }
    Ok(crate::tape::softplus(-t * y))
}

/// `lambda * (sum_I ||w_I||_2^q)^(2/q)`.
pub fn block_norm_penalty(head: &FusionHead, q: f64, lambda_reg: f64) -> f64 {
    let sum: f64 = head
        .blocks
        .iter()
        .map(|(_, w)| w.frobenius_sq().sqrt().powf(q))
        .sum();
    lambda_reg * sum.powf(2.0 / q)
}

/// Recovers the relevance scores from the fusion-layer block norms.
pub fn recover_relevance(head: &FusionHead, p: f64) -> Result<RelevanceReport> {
    let norms = head.block_norms();
    let denom_sum: f64 = norms
        .iter()
        .map(|(_, n)| n.powf(2.0 * p / (p + 1.0)))
        .sum();
    if denom_sum == 0.0 {
        return Err(Error::UndefinedRelevance);
    }
    let denom = denom_sum.powf(1.0 / p);
    let betas: Vec<(InteractionSet, f64)> = norms
        .iter()
        .map(|(s, n)| (s.clone(), n.powf(2.0 / (p + 1.0)) / denom))
        .collect();
    let total: f64 = betas.iter().map(|(_, b)| b).sum();
    let entries = betas
        .into_iter()
        .map(|(set, beta)| RelevanceEntry {
            set,
            beta,
            display_share: beta / total,
        })
        .collect();
    Ok(RelevanceReport { p, entries })
}

/// Linear projection of a representation onto `tf_latent_dim` components.
pub fn interaction_project(rep: &Tensor, proj_weights: &Tensor) -> Tensor {
    assert_eq!(proj_weights.rank(), 2, "projection weights must be [out, in]");
    let (dout, din) = (proj_weights.shape()[0], proj_weights.shape()[1]);
    assert_eq!(rep.len(), din, "projection width mismatch");
    let mut out = vec![0.0; dout];
    for (o, slot) in out.iter_mut().enumerate() {
        let row = &proj_weights.data()[o * din..(o + 1) * din];
        *slot = row.iter().zip(rep.data()).map(|(&w, &x)| w * x).sum();
    }
    Tensor::vector(&out)
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

    #[test]
    fn interaction_set_parsing() {
        assert_eq!(set("13").indices(), &[1, 3]);
        assert_eq!(set("312").indices(), &[1, 2, 3]);
        assert_eq!(set("[1,13]").indices(), &[1, 13]);
        assert_eq!(set("[1,13]").to_string(), "[1,13]");
        assert_eq!(set("7").to_string(), "7");
        assert!(InteractionSet::parse("").is_err());
        assert!(InteractionSet::parse("a").is_err());
        assert!(InteractionSet::parse("[1,").is_err());
        assert!(InteractionSet::new(vec![]).is_err());
        assert!(InteractionSet::new(vec![0]).is_err());
    }

    #[test]
    fn subsets_enumeration() {
        let s = set("124");
        let subs = s.nonempty_subsets();
        assert_eq!(subs.len(), 7);
        assert_eq!(subs[0], set("1"));
        assert_eq!(subs[6], set("124"));
    }

    #[test]
    fn config_requires_singleton_cover() {
        let err = FusionConfig::new(vec![set("12")], 1.0, 0.05, 8);
        assert!(err.is_err());
        let ok = FusionConfig::new(vec![set("1"), set("2"), set("12")], 1.0, 0.05, 8);
        assert!(ok.is_ok());
        assert_relative_eq!(ok.unwrap().q(), 1.0);
    }

    #[test]
    fn config_rejects_order_above_max() {
        let sets = vec![
            set("1"),
            set("2"),
            set("3"),
            set("4"),
            set("5"),
            set("[1,2,3,4,5]"),
        ];
        assert!(matches!(
            FusionConfig::new(sets, 1.0, 0.05, 4),
            Err(Error::UnsupportedOrder { order: 5, max: 4 })
        ));
    }

    #[test]
    fn forward_bias_only() {
        let head = FusionHead::new(vec![(set("1"), Tensor::zeros(&[2]))], 0.5);
        let mut reps = BTreeMap::new();
        reps.insert(set("1"), Tensor::vector(&[7.0, -3.0]));
        assert_eq!(fusion_forward(&reps, &head).unwrap(), 0.5);
    }

    #[test]
    fn forward_dot_by_hand() {
        let head = FusionHead::new(vec![(set("1"), Tensor::vector(&[1.0, 2.0]))], 0.0);
        let mut reps = BTreeMap::new();
        reps.insert(set("1"), Tensor::vector(&[3.0, 4.0]));
        assert_eq!(fusion_forward(&reps, &head).unwrap(), 11.0);
    }

    #[test]
    fn forward_cancellation_and_missing_rep() {
        let head = FusionHead::new(
            vec![
                (set("1"), Tensor::vector(&[1.0])),
                (set("2"), Tensor::vector(&[1.0])),
            ],
            0.25,
        );
        let mut reps = BTreeMap::new();
        reps.insert(set("1"), Tensor::vector(&[1.0]));
        reps.insert(set("2"), Tensor::vector(&[-1.0]));
        assert_eq!(fusion_forward(&reps, &head).unwrap(), 0.25);
        reps.remove(&set("2"));
        assert!(fusion_forward(&reps, &head).is_err());
    }

    #[test]
    fn logistic_loss_values() {
        assert_relative_eq!(
            logistic_loss(0.0, 1.0).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-15
        );
        assert!(logistic_loss(20.0, 1.0).unwrap() < 1e-8);
        // -log(e / (1 + e))
        assert_relative_eq!(
            logistic_loss(1.0, 1.0).unwrap(),
            0.3132616875182228,
            epsilon = 1e-12
        );
        assert!(logistic_loss(0.0, 0.0).is_err());
    }

    #[test]
    fn block_penalty_examples() {
        let head = FusionHead::new(
            vec![
                (set("1"), Tensor::vector(&[3.0, 0.0])),
                (set("2"), Tensor::vector(&[0.0, 4.0])),
            ],
            0.0,
        );
        // q = 1: (3 + 4)^2 = 49
        assert_relative_eq!(block_norm_penalty(&head, 1.0, 1.0), 49.0, epsilon = 1e-12);
        // q = 2 collapses to the plain squared-norm sum
        assert_relative_eq!(block_norm_penalty(&head, 2.0, 1.0), 25.0, epsilon = 1e-12);
        let single = FusionHead::new(vec![(set("1"), Tensor::vector(&[3.0, 4.0]))], 0.0);
        for q in [1.0, 1.3, 2.0] {
            assert_relative_eq!(block_norm_penalty(&single, q, 0.7), 0.7 * 25.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn penalty_convex_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let q = rng.gen_range(1.0..2.0);
            let draw = |rng: &mut ChaCha8Rng| {
                FusionHead::new(
                    vec![
                        (set("1"), Tensor::vector(&[rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)])),
                        (set("2"), Tensor::vector(&[rng.gen_range(-2.0..2.0)])),
                        (set("12"), Tensor::vector(&[rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)])),
                    ],
                    0.0,
                )
            };
            let a = draw(&mut rng);
            let b = draw(&mut rng);
            let mid = FusionHead::new(
                a.blocks()
                    .iter()
                    .zip(b.blocks())
                    .map(|((s, wa), (_, wb))| (s.clone(), wa.add(wb).scale(0.5)))
                    .collect(),
                0.0,
            );
            let fa = block_norm_penalty(&a, q, 1.0);
            let fb = block_norm_penalty(&b, q, 1.0);
            let fm = block_norm_penalty(&mid, q, 1.0);
            assert!(fm <= 0.5 * (fa + fb) + 1e-9, "q={q}");
        }
    }

    #[test]
    fn relevance_hand_example() {
        let head = FusionHead::new(
            vec![
                (set("1"), Tensor::vector(&[3.0, 0.0])),
                (set("2"), Tensor::vector(&[4.0, 0.0])),
            ],
            0.0,
        );
        let rep = recover_relevance(&head, 1.0).unwrap();
        assert_relative_eq!(rep.beta(&set("1")).unwrap(), 3.0 / 7.0, epsilon = 1e-12);
        assert_relative_eq!(rep.beta(&set("2")).unwrap(), 4.0 / 7.0, epsilon = 1e-12);
        let l1: f64 = rep.entries.iter().map(|e| e.beta).sum();
        assert_relative_eq!(l1, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn relevance_symmetry_and_support() {
        for p in [1.0, 1.5, 2.0, 4.0] {
            let m = 4;
            let blocks = (1..=m)
                .map(|k| (InteractionSet::singleton(k), Tensor::vector(&[0.6, 0.8])))
                .collect();
            let rep = recover_relevance(&FusionHead::new(blocks, 0.0), p).unwrap();
            for e in &rep.entries {
                assert_relative_eq!(e.beta, (m as f64).powf(-1.0 / p), epsilon = 1e-12);
            }
        }
        let head = FusionHead::new(
            vec![
                (set("1"), Tensor::vector(&[0.0, 0.0])),
                (set("2"), Tensor::vector(&[2.5, 0.0])),
            ],
            0.0,
        );
        let rep = recover_relevance(&head, 1.5).unwrap();
        assert_eq!(rep.beta(&set("1")).unwrap(), 0.0);
        assert_relative_eq!(rep.beta(&set("2")).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn relevance_all_zero_head_errors() {
        let head = FusionHead::new(vec![(set("1"), Tensor::zeros(&[3]))], 0.0);
        assert!(matches!(
            recover_relevance(&head, 1.0),
            Err(Error::UndefinedRelevance)
        ));
    }

    #[test]
    fn relevance_p_norm_is_one_and_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for p in [1.0, 1.5, 2.0, 4.0] {
            for _ in 0..20 {
                let blocks: Vec<_> = (1..=5)
                    .map(|k| {
                        let w: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
                        (InteractionSet::singleton(k), Tensor::vector(&w))
                    })
                    .collect();
                let head = FusionHead::new(blocks.clone(), 0.0);
                let rep = recover_relevance(&head, p).unwrap();
                let pnorm: f64 = rep
                    .entries
                    .iter()
                    .map(|e| e.beta.powf(p))
                    .sum::<f64>()
                    .powf(1.0 / p);
                assert_relative_eq!(pnorm, 1.0, epsilon = 1e-12);
                let share_sum: f64 = rep.entries.iter().map(|e| e.display_share).sum();
                assert_relative_eq!(share_sum, 1.0, epsilon = 1e-12);

                let c = rng.gen_range(0.1..10.0);
                let scaled = FusionHead::new(
                    blocks
                        .iter()
                        .map(|(s, w)| (s.clone(), w.scale(c)))
                        .collect(),
                    0.0,
                );
                let rep2 = recover_relevance(&scaled, p).unwrap();
                for (a, b) in rep.entries.iter().zip(&rep2.entries) {
                    assert_relative_eq!(a.beta, b.beta, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn projection_examples() {
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let rep = Tensor::vector(&[3.0, -1.0]);
        assert_eq!(interaction_project(&rep, &eye).data(), rep.data());
        let zero = Tensor::zeros(&[3, 2]);
        assert_eq!(interaction_project(&rep, &zero).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn relevance_report_roundtrips_through_json() {
        let head = FusionHead::new(
            vec![
                (set("1"), Tensor::vector(&[1.0])),
                (set("12"), Tensor::vector(&[2.0])),
            ],
            0.0,
        );
        let rep = recover_relevance(&head, 1.0).unwrap();
        let json = serde_json::to_string(&rep).unwrap();
        let back: RelevanceReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.entries.len(), 2);
        assert_eq!(back.entries[1].set, set("12"));
    }
}
