//! Verification oracles for the optimization identities the fusion method
//! rests on, plus the experiment-level reports.
//!
//! The block-norm objective and the constrained-relevance objective are
//! solved by two independent routes and compared; the closed-form
//! minimizers have brute-force counterparts (grid search, projected
//! gradient descent); and the generalized centering is checked against its
//! zero-expectation identities on random batches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{recover_relevance, FusionHead, InteractionSet, RelevanceReport};
use crate::normalization::{centering_coefficients, compute_moments, interleaved_product};
use crate::synthdata::{Dataset, SequenceSample, Split};
use crate::tensor::Tensor;
use crate::training::{evaluate, init_model, train, TrainConfig};

/// Closed form of `min_{x>0} u/x + (lambda/p) x^p`.
#[derive(Clone, Copy, Debug)]
pub struct PowerTradeoffMin {
    pub argmin: f64,
    pub min_value: f64,
}

pub fn power_tradeoff_min(u: f64, lambda: f64, p: f64) -> Result<PowerTradeoffMin> {
    if u <= 0.0 || lambda <= 0.0 || p < 1.0 {
        return Err(Error::Contract(format!(
            "power tradeoff needs u > 0, lambda > 0, p >= 1 (got u={u}, lambda={lambda}, p={p})"
        )));
    }
    let argmin = (u / lambda).powf(1.0 / (p + 1.0));
    let min_value = (p + 1.0) / p * u.powf(p / (p + 1.0)) * lambda.powf(1.0 / (p + 1.0));
    Ok(PowerTradeoffMin { argmin, min_value })
}

/// The traded-off objective `u/x + (lambda/p) x^p` at a point.
pub fn power_tradeoff_objective(u: f64, lambda: f64, p: f64, x: f64) -> f64 {
    u / x + lambda / p * x.powf(p)
}

/// Closed form of `max_{x>0} A x^u - B x` for `0 < u < 1`.
#[derive(Clone, Copy, Debug)]
pub struct ConcavePowerMax {
    pub argmax: f64,
    pub max_value: f64,
}

pub fn concave_power_max(a: f64, b: f64, u: f64) -> Result<ConcavePowerMax> {
    if a <= 0.0 || b <= 0.0 || u <= 0.0 || u >= 1.0 {
        return Err(Error::Contract(format!(
            "concave power max needs A > 0, B > 0, 0 < u < 1 (got A={a}, B={b}, u={u})"
        )));
    }
    let argmax = (a * u / b).powf(1.0 / (1.0 - u));
    let max_value = a * argmax.powf(u) - b * argmax;
    Ok(ConcavePowerMax { argmax, max_value })
}

pub fn concave_power_objective(a: f64, b: f64, u: f64, x: f64) -> f64 {
    a * x.powf(u) - b * x
}

/// Three-stage refining grid search; independent oracle for the closed forms.
/// Returns `(argopt, opt_value)` for minimization (negate for max).
pub fn grid_search_min(f: impl Fn(f64) -> f64, lo: f64, hi: f64, points: usize) -> (f64, f64) {
    let mut lo = lo;
    let mut hi = hi;
    let mut best_x = lo;
    let mut best_v = f64::INFINITY;
    for _ in 0..3 {
        let step = (hi - lo) / points as f64;
        for k in 0..=points {
            let x = lo + step * k as f64;
            if x <= 0.0 {
                continue;
            }
            let v = f(x);
            if v < best_v {
                best_v = v;
                best_x = x;
            }
        }
        lo = (best_x - step).max(step * 1e-3);
        hi = best_x + step;
    }
    (best_x, best_v)
}

/// Closed form of `min { sum_m A_m / beta_m : beta > 0, ||beta||_p^p <= 1 }`.
#[derive(Clone, Debug)]
pub struct AllocationResult {
    pub min_value: f64,
    pub beta: Vec<f64>,
}

pub fn relevance_allocation_closed_form(a: &[f64], p: f64) -> Result<AllocationResult> {
    if a.is_empty() {
        return Err(Error::Contract("empty instance".into()));
    }
    if a.iter().any(|&v| v <= 0.0) {
        return Err(Error::Contract("A must be positive element-wise".into()));
    }
    if p < 1.0 {
        return Err(Error::Contract(format!("p must be >= 1, got {p}")));
    }
    let s: f64 = a.iter().map(|&v| v.powf(p / (p + 1.0))).sum();
    let min_value = s.powf((p + 1.0) / p);
    let denom = s.powf(1.0 / p);
    let beta = a.iter().map(|&v| v.powf(1.0 / (p + 1.0)) / denom).collect();
    Ok(AllocationResult { min_value, beta })
}

/// Settings for the projected-gradient oracle.
#[derive(Clone, Copy, Debug)]
pub struct PgdSettings {
    pub max_iters: usize,
    /// Relative improvement below which an iteration counts as converged.
    pub tol: f64,
    /// Consecutive converged iterations required to stop.
    pub patience: usize,
}

impl Default for PgdSettings {
    fn default() -> Self {
        PgdSettings {
            max_iters: 20_000,
            tol: 1e-12,
            patience: 10,
        }
    }
}

/// Euclidean projection onto `{beta >= 0, ||beta||_p^p <= 1}`.
fn project_lp_ball(x: &[f64], p: f64) -> Vec<f64> {
    let clamped: Vec<f64> = x.iter().map(|&v| v.max(0.0)).collect();
    let norm_p: f64 = clamped.iter().map(|&v| v.powf(p)).sum();
    if norm_p <= 1.0 {
        return clamped;
    }
    if (p - 1.0).abs() < 1e-12 {
        // simplex projection: beta_i = max(x_i - nu, 0) with sum = 1
        let mut sorted = clamped.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let mut cumsum = 0.0;
        let mut nu = 0.0;
        for (k, &v) in sorted.iter().enumerate() {
            cumsum += v;
            let candidate = (cumsum - 1.0) / (k + 1) as f64;
            if candidate < v {
                nu = candidate;
            }
        }
        return clamped.iter().map(|&v| (v - nu).max(0.0)).collect();
    }
    if (p - 2.0).abs() < 1e-12 {
        let norm = norm_p.sqrt();
        return clamped.iter().map(|&v| v / norm).collect();
    }
    // general p: bisection on the multiplier nu; per coordinate, beta solves
    // beta + nu p beta^(p-1) = x on (0, x]
    let solve_coord = |x: f64, nu: f64| -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        let (mut lo, mut hi) = (0.0f64, x);
        for _ in 0..45 {
            let mid = 0.5 * (lo + hi);
            let g = mid + nu * p * mid.powf(p - 1.0) - x;
            if g > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    };
    let norm_of = |nu: f64| -> f64 {
        clamped
            .iter()
            .map(|&x| solve_coord(x, nu).powf(p))
            .sum::<f64>()
    };
    let mut nu_hi = 1.0;
    while norm_of(nu_hi) > 1.0 {
        nu_hi *= 2.0;
        if nu_hi > 1e12 {
            break;
        }
    }
    let mut lo = 0.0;
    let mut hi = nu_hi;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if norm_of(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let nu = 0.5 * (lo + hi);
    clamped.iter().map(|&x| solve_coord(x, nu)).collect()
}

/// Projected gradient descent on the relevance objective; independent
/// numerical oracle for the closed form.
pub fn relevance_allocation_pgd(a: &[f64], p: f64, settings: &PgdSettings) -> Result<f64> {
    if a.is_empty() || a.iter().any(|&v| v <= 0.0) {
        return Err(Error::Contract("A must be positive element-wise".into()));
    }
    let m = a.len();
    let objective = |beta: &[f64]| -> f64 {
        beta.iter()
            .zip(a)
            .map(|(&b, &ai)| if b <= 0.0 { f64::INFINITY } else { ai / b })
            .sum()
    };
    let mut beta: Vec<f64> = vec![(1.0 / m as f64).powf(1.0 / p); m];
    let mut value = objective(&beta);
    let mut step = 1e-2;
    let mut calm = 0usize;
    for _ in 0..settings.max_iters {
        let grad: Vec<f64> = beta
            .iter()
            .zip(a)
            .map(|(&b, &ai)| -ai / (b * b))
            .collect();
        let mut accepted = false;
        for _ in 0..60 {
            let candidate: Vec<f64> = beta
                .iter()
                .zip(&grad)
                .map(|(&b, &g)| b - step * g)
                .collect();
            let projected = project_lp_ball(&candidate, p);
            let cv = objective(&projected);
            if cv < value {
                let improvement = (value - cv) / value.abs().max(1e-300);
                beta = projected;
                value = cv;
                step *= 1.5;
                accepted = true;
                if improvement < settings.tol {
                    calm += 1;
                } else {
                    calm = 0;
                }
                break;
            }
            step *= 0.5;
            if step < 1e-18 {
                break;
            }
        }
        if !accepted {
            calm += 1;
            step = (step * 4.0).max(1e-12);
        }
        if calm >= settings.patience {
            return Ok(value);
        }
    }
    Err(Error::OracleFailure(format!(
        "projected gradient did not settle within {} iterations",
        settings.max_iters
    )))
}

/// A fixed-feature binary classification instance: the convex setting in
/// which the two objective formulations are provably interchangeable.
#[derive(Clone, Debug)]
pub struct ConvexInstance {
    /// `features[m][i]` is the dim-width feature vector of sample `i` in
    /// modality `m`.
    pub features: Vec<Vec<Vec<f64>>>,
    pub labels: Vec<f64>,
    pub lambda: f64,
    pub p: f64,
}

impl ConvexInstance {
    pub fn n_modalities(&self) -> usize {
        self.features.len()
    }

    pub fn dim(&self) -> usize {
        self.features[0][0].len()
    }
}

/// Random instance whose every modality carries label signal of the given
/// strength, so all blocks stay active at the optimum.
pub fn random_convex_instance(
    n: usize,
    dim: usize,
    signal: &[f64],
    lambda: f64,
    p: f64,
    seed: u64,
) -> ConvexInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let features = signal
        .iter()
        .map(|&strength| {
            labels
                .iter()
                .map(|&y| {
                    (0..dim)
                        .map(|d| {
                            let noise: f64 = rng.gen_range(-1.0..1.0);
                            let carrier = if d == 0 { strength * y } else { 0.0 };
                            carrier + noise
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    ConvexInstance {
        features,
        labels,
        lambda,
        p,
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Sum over samples of the logistic loss of `<w, x> + b` style logits.
fn data_term(instance: &ConvexInstance, weights: &[Vec<f64>], scales: &[f64], bias: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..instance.labels.len() {
        let mut t = bias;
        for (m, w) in weights.iter().enumerate() {
            let x = &instance.features[m][i];
            let dot: f64 = w.iter().zip(x).map(|(&a, &b)| a * b).sum();
            t += scales[m] * dot;
        }
        total += softplus(-instance.labels[i] * t);
    }
    total
}

fn data_gradient(
    instance: &ConvexInstance,
    weights: &[Vec<f64>],
    scales: &[f64],
    bias: f64,
) -> (Vec<Vec<f64>>, f64) {
    let m = weights.len();
    let mut gw: Vec<Vec<f64>> = weights.iter().map(|w| vec![0.0; w.len()]).collect();
    let mut gb = 0.0;
    for i in 0..instance.labels.len() {
        let mut t = bias;
        for (k, w) in weights.iter().enumerate() {
            let x = &instance.features[k][i];
            let dot: f64 = w.iter().zip(x).map(|(&a, &b)| a * b).sum();
            t += scales[k] * dot;
        }
        let y = instance.labels[i];
        let dl = -y * sigmoid(-y * t);
        gb += dl;
        for k in 0..m {
            let x = &instance.features[k][i];
            for (slot, &xv) in gw[k].iter_mut().zip(x) {
                *slot += dl * scales[k] * xv;
            }
        }
    }
    (gw, gb)
}

/// Gradient descent with a Barzilai-Borwein step and a backtracking
/// safeguard, run until the objective stalls. `flat` packs all
/// coordinates; `eval` returns (value, gradient).
fn descend(
    flat: &mut [f64],
    eval: &dyn Fn(&[f64]) -> (f64, Vec<f64>),
    max_iters: usize,
    tol: f64,
) -> f64 {
    let (mut value, mut grad) = eval(flat);
    let mut step = 1e-3;
    let mut calm = 0usize;
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    for _ in 0..max_iters {
        // spectral step estimate from the last accepted move
        if let Some((dx, dg)) = &prev {
            let num: f64 = dx.iter().zip(dg).map(|(a, b)| a * b).sum();
            let den: f64 = dg.iter().map(|g| g * g).sum();
            if num > 0.0 && den > 0.0 {
                step = (num / den).clamp(1e-12, 1e3);
            }
        }
        let mut accepted = false;
        for _ in 0..60 {
            let candidate: Vec<f64> = flat
                .iter()
                .zip(&grad)
                .map(|(&x, &g)| x - step * g)
                .collect();
            let (cv, cg) = eval(&candidate);
            if cv < value {
                let improvement = value - cv;
                let dx: Vec<f64> = candidate.iter().zip(flat.iter()).map(|(a, b)| a - b).collect();
                let dg: Vec<f64> = cg.iter().zip(&grad).map(|(a, b)| a - b).collect();
                prev = Some((dx, dg));
                flat.copy_from_slice(&candidate);
                value = cv;
                grad = cg;
                accepted = true;
                if improvement < tol * (1.0 + value.abs()) {
                    calm += 1;
                } else {
                    calm = 0;
                }
                break;
            }
            step *= 0.5;
            if step < 1e-18 {
                break;
            }
        }
        if !accepted {
            calm += 1;
            step = 1e-6;
            prev = None;
        }
        if calm >= 25 {
            break;
        }
    }
    value
}

/// Outcome of solving the same instance through both formulations.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub eq_constrained_objective: f64,
    pub eq_blocknorm_objective: f64,
    pub beta_constrained: Vec<f64>,
    pub beta_recovered: Vec<f64>,
    pub beta_gap_linf: f64,
    pub objective_gap_rel: f64,
    pub rounds: usize,
}

/// Solves the constrained formulation by alternating minimization (weights
/// by gradient descent, relevance by the closed form) and the block-norm
/// formulation directly, then recovers relevance from block norms and
/// reports the gaps between the two routes.
pub fn objective_equivalence_check(instance: &ConvexInstance) -> Result<EquivalenceReport> {
    let m = instance.n_modalities();
    let dim = instance.dim();
    let lambda = instance.lambda;
    let p = instance.p;

    // ---- constrained route: alternate w-step and closed-form beta-step
    let mut beta: Vec<f64> = vec![(1.0 / m as f64).powf(1.0 / p); m];
    let mut weights: Vec<Vec<f64>> = vec![vec![0.0; dim]; m];
    let mut bias = 0.0;

    let objective_constrained =
        |weights: &[Vec<f64>], bias: f64, beta: &[f64]| -> f64 {
            let scales: Vec<f64> = beta.iter().map(|&b| b.max(0.0).sqrt()).collect();
            let penalty: f64 = weights
                .iter()
                .map(|w| w.iter().map(|&v| v * v).sum::<f64>())
                .sum();
            data_term(instance, weights, &scales, bias) + lambda * penalty
        };

    let mut obj = objective_constrained(&weights, bias, &beta);
    let mut rounds = 0usize;
    for _ in 0..10_000 {
        rounds += 1;
        // w-step at fixed beta
        let beta_fixed = beta.clone();
        let scales: Vec<f64> = beta_fixed.iter().map(|&b| b.max(0.0).sqrt()).collect();
        let mut flat: Vec<f64> = weights.iter().flatten().copied().collect();
        flat.push(bias);
        let eval = |x: &[f64]| -> (f64, Vec<f64>) {
            let ws: Vec<Vec<f64>> = (0..m).map(|k| x[k * dim..(k + 1) * dim].to_vec()).collect();
            let b = x[m * dim];
            let value = {
                let penalty: f64 = ws
                    .iter()
                    .map(|w| w.iter().map(|&v| v * v).sum::<f64>())
                    .sum();
                data_term(instance, &ws, &scales, b) + lambda * penalty
            };
            let (mut gw, gb) = data_gradient(instance, &ws, &scales, b);
            for (gk, wk) in gw.iter_mut().zip(&ws) {
                for (g, &w) in gk.iter_mut().zip(wk) {
                    *g += 2.0 * lambda * w;
                }
            }
            let mut grad: Vec<f64> = gw.into_iter().flatten().collect();
            grad.push(gb);
            (value, grad)
        };
        descend(&mut flat, &eval, 400, 1e-12);
        for k in 0..m {
            weights[k].copy_from_slice(&flat[k * dim..(k + 1) * dim]);
        }
        bias = flat[m * dim];

        let after_w = objective_constrained(&weights, bias, &beta);

        // beta-step: absorbed weights give the closed-form relevance
        let absorbed: Vec<Vec<f64>> = weights
            .iter()
            .zip(&beta)
            .map(|(w, &b)| w.iter().map(|&v| v * b.max(0.0).sqrt()).collect())
            .collect();
        let a: Vec<f64> = absorbed
            .iter()
            .map(|w| lambda * w.iter().map(|&v| v * v).sum::<f64>())
            .collect();
        let active: Vec<usize> = (0..m).filter(|&k| a[k] > 0.0).collect();
        if active.is_empty() {
            break;
        }
        let sub: Vec<f64> = active.iter().map(|&k| a[k]).collect();
        let solved = relevance_allocation_closed_form(&sub, p)?;
        let mut new_beta = vec![0.0; m];
        for (slot, &k) in active.iter().enumerate() {
            new_beta[k] = solved.beta[slot];
        }
        // map back: w = absorbed / sqrt(beta)
        for k in 0..m {
            if new_beta[k] > 0.0 {
                let inv = 1.0 / new_beta[k].sqrt();
                for (w, &ab) in weights[k].iter_mut().zip(&absorbed[k]) {
                    *w = ab * inv;
                }
            } else {
                weights[k].iter_mut().for_each(|w| *w = 0.0);
            }
        }
        let after_beta = objective_constrained(&weights, bias, &new_beta);
        if after_beta > after_w + 1e-9 * after_w.abs().max(1.0) {
            return Err(Error::NoConvergence(format!(
                "relevance step raised the objective: {after_w} -> {after_beta}"
            )));
        }
        beta = new_beta;
        let change = (obj - after_beta).abs();
        obj = after_beta;
        if change < 1e-8 {
            break;
        }
    }
    let eq_constrained_objective = obj;

    // ---- block-norm route: for q = 1 a proximal-gradient solve handles
    // the corner geometry exactly; other q fall back to plain descent
    let q = 2.0 * p / (p + 1.0);
    let mut flat = vec![0.0; m * dim + 1];
    let ones = vec![1.0; m];
    let eq_blocknorm_objective = if (q - 1.0).abs() < 1e-12 {
        ista_block_l1_sq(instance, &mut flat, lambda, 100_000, 1e-12)
    } else {
        let eval = |x: &[f64]| -> (f64, Vec<f64>) {
            let ws: Vec<Vec<f64>> =
                (0..m).map(|k| x[k * dim..(k + 1) * dim].to_vec()).collect();
            let b = x[m * dim];
            let norms: Vec<f64> = ws
                .iter()
                .map(|w| w.iter().map(|&v| v * v).sum::<f64>().sqrt())
                .collect();
            let norm_sum: f64 = norms.iter().map(|&n| n.powf(q)).sum();
            let value = data_term(instance, &ws, &ones, b) + lambda * norm_sum.powf(2.0 / q);
            let (mut gw, gb) = data_gradient(instance, &ws, &ones, b);
            // subgradient 0 at zero blocks
            let outer = if norm_sum > 0.0 {
                lambda * (2.0 / q) * norm_sum.powf(2.0 / q - 1.0)
            } else {
                0.0
            };
            for k in 0..m {
                if norms[k] > 0.0 {
                    let coeff = outer * q * norms[k].powf(q - 2.0);
                    for (g, &w) in gw[k].iter_mut().zip(&ws[k]) {
                        *g += coeff * w;
                    }
                }
            }
            let mut grad: Vec<f64> = gw.into_iter().flatten().collect();
            grad.push(gb);
            (value, grad)
        };
        descend(&mut flat, &eval, 50_000, 1e-12)
    };
    let absorbed: Vec<Vec<f64>> = (0..m).map(|k| flat[k * dim..(k + 1) * dim].to_vec()).collect();

    // recover relevance from the block norms through the fusion-layer path
    let head = FusionHead::new(
        absorbed
            .iter()
            .enumerate()
            .map(|(k, w)| (InteractionSet::singleton(k + 1), Tensor::vector(w)))
            .collect(),
        0.0,
    );
    let recovered = recover_relevance(&head, p)?;
    let beta_recovered: Vec<f64> = (0..m)
        .map(|k| {
            recovered
                .beta(&InteractionSet::singleton(k + 1))
                .unwrap_or(0.0)
        })
        .collect();

    let beta_gap_linf = beta
        .iter()
        .zip(&beta_recovered)
        .map(|(&a, &b)| (a - b).abs())
        .fold(0.0, f64::max);
    let objective_gap_rel = (eq_constrained_objective - eq_blocknorm_objective).abs()
        / eq_blocknorm_objective.abs().max(1e-300);

    Ok(EquivalenceReport {
        eq_constrained_objective,
        eq_blocknorm_objective,
        beta_constrained: beta,
        beta_recovered,
        beta_gap_linf,
        objective_gap_rel,
        rounds,
    })
}

/// Exact proximal map of `w -> eta * lambda * (sum_m ||w_m||)^2`: block
/// norms shrink by a common threshold `2 eta lambda s`, where `s`, the
/// post-shrink norm sum, solves a one-dimensional fixed point.
fn prox_block_l1_sq(blocks: &mut [Vec<f64>], eta_lambda: f64) {
    let norms: Vec<f64> = blocks
        .iter()
        .map(|w| w.iter().map(|&v| v * v).sum::<f64>().sqrt())
        .collect();
    let total: f64 = norms.iter().sum();
    let (mut lo, mut hi) = (0.0f64, total);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let rhs: f64 = norms
            .iter()
            .map(|&n| (n - 2.0 * eta_lambda * mid).max(0.0))
            .sum();
        if rhs > mid {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let threshold = 2.0 * eta_lambda * 0.5 * (lo + hi);
    for (w, &n) in blocks.iter_mut().zip(&norms) {
        let scale = if n > 0.0 { (n - threshold).max(0.0) / n } else { 0.0 };
        for x in w.iter_mut() {
            *x *= scale;
        }
    }
}

/// Proximal gradient descent on
/// `data(w, b) + lambda (sum_m ||w_m||)^2` with a backtracked step.
/// Returns the final objective value; `flat` holds the solution.
fn ista_block_l1_sq(
    instance: &ConvexInstance,
    flat: &mut [f64],
    lambda: f64,
    max_iters: usize,
    tol: f64,
) -> f64 {
    let m = instance.n_modalities();
    let dim = instance.dim();
    let ones = vec![1.0; m];
    let unpack = |x: &[f64]| -> (Vec<Vec<f64>>, f64) {
        (
            (0..m).map(|k| x[k * dim..(k + 1) * dim].to_vec()).collect(),
            x[m * dim],
        )
    };
    let penalty = |ws: &[Vec<f64>]| -> f64 {
        let s: f64 = ws
            .iter()
            .map(|w| w.iter().map(|&v| v * v).sum::<f64>().sqrt())
            .sum();
        lambda * s * s
    };
    let (mut ws, mut bias) = unpack(flat);
    let mut smooth = data_term(instance, &ws, &ones, bias);
    let mut objective = smooth + penalty(&ws);
    let mut eta = 1e-2;
    let mut calm = 0usize;
    for _ in 0..max_iters {
        let (gw, gb) = data_gradient(instance, &ws, &ones, bias);
        let mut accepted = false;
        for _ in 0..60 {
            let mut cand: Vec<Vec<f64>> = ws
                .iter()
                .zip(&gw)
                .map(|(w, g)| w.iter().zip(g).map(|(&x, &gx)| x - eta * gx).collect())
                .collect();
            prox_block_l1_sq(&mut cand, eta * lambda);
            let cand_bias = bias - eta * gb;
            let cand_smooth = data_term(instance, &cand, &ones, cand_bias);
            // standard sufficient-decrease condition for the smooth part
            let mut linear = 0.0;
            let mut quad = 0.0;
            for (k, (w, c)) in ws.iter().zip(&cand).enumerate() {
                for ((x, y), g) in w.iter().zip(c.iter()).zip(&gw[k]) {
                    let d = y - x;
                    linear += g * d;
                    quad += d * d;
                }
            }
            let db = cand_bias - bias;
            linear += gb * db;
            quad += db * db;
            if cand_smooth <= smooth + linear + quad / (2.0 * eta) + 1e-14 {
                let cand_obj = cand_smooth + penalty(&cand);
                let improvement = objective - cand_obj;
                ws = cand;
                bias = cand_bias;
                smooth = cand_smooth;
                objective = cand_obj;
                eta *= 1.3;
                accepted = true;
                if improvement < tol * (1.0 + objective.abs()) {
                    calm += 1;
                } else {
                    calm = 0;
                }
                break;
            }
            eta *= 0.5;
            if eta < 1e-18 {
                break;
            }
        }
        if !accepted {
            calm += 1;
            eta = 1e-6;
        }
        if calm >= 30 {
            break;
        }
    }
    for (k, w) in ws.iter().enumerate() {
        flat[k * dim..(k + 1) * dim].copy_from_slice(w);
    }
    flat[m * dim] = bias;
    objective
}

/// Maximum absolute residual of the zero-expectation identity: for every
/// strict subset `J` of the target set (including the empty set), the
/// batch mean of `sum_{K: J subset K subset I} G_K prod_{m in K\J} f^m`
/// per component.
pub fn centering_identity_check(batches: &[&[Tensor]], set: &InteractionSet) -> Result<f64> {
    let moments = compute_moments(batches, set)?;
    let coeffs = centering_coefficients(set, &moments)?;
    let n = set.order();
    let indices = set.indices();
    let batch_size = batches[0].len();
    let mut worst = 0.0f64;
    for jmask in 0..((1usize << n) - 1) {
        let j: Vec<usize> = (0..n)
            .filter(|k| jmask & (1 << k) != 0)
            .map(|k| indices[k])
            .collect();
        let mut mean: Option<Tensor> = None;
        for i in 0..batch_size {
            let mut term_i: Option<Tensor> = None;
            // K ranges over supersets of J inside I
            for kmask in 0..(1usize << n) {
                if kmask & jmask != jmask {
                    continue;
                }
                let k_set: Vec<usize> = (0..n)
                    .filter(|b| kmask & (1 << b) != 0)
                    .map(|b| indices[b])
                    .collect();
                let g = coeffs
                    .coefficient(&k_set)
                    .ok_or_else(|| Error::Contract("missing coefficient".into()))?;
                let g_mods: Vec<usize> = indices
                    .iter()
                    .copied()
                    .filter(|mi| !k_set.contains(mi))
                    .collect();
                let prod_mods: Vec<usize> = k_set
                    .iter()
                    .copied()
                    .filter(|mi| !j.contains(mi))
                    .collect();
                let prod = if prod_mods.is_empty() {
                    Tensor::scalar(1.0)
                } else {
                    let mut t = batches[position(indices, prod_mods[0])][i].clone();
                    for &mi in &prod_mods[1..] {
                        t = t.outer(&batches[position(indices, mi)][i]);
                    }
                    t
                };
                let (term, _) =
                    interleaved_product(&[(g, g_mods.as_slice()), (&prod, prod_mods.as_slice())]);
                term_i = Some(match term_i {
                    None => term,
                    Some(mut acc) => {
                        acc.add_assign(&term);
                        acc
                    }
                });
            }
            let term_i = term_i.expect("at least the K = I term");
            mean = Some(match mean {
                None => term_i,
                Some(mut acc) => {
                    acc.add_assign(&term_i);
                    acc
                }
            });
        }
        let mean = mean.expect("nonempty batch").scale(1.0 / batch_size as f64);
        for &v in mean.data() {
            worst = worst.max(v.abs());
        }
    }
    Ok(worst)
}

fn position(indices: &[usize], m: usize) -> usize {
    indices.iter().position(|&x| x == m).expect("modality in set")
}

/// Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    cov / (vx.sqrt() * vy.sqrt()).max(1e-300)
}

/// One row of the relevance-vs-accuracy table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RelevanceAccuracyRow {
    pub set: InteractionSet,
    pub beta: f64,
    pub share: f64,
    pub unimodal_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RelevanceAccuracyReport {
    pub rows: Vec<RelevanceAccuracyRow>,
    /// Correlation between unimodal accuracy and multimodal relevance share.
    pub pearson: f64,
    pub multimodal_test_accuracy: f64,
}

impl RelevanceAccuracyReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("set,beta,share,unimodal_accuracy\n");
        for r in &self.rows {
            let acc = r
                .unimodal_accuracy
                .map(|a| a.to_string())
                .unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", r.set, r.beta, r.share, acc));
        }
        out.push_str(&format!("# pearson,{}\n", self.pearson));
        out
    }
}

fn unimodal_view(dataset: &Dataset, modality: usize) -> Dataset {
    let mut config = dataset.config.clone();
    config.modality_probs = vec![dataset.config.modality_probs[modality]];
    Dataset {
        kind: format!("{}-m{}", dataset.kind, modality + 1),
        config,
        samples: dataset
            .samples
            .iter()
            .map(|s| SequenceSample {
                label: s.label,
                mods: vec![s.mods[modality].clone()],
                flags: vec![s.flags[modality]],
            })
            .collect(),
    }
}

fn train_and_eval(dataset: &Dataset, config: &TrainConfig) -> Result<(crate::training::Model, f64)> {
    let split = crate::synthdata::split_dataset(dataset);
    let model = init_model(dataset.n_modalities(), config)?;
    let (best, _) = train(model, &split, config)?;
    let test: Vec<&SequenceSample> = split.test.iter().collect();
    let (accuracy, _) = evaluate(&best, &test)?;
    Ok((best, accuracy))
}

/// Trains one unimodal model per modality and one multimodal additive
/// model, pairing each modality's relevance share with its unimodal test
/// accuracy. Runs are independent and execute in parallel.
pub fn relevance_accuracy_report(
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<RelevanceAccuracyReport> {
    let m = dataset.n_modalities();
    let jobs: Vec<Option<usize>> = std::iter::once(None)
        .chain((0..m).map(Some))
        .collect();
    let outcomes: Vec<Result<(Option<usize>, RelevanceReport, f64)>> = jobs
        .into_par_iter()
        .map(|job| match job {
            None => {
                let (model, accuracy) = train_and_eval(dataset, config)?;
                let relevance = recover_relevance(&model.head, config.p)?;
                Ok((None, relevance, accuracy))
            }
            Some(idx) => {
                let view = unimodal_view(dataset, idx);
                let mut uni_config = config.clone();
                uni_config.interaction_sets = vec![InteractionSet::singleton(1)];
                let (model, accuracy) = train_and_eval(&view, &uni_config)?;
                let relevance = recover_relevance(&model.head, config.p)?;
                Ok((Some(idx), relevance, accuracy))
            }
        })
        .collect();

    let mut multimodal: Option<(RelevanceReport, f64)> = None;
    let mut unimodal_acc = vec![0.0; m];
    for outcome in outcomes {
        let (job, relevance, accuracy) = outcome?;
        match job {
            None => multimodal = Some((relevance, accuracy)),
            Some(idx) => unimodal_acc[idx] = accuracy,
        }
    }
    let (relevance, multimodal_test_accuracy) =
        multimodal.ok_or_else(|| Error::Contract("missing multimodal run".into()))?;

    let rows: Vec<RelevanceAccuracyRow> = (0..m)
        .map(|idx| {
            let set = InteractionSet::singleton(idx + 1);
            RelevanceAccuracyRow {
                beta: relevance.beta(&set).unwrap_or(0.0),
                share: relevance.share(&set).unwrap_or(0.0),
                unimodal_accuracy: Some(unimodal_acc[idx]),
                set,
            }
        })
        .collect();
    let shares: Vec<f64> = rows.iter().map(|r| r.share).collect();
    let accs: Vec<f64> = rows.iter().map(|r| r.unimodal_accuracy.unwrap()).collect();
    Ok(RelevanceAccuracyReport {
        pearson: pearson(&accs, &shares),
        rows,
        multimodal_test_accuracy,
    })
}

/// Relevance tables of the generalized normalization versus the iterated
/// ablation on the same interaction data.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InteractionBiasReport {
    pub generalized: RelevanceReport,
    pub generalized_accuracy: f64,
    pub naive: RelevanceReport,
    pub naive_accuracy: f64,
}

impl InteractionBiasReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("set,generalized_share,naive_share\n");
        for entry in &self.generalized.entries {
            let naive = self.naive.share(&entry.set).unwrap_or(0.0);
            out.push_str(&format!("{},{},{}\n", entry.set, entry.display_share, naive));
        }
        out.push_str(&format!(
            "# accuracy,{},{}\n",
            self.generalized_accuracy, self.naive_accuracy
        ));
        out
    }
}

/// Trains the interaction model twice on the same data, once with the
/// generalized normalization and once with the iterated ablation, using
/// every nonempty subset of the three modalities as an interaction set.
pub fn interaction_bias_report(
    dataset: &Dataset,
    base_config: &TrainConfig,
) -> Result<InteractionBiasReport> {
    use crate::training::Normalization;
    let runs: Vec<Normalization> = vec![Normalization::IterBn, Normalization::Naive];
    let outcomes: Vec<Result<(RelevanceReport, f64)>> = runs
        .into_par_iter()
        .map(|norm| {
            let mut config = base_config.clone();
            config.normalization = norm;
            let (model, accuracy) = train_and_eval(dataset, &config)?;
            let relevance = recover_relevance(&model.head, config.p)?;
            Ok((relevance, accuracy))
        })
        .collect();
    let mut it = outcomes.into_iter();
    let (generalized, generalized_accuracy) = it.next().unwrap()?;
    let (naive, naive_accuracy) = it.next().unwrap()?;
    Ok(InteractionBiasReport {
        generalized,
        generalized_accuracy,
        naive,
        naive_accuracy,
    })
}

/// All seven nonempty subsets of three modalities.
pub fn all_trimodal_sets() -> Vec<InteractionSet> {
    InteractionSet::parse("123").unwrap().nonempty_subsets()
}

/// Convenience wrapper: trains the trimodal interaction configuration on a
/// dataset split and returns the model plus test accuracy.
pub fn train_interaction_model(
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<(crate::training::Model, f64)> {
    train_and_eval(dataset, config)
}

/// The split used by report trainings, exposed for callers that need the
/// same fold boundaries.
pub fn report_split(dataset: &Dataset) -> Split {
    crate::synthdata::split_dataset(dataset)
}


/// Outcome of one seeded verification suite.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteOutcome {
    pub suite: String,
    pub seed: u64,
    pub pass: bool,
    pub worst: f64,
    pub tolerance: f64,
    pub detail: String,
}

/// Scalar closed forms against grid search.
pub fn verify_lemmas(seed: u64, draws: usize) -> SuiteOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let u = rng.gen_range(0.2..5.0);
        let lambda = rng.gen_range(0.2..5.0);
        let p = [1.0, 1.5, 2.0, 4.0][rng.gen_range(0..4)];
        let closed = power_tradeoff_min(u, lambda, p).expect("valid draw");
        let (_, gv) = grid_search_min(|x| power_tradeoff_objective(u, lambda, p, x), 1e-3, 10.0, 20_000);
        worst = worst.max((gv - closed.min_value).abs());

        let a = rng.gen_range(0.5..3.0);
        let b = rng.gen_range(0.5..3.0);
        let e = rng.gen_range(0.1..0.75);
        let closed2 = concave_power_max(a, b, e).expect("valid draw");
        let (_, gv2) = grid_search_min(|x| -concave_power_objective(a, b, e, x), 1e-4, 20.0, 20_000);
        worst = worst.max((-gv2 - closed2.max_value).abs());
    }
    SuiteOutcome {
        suite: "lemmas".into(),
        seed,
        pass: worst < 1e-6,
        worst,
        tolerance: 1e-6,
        detail: format!("{draws} draws per form, worst |grid - closed| {worst:.2e}"),
    }
}

/// Closed-form relevance minimizer against projected gradient descent.
pub fn verify_prop3(seed: u64, instances: usize) -> SuiteOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut worst_norm = 0.0f64;
    for _ in 0..instances {
        let m = rng.gen_range(1..=8);
        let a: Vec<f64> = (0..m).map(|_| rng.gen_range(1e-3..=10.0)).collect();
        let p = [1.0, 1.5, 2.0, 4.0][rng.gen_range(0..4)];
        let closed = relevance_allocation_closed_form(&a, p).expect("positive instance");
        match relevance_allocation_pgd(&a, p, &PgdSettings::default()) {
            Ok(numeric) => {
                worst = worst.max((numeric - closed.min_value).abs() / closed.min_value);
            }
            Err(_) => worst = f64::INFINITY,
        }
        let pnorm: f64 = closed.beta.iter().map(|&b| b.powf(p)).sum::<f64>().powf(1.0 / p);
        worst_norm = worst_norm.max((pnorm - 1.0).abs());
    }
    SuiteOutcome {
        suite: "prop3".into(),
        seed,
        pass: worst < 1e-4 && worst_norm < 1e-12,
        worst,
        tolerance: 1e-4,
        detail: format!(
            "{instances} instances, worst relative gap {worst:.2e}, worst |p-norm - 1| {worst_norm:.2e}"
        ),
    }
}

/// Two-route equivalence of the fusion objective on a desk-scale instance.
pub fn verify_theorem1(seed: u64) -> SuiteOutcome {
    let instance = random_convex_instance(200, 4, &[0.5, 1.0, 1.5], 0.05, 1.0, seed);
    match objective_equivalence_check(&instance) {
        Ok(r) => {
            let pass = r.objective_gap_rel < 1e-3 && r.beta_gap_linf < 5e-2;
            SuiteOutcome {
                suite: "theorem1".into(),
                seed,
                pass,
                worst: r.objective_gap_rel.max(r.beta_gap_linf),
                tolerance: 5e-2,
                detail: format!(
                    "objective gap {:.2e}, beta gap {:.2e}, {} rounds",
                    r.objective_gap_rel, r.beta_gap_linf, r.rounds
                ),
            }
        }
        Err(e) => SuiteOutcome {
            suite: "theorem1".into(),
            seed,
            pass: false,
            worst: f64::INFINITY,
            tolerance: 5e-2,
            detail: format!("solver failure: {e}"),
        },
    }
}

/// Zero-expectation identities of the generalized centering on random
/// batches for the given interaction orders.
pub fn verify_theorem2(seed: u64, orders: &[usize]) -> SuiteOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for &order in orders {
        let set = InteractionSet::new((1..=order).collect()).expect("order >= 1");
        for &batch_size in &[8usize, 32] {
            for _ in 0..20 {
                let dims: Vec<usize> = (0..order).map(|_| rng.gen_range(1..=3)).collect();
                let batches: Vec<Vec<Tensor>> = dims
                    .iter()
                    .map(|&d| {
                        (0..batch_size)
                            .map(|_| {
                                Tensor::vector(
                                    &(0..d)
                                        .map(|_| rng.gen_range(-2.0..2.0))
                                        .collect::<Vec<_>>(),
                                )
                            })
                            .collect()
                    })
                    .collect();
                let views: Vec<&[Tensor]> = batches.iter().map(|b| b.as_slice()).collect();
                let scale = views
                    .iter()
                    .flat_map(|b| b.iter())
                    .flat_map(|t| t.data())
                    .fold(0.0f64, |a, &b| a.max(b.abs()))
                    .powi(order as i32)
                    .max(1.0);
                let residual = centering_identity_check(&views, &set).expect("valid batches");
                worst = worst.max(residual / scale);
            }
        }
    }
    SuiteOutcome {
        suite: "theorem2".into(),
        seed,
        pass: worst < 1e-9,
        worst,
        tolerance: 1e-9,
        detail: format!("orders {orders:?}, worst relative residual {worst:.2e}"),
    }
}
