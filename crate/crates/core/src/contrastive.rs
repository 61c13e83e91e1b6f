//! Contrastive scoring: cosine similarity, the noise-contrastive estimator of
//! a positive pair against a set of in-batch negatives, the per-sample loss,
//! the momentum memory bank, and the blended final objective.
//!
//! The estimator is asymmetric on purpose: the positive term compares the
//! pair (z, z_t) while every negative term compares z_t against the negative.
//! The same convention carries into the loss, where each negative's estimator
//! is evaluated with z_t in the first slot and the negative in the second,
//! against the full negative set.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// A p-dimensional representation vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::DegenerateInput("empty embedding".into()));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NumericalFault(format!(
                "non-finite embedding entry {bad}"
            )));
        }
        Ok(Embedding(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

/// Cosine similarity u.v / (|u||v|). Zero-norm inputs are an error rather
/// than a silent 0.
pub fn cosine_similarity(u: &Embedding, v: &Embedding) -> Result<f64> {
    if u.dim() != v.dim() {
        return Err(Error::ShapeMismatch {
            what: "cosine similarity".into(),
            expected: u.dim().to_string(),
            got: v.dim().to_string(),
        });
    }
    let nu = norm(u.values());
    let nv = norm(v.values());
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateInput(
            "cosine similarity of a zero-norm vector".into(),
        ));
    }
    Ok(dot(u.values(), v.values()) / (nu * nv))
}

/// Scaled similarity arguments for one estimator: the positive exponent and
/// the negative exponents, all divided by tau.
fn estimator_args(
    first: &Embedding,
    second: &Embedding,
    negatives: &[Embedding],
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    if tau <= 0.0 {
        return Err(Error::config("tau", "temperature must be positive"));
    }
    let pos = cosine_similarity(first, second)? / tau;
    let negs = negatives
        .iter()
        .map(|n| Ok(cosine_similarity(second, n)? / tau))
        .collect::<Result<Vec<_>>>()?;
    Ok((pos, negs))
}

/// Probability that the pair (z, z_t) is matched against the negatives:
/// exp(s(z,z_t)/tau) / (exp(s(z,z_t)/tau) + sum exp(s(z_t,n)/tau)).
///
/// Exponentials are max-shifted; the result is identical to the naive
/// formula wherever the naive formula is finite. An empty negative set gives
/// exactly 1.
pub fn nce_estimator(
    z: &Embedding,
    z_t: &Embedding,
    negatives: &[Embedding],
    tau: f64,
) -> Result<f64> {
    let (pos, negs) = estimator_args(z, z_t, negatives, tau)?;
    if negs.is_empty() {
        return Ok(1.0);
    }
    let m = negs.iter().copied().fold(pos, f64::max);
    let num = (pos - m).exp();
    let denom: f64 = num + negs.iter().map(|a| (a - m).exp()).sum::<f64>();
    Ok(num / denom)
}

/// -log of the positive estimator, computed as log1p of the shifted negative
/// mass so that values near 0 keep full relative precision.
fn neg_log_estimator(pos: f64, negs: &[f64]) -> Result<f64> {
    let mass: f64 = negs.iter().map(|a| (a - pos).exp()).sum();
    if mass == 0.0 {
        return Err(Error::NumericalFault(
            "estimator reached 1 with negatives present".into(),
        ));
    }
    Ok(mass.ln_1p())
}

/// -log(1 - l(first, second)) where the estimator uses the given negative
/// set; equals log1p(exp(pos)/S) with S the negative mass of `second`.
fn neg_log_one_minus_estimator(pos: f64, negs: &[f64]) -> Result<f64> {
    let m = negs
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
        .max(pos);
    let s: f64 = negs.iter().map(|a| (a - m).exp()).sum();
    if s == 0.0 {
        return Err(Error::NumericalFault(
            "negative mass vanished in loss term".into(),
        ));
    }
    Ok(((pos - m).exp() / s).ln_1p())
}

/// The per-pair loss: -log l(z, z_t) - sum over negatives of
/// log(1 - l(z_t, negative)), every estimator sharing the same negative set.
pub fn nce_loss(z: &Embedding, z_t: &Embedding, negatives: &[Embedding], tau: f64) -> Result<f64> {
    let (pos, negs) = estimator_args(z, z_t, negatives, tau)?;
    if negs.is_empty() {
        return Ok(0.0);
    }
    let mut loss = neg_log_estimator(pos, &negs)?;
    // Pairwise arguments among negatives: entry [j][k] = s(neg_j, neg_k)/tau.
    for (j, neg) in negatives.iter().enumerate() {
        let (pos_j, negs_j) = estimator_args(z_t, neg, negatives, tau)?;
        debug_assert_eq!(pos_j, negs[j]);
        loss += neg_log_one_minus_estimator(pos_j, &negs_j)?;
    }
    if !loss.is_finite() {
        return Err(Error::NumericalFault("non-finite contrastive loss".into()));
    }
    Ok(loss)
}

/// Blend of the two bank-anchored losses:
/// lambda * L(r_x, z_t) + (1 - lambda) * L(r_x, z).
///
/// The endpoints are exact: lambda = 1 returns L(r_x, z_t) bit-for-bit and
/// lambda = 0 returns L(r_x, z).
pub fn final_loss(
    r_x: &Embedding,
    z: &Embedding,
    z_t: &Embedding,
    negatives: &[Embedding],
    tau: f64,
    lambda: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config("lambda", "blend weight must be in [0, 1]"));
    }
    if lambda == 1.0 {
        return nce_loss(r_x, z_t, negatives, tau);
    }
    if lambda == 0.0 {
        return nce_loss(r_x, z, negatives, tau);
    }
    let view_term = nce_loss(r_x, z_t, negatives, tau)?;
    let orig_term = nce_loss(r_x, z, negatives, tau)?;
    Ok(lambda * view_term + (1.0 - lambda) * orig_term)
}

/// Per-sample exponential-moving-average cache of representations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemoryBank {
    dim: usize,
    momentum: f64,
    epoch: u64,
    entries: BTreeMap<u64, Vec<f64>>,
}

impl MemoryBank {
    pub fn new(dim: usize, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::config("bank_momentum", "momentum must be in [0, 1]"));
        }
        if dim == 0 {
            return Err(Error::config("embed_dim", "embedding dimension must be positive"));
        }
        Ok(MemoryBank {
            dim,
            momentum,
            epoch: 0,
            entries: BTreeMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn advance_epoch(&mut self) {
        self.epoch += 1;
    }

    pub fn get(&self, sample_id: u64) -> Option<&[f64]> {
        self.entries.get(&sample_id).map(Vec::as_slice)
    }

    /// EMA update r' = m*r + (1-m)*z; a first observation initializes the
    /// entry to z itself.
    pub fn update(&mut self, sample_id: u64, z: &Embedding) -> Result<()> {
        if z.dim() != self.dim {
            return Err(Error::ShapeMismatch {
                what: "memory bank update".into(),
                expected: self.dim.to_string(),
                got: z.dim().to_string(),
            });
        }
        match self.entries.get_mut(&sample_id) {
            Some(r) => {
                for (ri, zi) in r.iter_mut().zip(z.values()) {
                    *ri = self.momentum * *ri + (1.0 - self.momentum) * zi;
                }
            }
            None => {
                self.entries.insert(sample_id, z.values().to_vec());
            }
        }
        Ok(())
    }

    /// Apply a batch of staged updates in sample-id order, so concurrent
    /// producers always observe one deterministic result.
    pub fn apply_staged(&mut self, mut staged: Vec<(u64, Embedding)>) -> Result<()> {
        staged.sort_by_key(|(id, _)| *id);
        for (id, z) in staged {
            self.update(id, &z)?;
        }
        Ok(())
    }
}

/// One minibatch of embeddings ready for scoring: K anchors with their
/// original embedding, view embedding, and M per-view projections each.
/// The negatives of anchor i are exactly the views of every other anchor.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    ids: Vec<u64>,
    z: Vec<Embedding>,
    z_t: Vec<Embedding>,
    views: Vec<Vec<Embedding>>,
    tau: f64,
    lambda: f64,
}

impl ContrastiveBatch {
    pub fn new(
        ids: Vec<u64>,
        z: Vec<Embedding>,
        z_t: Vec<Embedding>,
        views: Vec<Vec<Embedding>>,
        tau: f64,
        lambda: f64,
    ) -> Result<Self> {
        let k = ids.len();
        if k < 2 {
            return Err(Error::config("batch_size", "need at least two anchors"));
        }
        if z.len() != k || z_t.len() != k || views.len() != k {
            return Err(Error::ShapeMismatch {
                what: "contrastive batch".into(),
                expected: format!("{k} anchors"),
                got: format!("{}/{}/{} embeddings", z.len(), z_t.len(), views.len()),
            });
        }
        let m = views[0].len();
        if m == 0 || views.iter().any(|v| v.len() != m) {
            return Err(Error::config("views", "every anchor needs the same M >= 1 views"));
        }
        if tau <= 0.0 {
            return Err(Error::config("tau", "temperature must be positive"));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::config("lambda", "blend weight must be in [0, 1]"));
        }
        Ok(ContrastiveBatch {
            ids,
            z,
            z_t,
            views,
            tau,
            lambda,
        })
    }

    pub fn k(&self) -> usize {
        self.ids.len()
    }

    pub fn m(&self) -> usize {
        self.views[0].len()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    /// The M(K-1) negatives of one anchor: the views of every other anchor,
    /// in (anchor, view) order.
    pub fn negatives_of(&self, anchor: usize) -> Vec<Embedding> {
        let mut negatives = Vec::with_capacity(self.m() * (self.k() - 1));
        for (j, views) in self.views.iter().enumerate() {
            if j != anchor {
                negatives.extend(views.iter().cloned());
            }
        }
        negatives
    }
}

/// Mean and per-anchor blended losses over a batch. Each anchor's bank entry
/// (initialized to its fresh z on first sight) anchors both loss terms; the
/// bank is updated with every anchor's fresh z after all losses are computed,
/// in sample-id order.
pub fn batch_loss(batch: &ContrastiveBatch, bank: &mut MemoryBank) -> Result<(f64, Vec<f64>)> {
    let expected_negatives = batch.m() * (batch.k() - 1);
    let mut per_anchor = Vec::with_capacity(batch.k());
    let mut staged = Vec::with_capacity(batch.k());
    for i in 0..batch.k() {
        let negatives = batch.negatives_of(i);
        if negatives.len() != expected_negatives {
            return Err(Error::config(
                "batch",
                format!(
                    "anchor {i} has {} negatives, expected {expected_negatives}",
                    negatives.len()
                ),
            ));
        }
        let r_x = match bank.get(batch.ids[i]) {
            Some(r) => Embedding::new(r.to_vec())?,
            None => batch.z[i].clone(),
        };
        let loss = final_loss(
            &r_x,
            &batch.z[i],
            &batch.z_t[i],
            &negatives,
            batch.tau,
            batch.lambda,
        )?;
        per_anchor.push(loss);
        staged.push((batch.ids[i], batch.z[i].clone()));
    }
    bank.apply_staged(staged)?;
    let mean = per_anchor.iter().sum::<f64>() / per_anchor.len() as f64;
    Ok((mean, per_anchor))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(values: &[f64]) -> Embedding {
        Embedding::new(values.to_vec()).unwrap()
    }

    #[test]
    fn cosine_of_identical_vectors_is_one() {
        let u = emb(&[0.3, -1.2, 4.0]);
        assert!((cosine_similarity(&u, &u).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_of_orthogonal_unit_vectors_is_zero() {
        let u = emb(&[1.0, 0.0]);
        let v = emb(&[0.0, 1.0]);
        assert_eq!(cosine_similarity(&u, &v).unwrap(), 0.0);
    }

    #[test]
    fn cosine_matches_direct_arithmetic() {
        let u = emb(&[1.0, 2.0, 3.0]);
        let v = emb(&[4.0, 5.0, 6.0]);
        let expected = 32.0 / (14.0f64.sqrt() * 77.0f64.sqrt());
        let got = cosine_similarity(&u, &v).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.974_631_846_197_076_2).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_vector_is_an_error() {
        let u = emb(&[0.0, 0.0]);
        let v = emb(&[1.0, 1.0]);
        assert!(matches!(
            cosine_similarity(&u, &v),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn estimator_with_equal_similarities_is_uniform() {
        // All vectors parallel: every similarity is exactly 1.
        let z = emb(&[1.0, 1.0]);
        let z_t = emb(&[2.0, 2.0]);
        for n in 1..6 {
            let negatives: Vec<_> = (0..n).map(|i| emb(&[i as f64 + 1.0; 2])).collect();
            let l = nce_estimator(&z, &z_t, &negatives, 0.07).unwrap();
            assert!((l - 1.0 / (n as f64 + 1.0)).abs() < 1e-12, "n = {n}: {l}");
        }
    }

    #[test]
    fn estimator_without_negatives_is_one() {
        let z = emb(&[1.0, 0.0]);
        let z_t = emb(&[0.5, 0.5]);
        assert_eq!(nce_estimator(&z, &z_t, &[], 0.07).unwrap(), 1.0);
    }

    #[test]
    fn estimator_is_scale_invariant() {
        let z = emb(&[0.2, -0.7, 1.1]);
        let z_t = emb(&[1.0, 0.3, -0.2]);
        let negatives = vec![emb(&[0.5, 0.5, 0.5]), emb(&[-1.0, 0.1, 0.4])];
        let base = nce_estimator(&z, &z_t, &negatives, 0.5).unwrap();
        let scaled_negatives = vec![
            emb(&[0.5 * 3.0, 0.5 * 3.0, 0.5 * 3.0]),
            emb(&[-1.0 * 0.25, 0.1 * 0.25, 0.4 * 0.25]),
        ];
        let scaled = nce_estimator(
            &emb(&[0.2 * 7.0, -0.7 * 7.0, 1.1 * 7.0]),
            &emb(&[1.0 * 0.01, 0.3 * 0.01, -0.2 * 0.01]),
            &scaled_negatives,
            0.5,
        )
        .unwrap();
        assert!((base - scaled).abs() < 1e-12);
    }

    #[test]
    fn estimator_increases_with_positive_similarity() {
        // Rotate z toward z_t while z_t and the negatives stay fixed, so only
        // the positive similarity moves.
        let z_t = emb(&[1.0, 0.0]);
        let negatives = vec![emb(&[-1.0, 0.3]), emb(&[0.2, -1.0])];
        let mut last_l = -1.0;
        let mut last_nl = f64::INFINITY;
        for angle in [1.5, 1.0, 0.5, 0.25, 0.0f64] {
            let z = emb(&[angle.cos(), angle.sin()]);
            let l = nce_estimator(&z, &z_t, &negatives, 0.07).unwrap();
            assert!(l > last_l, "estimator not increasing at angle {angle}");
            let nl = -l.ln();
            assert!(nl < last_nl, "-log estimator not decreasing at angle {angle}");
            last_l = l;
            last_nl = nl;
        }
    }

    #[test]
    fn high_temperature_limit_is_uniform() {
        let z = emb(&[1.0, 0.2]);
        let z_t = emb(&[-0.3, 0.9]);
        let negatives: Vec<_> = (0..5)
            .map(|i| {
                let a = i as f64;
                emb(&[a.cos(), a.sin()])
            })
            .collect();
        let l = nce_estimator(&z, &z_t, &negatives, 1e9).unwrap();
        assert!((l - 1.0 / 6.0).abs() < 1e-6);
    }

    #[test]
    fn stabilized_estimator_matches_naive_form() {
        // Direct unshifted evaluation, finite for these inputs.
        let z = emb(&[0.4, -0.3, 0.9]);
        let z_t = emb(&[0.1, 0.8, -0.5]);
        let negatives = vec![emb(&[0.7, 0.7, 0.1]), emb(&[-0.2, 0.5, 0.6])];
        for tau in [0.07, 0.5, 5.0] {
            let pos = (cosine_similarity(&z, &z_t).unwrap() / tau).exp();
            let mass: f64 = negatives
                .iter()
                .map(|n| (cosine_similarity(&z_t, n).unwrap() / tau).exp())
                .sum();
            let naive = pos / (pos + mass);
            let stabilized = nce_estimator(&z, &z_t, &negatives, tau).unwrap();
            let rel = (naive - stabilized).abs() / naive;
            assert!(rel < 1e-12, "tau = {tau}: rel = {rel}");
        }
    }

    #[test]
    fn loss_without_negatives_and_identical_pair_is_zero() {
        let z = emb(&[0.3, 0.4]);
        assert_eq!(nce_loss(&z, &z, &[], 0.07).unwrap(), 0.0);
    }

    #[test]
    fn loss_single_parallel_negative_is_two_ln_two() {
        let z = emb(&[1.0, 2.0]);
        let z_t = emb(&[3.0, 6.0]);
        let negatives = vec![emb(&[0.5, 1.0])];
        let loss = nce_loss(&z, &z_t, &negatives, 0.07).unwrap();
        assert!((loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn final_loss_endpoints_are_exact() {
        let r = emb(&[0.9, -0.1, 0.2]);
        let z = emb(&[0.3, 0.5, -0.7]);
        let z_t = emb(&[-0.4, 0.8, 0.1]);
        let negatives = vec![emb(&[0.2, 0.2, 0.9]), emb(&[0.6, -0.6, 0.3])];
        let view_term = nce_loss(&r, &z_t, &negatives, 0.07).unwrap();
        let orig_term = nce_loss(&r, &z, &negatives, 0.07).unwrap();
        assert_eq!(
            final_loss(&r, &z, &z_t, &negatives, 0.07, 1.0).unwrap(),
            view_term
        );
        assert_eq!(
            final_loss(&r, &z, &z_t, &negatives, 0.07, 0.0).unwrap(),
            orig_term
        );
    }

    #[test]
    fn final_loss_of_perfect_agreement_is_zero() {
        let z = emb(&[0.5, 0.5]);
        assert_eq!(final_loss(&z, &z, &z, &[], 0.07, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn bank_update_momentum_zero_overwrites() {
        let mut bank = MemoryBank::new(2, 0.0).unwrap();
        bank.update(3, &emb(&[1.0, 1.0])).unwrap();
        bank.update(3, &emb(&[5.0, -2.0])).unwrap();
        assert_eq!(bank.get(3).unwrap(), &[5.0, -2.0]);
    }

    #[test]
    fn bank_update_is_exact_midpoint() {
        let mut bank = MemoryBank::new(2, 0.5).unwrap();
        bank.update(0, &emb(&[1.0, 1.0])).unwrap();
        bank.update(0, &emb(&[3.0, 3.0])).unwrap();
        assert_eq!(bank.get(0).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn repeated_updates_match_closed_form() {
        let m = 0.7;
        let r0 = [2.0, -1.0, 0.5];
        let z = emb(&[0.1, 0.9, -0.3]);
        let mut bank = MemoryBank::new(3, m).unwrap();
        bank.update(9, &emb(&r0)).unwrap();
        let k = 13;
        for _ in 0..k {
            bank.update(9, &z).unwrap();
        }
        let mk = m.powi(k);
        for (i, got) in bank.get(9).unwrap().iter().enumerate() {
            let expected = mk * r0[i] + (1.0 - mk) * z.values()[i];
            assert!((got - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn bank_update_stays_between_old_and_new() {
        let mut bank = MemoryBank::new(4, 0.3).unwrap();
        let r0 = [1.0, -2.0, 0.0, 5.0];
        let z = emb(&[-1.0, 4.0, 0.5, 5.0]);
        bank.update(1, &emb(&r0)).unwrap();
        bank.update(1, &z).unwrap();
        for ((lo, hi), got) in r0
            .iter()
            .zip(z.values())
            .map(|(a, b)| (a.min(*b), a.max(*b)))
            .zip(bank.get(1).unwrap())
        {
            assert!(lo <= *got && *got <= hi);
        }
    }

    #[test]
    fn bank_rejects_dimension_mismatch() {
        let mut bank = MemoryBank::new(3, 0.5).unwrap();
        assert!(matches!(
            bank.update(0, &emb(&[1.0, 2.0])),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    fn toy_batch(k: usize, m: usize, tau: f64, lambda: f64) -> ContrastiveBatch {
        let mut next = 0.1f64;
        let mut fresh = |dim: usize| {
            let v: Vec<f64> = (0..dim)
                .map(|i| {
                    next += 0.37 + i as f64 * 0.11;
                    (next * 5.0).sin()
                })
                .collect();
            emb(&v)
        };
        let ids = (0..k as u64).collect();
        let z = (0..k).map(|_| fresh(3)).collect();
        let z_t = (0..k).map(|_| fresh(3)).collect();
        let views = (0..k).map(|_| (0..m).map(|_| fresh(3)).collect()).collect();
        ContrastiveBatch::new(ids, z, z_t, views, tau, lambda).unwrap()
    }

    #[test]
    fn batch_negative_counts_follow_m_k_minus_one() {
        let batch = toy_batch(5, 3, 0.07, 0.5);
        for i in 0..5 {
            assert_eq!(batch.negatives_of(i).len(), 3 * 4);
        }
        let small = toy_batch(2, 2, 0.07, 0.5);
        assert_eq!(small.negatives_of(0).len(), 2);
    }

    #[test]
    fn batch_loss_mean_matches_per_anchor_average() {
        let batch = toy_batch(3, 2, 0.07, 0.5);
        let mut bank = MemoryBank::new(3, 0.5).unwrap();
        let (mean, per_anchor) = batch_loss(&batch, &mut bank).unwrap();
        assert_eq!(per_anchor.len(), 3);
        let expected = per_anchor.iter().sum::<f64>() / 3.0;
        assert_eq!(mean, expected);
        // Bank picked up every anchor.
        assert_eq!(bank.len(), 3);
    }

    #[test]
    fn batch_loss_updates_bank_with_fresh_embeddings() {
        let batch = toy_batch(2, 1, 0.5, 0.5);
        let mut bank = MemoryBank::new(3, 0.25).unwrap();
        let seeded = emb(&[1.0, 1.0, 1.0]);
        bank.update(0, &seeded).unwrap();
        let before = bank.get(0).unwrap().to_vec();
        batch_loss(&batch, &mut bank).unwrap();
        let after = bank.get(0).unwrap();
        assert_ne!(before.as_slice(), after);
    }
}
