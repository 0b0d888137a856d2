//! Per-token multiset prediction.
//!
//! Every input position carries an independent distribution over the
//! multiplicity of each vocabulary item (a softmax over counts 0..=k_max,
//! not over the vocabulary). The likelihood of a target total multiset is a
//! product over vocabulary items of count-convolution marginals; the most
//! likely assignment under the total-count constraint is found by an exact
//! per-item DP.

use rand::Rng;
use thiserror::Error;

use crate::optim::{ParamBinding, ParamStore};
use crate::tensor::tape::{Bcast, Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum MultisetError {
    #[error("target multiset is infeasible: item {item} needs {needed}, max attainable {max}")]
    Infeasible { item: usize, needed: usize, max: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Per-position log-distributions over multiplicities, shape (n, V, k_max+1),
/// normalized over the last axis.
pub struct MultiplicityModel {
    pub log_probs: Var,
    pub n: usize,
    pub vocab: usize,
    pub k_max: usize,
}

/// Feedforward head mapping encoder states to multiplicity logits.
pub fn init_tagger_head(
    store: &mut ParamStore,
    prefix: &str,
    input_dim: usize,
    vocab_out: usize,
    k_max: usize,
    rng: &mut impl Rng,
) {
    let scale = (1.0 / input_dim as f64).sqrt();
    store.insert_uniform(&format!("{prefix}.ff.w"), &[input_dim, input_dim], scale, rng);
    store.insert_zeros(&format!("{prefix}.ff.b"), &[input_dim]);
    store.insert_uniform(
        &format!("{prefix}.head.w"),
        &[input_dim, vocab_out * (k_max + 1)],
        scale,
        rng,
    );
    store.insert_zeros(&format!("{prefix}.head.b"), &[vocab_out * (k_max + 1)]);
}

/// Multiplicity distributions from encoder states h (n, d).
pub fn multiplicity_log_probs(
    tape: &mut Tape,
    bind: &ParamBinding,
    prefix: &str,
    h: Var,
    vocab_out: usize,
    k_max: usize,
) -> Result<MultiplicityModel, TensorError> {
    let n = tape.shape(h)[0];
    let w1 = bind.var(&format!("{prefix}.ff.w"));
    let b1 = bind.var(&format!("{prefix}.ff.b"));
    let w2 = bind.var(&format!("{prefix}.head.w"));
    let b2 = bind.var(&format!("{prefix}.head.b"));
    let lin = tape.matmul(h, w1)?;
    let lin = tape.add_b(lin, b1, Bcast::Leading)?;
    let act = tape.tanh(lin);
    let logits = tape.matmul(act, w2)?;
    let logits = tape.add_b(logits, b2, Bcast::Leading)?;
    let logits = tape.reshape(logits, &[n, vocab_out, k_max + 1])?;
    let norm = tape.logsumexp(logits, 2)?;
    let log_probs = tape.sub_b(logits, norm, Bcast::Trailing)?;
    Ok(MultiplicityModel { log_probs, n, vocab: vocab_out, k_max })
}

/// Marginal log-likelihood of a total multiset, or the flagged -inf sentinel
/// when some item count is unattainable.
pub enum MarginalLogLik {
    Feasible(Var),
    Infeasible,
}

impl MarginalLogLik {
    pub fn value(&self, tape: &Tape) -> f64 {
        match self {
            MarginalLogLik::Feasible(v) => tape.value(*v).item(),
            MarginalLogLik::Infeasible => f64::NEG_INFINITY,
        }
    }
}

/// log P(total multiset = m | x) = sum over items of the count-convolution
/// marginal. Differentiable w.r.t. the model parameters.
pub fn marginal_multiset_loglik(
    tape: &mut Tape,
    model: &MultiplicityModel,
    m: &[usize],
) -> Result<MarginalLogLik, TensorError> {
    debug_assert_eq!(m.len(), model.vocab);
    if m.iter().any(|&c| c > model.n * model.k_max) {
        return Ok(MarginalLogLik::Infeasible);
    }
    let mut total: Option<Var> = None;
    for (v, &target) in m.iter().enumerate() {
        let ll = item_count_loglik(tape, model, v, target)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, ll)?,
            None => ll,
        });
    }
    Ok(MarginalLogLik::Feasible(total.expect("vocab is non-empty")))
}

/// Count-convolution marginal for a single vocabulary item (scalar var).
pub fn item_count_loglik(
    tape: &mut Tape,
    model: &MultiplicityModel,
    item: usize,
    target: usize,
) -> Result<Var, TensorError> {
    let slice = tape.slice(model.log_probs, 1, item, 1)?;
    let flat = tape.reshape(slice, &[model.n, model.k_max + 1])?;
    tape.count_marginal(flat, target)
}

/// log P(count >= threshold) for one (position, item) cell; used by the
/// alignment-bonus term. The threshold must lie within the count support.
pub fn cell_tail_loglik(
    tape: &mut Tape,
    model: &MultiplicityModel,
    position: usize,
    item: usize,
    threshold: usize,
) -> Result<Var, TensorError> {
    let kp1 = model.k_max + 1;
    if threshold >= kp1 {
        return Err(TensorError::Invalid {
            op: "cell_tail_loglik",
            msg: format!("threshold {} beyond count support 0..={}", threshold, model.k_max),
        });
    }
    let row = tape.slice(model.log_probs, 0, position, 1)?;
    let cell = tape.slice(row, 1, item, 1)?;
    let flat = tape.reshape(cell, &[kp1])?;
    let tail = tape.slice(flat, 0, threshold, kp1 - threshold)?;
    tape.logsumexp(tail, 0)
}

/// Integer multiplicity assignment, n x V.
#[derive(Debug, Clone, PartialEq)]
pub struct ZAssignment {
    pub counts: Vec<Vec<u32>>,
}

impl ZAssignment {
    pub fn n(&self) -> usize {
        self.counts.len()
    }

    pub fn vocab(&self) -> usize {
        self.counts.first().map_or(0, Vec::len)
    }

    pub fn total_counts(&self) -> Vec<usize> {
        let mut totals = vec![0usize; self.vocab()];
        for row in &self.counts {
            for (v, &c) in row.iter().enumerate() {
                totals[v] += c as usize;
            }
        }
        totals
    }

    /// Sparse (position, item, count) triples with count > 0.
    pub fn sparse(&self) -> Vec<(u32, u32, u32)> {
        let mut out = Vec::new();
        for (i, row) in self.counts.iter().enumerate() {
            for (v, &c) in row.iter().enumerate() {
                if c > 0 {
                    out.push((i as u32, v as u32, c));
                }
            }
        }
        out
    }
}

/// Multiset of token ids in a sequence, as a count vector over the vocab.
pub fn multiset_of(tokens: &[u32], vocab: usize) -> Vec<usize> {
    let mut m = vec![0usize; vocab];
    for &t in tokens {
        m[t as usize] += 1;
    }
    m
}

/// Exact constrained argmax: the most likely assignment z with
/// sum_i z_{i,v} = m_v for every item v. Per-item max-sum DP with
/// backtracking; ties resolved by giving earlier positions the higher
/// multiplicity.
pub fn annotate_most_likely(
    log_probs: &Tensor,
    m: &[usize],
) -> Result<ZAssignment, MultisetError> {
    let shape = log_probs.shape();
    let (n, vocab, kp1) = (shape[0], shape[1], shape[2]);
    let k_max = kp1 - 1;
    let mut counts = vec![vec![0u32; vocab]; n];
    for (v, &target) in m.iter().enumerate() {
        if target > n * k_max {
            return Err(MultisetError::Infeasible { item: v, needed: target, max: n * k_max });
        }
        let lp = |i: usize, k: usize| log_probs.at(&[i, v, k]);
        // suffix[i][r]: best score for positions i.. summing to r
        let mut suffix = vec![vec![f64::NEG_INFINITY; target + 1]; n + 1];
        suffix[n][0] = 0.0;
        for i in (0..n).rev() {
            for r in 0..=target {
                let mut best = f64::NEG_INFINITY;
                for k in 0..kp1.min(r + 1) {
                    let rest = suffix[i + 1][r - k];
                    if rest > f64::NEG_INFINITY {
                        best = best.max(lp(i, k) + rest);
                    }
                }
                suffix[i][r] = best;
            }
        }
        let mut remaining = target;
        for i in 0..n {
            let mut best_k = 0;
            let mut best_score = f64::NEG_INFINITY;
            // scan k descending so exact ties keep the larger k here
            for k in (0..kp1.min(remaining + 1)).rev() {
                let rest = suffix[i + 1][remaining - k];
                if rest == f64::NEG_INFINITY {
                    continue;
                }
                let score = lp(i, k) + rest;
                if score > best_score {
                    best_score = score;
                    best_k = k;
                }
            }
            counts[i][v] = best_k as u32;
            remaining -= best_k;
        }
        debug_assert_eq!(remaining, 0);
    }
    Ok(ZAssignment { counts })
}

/// Unconstrained per-cell argmax, used at prediction time.
pub fn argmax_multiset(log_probs: &Tensor) -> ZAssignment {
    let shape = log_probs.shape();
    let (n, vocab, kp1) = (shape[0], shape[1], shape[2]);
    let mut counts = vec![vec![0u32; vocab]; n];
    for (i, row) in counts.iter_mut().enumerate() {
        for (v, slot) in row.iter_mut().enumerate() {
            let mut best = (0usize, f64::NEG_INFINITY);
            for k in 0..kp1 {
                let lp = log_probs.at(&[i, v, k]);
                if lp > best.1 {
                    best = (k, lp);
                }
            }
            *slot = best.0 as u32;
        }
    }
    ZAssignment { counts }
}

/// Canonically ordered multiset sequence with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderedMultiset {
    pub z_prime: Vec<u32>,
    pub align: Vec<u32>,
    /// 1-based occurrence index of the token within its source multiset.
    pub occ: Vec<u32>,
}

/// Concatenate per-position multisets, each sorted ascending by vocab id,
/// tagging every token with its source position and occurrence index.
pub fn order_and_align(z: &ZAssignment) -> OrderedMultiset {
    let mut out = OrderedMultiset { z_prime: Vec::new(), align: Vec::new(), occ: Vec::new() };
    for (i, row) in z.counts.iter().enumerate() {
        for (v, &count) in row.iter().enumerate() {
            for k in 1..=count {
                out.z_prime.push(v as u32);
                out.align.push(i as u32);
                out.occ.push(k);
            }
        }
    }
    out
}
