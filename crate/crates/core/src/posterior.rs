//! Training-time projection of the relaxed solution into the set of
//! gold-consistent soft permutations, and the KL loss against those targets.
//!
//! The projection runs the same cyclic-KL solver, warm-started from the
//! current solution with forbidden correspondences pushed to the mass floor.
//! It happens on a private tape: the targets enter the loss as constants, so
//! only the model side is differentiated (the min over targets contributes
//! no gradient at its optimum).

use thiserror::Error;

use crate::solver::{self, SoftPermutation, SolveOutput, SolverConfig, SolverError};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError, NEG_LOG};

#[derive(Debug, Error)]
pub enum PosteriorError {
    #[error("tokens are not a rearrangement of the target (item {item}: {have} vs {want})")]
    NotRearrangement { item: u32, have: usize, want: usize },
    #[error("sequence lengths differ: {z_prime} multiset tokens vs {y} target tokens")]
    LengthMismatch { z_prime: usize, y: usize },
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Allowed correspondence pattern: position i of z' may sit at output j only
/// when the tokens agree.
#[derive(Debug, Clone)]
pub struct GoldMask {
    pub allowed: Vec<bool>,
    pub n: usize,
}

impl GoldMask {
    pub fn new(z_prime: &[u32], y: &[u32]) -> Result<Self, PosteriorError> {
        if z_prime.len() != y.len() {
            return Err(PosteriorError::LengthMismatch { z_prime: z_prime.len(), y: y.len() });
        }
        // multiset equality guarantees every row and column has a match
        let mut balance = std::collections::HashMap::new();
        for &t in z_prime {
            *balance.entry(t).or_insert(0i64) += 1;
        }
        for &t in y {
            *balance.entry(t).or_insert(0i64) -= 1;
        }
        for (&item, &diff) in &balance {
            if diff != 0 {
                let have = z_prime.iter().filter(|&&t| t == item).count();
                let want = y.iter().filter(|&&t| t == item).count();
                return Err(PosteriorError::NotRearrangement { item, have, want });
            }
        }
        let n = y.len();
        let mut allowed = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                allowed[i * n + j] = z_prime[i] == y[j];
            }
        }
        Ok(GoldMask { allowed, n })
    }

    pub fn is_allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n + j]
    }

    /// W-side mask over the active slice: a jump variable survives only when
    /// both of its endpoints are allowed.
    fn allowed_w_active(&self) -> Vec<bool> {
        let n = self.n;
        let mut out = vec![false; n * (n - 1).max(0) * n];
        for i in 0..n {
            for jj in 0..n - 1 {
                for k in 0..n {
                    out[(i * (n - 1) + jj) * n + k] =
                        self.is_allowed(i, jj + 1) && self.is_allowed(k, jj);
                }
            }
        }
        out
    }
}

/// Gold-consistent targets in probability space.
pub struct PosteriorTargets {
    pub u_hat: Tensor,
    pub w_hat_active: Option<Tensor>,
    pub projection: SoftPermutation,
}

/// KL-project the current solution onto the gold-consistent constraint set.
/// Runs on a private tape; the result is detached by construction.
pub fn project_posterior(
    soft: &SoftPermutation,
    mask: &GoldMask,
    config: &SolverConfig,
) -> Result<PosteriorTargets, PosteriorError> {
    let n = soft.n();
    debug_assert_eq!(n, mask.n);
    let mut log_u0 = soft.log_u.clone();
    for i in 0..n {
        for j in 0..n {
            if !mask.is_allowed(i, j) {
                log_u0.set(&[i, j], NEG_LOG);
            }
        }
    }
    let log_w0 = soft.log_w_active().map(|mut w| {
        let allowed = mask.allowed_w_active();
        for (slot, &ok) in w.data_mut().iter_mut().zip(&allowed) {
            if !ok {
                *slot = NEG_LOG;
            }
        }
        w
    });

    let mut tape = Tape::new();
    let lu = tape.leaf(log_u0);
    let lw = log_w0.map(|w| tape.leaf(w));
    let out = solver::solve_from_logs(&mut tape, lu, lw, config)?;
    let u_hat = out.soft.u();
    let w_hat_active = out.soft.log_w_active().map(|w| w.map(f64::exp));
    Ok(PosteriorTargets { u_hat, w_hat_active, projection: out.soft })
}

/// Generalized KL divergence KL(u_hat || U*) + KL(w_hat || W*) as a tape
/// scalar. The targets are plain tensors (constants); gradients flow through
/// the solver composition only.
pub fn perm_loss(
    tape: &mut Tape,
    solved: &SolveOutput,
    targets: &PosteriorTargets,
) -> Result<(Var, f64), PosteriorError> {
    // constant part sum p ln p - p, with 0 ln 0 = 0
    let const_part = |p: &Tensor| -> f64 {
        p.data()
            .iter()
            .map(|&v| if v > 0.0 { v * v.ln() - v } else { 0.0 })
            .sum()
    };
    let mut loss = kl_half(tape, solved.vars.log_u, &targets.u_hat)?;
    let mut constant = const_part(&targets.u_hat);
    if let (Some(w_var), Some(w_hat)) = (solved.vars.log_w_active, &targets.w_hat_active) {
        let w_part = kl_half(tape, w_var, w_hat)?;
        loss = tape.add(loss, w_part)?;
        constant += const_part(w_hat);
    }
    let total = tape.add_scalar(loss, constant);
    let value = tape.value(total).item();
    Ok((total, value))
}

/// sum(-p ln q + q) for constant p against tape-resident log q.
fn kl_half(tape: &mut Tape, log_q: Var, p: &Tensor) -> Result<Var, TensorError> {
    let p_var = tape.leaf(p.clone());
    let cross = tape.mul(log_q, p_var)?;
    let cross_sum = tape.sum_all(cross);
    let neg_cross = tape.neg(cross_sum);
    let q = tape.exp(log_q);
    let q_sum = tape.sum_all(q);
    tape.add(neg_cross, q_sum)
}
