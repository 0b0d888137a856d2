//! Entropy-regularized relaxation of the jump-scored permutation objective,
//! solved by cyclic KL projections in log space.
//!
//! State: logU (n x n) relaxed assignment, and the active part of the
//! auxiliary jump tensor logW stored as (n, n-1, n) for output columns
//! j >= 1 (column 0 has no predecessor and is pinned at the mass floor in
//! the public (n, n, n) form). Each sweep projects onto
//!   (i)  column sums of U = 1 and sum_k W_ijk = U_ij,
//!   (ii) column sums of U = 1 and sum_i W_ijk = U_{k,j-1},
//!   (iii) row sums of U = 1,
//! using the closed-form geometric-mean projection for the coupled sets and
//! plain marginal normalization elsewhere. Every projection is recorded on
//! the tape, so backpropagation differentiates the exact sweeps executed.

use thiserror::Error;

use crate::scores::{ScoreBundle, ScoreVars};
use crate::tensor::tape::{Bcast, Tape, Var};
use crate::tensor::{Tensor, TensorError, NEG_LOG};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("projection slice has no mass (infeasible state)")]
    Infeasible,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub max_sweeps: usize,
    /// Convergence threshold on the worst constraint violation.
    pub tolerance: f64,
    pub tau_override: Option<f64>,
    /// With the coupled W projections disabled the cycle degenerates to
    /// alternating row/column normalization (Sinkhorn).
    pub use_w: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { max_sweeps: 100, tolerance: 1e-4, tau_override: None, use_w: true }
    }
}

impl SolverConfig {
    pub fn with_sweeps(max_sweeps: usize) -> Self {
        SolverConfig { max_sweeps, ..Default::default() }
    }
}

/// Converged (or budget-exhausted) relaxed permutation in log space.
#[derive(Debug, Clone)]
pub struct SoftPermutation {
    /// (n, n): log of the bistochastic relaxation.
    pub log_u: Tensor,
    /// (n, n, n) indexed (successor i, output j, predecessor k); the j = 0
    /// column carries no variables and sits at the mass floor.
    pub log_w: Tensor,
    pub sweeps_used: usize,
    pub max_violation: f64,
    pub converged: bool,
    /// Worst violation after each sweep.
    pub violation_trace: Vec<f64>,
}

impl SoftPermutation {
    pub fn n(&self) -> usize {
        self.log_u.shape()[0]
    }

    /// Probability-space U.
    pub fn u(&self) -> Tensor {
        self.log_u.map(f64::exp)
    }

    /// Active W slice (n, n-1, n), log space.
    pub fn log_w_active(&self) -> Option<Tensor> {
        let n = self.n();
        if n < 2 {
            return None;
        }
        let mut out = Tensor::zeros(&[n, n - 1, n]);
        for i in 0..n {
            for jj in 0..n - 1 {
                for k in 0..n {
                    out.set(&[i, jj, k], self.log_w.at(&[i, jj + 1, k]));
                }
            }
        }
        Some(out)
    }
}

/// Tape handles of the solver state: logU and the active logW slice.
pub struct SolveVars {
    pub log_u: Var,
    pub log_w_active: Option<Var>,
}

pub struct SolveOutput {
    pub vars: SolveVars,
    pub soft: SoftPermutation,
}

/// KL projection onto fixed marginals along `axis` of a rank-2 log matrix
/// (Prop.-1 style): log A + log m - logsumexp(log A, axis).
pub fn project_marginals(
    tape: &mut Tape,
    log_a: Var,
    marginals: &[f64],
    axis: usize,
) -> Result<Var, SolverError> {
    let shape = tape.shape(log_a).to_vec();
    if shape.len() != 2 || axis > 1 || marginals.len() != shape[1 - axis] {
        return Err(SolverError::Tensor(TensorError::Invalid {
            op: "project_marginals",
            msg: format!("shape {:?}, axis {}, {} marginals", shape, axis, marginals.len()),
        }));
    }
    let norms = tape.logsumexp(log_a, axis)?;
    if tape.value(norms).data().iter().any(|&v| v < NEG_LOG / 2.0) {
        return Err(SolverError::Infeasible);
    }
    let log_m = tape.leaf(Tensor::from_vec(marginals.iter().map(|&m| m.ln()).collect()));
    // reducing over axis 0 leaves a per-column vector (broadcast over rows),
    // reducing over axis 1 leaves a per-row vector (broadcast over columns)
    let bc = if axis == 0 { Bcast::Leading } else { Bcast::Trailing };
    let centered = tape.sub_b(log_a, norms, bc)?;
    Ok(tape.add_b(centered, log_m, bc)?)
}

fn col_log_normalize(tape: &mut Tape, log_a: Var) -> Result<Var, SolverError> {
    let norms = tape.logsumexp(log_a, 0)?;
    if tape.value(norms).data().iter().any(|&v| v < NEG_LOG / 2.0) {
        return Err(SolverError::Infeasible);
    }
    Ok(tape.sub_b(log_a, norms, Bcast::Leading)?)
}

fn row_log_normalize(tape: &mut Tape, log_a: Var) -> Result<Var, SolverError> {
    let norms = tape.logsumexp(log_a, 1)?;
    if tape.value(norms).data().iter().any(|&v| v < NEG_LOG / 2.0) {
        return Err(SolverError::Infeasible);
    }
    Ok(tape.sub_b(log_a, norms, Bcast::Trailing)?)
}

/// Joint projection onto column sums of U = 1 together with
/// sum_k W_ijk = U_ij (coupled columns j >= 1; column 0 is plain
/// normalization). Geometric-mean closed form.
pub fn project_set_i(
    tape: &mut Tape,
    log_u: Var,
    log_w_active: Var,
) -> Result<(Var, Var), SolverError> {
    let n = tape.shape(log_u)[0];
    let sum_k = tape.logsumexp(log_w_active, 2)?; // (n, n-1)
    let u_cols = tape.slice(log_u, 1, 1, n - 1)?;
    let merged = tape.add(u_cols, sum_k)?;
    let t = tape.scale(merged, 0.5);
    let u0 = tape.slice(log_u, 1, 0, 1)?;
    let t_full = tape.concat(&[u0, t], 1)?;
    let new_u = col_log_normalize(tape, t_full)?;
    let u_act = tape.slice(new_u, 1, 1, n - 1)?;
    let delta = tape.sub(u_act, sum_k)?;
    let new_w = tape.add_b(log_w_active, delta, Bcast::Trailing)?;
    Ok((new_u, new_w))
}

/// Mirror image of [`project_set_i`]: column sums of U = 1 together with
/// sum_i W_ijk = U_{k,j-1} (U columns 0..n-2 couple to W slices; the last
/// column is plain normalization).
pub fn project_set_ii(
    tape: &mut Tape,
    log_u: Var,
    log_w_active: Var,
) -> Result<(Var, Var), SolverError> {
    let n = tape.shape(log_u)[0];
    let sum_i = tape.logsumexp(log_w_active, 0)?; // (n-1, n): (col jj, predecessor k)
    let sum_i_t = tape.permute(sum_i, &[1, 0])?; // (n, n-1)
    let u_cols = tape.slice(log_u, 1, 0, n - 1)?;
    let merged = tape.add(u_cols, sum_i_t)?;
    let t = tape.scale(merged, 0.5);
    let u_last = tape.slice(log_u, 1, n - 1, 1)?;
    let t_full = tape.concat(&[t, u_last], 1)?;
    let new_u = col_log_normalize(tape, t_full)?;
    let u_act = tape.slice(new_u, 1, 0, n - 1)?;
    let u_act_t = tape.permute(u_act, &[1, 0])?; // (n-1, n)
    let delta = tape.sub(u_act_t, sum_i)?;
    let new_w = tape.add_b(log_w_active, delta, Bcast::Leading)?;
    Ok((new_u, new_w))
}

/// Worst absolute violation across the four constraint families, measured in
/// probability space.
pub fn max_violation(log_u: &Tensor, log_w_active: Option<&Tensor>) -> f64 {
    let n = log_u.shape()[0];
    let mut worst = 0.0f64;
    for j in 0..n {
        let s: f64 = (0..n).map(|i| log_u.at(&[i, j]).exp()).sum();
        worst = worst.max((s - 1.0).abs());
    }
    for i in 0..n {
        let s: f64 = (0..n).map(|j| log_u.at(&[i, j]).exp()).sum();
        worst = worst.max((s - 1.0).abs());
    }
    if let Some(w) = log_w_active {
        for i in 0..n {
            for jj in 0..n - 1 {
                let s: f64 = (0..n).map(|k| w.at(&[i, jj, k]).exp()).sum();
                worst = worst.max((s - log_u.at(&[i, jj + 1]).exp()).abs());
            }
        }
        for jj in 0..n - 1 {
            for k in 0..n {
                let s: f64 = (0..n).map(|i| w.at(&[i, jj, k]).exp()).sum();
                worst = worst.max((s - log_u.at(&[k, jj]).exp()).abs());
            }
        }
    }
    worst
}

/// Initial state from scores: logU = placement/tau, logW = jump/tau repeated
/// across active output columns.
fn init_state(
    tape: &mut Tape,
    scores: &ScoreVars,
    tau: f64,
    use_w: bool,
) -> Result<(Var, Option<Var>), SolverError> {
    let n = tape.shape(scores.s_start)[0];
    let inv_tau = 1.0 / tau;
    let start_col = tape.reshape(scores.s_start, &[n, 1])?;
    let end_col = tape.reshape(scores.s_end, &[n, 1])?;
    let log_u = if n == 1 {
        let merged = tape.add(start_col, end_col)?;
        tape.scale(merged, inv_tau)
    } else {
        let mut cols = vec![start_col];
        if n > 2 {
            cols.push(tape.leaf(Tensor::zeros(&[n, n - 2])));
        }
        cols.push(end_col);
        let placement = tape.concat(&cols, 1)?;
        tape.scale(placement, inv_tau)
    };
    let log_w = if use_w && n >= 2 {
        let jump_t = tape.permute(scores.jump, &[1, 0])?; // (successor i, predecessor k)
        let scaled = tape.scale(jump_t, inv_tau);
        let slab = tape.reshape(scaled, &[n, 1, n])?;
        let slabs = vec![slab; n - 1];
        Some(tape.concat(&slabs, 1)?)
    } else {
        None
    };
    Ok((log_u, log_w))
}

fn run_sweeps(
    tape: &mut Tape,
    mut log_u: Var,
    mut log_w: Option<Var>,
    config: &SolverConfig,
) -> Result<SolveOutput, SolverError> {
    let mut trace = Vec::with_capacity(config.max_sweeps);
    let mut converged = false;
    let mut sweeps_used = 0;
    for _ in 0..config.max_sweeps {
        match log_w {
            Some(w) => {
                let (u1, w1) = project_set_i(tape, log_u, w)?;
                let (u2, w2) = project_set_ii(tape, u1, w1)?;
                log_u = row_log_normalize(tape, u2)?;
                log_w = Some(w2);
            }
            None => {
                let u1 = col_log_normalize(tape, log_u)?;
                let u2 = col_log_normalize(tape, u1)?;
                log_u = row_log_normalize(tape, u2)?;
            }
        }
        sweeps_used += 1;
        let violation = max_violation(
            tape.value(log_u),
            log_w.map(|w| tape.value(w)),
        );
        trace.push(violation);
        if violation < config.tolerance {
            converged = true;
            break;
        }
    }
    let n = tape.shape(log_u)[0];
    let log_w_full = materialize_full_w(tape, log_w, n);
    let soft = SoftPermutation {
        log_u: tape.value(log_u).clone(),
        log_w: log_w_full,
        sweeps_used,
        max_violation: trace.last().copied().unwrap_or(f64::INFINITY),
        converged,
        violation_trace: trace,
    };
    Ok(SolveOutput { vars: SolveVars { log_u, log_w_active: log_w }, soft })
}

fn materialize_full_w(tape: &Tape, log_w_active: Option<Var>, n: usize) -> Tensor {
    let mut full = Tensor::fill(&[n, n, n], NEG_LOG);
    if let Some(w) = log_w_active {
        let active = tape.value(w);
        for i in 0..n {
            for jj in 0..n - 1 {
                for k in 0..n {
                    full.set(&[i, jj + 1, k], active.at(&[i, jj, k]));
                }
            }
        }
    }
    full
}

/// Solve from tape-resident scores; every projection stays on the tape so a
/// downstream loss can be backpropagated to the scores.
pub fn solve_on_tape(
    tape: &mut Tape,
    scores: &ScoreVars,
    config: &SolverConfig,
) -> Result<SolveOutput, SolverError> {
    let tau = config.tau_override.unwrap_or(scores.tau);
    let (log_u, log_w) = init_state(tape, scores, tau, config.use_w)?;
    run_sweeps(tape, log_u, log_w, config)
}

/// Solve starting from an explicit log-space state (the E-step entry point).
/// `log_w_active` must be (n, n-1, n) when present.
pub fn solve_from_logs(
    tape: &mut Tape,
    log_u: Var,
    log_w_active: Option<Var>,
    config: &SolverConfig,
) -> Result<SolveOutput, SolverError> {
    run_sweeps(tape, log_u, log_w_active, config)
}

/// Value-level convenience: solve a bundle on a private tape.
pub fn solve(bundle: &ScoreBundle, config: &SolverConfig) -> Result<SoftPermutation, SolverError> {
    let mut tape = Tape::new();
    let scores = ScoreVars::constants(&mut tape, bundle);
    Ok(solve_on_tape(&mut tape, &scores, config)?.soft)
}
