//! Permutation scores: where to start, where to end, and jump affinities
//! between every predecessor/successor pair, plus the length-dependent
//! solver temperature.

use std::fs;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::optim::{ParamBinding, ParamStore};
use crate::tensor::tape::{Bcast, Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("alignment index {index} out of range for {n} encoder states")]
    BadAlign { index: usize, n: usize },
    #[error("occurrence index {occ} outside 1..={k_max}")]
    BadOcc { occ: u32, k_max: usize },
    #[error("token id {id} out of range for output vocab of {vocab}")]
    BadToken { id: u32, vocab: usize },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Per-instance scores driving the permutation solver.
///
/// `jump` is indexed (predecessor k, successor i). Start/end scores apply to
/// the first and last output column respectively; all other placement scores
/// are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBundle {
    pub s_start: Tensor,
    pub s_end: Tensor,
    pub jump: Tensor,
    pub tau: f64,
}

impl ScoreBundle {
    pub fn n(&self) -> usize {
        self.s_start.numel()
    }

    pub fn validate(&self) -> Result<(), ScoreError> {
        let n = self.n();
        if self.s_end.numel() != n || self.jump.shape() != [n, n] {
            return Err(ScoreError::Tensor(TensorError::ShapeMismatch {
                op: "ScoreBundle",
                lhs: vec![n],
                rhs: self.jump.shape().to_vec(),
            }));
        }
        if !(self.tau > 0.0)
            || !self.s_start.is_finite()
            || !self.s_end.is_finite()
            || !self.jump.is_finite()
        {
            return Err(ScoreError::Parse {
                path: "<bundle>".into(),
                line: 0,
                msg: "scores must be finite with tau > 0".into(),
            });
        }
        Ok(())
    }

    /// Dense placement-score matrix: column 0 carries the start scores,
    /// column n-1 the end scores (they coincide for n = 1), zero elsewhere.
    pub fn placement_matrix(&self) -> Tensor {
        let n = self.n();
        let mut s = Tensor::zeros(&[n, n]);
        for i in 0..n {
            let v = s.at(&[i, 0]) + self.s_start.data()[i];
            s.set(&[i, 0], v);
            let v = s.at(&[i, n - 1]) + self.s_end.data()[i];
            s.set(&[i, n - 1], v);
        }
        s
    }

    /// Line-delimited text form: n, start scores, end scores, jump rows, tau.
    pub fn save(&self, path: &Path) -> Result<(), ScoreError> {
        let n = self.n();
        let mut out = format!("{}\n", n);
        let fmt_row = |row: &[f64]| {
            row.iter().map(|v| format!("{:.17e}", v)).collect::<Vec<_>>().join(" ")
        };
        out.push_str(&fmt_row(self.s_start.data()));
        out.push('\n');
        out.push_str(&fmt_row(self.s_end.data()));
        out.push('\n');
        for k in 0..n {
            out.push_str(&fmt_row(&self.jump.data()[k * n..(k + 1) * n]));
            out.push('\n');
        }
        out.push_str(&format!("{:.17e}\n", self.tau));
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ScoreError> {
        let pstr = path.display().to_string();
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines().enumerate();
        let mut next_row = |expect: usize, what: &str| -> Result<(usize, Vec<f64>), ScoreError> {
            let (idx, line) = lines.next().ok_or_else(|| ScoreError::Parse {
                path: pstr.clone(),
                line: 0,
                msg: format!("missing {what}"),
            })?;
            let vals: Result<Vec<f64>, _> =
                line.split_whitespace().map(str::parse::<f64>).collect();
            let vals = vals.map_err(|e| ScoreError::Parse {
                path: pstr.clone(),
                line: idx + 1,
                msg: format!("{what}: {e}"),
            })?;
            if expect > 0 && vals.len() != expect {
                return Err(ScoreError::Parse {
                    path: pstr.clone(),
                    line: idx + 1,
                    msg: format!("{what}: expected {expect} values, got {}", vals.len()),
                });
            }
            Ok((idx + 1, vals))
        };
        let (line_no, header) = next_row(1, "size line")?;
        let n = header[0] as usize;
        if n == 0 {
            return Err(ScoreError::Parse { path: pstr, line: line_no, msg: "n must be >= 1".into() });
        }
        let (_, s_start) = next_row(n, "start scores")?;
        let (_, s_end) = next_row(n, "end scores")?;
        let mut jump = Vec::with_capacity(n * n);
        for k in 0..n {
            let (_, row) = next_row(n, &format!("jump row {k}"))?;
            jump.extend(row);
        }
        let (_, tau) = next_row(1, "tau")?;
        let bundle = ScoreBundle {
            s_start: Tensor::from_vec(s_start),
            s_end: Tensor::from_vec(s_end),
            jump: Tensor::new(&[n, n], jump)?,
            tau: tau[0],
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

/// Tape-resident counterpart of [`ScoreBundle`] used during training.
pub struct ScoreVars {
    pub s_start: Var,
    pub s_end: Var,
    pub jump: Var,
    pub tau: f64,
}

impl ScoreVars {
    pub fn snapshot(&self, tape: &Tape) -> ScoreBundle {
        ScoreBundle {
            s_start: tape.value(self.s_start).clone(),
            s_end: tape.value(self.s_end).clone(),
            jump: tape.value(self.jump).clone(),
            tau: self.tau,
        }
    }

    pub fn constants(tape: &mut Tape, bundle: &ScoreBundle) -> Self {
        ScoreVars {
            s_start: tape.leaf(bundle.s_start.clone()),
            s_end: tape.leaf(bundle.s_end.clone()),
            jump: tape.leaf(bundle.jump.clone()),
            tau: bundle.tau,
        }
    }
}

/// Length-dependent temperature 1/log n, floored at n = 2.
pub fn default_tau(n: usize) -> f64 {
    1.0 / (n.max(2) as f64).ln()
}

#[derive(Debug, Clone)]
pub struct ScorerConfig {
    pub vocab_out: usize,
    pub k_max: usize,
    pub encoder_dim: usize,
    pub tok_dim: usize,
    pub occ_dim: usize,
    /// Signed relative-distance bias is clipped to +-rel_clip.
    pub rel_clip: usize,
}

impl ScorerConfig {
    pub fn hidden_dim(&self) -> usize {
        self.encoder_dim + self.tok_dim + self.occ_dim
    }
}

pub fn init_perm_scorer(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &ScorerConfig,
    rng: &mut impl Rng,
) {
    let d = cfg.hidden_dim();
    let scale = (1.0 / d as f64).sqrt();
    store.insert_uniform(&format!("{prefix}.tok_embed"), &[cfg.vocab_out, cfg.tok_dim], 0.1, rng);
    store.insert_uniform(&format!("{prefix}.occ_embed"), &[cfg.k_max, cfg.occ_dim], 0.1, rng);
    for head in ["start", "end"] {
        store.insert_uniform(&format!("{prefix}.ff_{head}.w"), &[d, d], scale, rng);
        store.insert_zeros(&format!("{prefix}.ff_{head}.b"), &[d]);
        store.insert_uniform(&format!("{prefix}.ff_{head}.v"), &[d, 1], scale, rng);
    }
    store.insert_uniform(&format!("{prefix}.bilinear"), &[d, d], scale, rng);
    store.insert_zeros(&format!("{prefix}.rel_bias"), &[2 * cfg.rel_clip + 1]);
}

/// h'_i = [h_{align(i)}; embed(z'_i); embed(occ_i)], shape (n', d').
pub fn build_hidden(
    tape: &mut Tape,
    bind: &ParamBinding,
    prefix: &str,
    cfg: &ScorerConfig,
    h: Var,
    z_prime: &[u32],
    align: &[u32],
    occ: &[u32],
) -> Result<Var, ScoreError> {
    let n = tape.shape(h)[0];
    let mut rows = Vec::with_capacity(align.len());
    for &a in align {
        if a as usize >= n {
            return Err(ScoreError::BadAlign { index: a as usize, n });
        }
        rows.push(a as usize);
    }
    let mut occ_ix = Vec::with_capacity(occ.len());
    for &o in occ {
        if o == 0 || o as usize > cfg.k_max {
            return Err(ScoreError::BadOcc { occ: o, k_max: cfg.k_max });
        }
        occ_ix.push(o as usize - 1);
    }
    let mut tok_ix = Vec::with_capacity(z_prime.len());
    for &t in z_prime {
        if t as usize >= cfg.vocab_out {
            return Err(ScoreError::BadToken { id: t, vocab: cfg.vocab_out });
        }
        tok_ix.push(t as usize);
    }
    let ctx = tape.gather_rows(h, &rows)?;
    let tok = tape.gather_rows(bind.var(&format!("{prefix}.tok_embed")), &tok_ix)?;
    let oc = tape.gather_rows(bind.var(&format!("{prefix}.occ_embed")), &occ_ix)?;
    Ok(tape.concat(&[ctx, tok, oc], 1)?)
}

fn ff_head(
    tape: &mut Tape,
    bind: &ParamBinding,
    prefix: &str,
    head: &str,
    h: Var,
) -> Result<Var, TensorError> {
    let w = bind.var(&format!("{prefix}.ff_{head}.w"));
    let b = bind.var(&format!("{prefix}.ff_{head}.b"));
    let v = bind.var(&format!("{prefix}.ff_{head}.v"));
    let lin = tape.matmul(h, w)?;
    let lin = tape.add_b(lin, b, Bcast::Leading)?;
    let act = tape.tanh(lin);
    let out = tape.matmul(act, v)?;
    let n = tape.shape(out)[0];
    tape.reshape(out, &[n])
}

/// Start/end/jump scores from the multiset-token representations.
///
/// Jump scores combine a scaled bilinear term with a learned bias over the
/// clipped signed distance i - k, preserving the locality preference of the
/// attention mechanism they substitute for.
pub fn score(
    tape: &mut Tape,
    bind: &ParamBinding,
    prefix: &str,
    cfg: &ScorerConfig,
    h_prime: Var,
) -> Result<ScoreVars, ScoreError> {
    let n = tape.shape(h_prime)[0];
    let d = tape.shape(h_prime)[1];
    let s_start = ff_head(tape, bind, prefix, "start", h_prime)?;
    let s_end = ff_head(tape, bind, prefix, "end", h_prime)?;

    let bilinear = bind.var(&format!("{prefix}.bilinear"));
    let left = tape.matmul(h_prime, bilinear)?;
    let h_t = tape.permute(h_prime, &[1, 0])?;
    let raw = tape.matmul(left, h_t)?;
    let scaled = tape.scale(raw, 1.0 / (d as f64).sqrt());

    let r = cfg.rel_clip as i64;
    let mut bias_ix = Vec::with_capacity(n * n);
    for k in 0..n as i64 {
        for i in 0..n as i64 {
            bias_ix.push(((i - k).clamp(-r, r) + r) as usize);
        }
    }
    let table = bind.var(&format!("{prefix}.rel_bias"));
    let bias_flat = tape.gather_rows(table, &bias_ix)?;
    let bias = tape.reshape(bias_flat, &[n, n])?;
    let jump = tape.add(scaled, bias)?;

    Ok(ScoreVars { s_start, s_end, jump, tau: default_tau(n) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_cfg() -> ScorerConfig {
        ScorerConfig { vocab_out: 5, k_max: 3, encoder_dim: 6, tok_dim: 4, occ_dim: 2, rel_clip: 8 }
    }

    fn random_h(tape: &mut Tape, n: usize, d: usize, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        tape.leaf(Tensor::new(&[n, d], data).unwrap())
    }

    #[test]
    fn tau_matches_inverse_log_length() {
        assert!((default_tau(2) - 1.0 / std::f64::consts::LN_2).abs() < 1e-12);
        assert!((default_tau(1) - 1.0 / std::f64::consts::LN_2).abs() < 1e-12);
        assert!((default_tau(10) - 1.0 / 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_parameters_give_zero_scores() {
        let cfg = toy_cfg();
        let d = cfg.hidden_dim();
        let mut store = ParamStore::new();
        store.insert_zeros("p.tok_embed", &[cfg.vocab_out, cfg.tok_dim]);
        store.insert_zeros("p.occ_embed", &[cfg.k_max, cfg.occ_dim]);
        for head in ["start", "end"] {
            store.insert_zeros(&format!("p.ff_{head}.w"), &[d, d]);
            store.insert_zeros(&format!("p.ff_{head}.b"), &[d]);
            store.insert_zeros(&format!("p.ff_{head}.v"), &[d, 1]);
        }
        store.insert_zeros("p.bilinear", &[d, d]);
        store.insert_zeros("p.rel_bias", &[2 * cfg.rel_clip + 1]);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let h = random_h(&mut tape, 3, cfg.encoder_dim, 0);
        let hp = build_hidden(&mut tape, &bind, "p", &cfg, h, &[1, 2, 1], &[0, 1, 2], &[1, 1, 1])
            .unwrap();
        let sv = score(&mut tape, &bind, "p", &cfg, hp).unwrap();
        assert!(tape.value(sv.s_start).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(sv.s_end).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(sv.jump).data().iter().all(|&v| v == 0.0));
    }

    fn random_store(cfg: &ScorerConfig, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_perm_scorer(&mut store, "p", cfg, &mut rng);
        // rel_bias initialized nonzero for directionality checks
        let mut rng2 = ChaCha8Rng::seed_from_u64(seed + 1);
        let n = store.get("p.rel_bias").numel();
        let data = (0..n).map(|_| rng2.gen_range(-0.5..0.5)).collect();
        store.insert("p.rel_bias", Tensor::from_vec(data));
        store
    }

    #[test]
    fn occurrence_embedding_distinguishes_duplicates() {
        let cfg = toy_cfg();
        let store = random_store(&cfg, 5);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let h = random_h(&mut tape, 2, cfg.encoder_dim, 1);
        // same source position, same token type, occurrences 1 and 2
        let hp = build_hidden(&mut tape, &bind, "p", &cfg, h, &[3, 3], &[0, 0], &[1, 2]).unwrap();
        let hv = tape.value(hp);
        let d = cfg.hidden_dim();
        let base = cfg.encoder_dim + cfg.tok_dim;
        let (row0, row1) = (&hv.data()[..d], &hv.data()[d..]);
        assert_eq!(&row0[..base], &row1[..base], "shared slices must match");
        assert!(
            row0[base..].iter().zip(&row1[base..]).any(|(a, b)| (a - b).abs() > 1e-12),
            "occurrence slices must differ"
        );
    }

    #[test]
    fn bias_is_direction_sensitive() {
        let cfg = toy_cfg();
        let store = random_store(&cfg, 6);
        let r = cfg.rel_clip;
        let fwd = store.get("p.rel_bias").data()[r + 1];
        let bwd = store.get("p.rel_bias").data()[r - 1];
        assert!((fwd - bwd).abs() > 1e-9);

        // and the assembled jump matrix reflects the table difference at
        // symmetric offsets when the bilinear part is symmetric (zeroed)
        let mut store = store;
        let d = cfg.hidden_dim();
        store.insert_zeros("p.bilinear", &[d, d]);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let h = random_h(&mut tape, 3, cfg.encoder_dim, 2);
        let hp = build_hidden(&mut tape, &bind, "p", &cfg, h, &[1, 2, 3], &[0, 1, 2], &[1, 1, 1])
            .unwrap();
        let sv = score(&mut tape, &bind, "p", &cfg, hp).unwrap();
        let j = tape.value(sv.jump);
        assert!((j.at(&[0, 1]) - fwd).abs() < 1e-12);
        assert!((j.at(&[1, 0]) - bwd).abs() < 1e-12);
    }

    #[test]
    fn hidden_shape_is_sum_of_parts() {
        let cfg = toy_cfg();
        let store = random_store(&cfg, 7);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let h = random_h(&mut tape, 4, cfg.encoder_dim, 3);
        let hp =
            build_hidden(&mut tape, &bind, "p", &cfg, h, &[1, 1, 2, 4], &[0, 0, 2, 3], &[1, 2, 1, 1])
                .unwrap();
        assert_eq!(tape.shape(hp), &[4, cfg.hidden_dim()]);
    }

    #[test]
    fn out_of_range_inputs_rejected() {
        let cfg = toy_cfg();
        let store = random_store(&cfg, 8);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let h = random_h(&mut tape, 2, cfg.encoder_dim, 4);
        assert!(matches!(
            build_hidden(&mut tape, &bind, "p", &cfg, h, &[1], &[5], &[1]),
            Err(ScoreError::BadAlign { .. })
        ));
        assert!(matches!(
            build_hidden(&mut tape, &bind, "p", &cfg, h, &[1], &[0], &[0]),
            Err(ScoreError::BadOcc { .. })
        ));
    }

    #[test]
    fn bundle_file_roundtrip() {
        let bundle = ScoreBundle {
            s_start: Tensor::from_vec(vec![0.5, -1.25]),
            s_end: Tensor::from_vec(vec![2.0, 0.0]),
            jump: Tensor::new(&[2, 2], vec![0.0, 3.5, -1.0, 0.25]).unwrap(),
            tau: 0.75,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bundle.txt");
        bundle.save(&path).unwrap();
        let loaded = ScoreBundle::load(&path).unwrap();
        assert_eq!(bundle, loaded);
    }

    #[test]
    fn bundle_parse_error_carries_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "2\n1.0 2.0\noops nan?\n").unwrap();
        let err = ScoreBundle::load(&path).unwrap_err();
        assert!(err.to_string().contains(":3:"), "got {err}");
    }

    #[test]
    fn placement_matrix_merges_start_end_for_n1() {
        let bundle = ScoreBundle {
            s_start: Tensor::from_vec(vec![1.5]),
            s_end: Tensor::from_vec(vec![2.0]),
            jump: Tensor::new(&[1, 1], vec![0.0]).unwrap(),
            tau: 1.0,
        };
        assert_eq!(bundle.placement_matrix().data(), &[3.5]);
    }
}
