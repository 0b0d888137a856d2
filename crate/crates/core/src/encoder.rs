//! Gated bidirectional recurrent encoder (LSTM cells) with an additive
//! static token embedding: h_i = bilstm(x)_i + embed(x_i). The embedding
//! dimension therefore equals twice the per-direction hidden size.

use rand::Rng;
use thiserror::Error;

use crate::optim::{ParamBinding, ParamStore};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("token id {id} out of range for vocab of {vocab}")]
    UnknownToken { id: u32, vocab: usize },
    #[error("input length {len} exceeds configured maximum {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty input")]
    Empty,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    /// Per-direction hidden size; the encoder output has 2x this many dims.
    pub hidden: usize,
    pub max_len: usize,
}

impl EncoderConfig {
    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }
}

/// Register encoder parameters under `prefix`. The gate layout along the 4H
/// axis is input, forget, cell, output.
pub fn init_encoder(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, rng: &mut impl Rng) {
    let d = cfg.output_dim();
    let h = cfg.hidden;
    let scale = (1.0 / d as f64).sqrt();
    store.insert_uniform(&format!("{prefix}.embed"), &[cfg.vocab_size, d], 0.1, rng);
    for dir in ["fwd", "bwd"] {
        store.insert_uniform(&format!("{prefix}.{dir}.w_x"), &[d, 4 * h], scale, rng);
        store.insert_uniform(&format!("{prefix}.{dir}.w_h"), &[h, 4 * h], scale, rng);
        store.insert_zeros(&format!("{prefix}.{dir}.b"), &[1, 4 * h]);
    }
}

fn lstm_direction(
    tape: &mut Tape,
    bind: &ParamBinding,
    prefix: &str,
    dir: &str,
    emb: Var,
    order: impl Iterator<Item = usize>,
    n: usize,
    h: usize,
) -> Result<Vec<Var>, TensorError> {
    let w_x = bind.var(&format!("{prefix}.{dir}.w_x"));
    let w_h = bind.var(&format!("{prefix}.{dir}.w_h"));
    let b = bind.var(&format!("{prefix}.{dir}.b"));
    let mut h_prev = tape.leaf(crate::tensor::Tensor::zeros(&[1, h]));
    let mut c_prev = tape.leaf(crate::tensor::Tensor::zeros(&[1, h]));
    let mut rows = vec![None; n];
    for t in order {
        let x_t = tape.slice(emb, 0, t, 1)?;
        let gx = tape.matmul(x_t, w_x)?;
        let gh = tape.matmul(h_prev, w_h)?;
        let pre = tape.add(gx, gh)?;
        let gates = tape.add(pre, b)?;
        let i_g = tape.slice(gates, 1, 0, h)?;
        let f_g = tape.slice(gates, 1, h, h)?;
        let c_g = tape.slice(gates, 1, 2 * h, h)?;
        let o_g = tape.slice(gates, 1, 3 * h, h)?;
        let i_s = tape.sigmoid(i_g);
        let f_s = tape.sigmoid(f_g);
        let c_t = tape.tanh(c_g);
        let o_s = tape.sigmoid(o_g);
        let keep = tape.mul(f_s, c_prev)?;
        let write = tape.mul(i_s, c_t)?;
        let c_new = tape.add(keep, write)?;
        let c_act = tape.tanh(c_new);
        let h_new = tape.mul(o_s, c_act)?;
        rows[t] = Some(h_new);
        h_prev = h_new;
        c_prev = c_new;
    }
    Ok(rows.into_iter().map(|r| r.expect("all timesteps visited")).collect())
}

/// Contextual hidden states, shape (n, 2*hidden). Every h_i sees the whole
/// sequence and includes the static embedding of x_i additively.
pub fn encode(
    tape: &mut Tape,
    bind: &ParamBinding,
    prefix: &str,
    cfg: &EncoderConfig,
    x: &[u32],
) -> Result<Var, EncoderError> {
    if x.is_empty() {
        return Err(EncoderError::Empty);
    }
    if x.len() > cfg.max_len {
        return Err(EncoderError::TooLong { len: x.len(), max: cfg.max_len });
    }
    for &id in x {
        if id as usize >= cfg.vocab_size {
            return Err(EncoderError::UnknownToken { id, vocab: cfg.vocab_size });
        }
    }
    let n = x.len();
    let h = cfg.hidden;
    let indices: Vec<usize> = x.iter().map(|&id| id as usize).collect();
    let table = bind.var(&format!("{prefix}.embed"));
    let emb = tape.gather_rows(table, &indices)?;

    let fwd = lstm_direction(tape, bind, prefix, "fwd", emb, 0..n, n, h)?;
    let bwd = lstm_direction(tape, bind, prefix, "bwd", emb, (0..n).rev(), n, h)?;
    let fwd_mat = tape.concat(&fwd, 0)?;
    let bwd_mat = tape.concat(&bwd, 0)?;
    let ctx = tape.concat(&[fwd_mat, bwd_mat], 1)?;
    Ok(tape.add(ctx, emb)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(hidden: usize) -> (ParamStore, EncoderConfig) {
        let cfg = EncoderConfig { vocab_size: 6, hidden, max_len: 32 };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        init_encoder(&mut store, "enc", &cfg, &mut rng);
        (store, cfg)
    }

    fn run(store: &ParamStore, cfg: &EncoderConfig, x: &[u32]) -> crate::tensor::Tensor {
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let h = encode(&mut tape, &bind, "enc", cfg, x).unwrap();
        tape.value(h).clone()
    }

    #[test]
    fn single_token_shape_and_finiteness() {
        let (store, cfg) = setup(4);
        let h = run(&store, &cfg, &[3]);
        assert_eq!(h.shape(), &[1, 8]);
        assert!(h.is_finite());
    }

    #[test]
    fn distant_context_changes_hidden_state() {
        let (store, cfg) = setup(4);
        let a = run(&store, &cfg, &[1, 2, 3, 4, 5]);
        let b = run(&store, &cfg, &[5, 2, 3, 4, 1]);
        // h at position 2 must differ: only distant context changed
        let row_a = &a.data()[2 * 8..3 * 8];
        let row_b = &b.data()[2 * 8..3 * 8];
        assert!(row_a.iter().zip(row_b).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn unknown_token_rejected() {
        let (store, cfg) = setup(4);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        assert!(matches!(
            encode(&mut tape, &bind, "enc", &cfg, &[99]),
            Err(EncoderError::UnknownToken { .. })
        ));
    }

    #[test]
    fn checkpoint_roundtrip_reproduces_hidden_states() {
        let (store, cfg) = setup(4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        let entries: Vec<(String, &crate::tensor::Tensor)> =
            store.entries().map(|(n, t)| (n.clone(), t)).collect();
        crate::tensor::checkpoint::save(&path, &entries).unwrap();
        let store1 = ParamStore::from_entries(crate::tensor::checkpoint::load(&path).unwrap());
        let h1 = run(&store1, &cfg, &[1, 4, 2]);
        // save/load again: values already f32-representable, so bit-exact
        let entries1: Vec<(String, &crate::tensor::Tensor)> =
            store1.entries().map(|(n, t)| (n.clone(), t)).collect();
        let path2 = dir.path().join("enc2.ckpt");
        crate::tensor::checkpoint::save(&path2, &entries1).unwrap();
        let store2 = ParamStore::from_entries(crate::tensor::checkpoint::load(&path2).unwrap());
        let h2 = run(&store2, &cfg, &[1, 4, 2]);
        assert_eq!(h1, h2);
    }
}
