//! Finite-difference checks of the reverse-mode gradients: every tensor op,
//! the count-convolution marginal, and the score heads, all against central
//! differences on random inputs.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use softperm::encoder::{encode, init_encoder, EncoderConfig};
use softperm::multiset::{marginal_multiset_loglik, multiplicity_log_probs, MarginalLogLik};
use softperm::optim::ParamStore;
use softperm::oracle::central_difference;
use softperm::scores::{build_hidden, init_perm_scorer, score, ScorerConfig};
use softperm::tensor::tape::{Bcast, Tape, Var};
use softperm::Tensor;

const REL_TOL: f64 = 1e-3;
const H: f64 = 1e-5;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (b.abs() + 1e-8)
}

/// Check d loss / d x for every coordinate of `x`, where the graph is built
/// by `f` from the leaf tensor and reduced to a scalar inside.
fn gradcheck(
    name: &str,
    x0: &Tensor,
    f: impl Fn(&mut Tape, Var) -> Var,
) {
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let loss = f(&mut tape, x);
    tape.backward(loss).unwrap();
    let grad = tape.grad_or_zero(x);

    let shape = x0.shape().to_vec();
    for c in 0..x0.numel() {
        let mut dir = vec![0.0; x0.numel()];
        dir[c] = 1.0;
        let fd = central_difference(
            |xs| {
                let mut tape = Tape::new();
                let x = tape.leaf(Tensor::new(&shape, xs.to_vec()).unwrap());
                let loss = f(&mut tape, x);
                tape.value(loss).item()
            },
            x0.data(),
            &dir,
            H,
        );
        let ad = grad.data()[c];
        assert!(
            rel_err(ad, fd) < REL_TOL || (ad.abs() < 1e-10 && fd.abs() < 1e-7),
            "{name}: coord {c}: autodiff {ad} vs central diff {fd}"
        );
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::new(shape, (0..shape.iter().product()).map(|_| rng.gen_range(lo..hi)).collect())
        .unwrap()
}

/// Random positive weights so the reduction to a scalar exercises every
/// output coordinate distinctly.
fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Var {
    let shape = tape.shape(v).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.leaf(random_tensor(&mut rng, &shape, 0.5, 1.5));
    let prod = tape.mul(v, w).unwrap();
    tape.sum_all(prod)
}

#[test]
fn elementwise_and_unary_ops_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for trial in 0..6 {
        let x = random_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        let other = random_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        let o2 = other.clone();
        gradcheck("add", &x, move |t, v| {
            let b = t.leaf(o2.clone());
            let s = t.add(v, b).unwrap();
            weighted_sum(t, s, trial)
        });
        let o2 = other.clone();
        gradcheck("sub", &x, move |t, v| {
            let b = t.leaf(o2.clone());
            let s = t.sub(v, b).unwrap();
            weighted_sum(t, s, trial + 10)
        });
        let o2 = other.clone();
        gradcheck("mul", &x, move |t, v| {
            let b = t.leaf(o2.clone());
            let s = t.mul(v, b).unwrap();
            weighted_sum(t, s, trial + 20)
        });
        gradcheck("neg_scale_addscalar", &x, move |t, v| {
            let a = t.neg(v);
            let b = t.scale(a, -1.7);
            let c = t.add_scalar(b, 0.3);
            weighted_sum(t, c, trial + 30)
        });
        gradcheck("tanh", &x, move |t, v| {
            let a = t.tanh(v);
            weighted_sum(t, a, trial + 40)
        });
        gradcheck("sigmoid", &x, move |t, v| {
            let a = t.sigmoid(v);
            weighted_sum(t, a, trial + 50)
        });
        gradcheck("exp", &x, move |t, v| {
            let a = t.exp(v);
            weighted_sum(t, a, trial + 60)
        });

        // positive-domain ops
        let xp = random_tensor(&mut rng, &[3, 3], 0.5, 2.5);
        gradcheck("log", &xp, move |t, v| {
            let a = t.log(v);
            weighted_sum(t, a, trial + 70)
        });
        gradcheck("sqrt", &xp, move |t, v| {
            let a = t.sqrt(v);
            weighted_sum(t, a, trial + 80)
        });
    }
}

#[test]
fn broadcast_ops_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for trial in 0..4 {
        // gradient w.r.t. the small (broadcast) operand, both alignments
        let b = random_tensor(&mut rng, &[3], -2.0, 2.0);
        let big = random_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        let big2 = big.clone();
        gradcheck("add_b_trailing_small", &b, move |t, v| {
            let a = t.leaf(big2.clone());
            let s = t.add_b(a, v, Bcast::Trailing).unwrap();
            weighted_sum(t, s, trial)
        });
        let b4 = random_tensor(&mut rng, &[4], -2.0, 2.0);
        let big2 = big.clone();
        gradcheck("mul_b_leading_small", &b4, move |t, v| {
            let a = t.leaf(big2.clone());
            let s = t.mul_b(a, v, Bcast::Leading).unwrap();
            weighted_sum(t, s, trial + 5)
        });
        // and w.r.t. the large operand
        let b2 = b.clone();
        gradcheck("sub_b_trailing_big", &big, move |t, v| {
            let small = t.leaf(b2.clone());
            let s = t.sub_b(v, small, Bcast::Trailing).unwrap();
            weighted_sum(t, s, trial + 9)
        });
    }
}

#[test]
fn reductions_and_structural_ops_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for trial in 0..4 {
        let x3 = random_tensor(&mut rng, &[2, 3, 4], -2.0, 2.0);
        for axis in 0..3 {
            let name = format!("logsumexp_axis{axis}");
            let nm = name.clone();
            gradcheck(&nm, &x3, move |t, v| {
                let a = t.logsumexp(v, axis).unwrap();
                weighted_sum(t, a, trial + axis as u64)
            });
            let nm = format!("sum_axis{axis}");
            gradcheck(&nm, &x3, move |t, v| {
                let a = t.sum_axis(v, axis).unwrap();
                weighted_sum(t, a, trial + 3 + axis as u64)
            });
            let nm = format!("softmax_axis{axis}");
            gradcheck(&nm, &x3, move |t, v| {
                let a = t.softmax(v, axis).unwrap();
                weighted_sum(t, a, trial + 6 + axis as u64)
            });
        }
        gradcheck("permute", &x3, move |t, v| {
            let a = t.permute(v, &[2, 0, 1]).unwrap();
            weighted_sum(t, a, trial + 9)
        });
        gradcheck("reshape_slice_concat", &x3, move |t, v| {
            let a = t.reshape(v, &[6, 4]).unwrap();
            let left = t.slice(a, 1, 0, 2).unwrap();
            let right = t.slice(a, 1, 2, 2).unwrap();
            let swapped = t.concat(&[right, left], 1).unwrap();
            weighted_sum(t, swapped, trial + 12)
        });
        let x2 = random_tensor(&mut rng, &[4, 3], -2.0, 2.0);
        gradcheck("gather_rows", &x2, move |t, v| {
            let g = t.gather_rows(v, &[3, 1, 1, 0]).unwrap();
            weighted_sum(t, g, trial + 15)
        });
        let mask = Arc::new(vec![
            false, true, false, false, true, false, false, false, true, false, true, false,
        ]);
        let x2b = random_tensor(&mut rng, &[4, 3], -2.0, 2.0);
        gradcheck("masked_fill", &x2b, move |t, v| {
            let m = t.masked_fill(v, &mask, -3.0).unwrap();
            weighted_sum(t, m, trial + 18)
        });
        gradcheck("sum_all", &x3, |t, v| t.sum_all(v));
    }
}

#[test]
fn matmul_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let a = random_tensor(&mut rng, &[3, 4], -2.0, 2.0);
    let b = random_tensor(&mut rng, &[4, 2], -2.0, 2.0);
    let b2 = b.clone();
    gradcheck("matmul_lhs", &a, move |t, v| {
        let bb = t.leaf(b2.clone());
        let m = t.matmul(v, bb).unwrap();
        weighted_sum(t, m, 0)
    });
    let a2 = a.clone();
    gradcheck("matmul_rhs", &b, move |t, v| {
        let aa = t.leaf(a2.clone());
        let m = t.matmul(aa, v).unwrap();
        weighted_sum(t, m, 1)
    });
}

#[test]
fn random_composite_graph_matches_central_differences() {
    // deeper chains mixing several ops
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    for trial in 0..5 {
        let x = random_tensor(&mut rng, &[3, 3], -1.5, 1.5);
        gradcheck("composite", &x, move |t, v| {
            let a = t.tanh(v);
            let b = t.matmul(a, v).unwrap();
            let c = t.sigmoid(b);
            let d = t.logsumexp(c, 1).unwrap();
            let e = t.softmax(d, 0).unwrap();
            weighted_sum(t, e, trial)
        });
    }
}

#[test]
fn count_marginal_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    for (n, kp1, target) in [(3usize, 3usize, 2usize), (4, 2, 3), (2, 4, 4), (5, 3, 0)] {
        let logits = random_tensor(&mut rng, &[n, kp1], -1.5, 1.5);
        gradcheck("count_marginal", &logits, move |t, v| {
            // normalize inside the graph so the input is unconstrained
            let norm = t.logsumexp(v, 1).unwrap();
            let logp = t.sub_b(v, norm, Bcast::Trailing).unwrap();
            t.count_marginal(logp, target).unwrap()
        });
    }
}

#[test]
fn marginal_multiset_loglik_gradient_through_encoder() {
    // gradient w.r.t. every tagger parameter against central differences
    let cfg = EncoderConfig { vocab_size: 5, hidden: 2, max_len: 8 };
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut store = ParamStore::new();
    init_encoder(&mut store, "enc", &cfg, &mut rng);
    softperm::multiset::init_tagger_head(&mut store, "tag", cfg.output_dim(), 3, 2, &mut rng);
    let x = [1u32, 4, 2];
    let m = [2usize, 1, 0];

    let loss_for = |store: &ParamStore| -> f64 {
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let h = encode(&mut tape, &bind, "enc", &cfg, &x).unwrap();
        let mm = multiplicity_log_probs(&mut tape, &bind, "tag", h, 3, 2).unwrap();
        match marginal_multiset_loglik(&mut tape, &mm, &m).unwrap() {
            MarginalLogLik::Feasible(v) => tape.value(v).item(),
            MarginalLogLik::Infeasible => unreachable!(),
        }
    };

    let mut tape = Tape::new();
    let bind = store.bind(&mut tape);
    let h = encode(&mut tape, &bind, "enc", &cfg, &x).unwrap();
    let mm = multiplicity_log_probs(&mut tape, &bind, "tag", h, 3, 2).unwrap();
    let ll = match marginal_multiset_loglik(&mut tape, &mm, &m).unwrap() {
        MarginalLogLik::Feasible(v) => v,
        MarginalLogLik::Infeasible => unreachable!(),
    };
    tape.backward(ll).unwrap();
    let grads = bind.grads(&tape);

    let mut rng = ChaCha8Rng::seed_from_u64(107);
    for name in ["enc.embed", "enc.fwd.w_x", "tag.head.w", "tag.ff.w", "tag.head.b"] {
        let base = store.get(name).clone();
        for _ in 0..6 {
            let c = rng.gen_range(0..base.numel());
            let fd = {
                let mut probe = store.clone();
                let mut plus = base.clone();
                plus.data_mut()[c] += H;
                probe.insert(name, plus);
                let up = loss_for(&probe);
                let mut minus = base.clone();
                minus.data_mut()[c] -= H;
                probe.insert(name, minus);
                let down = loss_for(&probe);
                (up - down) / (2.0 * H)
            };
            let ad = grads[name].data()[c];
            assert!(
                rel_err(ad, fd) < REL_TOL || (ad.abs() < 1e-10 && fd.abs() < 1e-7),
                "{name}[{c}]: autodiff {ad} vs fd {fd}"
            );
        }
    }
}

#[test]
fn score_head_gradients_match_central_differences() {
    let cfg = ScorerConfig {
        vocab_out: 4,
        k_max: 2,
        encoder_dim: 4,
        tok_dim: 3,
        occ_dim: 2,
        rel_clip: 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let mut store = ParamStore::new();
    init_perm_scorer(&mut store, "perm", &cfg, &mut rng);
    let h_val = random_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let z_prime = [1u32, 2, 1];
    let align = [0u32, 1, 2];
    let occ = [1u32, 1, 2];

    let loss_for = |store: &ParamStore| -> f64 {
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let h = tape.leaf(h_val.clone());
        let hp = build_hidden(&mut tape, &bind, "perm", &cfg, h, &z_prime, &align, &occ).unwrap();
        let sv = score(&mut tape, &bind, "perm", &cfg, hp).unwrap();
        // weighted sum over all three heads
        let a = weighted_sum(&mut tape, sv.s_start, 1);
        let b = weighted_sum(&mut tape, sv.s_end, 2);
        let c = weighted_sum(&mut tape, sv.jump, 3);
        let ab = tape.add(a, b).unwrap();
        let abc = tape.add(ab, c).unwrap();
        tape.value(abc).item()
    };

    let mut tape = Tape::new();
    let bind = store.bind(&mut tape);
    let h = tape.leaf(h_val.clone());
    let hp = build_hidden(&mut tape, &bind, "perm", &cfg, h, &z_prime, &align, &occ).unwrap();
    let sv = score(&mut tape, &bind, "perm", &cfg, hp).unwrap();
    let a = weighted_sum(&mut tape, sv.s_start, 1);
    let b = weighted_sum(&mut tape, sv.s_end, 2);
    let c = weighted_sum(&mut tape, sv.jump, 3);
    let ab = tape.add(a, b).unwrap();
    let loss = tape.add(ab, c).unwrap();
    tape.backward(loss).unwrap();
    let grads = bind.grads(&tape);

    let mut rng = ChaCha8Rng::seed_from_u64(109);
    for name in
        ["perm.bilinear", "perm.rel_bias", "perm.ff_start.w", "perm.ff_end.v", "perm.tok_embed"]
    {
        let base = store.get(name).clone();
        for _ in 0..6 {
            let c = rng.gen_range(0..base.numel());
            let fd = {
                let mut probe = store.clone();
                let mut plus = base.clone();
                plus.data_mut()[c] += H;
                probe.insert(name, plus);
                let up = loss_for(&probe);
                let mut minus = base.clone();
                minus.data_mut()[c] -= H;
                probe.insert(name, minus);
                let down = loss_for(&probe);
                (up - down) / (2.0 * H)
            };
            let ad = grads[name].data()[c];
            assert!(
                rel_err(ad, fd) < REL_TOL || (ad.abs() < 1e-10 && fd.abs() < 1e-7),
                "{name}[{c}]: autodiff {ad} vs fd {fd}"
            );
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let x = random_tensor(&mut rng, &[4, 4], -2.0, 2.0);
    let run = || {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let a = tape.tanh(v);
        let b = tape.matmul(a, v).unwrap();
        let c = tape.logsumexp(b, 0).unwrap();
        let s = tape.sum_all(c);
        tape.value(s).item()
    };
    let first = run();
    for _ in 0..3 {
        assert_eq!(first.to_bits(), run().to_bits());
    }
}
