//! The two-stage training pipeline: train the multiset tagger, annotate the
//! training data with the most likely latent assignment, train the
//! permutation model through the unrolled solver, and evaluate end to end.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{Annotation, Dataset, Record};
use crate::encoder::{self, EncoderConfig, EncoderError};
use crate::ibm1::{Ibm1, Ibm1Bonus};
use crate::multiset::{self, MarginalLogLik, MultisetError};
use crate::optim::{sum_grads, Adam, ParamStore};
use crate::posterior::{self, GoldMask, PosteriorError};
use crate::rounding::{self, RoundingError};
use crate::scores::{self, ScoreError, ScorerConfig};
use crate::solver::{self, SolverConfig, SolverError};
use crate::tensor::checkpoint::{self, CheckpointError};
use crate::tensor::tape::Tape;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("checkpoint is missing entry {0:?}")]
    MissingEntry(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Multiset(#[from] MultisetError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Posterior(#[from] PosteriorError),
    #[error(transparent)]
    Rounding(#[from] RoundingError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

// ---- stage-one model -------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TaggerConfig {
    pub vocab_in: usize,
    pub vocab_out: usize,
    pub hidden: usize,
    pub k_max: usize,
    pub max_len: usize,
}

impl TaggerConfig {
    pub fn new(vocab_in: usize, vocab_out: usize) -> Self {
        TaggerConfig { vocab_in, vocab_out, hidden: 32, k_max: 4, max_len: 64 }
    }

    fn encoder(&self) -> EncoderConfig {
        EncoderConfig { vocab_size: self.vocab_in, hidden: self.hidden, max_len: self.max_len }
    }
}

pub struct TaggerModel {
    pub cfg: TaggerConfig,
    pub store: ParamStore,
}

impl TaggerModel {
    pub fn init(cfg: TaggerConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = cfg.encoder();
        encoder::init_encoder(&mut store, "enc", &enc, &mut rng);
        multiset::init_tagger_head(
            &mut store,
            "tag",
            enc.output_dim(),
            cfg.vocab_out,
            cfg.k_max,
            &mut rng,
        );
        TaggerModel { cfg, store }
    }

    /// Per-position multiplicity log-distributions, value level.
    pub fn log_probs_for(&self, x: &[u32]) -> Result<Tensor, PipelineError> {
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape);
        let h = encoder::encode(&mut tape, &bind, "enc", &self.cfg.encoder(), x)?;
        let model =
            multiset::multiplicity_log_probs(&mut tape, &bind, "tag", h, self.cfg.vocab_out, self.cfg.k_max)?;
        Ok(tape.value(model.log_probs).clone())
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let cfg_entries = [
            ("cfg.vocab_in", self.cfg.vocab_in),
            ("cfg.vocab_out", self.cfg.vocab_out),
            ("cfg.hidden", self.cfg.hidden),
            ("cfg.k_max", self.cfg.k_max),
            ("cfg.max_len", self.cfg.max_len),
        ];
        let scalars: Vec<(String, Tensor)> = cfg_entries
            .iter()
            .map(|(name, v)| (name.to_string(), Tensor::scalar(*v as f64)))
            .collect();
        let mut entries: Vec<(String, &Tensor)> =
            scalars.iter().map(|(n, t)| (n.clone(), t)).collect();
        entries.extend(self.store.entries().map(|(n, t)| (n.clone(), t)));
        checkpoint::save(path, &entries)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let raw = checkpoint::load(path)?;
        let mut params = Vec::new();
        let mut cfg_map = BTreeMap::new();
        for (name, tensor) in raw {
            if let Some(key) = name.strip_prefix("cfg.") {
                cfg_map.insert(key.to_string(), tensor.item() as usize);
            } else {
                params.push((name, tensor));
            }
        }
        let get = |key: &'static str| -> Result<usize, PipelineError> {
            cfg_map.get(key).copied().ok_or(PipelineError::MissingEntry(key))
        };
        let cfg = TaggerConfig {
            vocab_in: get("vocab_in")?,
            vocab_out: get("vocab_out")?,
            hidden: get("hidden")?,
            k_max: get("k_max")?,
            max_len: get("max_len")?,
        };
        Ok(TaggerModel { cfg, store: ParamStore::from_entries(params) })
    }
}

// ---- stage-two model -------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PermConfig {
    pub vocab_in: usize,
    pub vocab_out: usize,
    pub hidden: usize,
    pub tok_dim: usize,
    pub occ_dim: usize,
    pub k_max: usize,
    pub rel_clip: usize,
    pub max_len: usize,
}

impl PermConfig {
    pub fn new(vocab_in: usize, vocab_out: usize) -> Self {
        PermConfig {
            vocab_in,
            vocab_out,
            hidden: 24,
            tok_dim: 12,
            occ_dim: 6,
            k_max: 4,
            rel_clip: 8,
            max_len: 64,
        }
    }

    fn encoder(&self) -> EncoderConfig {
        EncoderConfig { vocab_size: self.vocab_in, hidden: self.hidden, max_len: self.max_len }
    }

    fn scorer(&self) -> ScorerConfig {
        ScorerConfig {
            vocab_out: self.vocab_out,
            k_max: self.k_max,
            encoder_dim: 2 * self.hidden,
            tok_dim: self.tok_dim,
            occ_dim: self.occ_dim,
            rel_clip: self.rel_clip,
        }
    }
}

pub struct PermModel {
    pub cfg: PermConfig,
    pub store: ParamStore,
}

impl PermModel {
    pub fn init(cfg: PermConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        encoder::init_encoder(&mut store, "enc", &cfg.encoder(), &mut rng);
        scores::init_perm_scorer(&mut store, "perm", &cfg.scorer(), &mut rng);
        PermModel { cfg, store }
    }

    fn scores_on_tape(
        &self,
        tape: &mut Tape,
        bind: &crate::optim::ParamBinding,
        x: &[u32],
        ann: &Annotation,
    ) -> Result<scores::ScoreVars, PipelineError> {
        let h = encoder::encode(tape, bind, "enc", &self.cfg.encoder(), x)?;
        let scorer = self.cfg.scorer();
        let h_prime =
            scores::build_hidden(tape, bind, "perm", &scorer, h, &ann.z_prime, &ann.align, &ann.occ)?;
        Ok(scores::score(tape, bind, "perm", &scorer, h_prime)?)
    }

    /// Score bundle for an annotated example, value level.
    pub fn bundle_for(&self, x: &[u32], ann: &Annotation) -> Result<crate::ScoreBundle, PipelineError> {
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape);
        let sv = self.scores_on_tape(&mut tape, &bind, x, ann)?;
        Ok(sv.snapshot(&tape))
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let cfg_entries = [
            ("cfg.vocab_in", self.cfg.vocab_in),
            ("cfg.vocab_out", self.cfg.vocab_out),
            ("cfg.hidden", self.cfg.hidden),
            ("cfg.tok_dim", self.cfg.tok_dim),
            ("cfg.occ_dim", self.cfg.occ_dim),
            ("cfg.k_max", self.cfg.k_max),
            ("cfg.rel_clip", self.cfg.rel_clip),
            ("cfg.max_len", self.cfg.max_len),
        ];
        let scalars: Vec<(String, Tensor)> = cfg_entries
            .iter()
            .map(|(name, v)| (name.to_string(), Tensor::scalar(*v as f64)))
            .collect();
        let mut entries: Vec<(String, &Tensor)> =
            scalars.iter().map(|(n, t)| (n.clone(), t)).collect();
        entries.extend(self.store.entries().map(|(n, t)| (n.clone(), t)));
        checkpoint::save(path, &entries)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let raw = checkpoint::load(path)?;
        let mut params = Vec::new();
        let mut cfg_map = BTreeMap::new();
        for (name, tensor) in raw {
            if let Some(key) = name.strip_prefix("cfg.") {
                cfg_map.insert(key.to_string(), tensor.item() as usize);
            } else {
                params.push((name, tensor));
            }
        }
        let get = |key: &'static str| -> Result<usize, PipelineError> {
            cfg_map.get(key).copied().ok_or(PipelineError::MissingEntry(key))
        };
        let cfg = PermConfig {
            vocab_in: get("vocab_in")?,
            vocab_out: get("vocab_out")?,
            hidden: get("hidden")?,
            tok_dim: get("tok_dim")?,
            occ_dim: get("occ_dim")?,
            k_max: get("k_max")?,
            rel_clip: get("rel_clip")?,
            max_len: get("max_len")?,
        };
        Ok(PermModel { cfg, store: ParamStore::from_entries(params) })
    }
}

// ---- stage-one training ----------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainTaggerOpts {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub ibm1: Option<Ibm1Bonus>,
    pub quiet: bool,
}

impl Default for TrainTaggerOpts {
    fn default() -> Self {
        TrainTaggerOpts { epochs: 30, lr: 1e-3, batch_size: 32, seed: 1, ibm1: None, quiet: false }
    }
}

#[derive(Debug, Clone)]
pub struct EpochMetric {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_accuracy: f64,
}

fn shuffled_indices(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut ix: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        ix.swap(i, rng.gen_range(0..=i));
    }
    ix
}

/// Maximize the marginal log-likelihood of the gold total multiset over the
/// training set. Logs dev multiset accuracy (the Freq metric) per epoch.
pub fn train_multiset(
    model: &mut TaggerModel,
    train: &Dataset,
    dev: &Dataset,
    opts: &TrainTaggerOpts,
) -> Result<Vec<EpochMetric>, PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut adam = Adam::new(opts.lr);
    let mut metrics = Vec::new();

    // optional alignment seeding from EM over co-occurrence
    let bonus_counts: Option<(Ibm1Bonus, Vec<Vec<(usize, u32, usize)>>)> =
        opts.ibm1.as_ref().map(|cfg| {
            let aligner =
                Ibm1::train(train, model.cfg.vocab_in, model.cfg.vocab_out, cfg.em_iterations);
            let counts = train
                .iter()
                .map(|rec| aligner.confident_counts(&rec.x, &rec.y, cfg.chi))
                .collect();
            (cfg.clone(), counts)
        });

    for epoch in 0..opts.epochs {
        let order = shuffled_indices(&mut rng, train.len());
        let mut epoch_loss = 0.0;
        for (batch_no, batch) in order.chunks(opts.batch_size).enumerate() {
            let results: Result<Vec<_>, PipelineError> = batch
                .par_iter()
                .map(|&ix| {
                    let rec = &train[ix];
                    let mut tape = Tape::new();
                    let bind = model.store.bind(&mut tape);
                    let h = encoder::encode(&mut tape, &bind, "enc", &model.cfg.encoder(), &rec.x)?;
                    let mm = multiset::multiplicity_log_probs(
                        &mut tape,
                        &bind,
                        "tag",
                        h,
                        model.cfg.vocab_out,
                        model.cfg.k_max,
                    )?;
                    let m = multiset::multiset_of(&rec.y, model.cfg.vocab_out);
                    let ll = match multiset::marginal_multiset_loglik(&mut tape, &mm, &m)? {
                        MarginalLogLik::Feasible(v) => v,
                        MarginalLogLik::Infeasible => {
                            // unattainable target: contributes nothing
                            return Ok((BTreeMap::new(), 0.0));
                        }
                    };
                    let mut loss = tape.neg(ll);
                    if let Some((cfg, counts)) = &bonus_counts {
                        if epoch < cfg.cutoff_epochs {
                            for &(i, v, l) in &counts[ix] {
                                if l > model.cfg.k_max || l == 0 {
                                    continue;
                                }
                                let tail =
                                    multiset::cell_tail_loglik(&mut tape, &mm, i, v as usize, l)?;
                                let weighted = tape.scale(tail, -cfg.lambda);
                                loss = tape.add(loss, weighted)?;
                            }
                        }
                    }
                    tape.backward(loss)?;
                    Ok((bind.grads(&tape), tape.value(loss).item()))
                })
                .collect();
            let results = results?;
            let batch_loss: f64 = results.iter().map(|(_, l)| l).sum();
            if !batch_loss.is_finite() {
                return Err(PipelineError::Diverged { epoch, batch: batch_no });
            }
            epoch_loss += batch_loss;
            let grads: Vec<_> = results.into_iter().map(|(g, _)| g).collect();
            let mut total = sum_grads(&grads);
            let scale = 1.0 / batch.len() as f64;
            for g in total.values_mut() {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            adam.step(&mut model.store, &total);
        }
        let dev_accuracy = multiset_accuracy(model, dev)?;
        if !opts.quiet {
            eprintln!(
                "[tagger] epoch {:>3}  loss {:>12.4}  dev multiset acc {:.4}",
                epoch,
                epoch_loss / train.len() as f64,
                dev_accuracy
            );
        }
        metrics.push(EpochMetric { epoch, train_loss: epoch_loss / train.len() as f64, dev_accuracy });
    }
    Ok(metrics)
}

/// Fraction of examples whose predicted total multiset equals the gold one.
pub fn multiset_accuracy(model: &TaggerModel, data: &Dataset) -> Result<f64, PipelineError> {
    let hits: Result<Vec<bool>, PipelineError> = data
        .par_iter()
        .map(|rec| {
            let lp = model.log_probs_for(&rec.x)?;
            let z = multiset::argmax_multiset(&lp);
            Ok(z.total_counts() == multiset::multiset_of(&rec.y, model.cfg.vocab_out))
        })
        .collect();
    let hits = hits?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len().max(1) as f64)
}

// ---- annotation ------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct AnnotateStats {
    pub total: usize,
    pub dropped_infeasible: usize,
    pub dropped_mismatch: usize,
}

impl AnnotateStats {
    pub fn dropped(&self) -> usize {
        self.dropped_infeasible + self.dropped_mismatch
    }

    pub fn drop_rate(&self) -> f64 {
        self.dropped() as f64 / self.total.max(1) as f64
    }
}

/// Attach the most likely gold-constrained assignment to every record.
/// Records whose annotation cannot rearrange into the target are left
/// unannotated and counted.
pub fn annotate(model: &TaggerModel, data: &Dataset) -> Result<(Dataset, AnnotateStats), PipelineError> {
    let annotated: Result<Vec<Record>, PipelineError> = data
        .par_iter()
        .map(|rec| {
            let lp = model.log_probs_for(&rec.x)?;
            let m = multiset::multiset_of(&rec.y, model.cfg.vocab_out);
            let z = match multiset::annotate_most_likely(&lp, &m) {
                Ok(z) => z,
                Err(MultisetError::Infeasible { .. }) => {
                    return Ok(Record { x: rec.x.clone(), y: rec.y.clone(), ann: None })
                }
                Err(e) => return Err(e.into()),
            };
            let om = multiset::order_and_align(&z);
            let rearranges = multiset::multiset_of(&om.z_prime, model.cfg.vocab_out)
                == multiset::multiset_of(&rec.y, model.cfg.vocab_out);
            let ann = rearranges.then(|| Annotation {
                z: z.sparse(),
                z_prime: om.z_prime,
                align: om.align,
                occ: om.occ,
            });
            Ok(Record { x: rec.x.clone(), y: rec.y.clone(), ann })
        })
        .collect();
    let annotated = annotated?;
    let mut stats = AnnotateStats { total: data.len(), ..Default::default() };
    for (rec, orig) in annotated.iter().zip(data) {
        if rec.ann.is_none() {
            let m = multiset::multiset_of(&orig.y, model.cfg.vocab_out);
            let infeasible = m.iter().any(|&c| c > orig.x.len() * model.cfg.k_max);
            if infeasible {
                stats.dropped_infeasible += 1;
            } else {
                stats.dropped_mismatch += 1;
            }
        }
    }
    Ok((annotated, stats))
}

// ---- stage-two training ----------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainPermOpts {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub train_sweeps: usize,
    pub eval_sweeps: usize,
    pub tolerance: f64,
    /// Stop once dev exact match reaches this level.
    pub early_stop_em: f64,
    pub quiet: bool,
}

impl Default for TrainPermOpts {
    fn default() -> Self {
        TrainPermOpts {
            epochs: 10,
            lr: 2e-3,
            batch_size: 32,
            seed: 1,
            train_sweeps: 25,
            eval_sweeps: 100,
            tolerance: 1e-4,
            early_stop_em: 0.998,
            quiet: false,
        }
    }
}

/// EM-style permutation training: solve, project onto the gold-consistent
/// set, and minimize the KL between the projection and the model. Logs dev
/// exact match of the full pipeline per epoch.
pub fn train_perm(
    model: &mut PermModel,
    annotated: &Dataset,
    dev: &Dataset,
    tagger: &TaggerModel,
    opts: &TrainPermOpts,
) -> Result<Vec<EpochMetric>, PipelineError> {
    let usable: Vec<&Record> = annotated.iter().filter(|r| r.ann.is_some()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut adam = Adam::new(opts.lr);
    let mut metrics = Vec::new();
    let train_cfg = SolverConfig {
        max_sweeps: opts.train_sweeps,
        tolerance: opts.tolerance,
        ..Default::default()
    };
    let posterior_cfg = SolverConfig {
        max_sweeps: opts.eval_sweeps,
        tolerance: opts.tolerance,
        ..Default::default()
    };
    for epoch in 0..opts.epochs {
        let order = shuffled_indices(&mut rng, usable.len());
        let mut epoch_loss = 0.0;
        for (batch_no, batch) in order.chunks(opts.batch_size).enumerate() {
            let results: Result<Vec<_>, PipelineError> = batch
                .par_iter()
                .map(|&ix| {
                    let rec = usable[ix];
                    let ann = rec.ann.as_ref().expect("filtered");
                    let mut tape = Tape::new();
                    let bind = model.store.bind(&mut tape);
                    let sv = model.scores_on_tape(&mut tape, &bind, &rec.x, ann)?;
                    let solved = solver::solve_on_tape(&mut tape, &sv, &train_cfg)?;
                    let mask = match GoldMask::new(&ann.z_prime, &rec.y) {
                        Ok(m) => m,
                        Err(PosteriorError::NotRearrangement { .. })
                        | Err(PosteriorError::LengthMismatch { .. }) => {
                            eprintln!("[perm] skipping gold-infeasible instance");
                            return Ok((BTreeMap::new(), 0.0));
                        }
                        Err(e) => return Err(e.into()),
                    };
                    let targets = posterior::project_posterior(&solved.soft, &mask, &posterior_cfg)?;
                    let (loss, value) = posterior::perm_loss(&mut tape, &solved, &targets)?;
                    tape.backward(loss)?;
                    Ok((bind.grads(&tape), value))
                })
                .collect();
            let results = results?;
            let batch_loss: f64 = results.iter().map(|(_, l)| l).sum();
            if !batch_loss.is_finite() {
                return Err(PipelineError::Diverged { epoch, batch: batch_no });
            }
            epoch_loss += batch_loss;
            let grads: Vec<_> = results.into_iter().map(|(g, _)| g).collect();
            let mut total = sum_grads(&grads);
            let scale = 1.0 / batch.len() as f64;
            for g in total.values_mut() {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            adam.step(&mut model.store, &total);
        }
        let dev_em = exact_match_accuracy(tagger, model, dev, &posterior_cfg)?;
        if !opts.quiet {
            eprintln!(
                "[perm] epoch {:>3}  loss {:>12.4}  dev exact match {:.4}",
                epoch,
                epoch_loss / usable.len().max(1) as f64,
                dev_em
            );
        }
        metrics.push(EpochMetric {
            epoch,
            train_loss: epoch_loss / usable.len().max(1) as f64,
            dev_accuracy: dev_em,
        });
        if dev_em >= opts.early_stop_em {
            break;
        }
    }
    Ok(metrics)
}

// ---- prediction and evaluation ----------------------------------------------

/// Full pipeline on one input: tag, canonically order, solve, round, apply.
pub fn predict(
    tagger: &TaggerModel,
    perm: &PermModel,
    x: &[u32],
    solver_cfg: &SolverConfig,
) -> Result<Vec<u32>, PipelineError> {
    let lp = tagger.log_probs_for(x)?;
    let z = multiset::argmax_multiset(&lp);
    let om = multiset::order_and_align(&z);
    if om.z_prime.is_empty() {
        return Ok(Vec::new());
    }
    let ann = Annotation {
        z: z.sparse(),
        z_prime: om.z_prime.clone(),
        align: om.align,
        occ: om.occ,
    };
    let bundle = perm.bundle_for(x, &ann)?;
    let soft = solver::solve(&bundle, solver_cfg)?;
    let rounded = rounding::hungarian(&soft.u())?;
    Ok(rounding::apply_permutation(&om.z_prime, &rounded.perm)?)
}

/// Per-example correctness flags: (multiset correct, sequence correct).
pub fn predict_flags(
    tagger: &TaggerModel,
    perm: &PermModel,
    rec: &Record,
    solver_cfg: &SolverConfig,
) -> Result<(bool, bool), PipelineError> {
    let lp = tagger.log_probs_for(&rec.x)?;
    let z = multiset::argmax_multiset(&lp);
    let freq_ok =
        z.total_counts() == multiset::multiset_of(&rec.y, tagger.cfg.vocab_out);
    let y_hat = predict(tagger, perm, &rec.x, solver_cfg)?;
    Ok((freq_ok, y_hat == rec.y))
}

pub fn exact_match_accuracy(
    tagger: &TaggerModel,
    perm: &PermModel,
    data: &Dataset,
    solver_cfg: &SolverConfig,
) -> Result<f64, PipelineError> {
    let hits: Result<Vec<bool>, PipelineError> = data
        .par_iter()
        .map(|rec| Ok(predict(tagger, perm, &rec.x, solver_cfg)? == rec.y))
        .collect();
    let hits = hits?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len().max(1) as f64)
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    /// (input length, examples, exact match), sorted by length.
    pub by_length: Vec<(usize, usize, f64)>,
    pub overall: f64,
    /// Per example (multiset correct, sequence correct), input order.
    pub flags: Vec<(bool, bool)>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("length,n_examples,exact_match\n");
        for &(len, n, acc) in &self.by_length {
            out.push_str(&format!("{},{},{:.6}\n", len, n, acc));
        }
        out
    }
}

/// Per-length exact-match table over a test set.
pub fn evaluate(
    tagger: &TaggerModel,
    perm: &PermModel,
    data: &Dataset,
    solver_cfg: &SolverConfig,
) -> Result<EvalReport, PipelineError> {
    let flags: Result<Vec<(bool, bool)>, PipelineError> = data
        .par_iter()
        .map(|rec| predict_flags(tagger, perm, rec, solver_cfg))
        .collect();
    let flags = flags?;
    let mut buckets: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut correct_total = 0usize;
    for (rec, &(_, seq_ok)) in data.iter().zip(&flags) {
        let entry = buckets.entry(rec.x.len()).or_insert((0, 0));
        entry.0 += 1;
        if seq_ok {
            entry.1 += 1;
            correct_total += 1;
        }
    }
    let by_length = buckets
        .into_iter()
        .map(|(len, (n, c))| (len, n, c as f64 / n as f64))
        .collect();
    Ok(EvalReport {
        by_length,
        overall: correct_total as f64 / data.len().max(1) as f64,
        flags,
    })
}
