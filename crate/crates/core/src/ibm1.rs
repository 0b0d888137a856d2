//! Lexical-translation alignment model trained by EM over co-occurrence
//! (IBM Model 1), used to seed the multiset tagger with high-confidence
//! alignments early in training.

use crate::data::Dataset;

/// t(output token | input token).
pub struct Ibm1 {
    t: Vec<f64>,
    vocab_out: usize,
}

impl Ibm1 {
    fn idx(&self, src: usize, out: usize) -> usize {
        src * self.vocab_out + out
    }

    /// EM over the (x, y) pairs: the E-step distributes each output token
    /// over the sentence's input tokens proportionally to t, the M-step
    /// renormalizes the expected counts per input token.
    pub fn train(data: &Dataset, vocab_in: usize, vocab_out: usize, iterations: usize) -> Self {
        let mut model = Ibm1 { t: vec![1.0 / vocab_out as f64; vocab_in * vocab_out], vocab_out };
        for _ in 0..iterations {
            let mut counts = vec![0.0f64; vocab_in * vocab_out];
            let mut totals = vec![0.0f64; vocab_in];
            for rec in data {
                for &yt in &rec.y {
                    let out = yt as usize;
                    let denom: f64 =
                        rec.x.iter().map(|&xt| model.t[model.idx(xt as usize, out)]).sum();
                    if denom == 0.0 {
                        continue;
                    }
                    for &xt in &rec.x {
                        let src = xt as usize;
                        let post = model.t[model.idx(src, out)] / denom;
                        counts[model.idx(src, out)] += post;
                        totals[src] += post;
                    }
                }
            }
            for src in 0..vocab_in {
                if totals[src] == 0.0 {
                    continue;
                }
                for out in 0..vocab_out {
                    model.t[src * vocab_out + out] = counts[src * vocab_out + out] / totals[src];
                }
            }
        }
        model
    }

    /// Alignment posterior P(input position | output token) within one
    /// example.
    pub fn posterior(&self, x: &[u32], y_token: u32) -> Vec<f64> {
        let out = y_token as usize;
        let weights: Vec<f64> =
            x.iter().map(|&xt| self.t[self.idx(xt as usize, out)]).collect();
        let denom: f64 = weights.iter().sum();
        weights
            .into_iter()
            .map(|w| if denom > 0.0 { w / denom } else { 0.0 })
            .collect()
    }

    /// Per example: for every (input position, output item), how many output
    /// tokens of that item align to the position with posterior >= `chi`.
    pub fn confident_counts(&self, x: &[u32], y: &[u32], chi: f64) -> Vec<(usize, u32, usize)> {
        let mut counts = std::collections::BTreeMap::new();
        for &yt in y {
            for (i, p) in self.posterior(x, yt).into_iter().enumerate() {
                if p >= chi {
                    *counts.entry((i, yt)).or_insert(0usize) += 1;
                }
            }
        }
        counts.into_iter().map(|((i, v), c)| (i, v, c)).collect()
    }

    pub fn translation_prob(&self, x_token: u32, y_token: u32) -> f64 {
        self.t[self.idx(x_token as usize, y_token as usize)]
    }
}

/// Settings for the alignment-seeded bonus objective.
#[derive(Debug, Clone)]
pub struct Ibm1Bonus {
    /// Posterior threshold for counting an alignment as confident.
    pub chi: f64,
    /// Weight of the bonus term.
    pub lambda: f64,
    /// The bonus is active only during the first `cutoff_epochs` epochs.
    pub cutoff_epochs: usize,
    pub em_iterations: usize,
}

impl Default for Ibm1Bonus {
    fn default() -> Self {
        Ibm1Bonus { chi: 0.9, lambda: 0.5, cutoff_epochs: 5, em_iterations: 10 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Record;

    /// Toy corpus where input token 1 always co-occurs with output token 2
    /// and the remaining content varies.
    fn toy_corpus() -> Dataset {
        let mut data = Vec::new();
        for filler in 2u32..8 {
            data.push(Record { x: vec![1, filler], y: vec![2, filler + 1], ann: None });
            data.push(Record { x: vec![filler], y: vec![filler + 1], ann: None });
        }
        data
    }

    #[test]
    fn consistent_cooccurrence_dominates_after_em() {
        let data = toy_corpus();
        let model = Ibm1::train(&data, 9, 10, 10);
        // posterior that output 2 aligns to the position holding input 1
        let post = model.posterior(&[1, 5], 2);
        assert!(post[0] > 0.9, "posterior was {}", post[0]);
        assert!(model.translation_prob(1, 2) > 0.9);
    }

    #[test]
    fn confident_counts_collects_threshold_hits() {
        let data = toy_corpus();
        let model = Ibm1::train(&data, 9, 10, 10);
        let hits = model.confident_counts(&[1, 5], &[2, 6], 0.9);
        assert!(hits.contains(&(0, 2, 1)), "hits: {hits:?}");
    }

    #[test]
    fn posterior_rows_normalize() {
        let data = toy_corpus();
        let model = Ibm1::train(&data, 9, 10, 5);
        let post = model.posterior(&[1, 3, 5], 4);
        let s: f64 = post.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}
