//! First-order HMM trained with Baum-Welch; each token type is assigned the
//! hidden state that emits it most often in expectation.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tokenizer::is_special;

/// Sequences per reduction chunk. Fixed so that the summation order, and
/// therefore the result, does not depend on the thread count.
const CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop once the per-token log-likelihood improves by less than this.
    pub tol: f64,
    /// Relative amplitude of the random perturbation on the uniform start.
    pub noise: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            tol: 1e-6,
            noise: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Induction {
    pub num_clusters: usize,
    /// Token id to cluster.
    pub assignment: BTreeMap<u32, usize>,
    pub type_counts: BTreeMap<u32, u64>,
    /// Per-token log-likelihood after each E-step.
    pub log_likelihood: Vec<f64>,
}

struct Stats {
    init: Vec<f64>,
    trans: Vec<f64>,
    emit: Vec<f64>,
    ll: f64,
}

impl Stats {
    fn zeros(c: usize, m: usize) -> Self {
        Self {
            init: vec![0.0; c],
            trans: vec![0.0; c * c],
            emit: vec![0.0; c * m],
            ll: 0.0,
        }
    }

    fn add(&mut self, other: &Stats) {
        let add = |a: &mut [f64], b: &[f64]| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        add(&mut self.init, &other.init);
        add(&mut self.trans, &other.trans);
        add(&mut self.emit, &other.emit);
        self.ll += other.ll;
    }
}

struct Hmm {
    c: usize,
    m: usize,
    init: Vec<f64>,
    trans: Vec<f64>,
    emit: Vec<f64>,
}

impl Hmm {
    fn random(c: usize, m: usize, noise: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut draw = |n: usize, rows: usize| {
            let mut v: Vec<f64> = (0..n * rows).map(|_| 1.0 + noise * rng.random::<f64>()).collect();
            for row in v.chunks_mut(n) {
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|x| *x /= s);
            }
            v
        };
        let init = draw(c, 1);
        let trans = draw(c, c);
        let emit = draw(m, c);
        Self {
            c,
            m,
            init,
            trans,
            emit,
        }
    }

    /// Scaled forward-backward over one sequence of dense type indices.
    fn accumulate(&self, seq: &[usize], stats: &mut Stats) {
        let (c, m) = (self.c, self.m);
        let t_len = seq.len();
        let mut alpha = vec![0.0; t_len * c];
        let mut scale = vec![0.0; t_len];
        for s in 0..c {
            alpha[s] = self.init[s] * self.emit[s * m + seq[0]];
        }
        for t in 0..t_len {
            if t > 0 {
                let (prev, cur) = alpha.split_at_mut(t * c);
                let prev = &prev[(t - 1) * c..];
                for s in 0..c {
                    let mut acc = 0.0;
                    for r in 0..c {
                        acc += prev[r] * self.trans[r * c + s];
                    }
                    cur[s] = acc * self.emit[s * m + seq[t]];
                }
            }
            let row = &mut alpha[t * c..(t + 1) * c];
            let z: f64 = row.iter().sum::<f64>().max(f64::MIN_POSITIVE);
            row.iter_mut().for_each(|x| *x /= z);
            scale[t] = z;
        }
        stats.ll += scale.iter().map(|z| z.ln()).sum::<f64>();

        let mut beta = vec![1.0; t_len * c];
        for t in (0..t_len.saturating_sub(1)).rev() {
            for s in 0..c {
                let mut acc = 0.0;
                for r in 0..c {
                    acc += self.trans[s * c + r] * self.emit[r * m + seq[t + 1]] * beta[(t + 1) * c + r];
                }
                beta[t * c + s] = acc / scale[t + 1];
            }
        }

        for t in 0..t_len {
            let mut z = 0.0;
            let mut gamma = vec![0.0; c];
            for s in 0..c {
                gamma[s] = alpha[t * c + s] * beta[t * c + s];
                z += gamma[s];
            }
            let z = z.max(f64::MIN_POSITIVE);
            for s in 0..c {
                let g = gamma[s] / z;
                stats.emit[s * m + seq[t]] += g;
                if t == 0 {
                    stats.init[s] += g;
                }
            }
            if t + 1 < t_len {
                let w = seq[t + 1];
                for r in 0..c {
                    let a = alpha[t * c + r];
                    for s in 0..c {
                        stats.trans[r * c + s] +=
                            a * self.trans[r * c + s] * self.emit[s * m + w] * beta[(t + 1) * c + s] / scale[t + 1];
                    }
                }
            }
        }
    }

    fn e_step(&self, seqs: &[Vec<usize>]) -> Stats {
        let partials: Vec<Stats> = seqs
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut st = Stats::zeros(self.c, self.m);
                for seq in chunk {
                    self.accumulate(seq, &mut st);
                }
                st
            })
            .collect();
        let mut total = Stats::zeros(self.c, self.m);
        for p in &partials {
            total.add(p);
        }
        total
    }

    fn m_step(&mut self, stats: &Stats) {
        let normalize = |dst: &mut [f64], src: &[f64], n: usize| {
            for (d, s) in dst.chunks_mut(n).zip(src.chunks(n)) {
                let z: f64 = s.iter().sum();
                if z > 0.0 {
                    d.iter_mut().zip(s).for_each(|(x, y)| *x = y / z);
                }
            }
        };
        normalize(&mut self.init, &stats.init, self.c);
        normalize(&mut self.trans, &stats.trans, self.c);
        normalize(&mut self.emit, &stats.emit, self.m);
        // keep every emission strictly positive so no sequence becomes impossible
        for row in self.emit.chunks_mut(self.m) {
            row.iter_mut().for_each(|x| *x += 1e-12);
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= z);
        }
    }
}

/// Induces `num_clusters` word classes over the token types of `corpus`.
/// Special tokens are ignored.
pub fn induce(corpus: &[Vec<u32>], num_clusters: usize, seed: u64, cfg: EmConfig) -> Result<Induction> {
    if num_clusters < 2 {
        return Err(Error::config(format!(
            "word-class induction needs at least 2 clusters, got {num_clusters}"
        )));
    }
    let mut type_counts: BTreeMap<u32, u64> = BTreeMap::new();
    for seq in corpus {
        for &id in seq.iter().filter(|&&id| !is_special(id)) {
            *type_counts.entry(id).or_default() += 1;
        }
    }
    if type_counts.is_empty() {
        return Err(Error::data("word-class induction corpus is empty"));
    }
    if type_counts.len() < num_clusters {
        return Err(Error::data(format!(
            "corpus has {} distinct types, fewer than the {num_clusters} requested clusters",
            type_counts.len()
        )));
    }
    let dense: BTreeMap<u32, usize> = type_counts.keys().enumerate().map(|(i, &id)| (id, i)).collect();
    let seqs: Vec<Vec<usize>> = corpus
        .iter()
        .map(|s| {
            s.iter()
                .filter(|&&id| !is_special(id))
                .map(|id| dense[id])
                .collect::<Vec<_>>()
        })
        .filter(|s| !s.is_empty())
        .collect();
    let n_tokens: usize = seqs.iter().map(Vec::len).sum();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hmm = Hmm::random(num_clusters, dense.len(), cfg.noise, &mut rng);
    let mut history = Vec::new();
    let mut stats = hmm.e_step(&seqs);
    for _ in 0..cfg.max_iters {
        let ll = stats.ll / n_tokens as f64;
        let converged = history.last().is_some_and(|&prev: &f64| (ll - prev).abs() < cfg.tol);
        history.push(ll);
        if converged {
            break;
        }
        hmm.m_step(&stats);
        stats = hmm.e_step(&seqs);
    }

    let m = dense.len();
    let assignment = dense
        .iter()
        .map(|(&id, &w)| {
            let mut best = 0;
            for s in 1..num_clusters {
                if stats.emit[s * m + w] > stats.emit[best * m + w] {
                    best = s;
                }
            }
            (id, best)
        })
        .collect();
    Ok(Induction {
        num_clusters,
        assignment,
        type_counts,
        log_likelihood: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wordclass::synthetic::SeparableHmm;

    #[test]
    fn rejects_single_cluster() {
        let corpus = vec![vec![10, 11, 12]];
        assert!(matches!(
            induce(&corpus, 1, 0, EmConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn rejects_too_few_types() {
        let corpus = vec![vec![10, 11, 10]];
        assert!(matches!(
            induce(&corpus, 3, 0, EmConfig::default()),
            Err(Error::Data(_))
        ));
        assert!(matches!(induce(&[], 3, 0, EmConfig::default()), Err(Error::Data(_))));
    }

    #[test]
    fn likelihood_does_not_decrease() {
        let data = SeparableHmm::default().generate(7);
        let ind = induce(&data.sequences, 3, 1, EmConfig::default()).unwrap();
        for w in ind.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "{:?}", ind.log_likelihood);
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let data = SeparableHmm::default().generate(3);
        let a = induce(&data.sequences, 3, 42, EmConfig::default()).unwrap();
        let b = induce(&data.sequences, 3, 42, EmConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn recovers_generating_partition() {
        let gen = SeparableHmm::default();
        let data = gen.generate(11);
        let ind = induce(&data.sequences, 3, 0, EmConfig::default()).unwrap();
        // brute force: every pair of types shares a cluster iff it shares a generator state
        let types: Vec<u32> = ind.assignment.keys().copied().collect();
        for &a in &types {
            for &b in &types {
                let same_gen = gen.state_of(a) == gen.state_of(b);
                let same_ind = ind.assignment[&a] == ind.assignment[&b];
                assert_eq!(same_gen, same_ind, "types {a} and {b}");
            }
        }
    }
}
