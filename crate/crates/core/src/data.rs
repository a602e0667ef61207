//! Synthetic token corpora and deterministic per-node sharding.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    /// Each token depends on the two preceding tokens through a fixed random
    /// transition table.
    Order2Markov,
    /// First half random, second half a copy of the first half.
    CopyTask,
    RandomUniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusSpec {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub generator: Generator,
    pub seed: u64,
    pub num_sequences: usize,
    /// Number of candidate next tokens per Markov context.
    #[serde(default = "default_branching")]
    pub markov_branching: usize,
}

fn default_branching() -> usize {
    4
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::config("data.vocab_size", "must be at least 2"));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(Error::config("data.vocab_size", "must fit in 32 bits"));
        }
        if self.seq_len < 2 {
            return Err(Error::config("data.seq_len", "must be at least 2"));
        }
        if self.generator == Generator::CopyTask && self.seq_len % 2 != 0 {
            return Err(Error::config("data.seq_len", "copy task needs an even length"));
        }
        if self.generator == Generator::Order2Markov
            && (self.markov_branching == 0 || self.markov_branching > self.vocab_size)
        {
            return Err(Error::config(
                "data.markov_branching",
                "must be in 1..=vocab_size",
            ));
        }
        Ok(())
    }
}

/// Next-token distribution for every `(x[t-2], x[t-1])` context. Each row has
/// `branching` nonzero entries.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovTable {
    vocab: usize,
    /// `probs[(a * V + b) * V + c] = P(c | a, b)`.
    probs: Vec<f64>,
}

impl MarkovTable {
    pub fn generate(vocab: usize, branching: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_726b_6f76);
        let mut probs = vec![0.0; vocab * vocab * vocab];
        let mut candidates: Vec<usize> = (0..vocab).collect();
        for ctx in 0..vocab * vocab {
            candidates.shuffle(&mut rng);
            // Geometric-ish weights make each context strongly predictable.
            let weights: Vec<f64> = (0..branching)
                .map(|i| rng.random_range(0.5..1.0) / (1 << i) as f64)
                .collect();
            let z: f64 = weights.iter().sum();
            let row = &mut probs[ctx * vocab..(ctx + 1) * vocab];
            for (&c, w) in candidates.iter().take(branching).zip(&weights) {
                row[c] = w / z;
            }
        }
        Self { vocab, probs }
    }

    pub fn prob(&self, a: usize, b: usize, c: usize) -> f64 {
        self.probs[(a * self.vocab + b) * self.vocab + c]
    }

    pub fn row(&self, a: usize, b: usize) -> &[f64] {
        let ctx = a * self.vocab + b;
        &self.probs[ctx * self.vocab..(ctx + 1) * self.vocab]
    }

    fn sample(&self, a: usize, b: usize, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let row = self.row(a, b);
        for (c, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return c;
            }
        }
        row.iter().rposition(|p| *p > 0.0).unwrap_or(0)
    }

    /// Mean per-token entropy (nats) under a uniform context distribution,
    /// a proxy for the best achievable loss.
    pub fn mean_entropy(&self) -> f64 {
        let ctxs = self.vocab * self.vocab;
        (0..ctxs)
            .map(|ctx| {
                self.probs[ctx * self.vocab..(ctx + 1) * self.vocab]
                    .iter()
                    .filter(|p| **p > 0.0)
                    .map(|p| -p * p.ln())
                    .sum::<f64>()
            })
            .sum::<f64>()
            / ctxs as f64
    }
}

/// Fixed-length token sequences stored back to back.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub vocab_size: usize,
    pub seq_len: usize,
    tokens: Vec<u32>,
}

impl Corpus {
    pub fn new(vocab_size: usize, seq_len: usize, tokens: Vec<u32>) -> Result<Self> {
        if seq_len == 0 || tokens.len() % seq_len != 0 {
            return Err(Error::Corpus(format!(
                "{} tokens are not a whole number of length-{seq_len} sequences",
                tokens.len()
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::Corpus(format!("token {t} outside vocabulary {vocab_size}")));
        }
        Ok(Self {
            vocab_size,
            seq_len,
            tokens,
        })
    }

    pub fn num_sequences(&self) -> usize {
        self.tokens.len() / self.seq_len
    }

    pub fn sequence(&self, i: usize) -> &[u32] {
        &self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    /// Writes the flat binary format: `V`, `S`, `count` as little-endian
    /// `u32`, then one little-endian `u32` per token.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(12 + 4 * self.tokens.len());
        for h in [self.vocab_size, self.seq_len, self.num_sequences()] {
            let h = u32::try_from(h).map_err(|_| Error::Corpus("header value exceeds u32".into()))?;
            buf.extend_from_slice(&h.to_le_bytes());
        }
        for t in &self.tokens {
            buf.extend_from_slice(&t.to_le_bytes());
        }
        crate::io::write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || bytes.len() % 4 != 0 {
            return Err(Error::Corpus("truncated corpus file".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
        let (v, s, count) = (word(0) as usize, word(1) as usize, word(2) as usize);
        let body = (bytes.len() - 12) / 4;
        if body != s * count {
            return Err(Error::Corpus(format!(
                "header says {count} sequences of {s} tokens, body holds {body} tokens"
            )));
        }
        let tokens = (0..body).map(|i| word(3 + i)).collect();
        Self::new(v, s, tokens)
    }
}

/// Generates split `split` of the corpus described by `spec`. The Markov
/// table depends only on `spec.seed`; the samples depend on `(seed, split)`,
/// so split 1 is a held-out set from the same distribution as split 0.
pub fn generate_split(spec: &SyntheticCorpusSpec, split: u64) -> Result<Corpus> {
    spec.validate()?;
    let (v, s) = (spec.vocab_size, spec.seq_len);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1 + split);
    let mut tokens = Vec::with_capacity(spec.num_sequences * s);
    match spec.generator {
        Generator::RandomUniform => {
            for _ in 0..spec.num_sequences * s {
                tokens.push(rng.random_range(0..v) as u32);
            }
        }
        Generator::CopyTask => {
            let half = s / 2;
            for _ in 0..spec.num_sequences {
                let first: Vec<u32> = (0..half).map(|_| rng.random_range(0..v) as u32).collect();
                tokens.extend_from_slice(&first);
                tokens.extend_from_slice(&first);
            }
        }
        Generator::Order2Markov => {
            let table = MarkovTable::generate(v, spec.markov_branching, spec.seed);
            for _ in 0..spec.num_sequences {
                let mut a = rng.random_range(0..v);
                let mut b = rng.random_range(0..v);
                tokens.push(a as u32);
                tokens.push(b as u32);
                for _ in 2..s {
                    let c = table.sample(a, b, &mut rng);
                    tokens.push(c as u32);
                    a = b;
                    b = c;
                }
            }
        }
    }
    Corpus::new(v, s, tokens)
}

/// Training split of `spec`.
pub fn generate_corpus(spec: &SyntheticCorpusSpec) -> Result<Corpus> {
    generate_split(spec, 0)
}

/// The sequences assigned to one node: a contiguous, equal-sized block of the
/// corpus (remainder dropped).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardView {
    pub node: usize,
    pub num_nodes: usize,
    /// Corpus sequence indices owned by this node.
    pub indices: Vec<usize>,
}

pub fn shard(corpus: &Corpus, num_nodes: usize, node: usize) -> Result<ShardView> {
    if num_nodes == 0 || node >= num_nodes {
        return Err(Error::config("run.num_nodes", format!("node {node} not in 0..{num_nodes}")));
    }
    let per = corpus.num_sequences() / num_nodes;
    if per == 0 {
        return Err(Error::config(
            "data.num_sequences",
            format!("{} sequences cannot feed {num_nodes} nodes", corpus.num_sequences()),
        ));
    }
    Ok(ShardView {
        node,
        num_nodes,
        indices: (node * per..(node + 1) * per).collect(),
    })
}

/// Position of a node inside its shard.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Cursor {
    pub epoch: u64,
    pub pos: usize,
}

/// A batch of whole sequences; inputs are every token but the last, targets
/// every token but the first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    batch_size: usize,
    seq_len: usize,
    tokens: Vec<u32>,
}

impl TokenBatch {
    pub fn new(batch_size: usize, seq_len: usize, tokens: Vec<u32>) -> Result<Self> {
        if batch_size == 0 || seq_len < 2 || tokens.len() != batch_size * seq_len {
            return Err(Error::Shape(format!(
                "batch of {batch_size} x {seq_len} cannot hold {} tokens",
                tokens.len()
            )));
        }
        Ok(Self {
            batch_size,
            seq_len,
            tokens,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn inputs(&self) -> Vec<u32> {
        self.tokens
            .chunks(self.seq_len)
            .flat_map(|s| s[..s.len() - 1].iter().copied())
            .collect()
    }

    pub fn targets(&self) -> Vec<u32> {
        self.tokens
            .chunks(self.seq_len)
            .flat_map(|s| s[1..].iter().copied())
            .collect()
    }

    /// Number of predicted positions.
    pub fn num_targets(&self) -> usize {
        self.batch_size * (self.seq_len - 1)
    }

    pub fn concat(batches: &[TokenBatch]) -> Result<TokenBatch> {
        let first = batches
            .first()
            .ok_or_else(|| Error::Shape("cannot concatenate zero batches".into()))?;
        let mut tokens = Vec::new();
        let mut n = 0;
        for b in batches {
            if b.seq_len != first.seq_len {
                return Err(Error::Shape("sequence lengths differ".into()));
            }
            tokens.extend_from_slice(&b.tokens);
            n += b.batch_size;
        }
        TokenBatch::new(n, first.seq_len, tokens)
    }
}

/// Permutation of shard positions for `epoch`.
pub fn epoch_order(view: &ShardView, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..view.indices.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed ^ (view.node as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
    );
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order
}

/// Next `batch_size` sequences in this epoch's shuffled order. A batch never
/// straddles an epoch boundary: leftovers are skipped and the next epoch
/// starts with a fresh permutation.
pub fn next_batch(
    corpus: &Corpus,
    view: &ShardView,
    batch_size: usize,
    cursor: &mut Cursor,
    seed: u64,
) -> Result<TokenBatch> {
    if batch_size == 0 || batch_size > view.indices.len() {
        return Err(Error::config(
            "run.per_node_batch",
            format!(
                "batch of {batch_size} does not fit a shard of {} sequences",
                view.indices.len()
            ),
        ));
    }
    if cursor.pos + batch_size > view.indices.len() {
        cursor.epoch += 1;
        cursor.pos = 0;
    }
    let order = epoch_order(view, seed, cursor.epoch);
    let mut tokens = Vec::with_capacity(batch_size * corpus.seq_len);
    for &o in &order[cursor.pos..cursor.pos + batch_size] {
        tokens.extend_from_slice(corpus.sequence(view.indices[o]));
    }
    cursor.pos += batch_size;
    TokenBatch::new(batch_size, corpus.seq_len, tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn spec(generator: Generator) -> SyntheticCorpusSpec {
        SyntheticCorpusSpec {
            vocab_size: 16,
            seq_len: 8,
            generator,
            seed: 5,
            num_sequences: 40,
            markov_branching: 4,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        for g in [Generator::Order2Markov, Generator::CopyTask, Generator::RandomUniform] {
            assert_eq!(generate_corpus(&spec(g)).unwrap(), generate_corpus(&spec(g)).unwrap());
        }
        let a = generate_split(&spec(Generator::Order2Markov), 0).unwrap();
        let b = generate_split(&spec(Generator::Order2Markov), 1).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn copy_task_repeats_first_half() {
        let c = generate_corpus(&spec(Generator::CopyTask)).unwrap();
        for i in 0..c.num_sequences() {
            let s = c.sequence(i);
            for j in 0..4 {
                assert_eq!(s[j], s[j + 4]);
            }
        }
    }

    #[test]
    fn markov_structure_is_learnable() {
        let table = MarkovTable::generate(16, 4, 5);
        for a in 0..16 {
            for b in 0..16 {
                let sum: f64 = table.row(a, b).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
        assert!(table.mean_entropy() < (16f64).ln());
    }

    #[test]
    fn markov_counts_pass_chi_square() {
        // One frequent context: pool all occurrences of (a, b) from a large
        // corpus and test the empirical next-token counts.
        let s = SyntheticCorpusSpec {
            vocab_size: 4,
            seq_len: 64,
            generator: Generator::Order2Markov,
            seed: 9,
            num_sequences: 400,
            markov_branching: 3,
        };
        let c = generate_corpus(&s).unwrap();
        let table = MarkovTable::generate(4, 3, 9);
        let mut counts = [[[0usize; 4]; 4]; 4];
        for i in 0..c.num_sequences() {
            let q = c.sequence(i);
            for t in 2..q.len() {
                counts[q[t - 2] as usize][q[t - 1] as usize][q[t] as usize] += 1;
            }
        }
        for a in 0..4 {
            for b in 0..4 {
                let n: usize = counts[a][b].iter().sum();
                if n < 200 {
                    continue;
                }
                let mut chi2 = 0.0;
                let mut dof = 0;
                for c in 0..4 {
                    let p = table.prob(a, b, c);
                    if p == 0.0 {
                        assert_eq!(counts[a][b][c], 0);
                        continue;
                    }
                    let e = p * n as f64;
                    chi2 += (counts[a][b][c] as f64 - e).powi(2) / e;
                    dof += 1;
                }
                // 99.9% quantile of chi-square with 2 dof is 13.8.
                assert!(dof <= 3);
                assert!(chi2 < 13.8, "context ({a},{b}): chi2 = {chi2}");
            }
        }
    }

    #[test]
    fn shards_are_disjoint_and_cover() {
        let c = generate_corpus(&spec(Generator::RandomUniform)).unwrap();
        let k = 3;
        let mut seen = HashSet::new();
        for node in 0..k {
            let v = shard(&c, k, node).unwrap();
            assert_eq!(v.indices.len(), 40 / 3);
            for i in &v.indices {
                assert!(seen.insert(*i));
            }
        }
        assert_eq!(seen.len(), 39);
        assert_eq!(shard(&c, 1, 0).unwrap().indices.len(), 40);
    }

    #[test]
    fn batches_do_not_overlap_within_epoch() {
        let c = generate_corpus(&spec(Generator::RandomUniform)).unwrap();
        let v = shard(&c, 2, 1).unwrap();
        let mut cur = Cursor::default();
        let order = epoch_order(&v, 3, 0);
        let mut used = HashSet::new();
        for _ in 0..5 {
            let b = next_batch(&c, &v, 4, &mut cur, 3).unwrap();
            assert_eq!((b.batch_size(), b.seq_len()), (4, 8));
            assert_eq!(cur.epoch, 0);
            for s in b.tokens().chunks(8) {
                assert!(used.insert(s.to_vec()));
            }
        }
        assert_eq!(used.len(), 20);
        assert_eq!(order.len(), 20);
        // Epoch boundary: the next batch comes from a new permutation.
        next_batch(&c, &v, 4, &mut cur, 3).unwrap();
        assert_eq!(cur, Cursor { epoch: 1, pos: 4 });
        assert_ne!(epoch_order(&v, 3, 1), order);
    }

    #[test]
    fn targets_are_shifted_inputs() {
        let b = TokenBatch::new(2, 4, vec![1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
        assert_eq!(b.inputs(), vec![1, 2, 3, 5, 6, 7]);
        assert_eq!(b.targets(), vec![2, 3, 4, 6, 7, 8]);
    }

    #[test]
    fn corpus_file_round_trip_and_layout() {
        let c = generate_corpus(&spec(Generator::Order2Markov)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        c.save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[0..4], &16u32.to_le_bytes());
        assert_eq!(&bytes[4..8], &8u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &40u32.to_le_bytes());
        assert_eq!(bytes.len(), 12 + 4 * 320);
        assert_eq!(Corpus::load(&p).unwrap(), c);
        assert!(Corpus::from_bytes(&bytes[..bytes.len() - 4]).is_err());
    }
}
