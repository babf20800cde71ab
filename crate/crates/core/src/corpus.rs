//! Candidate pool, reference set, and a synthetic planted-structure generator.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand::seq::SliceRandom;

use crate::rng;
use crate::{Error, Result};

pub type InstanceId = u64;
pub type Token = u32;

/// Dense embeddings for the candidate pool, one row per instance.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCorpus {
    dim: usize,
    vectors: Vec<f64>,
    ids: Vec<InstanceId>,
}

impl EmbeddingCorpus {
    /// Validates finiteness, shape, and that `ids` is a permutation of `0..count`.
    pub fn new(dim: usize, vectors: Vec<f64>, ids: Vec<InstanceId>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("embedding dim must be positive".into()));
        }
        if vectors.len() != ids.len() * dim {
            return Err(Error::DimensionMismatch {
                context: "embedding payload",
                expected: ids.len() * dim,
                actual: vectors.len(),
            });
        }
        if let Some(pos) = vectors.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: pos / dim });
        }
        let mut seen = vec![false; ids.len()];
        for &id in &ids {
            let slot = usize::try_from(id)
                .ok()
                .and_then(|i| seen.get_mut(i))
                .ok_or_else(|| Error::InvalidArgument(format!("instance id {id} out of range")))?;
            if *slot {
                return Err(Error::InvalidArgument(format!("duplicate instance id {id}")));
            }
            *slot = true;
        }
        Ok(Self { dim, vectors, ids })
    }

    /// Rows in order, ids `0..count`.
    pub fn from_rows(dim: usize, vectors: Vec<f64>) -> Result<Self> {
        let count = if dim == 0 { 0 } else { vectors.len() / dim };
        Self::new(dim, vectors, (0..count as InstanceId).collect())
    }

    pub fn count(&self) -> usize {
        self.ids.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn vectors(&self) -> &[f64] {
        &self.vectors
    }

    pub fn ids(&self) -> &[InstanceId] {
        &self.ids
    }

    /// Copy with every row scaled to unit L2 norm (zero rows are left as is).
    pub fn l2_normalized(&self) -> Self {
        let mut vectors = self.vectors.clone();
        for row in vectors.chunks_mut(self.dim) {
            let n = crate::math::norm(row);
            if n > 0.0 {
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
        Self {
            dim: self.dim,
            vectors,
            ids: self.ids.clone(),
        }
    }
}

/// Held-out sequences whose loss the selection aims to reduce.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    sequences: Vec<Vec<Token>>,
    vocab_size: usize,
}

impl ReferenceSet {
    pub fn new(sequences: Vec<Vec<Token>>, vocab_size: usize) -> Result<Self> {
        if vocab_size == 0 {
            return Err(Error::InvalidArgument("vocab_size must be positive".into()));
        }
        if sequences.is_empty() {
            return Err(Error::InvalidArgument("reference set is empty".into()));
        }
        for seq in &sequences {
            if seq.len() < 2 {
                return Err(Error::SequenceLength {
                    len: seq.len(),
                    min: 2,
                    max: usize::MAX,
                });
            }
            check_tokens(seq, vocab_size)?;
        }
        Ok(Self {
            sequences,
            vocab_size,
        })
    }

    pub fn sequences(&self) -> &[Vec<Token>] {
        &self.sequences
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

pub fn check_tokens(tokens: &[Token], vocab_size: usize) -> Result<()> {
    match tokens.iter().find(|&&t| t as usize >= vocab_size) {
        Some(&token) => Err(Error::TokenOutOfRange { token, vocab_size }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateInstance {
    pub id: InstanceId,
    pub tokens: Vec<Token>,
    pub embedding_row: usize,
}

/// Checks id uniqueness and non-empty token lists; returns the offending id otherwise.
pub fn validate_instances(instances: &[CandidateInstance]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for inst in instances {
        if inst.tokens.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "instance {} has an empty token list",
                inst.id
            )));
        }
        if !seen.insert(inst.id) {
            return Err(Error::InvalidArgument(format!("duplicate instance id {}", inst.id)));
        }
    }
    Ok(())
}

/// A first-order token chain: with probability `fidelity` the next token is
/// `successor[current]`, otherwise it is drawn uniformly.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenChain {
    pub successor: Vec<Token>,
    pub fidelity: f64,
}

impl TokenChain {
    pub fn random(vocab_size: usize, fidelity: f64, rng: &mut impl Rng) -> Self {
        let mut successor: Vec<Token> = (0..vocab_size as Token).collect();
        successor.shuffle(rng);
        Self {
            successor,
            fidelity,
        }
    }

    pub fn sample(&self, len: usize, rng: &mut impl Rng) -> Vec<Token> {
        let vocab = self.successor.len() as Token;
        let mut out = Vec::with_capacity(len);
        let mut cur = rng.random_range(0..vocab);
        out.push(cur);
        while out.len() < len {
            cur = if rng.random::<f64>() < self.fidelity {
                self.successor[cur as usize]
            } else {
                rng.random_range(0..vocab)
            };
            out.push(cur);
        }
        out
    }
}

/// Gaussian-mixture embeddings whose components each emit tokens from one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub count: usize,
    pub dim: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    /// Fidelity of each token chain.
    pub chain_fidelity: Vec<f64>,
    /// Chain emitted by each mixture component.
    pub component_chain: Vec<usize>,
    /// Standard deviation of the component centers.
    pub center_scale: f64,
    /// Within-component standard deviation.
    pub noise: f64,
    /// Chains the reference set is drawn from, uniformly.
    pub reference_chains: Vec<usize>,
    pub reference_count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub corpus: EmbeddingCorpus,
    pub instances: Vec<CandidateInstance>,
    /// Mixture component of each instance, indexed by instance id.
    pub component: Vec<usize>,
    pub chains: Vec<TokenChain>,
    pub reference: ReferenceSet,
}

impl SyntheticSpec {
    pub fn generate(&self) -> Result<SyntheticCorpus> {
        let n_comp = self.component_chain.len();
        if n_comp == 0 || self.chain_fidelity.is_empty() {
            return Err(Error::InvalidArgument("synthetic spec needs components and chains".into()));
        }
        if self.seq_len < 2 {
            return Err(Error::SequenceLength {
                len: self.seq_len,
                min: 2,
                max: usize::MAX,
            });
        }
        if let Some(&c) = self
            .component_chain
            .iter()
            .chain(&self.reference_chains)
            .find(|&&c| c >= self.chain_fidelity.len())
        {
            return Err(Error::InvalidArgument(format!("unknown chain {c}")));
        }
        if self.reference_chains.is_empty() {
            return Err(Error::InvalidArgument("reference_chains is empty".into()));
        }

        let mut chain_rng = rng::seeded(self.seed, 1);
        let chains: Vec<TokenChain> = self
            .chain_fidelity
            .iter()
            .map(|&f| TokenChain::random(self.vocab_size, f, &mut chain_rng))
            .collect();

        let mut center_rng = rng::seeded(self.seed, 2);
        let centers: Vec<Vec<f64>> = (0..n_comp)
            .map(|_| {
                (0..self.dim)
                    .map(|_| self.center_scale * rng::normal(&mut center_rng))
                    .collect()
            })
            .collect();

        let mut point_rng = rng::seeded(self.seed, 3);
        let mut token_rng = rng::seeded(self.seed, 4);
        let mut vectors = Vec::with_capacity(self.count * self.dim);
        let mut instances = Vec::with_capacity(self.count);
        let mut component = Vec::with_capacity(self.count);
        for i in 0..self.count {
            let c = i % n_comp;
            vectors.extend(
                centers[c]
                    .iter()
                    .map(|m| m + self.noise * rng::normal(&mut point_rng)),
            );
            instances.push(CandidateInstance {
                id: i as InstanceId,
                tokens: chains[self.component_chain[c]].sample(self.seq_len, &mut token_rng),
                embedding_row: i,
            });
            component.push(c);
        }

        let mut ref_rng = rng::seeded(self.seed, 5);
        let sequences = (0..self.reference_count)
            .map(|j| {
                let chain = self.reference_chains[j % self.reference_chains.len()];
                chains[chain].sample(self.seq_len, &mut ref_rng)
            })
            .collect();

        Ok(SyntheticCorpus {
            corpus: EmbeddingCorpus::from_rows(self.dim, vectors)?,
            instances,
            component,
            chains,
            reference: ReferenceSet::new(sequences, self.vocab_size)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_validation() {
        assert!(EmbeddingCorpus::new(2, vec![0.0; 4], vec![1, 0]).is_ok());
        assert!(matches!(
            EmbeddingCorpus::new(2, vec![0.0, 1.0, f64::NAN, 0.0], vec![0, 1]),
            Err(Error::NonFinite { row: 1 })
        ));
        assert!(EmbeddingCorpus::new(2, vec![0.0; 4], vec![0, 0]).is_err());
        assert!(EmbeddingCorpus::new(2, vec![0.0; 4], vec![0, 2]).is_err());
        let empty = EmbeddingCorpus::from_rows(16, vec![]).unwrap();
        assert_eq!((empty.count(), empty.dim()), (0, 16));
    }

    #[test]
    fn reference_validation() {
        assert!(ReferenceSet::new(vec![vec![1, 2]], 3).is_ok());
        assert!(ReferenceSet::new(vec![], 3).is_err());
        assert!(ReferenceSet::new(vec![vec![1]], 3).is_err());
        assert_eq!(
            ReferenceSet::new(vec![vec![1, 3]], 3),
            Err(Error::TokenOutOfRange {
                token: 3,
                vocab_size: 3
            })
        );
    }

    #[test]
    fn duplicate_instance_ids_rejected() {
        let a = CandidateInstance {
            id: 4,
            tokens: vec![1],
            embedding_row: 0,
        };
        let err = validate_instances(&[a.clone(), a]).unwrap_err();
        assert!(alloc::format!("{err}").contains('4'));
    }

    #[test]
    fn synthetic_is_deterministic_and_valid() {
        let spec = SyntheticSpec {
            count: 40,
            dim: 3,
            vocab_size: 8,
            seq_len: 6,
            chain_fidelity: vec![0.9, 0.5],
            component_chain: vec![0, 1, 1],
            center_scale: 4.0,
            noise: 0.1,
            reference_chains: vec![0],
            reference_count: 5,
            seed: 3,
        };
        let a = spec.generate().unwrap();
        let b = spec.generate().unwrap();
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.instances, b.instances);
        assert_eq!(a.corpus.count(), 40);
        assert!(validate_instances(&a.instances).is_ok());
        assert_eq!(a.reference.len(), 5);
        assert!(a.instances.iter().all(|i| i.tokens.len() == 6));
    }
}
