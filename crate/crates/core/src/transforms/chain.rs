use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::transforms::BaseOpKind;

/// An ordered composition of distinct base ops, applied first to last.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TransformChain {
    ops: Vec<BaseOpKind>,
}

impl TransformChain {
    pub fn new(ops: Vec<BaseOpKind>) -> Result<Self> {
        if ops.is_empty() {
            return Err(Error::contract("transform chain must hold at least one op"));
        }
        for (i, op) in ops.iter().enumerate() {
            if ops[..i].contains(op) {
                return Err(Error::contract(format!("transform chain repeats {op}")));
            }
        }
        Ok(TransformChain { ops })
    }

    pub fn ops(&self) -> &[BaseOpKind] {
        &self.ops
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.ops.iter().map(|k| k.num_params()).sum()
    }

    /// Offset of each op's parameters inside the flat parameter vector.
    pub fn param_offsets(&self) -> Vec<usize> {
        self.ops
            .iter()
            .scan(0, |acc, k| {
                let o = *acc;
                *acc += k.num_params();
                Some(o)
            })
            .collect()
    }
}

impl fmt::Display for TransformChain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.ops.iter().map(|k| k.name()).collect();
        write!(f, "[{}]", names.join(" -> "))
    }
}

/// Distribution over chains: length uniform in `1..=l_max`, then uniform over
/// the ordered duplicate-free chains of that length.
#[derive(Clone, Debug)]
pub struct ChainDistribution {
    base: Vec<BaseOpKind>,
    l_max: usize,
}

impl Default for ChainDistribution {
    fn default() -> Self {
        ChainDistribution { base: BaseOpKind::ALL.to_vec(), l_max: 3 }
    }
}

impl ChainDistribution {
    pub fn new(base: Vec<BaseOpKind>, l_max: usize) -> Result<Self> {
        if l_max == 0 || l_max > base.len() {
            return Err(Error::contract(format!("l_max {l_max} outside 1..={}", base.len())));
        }
        // dedup check through the chain constructor
        TransformChain::new(base.clone())?;
        Ok(ChainDistribution { base, l_max })
    }

    pub fn with_l_max(l_max: usize) -> Result<Self> {
        Self::new(BaseOpKind::ALL.to_vec(), l_max)
    }

    pub fn base(&self) -> &[BaseOpKind] {
        &self.base
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    /// Number of ordered chains of length `len`: n! / (n - len)!.
    pub fn chains_of_length(&self, len: usize) -> u64 {
        let n = self.base.len() as u64;
        (0..len as u64).map(|i| n - i).product()
    }

    pub fn total_chains(&self) -> u64 {
        (1..=self.l_max).map(|l| self.chains_of_length(l)).sum()
    }

    pub fn chain_probability(&self, chain: &TransformChain) -> Result<f64> {
        if chain.len() > self.l_max {
            return Err(Error::contract(format!("chain length {} exceeds l_max {}", chain.len(), self.l_max)));
        }
        if let Some(op) = chain.ops().iter().find(|op| !self.base.contains(op)) {
            return Err(Error::contract(format!("{op} is not a base op of this distribution")));
        }
        Ok(1.0 / (self.chains_of_length(chain.len()) as f64 * self.l_max as f64))
    }

    pub fn sample_chain<R: Rng + ?Sized>(&self, rng: &mut R) -> TransformChain {
        let len = rng.gen_range(1..=self.l_max);
        let mut pool = self.base.clone();
        for i in 0..len {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
        }
        pool.truncate(len);
        TransformChain { ops: pool }
    }

    /// Every chain in the support, shortest first.
    pub fn enumerate(&self) -> Vec<TransformChain> {
        fn extend(base: &[BaseOpKind], prefix: &mut Vec<BaseOpKind>, len: usize, out: &mut Vec<TransformChain>) {
            if prefix.len() == len {
                out.push(TransformChain { ops: prefix.clone() });
                return;
            }
            for &op in base {
                if !prefix.contains(&op) {
                    prefix.push(op);
                    extend(base, prefix, len, out);
                    prefix.pop();
                }
            }
        }
        let mut out = Vec::new();
        for len in 1..=self.l_max {
            extend(&self.base, &mut Vec::new(), len, &mut out);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn chain_counts_for_twelve_ops() {
        let d = ChainDistribution::default();
        assert_eq!(d.chains_of_length(1), 12);
        assert_eq!(d.chains_of_length(2), 132);
        assert_eq!(d.chains_of_length(3), 1320);
        assert_eq!(d.total_chains(), 1464);
        assert_eq!(d.enumerate().len(), 1464);
    }

    #[test]
    fn probabilities_match_length_formula_and_normalize() {
        let d = ChainDistribution::default();
        let one = TransformChain::new(vec![BaseOpKind::Rotate]).unwrap();
        let three = TransformChain::new(vec![BaseOpKind::Rotate, BaseOpKind::Hsv, BaseOpKind::Cutout]).unwrap();
        assert!((d.chain_probability(&one).unwrap() - 1.0 / 36.0).abs() < 1e-15);
        assert!((d.chain_probability(&three).unwrap() - 1.0 / 3960.0).abs() < 1e-15);
        let total: f64 = d.enumerate().iter().map(|c| d.chain_probability(c).unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_chains_are_rejected() {
        assert!(TransformChain::new(vec![BaseOpKind::Hsv, BaseOpKind::Hsv]).is_err());
        assert!(TransformChain::new(vec![]).is_err());
        let d = ChainDistribution::with_l_max(2).unwrap();
        let long = TransformChain::new(vec![BaseOpKind::Rotate, BaseOpKind::Hsv, BaseOpKind::Cutout]).unwrap();
        assert!(d.chain_probability(&long).is_err());
    }

    #[test]
    fn l_max_one_gives_single_ops() {
        let d = ChainDistribution::with_l_max(1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!((0..1000).all(|_| d.sample_chain(&mut rng).len() == 1));
    }

    #[test]
    fn sampling_is_deterministic_per_stream() {
        let d = ChainDistribution::default();
        let a: Vec<_> = {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            (0..50).map(|_| d.sample_chain(&mut rng)).collect()
        };
        let b: Vec<_> = {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            (0..50).map(|_| d.sample_chain(&mut rng)).collect()
        };
        assert_eq!(a, b);
    }
}
