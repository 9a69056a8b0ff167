//! Random offsets on hidden token sequences.
//!
//! Per batch one block is drawn from the alternate set and every item's
//! input sequence at that block is pulled towards the sequence of a partner
//! item from the same mixed batch. The pull direction is a constant: no
//! gradient reaches the partner, nor the item through the offset term.

use candle_core::Tensor;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    pub alternate_blocks: Vec<usize>,
    /// Base offset magnitude; the effective value is `mu(n) * gamma`.
    pub gamma: f64,
    pub enabled: bool,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            alternate_blocks: vec![0, 4, 8],
            gamma: 0.2,
            enabled: true,
        }
    }
}

impl PerturbationConfig {
    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.alternate_blocks.is_empty() {
            return Err(Error::Config("alternate_blocks is empty".into()));
        }
        if let Some(b) = self.alternate_blocks.iter().find(|&&b| b >= depth) {
            return Err(Error::Config(format!(
                "alternate block {b} outside a {depth}-block backbone"
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config("gamma must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Uniform draw over the alternate blocks.
pub fn select_block<R: Rng>(cfg: &PerturbationConfig, rng: &mut R) -> Result<usize> {
    cfg.alternate_blocks
        .choose(rng)
        .copied()
        .ok_or_else(|| Error::invalid("alternate_blocks is empty"))
}

/// `x + gamma_mu * stopgrad(partner - x)` on any tensor pair of equal shape.
pub fn offset_tensor(x: &Tensor, partner: &Tensor, gamma_mu: f64) -> Result<Tensor> {
    if x.dims() != partner.dims() {
        return Err(Error::invalid(format!(
            "offset operands differ in shape: {:?} vs {:?}",
            x.dims(),
            partner.dims()
        )));
    }
    if gamma_mu == 0.0 {
        return Ok(x.clone());
    }
    let direction = (partner - x)?.detach();
    Ok((x + direction.affine(gamma_mu, 0.0)?)?)
}

/// Perturbed token sequence `S_i + gamma_mu (S_j - S_i)` with the offset
/// treated as a constant.
pub fn token_offset(
    s_i: &TokenSequence,
    s_j: &TokenSequence,
    gamma_mu: f64,
) -> Result<TokenSequence> {
    if s_i.block_index != s_j.block_index {
        return Err(Error::invalid("token sequences come from different blocks"));
    }
    Ok(TokenSequence {
        data: offset_tensor(&s_i.data, &s_j.data, gamma_mu)?,
        block_index: s_i.block_index,
    })
}

/// Random partner assignment without fixed points: `pairing[i] != i`.
///
/// Rejection-samples shuffles, which yields every derangement with equal
/// probability (about `e` attempts on average).
pub fn pair_within_batch<R: Rng>(batch_size: usize, rng: &mut R) -> Result<Vec<usize>> {
    if batch_size < 2 {
        return Err(Error::invalid("pairing needs at least two items"));
    }
    let mut perm: Vec<usize> = (0..batch_size).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &j)| i != j) {
            return Ok(perm);
        }
    }
}

/// Reorders the batch rows of `seq` by `pairing`.
pub fn partner_sequence(seq: &TokenSequence, pairing: &[usize]) -> Result<TokenSequence> {
    let idx: Vec<u32> = pairing.iter().map(|&j| j as u32).collect();
    let idx = Tensor::from_vec(idx, pairing.len(), seq.data.device())?;
    Ok(TokenSequence {
        data: seq.data.index_select(&idx, 0)?,
        block_index: seq.block_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(v: f64, block: usize) -> TokenSequence {
        TokenSequence {
            data: Tensor::full(v, (2, 3, 4), &Device::Cpu).unwrap(),
            block_index: block,
        }
    }

    #[test]
    fn endpoints_and_midpoint() {
        let a = TokenSequence {
            data: Tensor::randn(0f64, 1.0, (2, 3, 4), &Device::Cpu).unwrap(),
            block_index: 1,
        };
        let b = seq(3.0, 1);
        let same = token_offset(&a, &b, 0.0).unwrap();
        assert_eq!(
            same.data.to_vec3::<f64>().unwrap(),
            a.data.to_vec3::<f64>().unwrap()
        );
        let full = token_offset(&a, &b, 1.0).unwrap();
        for v in full.data.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert!((v - 3.0).abs() < 1e-12);
        }
        let mid = token_offset(&seq(0.0, 2), &seq(2.0, 2), 0.5).unwrap();
        assert!(mid
            .data
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap()
            .iter()
            .all(|&v| v == 1.0));
    }

    #[test]
    fn shape_and_block_mismatch() {
        let a = seq(0.0, 1);
        let b = TokenSequence {
            data: Tensor::zeros((2, 4, 4), DType::F64, &Device::Cpu).unwrap(),
            block_index: 1,
        };
        assert!(token_offset(&a, &b, 0.2).is_err());
        assert!(token_offset(&a, &seq(0.0, 2), 0.2).is_err());
    }

    #[test]
    fn block_selection() {
        let cfg = PerturbationConfig {
            alternate_blocks: vec![4],
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..50).all(|_| select_block(&cfg, &mut rng).unwrap() == 4));
        let empty = PerturbationConfig {
            alternate_blocks: vec![],
            ..Default::default()
        };
        assert!(select_block(&empty, &mut rng).is_err());
        let d = PerturbationConfig::default();
        let a: Vec<usize> = {
            let mut r = ChaCha8Rng::seed_from_u64(3);
            (0..20).map(|_| select_block(&d, &mut r).unwrap()).collect()
        };
        let b: Vec<usize> = {
            let mut r = ChaCha8Rng::seed_from_u64(3);
            (0..20).map(|_| select_block(&d, &mut r).unwrap()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn default_config_checks_depth() {
        assert!(PerturbationConfig::default().validate(12).is_ok());
        assert!(PerturbationConfig::default().validate(4).is_err());
    }

    #[test]
    fn pairing_of_two_swaps() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(pair_within_batch(2, &mut rng).unwrap(), vec![1, 0]);
        assert!(pair_within_batch(1, &mut rng).is_err());
        let a = pair_within_batch(16, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let b = pair_within_batch(16, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn partner_rows_follow_pairing() {
        let data = Tensor::arange(0f64, 6.0, &Device::Cpu)
            .unwrap()
            .reshape((3, 2, 1))
            .unwrap();
        let s = TokenSequence {
            data,
            block_index: 0,
        };
        let p = partner_sequence(&s, &[2, 0, 1]).unwrap();
        assert_eq!(
            p.data.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            vec![4.0, 5.0, 0.0, 1.0, 2.0, 3.0]
        );
    }
}
