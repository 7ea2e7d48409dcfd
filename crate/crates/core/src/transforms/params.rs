use rand::Rng;

use crate::error::{Error, Result};
use crate::transforms::{BaseOpKind, TransformChain};

/// Fraction of each interval's width used as initial noise around neutral.
pub const INIT_NOISE: f64 = 0.1;

/// Per-op attributes sampled once at initialization and never optimized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Frozen {
    None,
    /// Bits kept per channel, 3..=8.
    PosterizeBits(u8),
    /// Square occluder; center and side as fractions of the image extent.
    Cutout { cx: f64, cy: f64, side: f64 },
}

/// Learnable parameters of one chain (concatenated per op) plus its frozen attributes.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformParams {
    values: Vec<f64>,
    frozen: Vec<Frozen>,
}

impl TransformParams {
    /// Neutral parameters, default frozen attributes (8-bit posterize, empty cutout).
    pub fn neutral(chain: &TransformChain) -> Self {
        TransformParams {
            values: chain.ops().iter().flat_map(|k| k.neutral_params()).collect(),
            frozen: chain
                .ops()
                .iter()
                .map(|k| match k {
                    BaseOpKind::Posterize => Frozen::PosterizeBits(8),
                    BaseOpKind::Cutout => Frozen::Cutout { cx: 0.5, cy: 0.5, side: 0.0 },
                    _ => Frozen::None,
                })
                .collect(),
        }
    }

    pub fn from_parts(chain: &TransformChain, values: Vec<f64>, frozen: Vec<Frozen>) -> Result<Self> {
        if values.len() != chain.num_params() || frozen.len() != chain.len() {
            return Err(Error::contract(format!(
                "chain {chain} takes {} parameters and {} frozen slots, got {} and {}",
                chain.num_params(),
                chain.len(),
                values.len(),
                frozen.len()
            )));
        }
        Ok(TransformParams { values, frozen })
    }

    /// Neutral value plus uniform noise of `INIT_NOISE` x interval width, clamped;
    /// frozen attributes drawn once.
    pub fn init<R: Rng + ?Sized>(chain: &TransformChain, rng: &mut R) -> Self {
        let mut values = Vec::with_capacity(chain.num_params());
        let mut frozen = Vec::with_capacity(chain.len());
        for &kind in chain.ops() {
            for spec in kind.param_specs() {
                let amp = INIT_NOISE * spec.width();
                values.push(spec.project(spec.neutral + rng.gen_range(-amp..=amp)));
            }
            frozen.push(match kind {
                BaseOpKind::Posterize => Frozen::PosterizeBits(rng.gen_range(3..=8)),
                BaseOpKind::Cutout => Frozen::Cutout {
                    side: rng.gen_range(0.1..=0.4),
                    cx: rng.gen_range(0.0..1.0),
                    cy: rng.gen_range(0.0..1.0),
                },
                _ => Frozen::None,
            });
        }
        TransformParams { values, frozen }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn frozen(&self) -> &[Frozen] {
        &self.frozen
    }

    /// Replaces the learnable values, keeping frozen attributes.
    pub fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.values.len());
        TransformParams { values, frozen: self.frozen.clone() }
    }

    /// Projects every learnable parameter onto its interval (hue wraps). Idempotent.
    pub fn clamped(&self, chain: &TransformChain) -> Self {
        let specs = chain.ops().iter().flat_map(|k| k.param_specs());
        TransformParams {
            values: self.values.iter().zip(specs).map(|(&v, s)| s.project(v)).collect(),
            frozen: self.frozen.clone(),
        }
    }

    pub fn is_valid(&self, chain: &TransformChain) -> bool {
        let specs = chain.ops().iter().flat_map(|k| k.param_specs());
        self.values.len() == chain.num_params() && self.values.iter().zip(specs).all(|(&v, s)| s.contains(v))
    }
}

pub fn clamp_params(chain: &TransformChain, params: &TransformParams) -> TransformParams {
    params.clamped(chain)
}
