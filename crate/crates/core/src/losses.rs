//! Scalar objectives for the min-max problem: prediction loss, output
//! entropy, feature distance, the supervised contrastive regularizer, and
//! the two compositions used by the minimization and maximization steps.

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Floor applied inside the entropy's logarithm so that 0 log 0 = 0.
pub const ENTROPY_LOG_FLOOR: f64 = 1e-12;

fn rows_cols<T: Real>(g: &Graph<T>, v: Var, what: &str) -> Result<(usize, usize)> {
    match g.shape(v)[..] {
        [b, c] => Ok((b, c)),
        ref s => Err(Error::contract(format!("{what} must be rank 2, got {s:?}"))),
    }
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::contract(format!("{} labels for a batch of {batch}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::contract(format!("label {bad} outside [0, {classes})")));
    }
    Ok(())
}

/// Per-sample negative log-likelihood of the true class, shape `[B]`.
pub fn cross_entropy_per_sample<T: Real>(g: &Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let (b, c) = rows_cols(g, logits, "logits")?;
    check_labels(labels, b, c)?;
    let logp = g.log_softmax(logits);
    let picked = g.gather(logp, labels.iter().enumerate().map(|(i, &y)| i * c + y).collect(), &[b])?;
    Ok(g.neg(picked))
}

/// Mean negative log-likelihood over the batch.
pub fn cross_entropy<T: Real>(g: &Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    Ok(g.mean(cross_entropy_per_sample(g, logits, labels)?))
}

/// Output entropy of each row, shape `[B]`.
pub fn entropy_per_sample<T: Real>(g: &Graph<T>, logits: Var) -> Result<Var> {
    let (b, _) = rows_cols(g, logits, "logits")?;
    let p = g.softmax(logits);
    let logp = g.log(g.clamp(p, T::lit(ENTROPY_LOG_FLOOR), T::one()))?;
    let h = g.neg(g.sum_axis(g.mul(p, logp)?, 1)?);
    g.reshape(h, &[b])
}

/// Batch-average output entropy.
pub fn entropy<T: Real>(g: &Graph<T>, logits: Var) -> Result<Var> {
    Ok(g.mean(entropy_per_sample(g, logits)?))
}

/// Squared Euclidean distance between paired embeddings, shape `[B]`.
pub fn feature_distance<T: Real>(g: &Graph<T>, v: Var, v_prime: Var) -> Result<Var> {
    let (b, _) = rows_cols(g, v, "embedding")?;
    if g.shape(v) != g.shape(v_prime) {
        return Err(Error::shape("feature_distance", format!("{:?} vs {:?}", g.shape(v), g.shape(v_prime))));
    }
    let d = g.sub(v, v_prime)?;
    g.reshape(g.sum_axis(g.mul(d, d)?, 1)?, &[b])
}

/// Transport cost between labelled samples: feature distance when the
/// labels agree, an error (infinite cost) otherwise.
pub fn transport_cost<T: Real>(
    g: &Graph<T>,
    v: Var,
    labels: &[usize],
    v_prime: Var,
    labels_prime: &[usize],
) -> Result<Var> {
    if let Some((a, b)) = labels.iter().zip(labels_prime).find(|(a, b)| a != b) {
        return Err(Error::InfiniteCost(*a, *b));
    }
    feature_distance(g, v, v_prime)
}

/// Supervised contrastive loss over unit-norm rows `u: [B, D]`, summed over
/// anchors. Anchors without another same-label sample contribute zero.
pub fn contrastive<T: Real>(g: &Graph<T>, u: Var, labels: &[usize]) -> Result<Var> {
    let (b, _) = rows_cols(g, u, "projection")?;
    if b < 2 {
        return Err(Error::contract(format!("contrastive loss needs at least 2 samples, got {b}")));
    }
    if labels.len() != b {
        return Err(Error::contract(format!("{} labels for a batch of {b}", labels.len())));
    }
    let sim = g.matmul(u, g.transpose(u)?)?;
    // row i: similarities to every a != i
    let others: Vec<usize> = (0..b).flat_map(|i| (0..b).filter(move |&a| a != i).map(move |a| i * b + a)).collect();
    let sim = g.gather(sim, others, &[b, b - 1])?;
    let logp = g.log_softmax(sim);
    let mut weights = vec![T::zero(); b * (b - 1)];
    for i in 0..b {
        let positives: Vec<usize> = (0..b).filter(|&p| p != i && labels[p] == labels[i]).collect();
        for &p in &positives {
            let col = if p < i { p } else { p - 1 };
            weights[i * (b - 1) + col] = -T::one() / T::lit(positives.len() as f64);
        }
    }
    let w = g.constant(Tensor::new(vec![b, b - 1], weights)?);
    Ok(g.sum(g.mul(logp, w)?))
}

/// Components of a loss, as plain numbers.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub cross_entropy: f64,
    pub contrastive: f64,
    pub entropy: f64,
    pub feature_distance: f64,
}

/// Regularizer weights for the minimization step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Regularizers {
    pub contrastive: bool,
    /// Weight of the subtracted entropy term.
    pub eta: f64,
}

pub struct MinimizationLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// `cross_entropy + contrastive - eta * entropy`. The contrastive term is
/// skipped when disabled or when the batch holds a single sample.
pub fn minimization_loss<T: Real>(
    g: &Graph<T>,
    logits: Var,
    labels: &[usize],
    u: Var,
    reg: Regularizers,
) -> Result<MinimizationLoss> {
    if reg.eta < 0.0 {
        return Err(Error::contract(format!("eta must be nonnegative, got {}", reg.eta)));
    }
    let ce = cross_entropy(g, logits, labels)?;
    let ent = entropy(g, logits)?;
    let mut total = g.sub(ce, g.scale(ent, T::lit(reg.eta)))?;
    let mut breakdown = LossBreakdown {
        cross_entropy: g.item(ce).as_f64(),
        entropy: g.item(ent).as_f64(),
        ..Default::default()
    };
    if reg.contrastive && labels.len() >= 2 {
        let sc = contrastive(g, u, labels)?;
        breakdown.contrastive = g.item(sc).as_f64();
        total = g.add(total, sc)?;
    }
    breakdown.total = g.item(total).as_f64();
    Ok(MinimizationLoss { total, breakdown })
}

/// Weights of the ascent objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AscentWeights {
    /// Feature-distance penalty.
    pub lambda: f64,
    /// Entropy bonus.
    pub epsilon: f64,
}

impl AscentWeights {
    fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || self.epsilon < 0.0 {
            return Err(Error::contract(format!(
                "lambda and epsilon must be nonnegative, got {} and {}",
                self.lambda, self.epsilon
            )));
        }
        Ok(())
    }
}

/// Per-sample `ce(x') - lambda * |v - v'|^2 + epsilon * entropy(x')`, shape `[B]`.
/// `v` is the source embedding and is treated as fixed.
pub fn maximization_objective_per_sample<T: Real>(
    g: &Graph<T>,
    logits_prime: Var,
    labels: &[usize],
    v: Var,
    v_prime: Var,
    w: AscentWeights,
) -> Result<Var> {
    w.validate()?;
    let ce = cross_entropy_per_sample(g, logits_prime, labels)?;
    let dist = feature_distance(g, v, v_prime)?;
    let mut obj = g.sub(ce, g.scale(dist, T::lit(w.lambda)))?;
    if w.epsilon != 0.0 {
        let ent = entropy_per_sample(g, logits_prime)?;
        obj = g.add(obj, g.scale(ent, T::lit(w.epsilon)))?;
    }
    Ok(obj)
}

/// Batch mean of [`maximization_objective_per_sample`].
pub fn maximization_objective<T: Real>(
    g: &Graph<T>,
    logits_prime: Var,
    labels: &[usize],
    v: Var,
    v_prime: Var,
    w: AscentWeights,
) -> Result<Var> {
    Ok(g.mean(maximization_objective_per_sample(g, logits_prime, labels, v, v_prime, w)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn value(g: &Graph<f64>, v: Var) -> f64 {
        g.item(v)
    }

    fn logits(g: &Graph<f64>, rows: usize, data: Vec<f64>) -> Var {
        let c = data.len() / rows;
        g.constant(Tensor::new(vec![rows, c], data).unwrap())
    }

    #[test]
    fn uniform_logits() {
        let g = Graph::new();
        let l = logits(&g, 1, vec![0.0; 10]);
        assert!((value(&g, cross_entropy(&g, l, &[3]).unwrap()) - 10f64.ln()).abs() < 1e-12);
        assert!((value(&g, entropy(&g, l).unwrap()) - 10f64.ln()).abs() < 1e-12);
        let l2 = logits(&g, 1, vec![0.0; 2]);
        assert!((value(&g, entropy(&g, l2).unwrap()) - 2f64.ln()).abs() < 1e-12);
        let p = g.softmax(l);
        assert!(g.value(p).data().iter().all(|&x| (x - 0.1).abs() < 1e-15));
    }

    #[test]
    fn saturated_logits() {
        let g = Graph::new();
        let mut row = vec![0.0; 10];
        row[4] = 1000.0;
        let l = logits(&g, 1, row);
        assert!(value(&g, cross_entropy(&g, l, &[4]).unwrap()).abs() < 1e-12);
        assert!(value(&g, entropy(&g, l).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let g = Graph::new();
        let l = logits(&g, 1, vec![0.0; 3]);
        assert!(matches!(cross_entropy(&g, l, &[3]), Err(Error::Contract(_))));
    }

    #[test]
    fn feature_distance_examples() {
        let g = Graph::new();
        let mut a = vec![0.0; 1024];
        let mut b = vec![0.0; 1024];
        a[0] = 1.0;
        b[1] = 1.0;
        let va = g.constant(Tensor::new(vec![1, 1024], a).unwrap());
        let vb = g.constant(Tensor::new(vec![1, 1024], b).unwrap());
        assert_eq!(value(&g, g.sum(feature_distance(&g, va, vb).unwrap())), 2.0);
        assert_eq!(value(&g, g.sum(feature_distance(&g, va, va).unwrap())), 0.0);
        assert!(matches!(transport_cost(&g, va, &[1], vb, &[2]), Err(Error::InfiniteCost(1, 2))));
        assert!(transport_cost(&g, va, &[1], vb, &[1]).is_ok());
    }

    #[test]
    fn contrastive_edge_cases() {
        let g = Graph::new();
        let u = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap());
        assert!(value(&g, contrastive(&g, u, &[0, 0]).unwrap()).abs() < 1e-15);
        let u2 = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        assert_eq!(value(&g, contrastive(&g, u2, &[0, 1]).unwrap()), 0.0);
        let u1 = g.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        assert!(matches!(contrastive(&g, u1, &[0]), Err(Error::Contract(_))));
    }

    #[test]
    fn minimization_components_recombine() {
        let g = Graph::new();
        let l = logits(&g, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect());
        let u = g.l2_normalize(g.constant(Tensor::new(vec![4, 3], (0..12).map(|i| (i as f64).cos()).collect()).unwrap()));
        let reg = Regularizers { contrastive: true, eta: 10.0 };
        let m = minimization_loss(&g, l, &[0, 1, 0, 1], u, reg).unwrap();
        let b = m.breakdown;
        assert!((b.total - (b.cross_entropy + b.contrastive - 10.0 * b.entropy)).abs() < 1e-6);
        assert!((value(&g, m.total) - b.total).abs() < 1e-12);
    }

    #[test]
    fn single_sample_without_entropy_reduces_to_cross_entropy() {
        let g = Graph::new();
        let l = logits(&g, 1, vec![0.3, -1.0, 2.0]);
        let u = g.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let m = minimization_loss(&g, l, &[2], u, Regularizers { contrastive: true, eta: 0.0 }).unwrap();
        assert_eq!(m.breakdown.total, m.breakdown.cross_entropy);
    }

    #[test]
    fn entropy_term_at_default_eta() {
        let g = Graph::new();
        let l = logits(&g, 2, vec![0.0; 20]);
        let u = g.l2_normalize(g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()));
        let m = minimization_loss(&g, l, &[0, 1], u, Regularizers { contrastive: false, eta: 10.0 }).unwrap();
        assert!((m.breakdown.total - (10f64.ln() - 10.0 * 10f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn neutral_sample_has_no_distance_term() {
        let g = Graph::new();
        let l = logits(&g, 1, vec![0.5, 0.1, -0.2]);
        let v = g.constant(Tensor::new(vec![1, 4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let w = AscentWeights { lambda: 100.0, epsilon: 10.0 };
        let obj = value(&g, maximization_objective(&g, l, &[1], v, v, w).unwrap());
        let ce = value(&g, cross_entropy(&g, l, &[1]).unwrap());
        let ent = value(&g, entropy(&g, l).unwrap());
        assert!((obj - (ce + 10.0 * ent)).abs() < 1e-12);
        let bad = AscentWeights { lambda: -1.0, epsilon: 0.0 };
        assert!(maximization_objective(&g, l, &[1], v, v, bad).is_err());
    }
}
