//! Central finite-difference oracle for analytic gradients.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Scalar function of one input, built on the supplied graph.
pub trait ScalarFn: Fn(&Graph<f64>, Var) -> Result<Var> {}
impl<F: Fn(&Graph<f64>, Var) -> Result<Var>> ScalarFn for F {}

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// max over coordinates of |analytic - numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

fn evaluate(f: &impl ScalarFn, x: &Tensor<f64>, index: usize) -> Result<f64> {
    let g = Graph::new();
    let v = g.constant(x.clone());
    let out = f(&g, v)?;
    let y = g.item(out);
    if !y.is_finite() {
        return Err(Error::NonFinite { index });
    }
    Ok(y)
}

/// Checks `df/dx` at `x` against central differences with step `h`.
pub fn finite_difference_check(f: impl ScalarFn, x: &Tensor<f64>, h: f64) -> Result<GradCheck> {
    check_with_graph(f, x, h, Graph::new())
}

/// Same as [`finite_difference_check`], but the analytic gradient is taken
/// on `graph` (e.g. one built with [`Graph::with_fault`]).
pub fn check_with_graph(f: impl ScalarFn, x: &Tensor<f64>, h: f64, graph: Graph<f64>) -> Result<GradCheck> {
    check_coordinates(f, x, h, graph, None)
}

/// Like [`check_with_graph`], restricted to the listed coordinates (all when
/// `None`); `analytic` and `numeric` follow the order of `coords`.
pub fn check_coordinates(
    f: impl ScalarFn,
    x: &Tensor<f64>,
    h: f64,
    graph: Graph<f64>,
    coords: Option<&[usize]>,
) -> Result<GradCheck> {
    if h <= 0.0 {
        return Err(Error::contract(format!("finite-difference step must be positive, got {h}")));
    }
    let input = graph.param(x.clone());
    let out = f(&graph, input)?;
    let mut grads = graph.backward(out)?;
    let analytic = grads.take(input).map(Tensor::into_data).unwrap_or_else(|| vec![0.0; x.numel()]);
    if let Some(i) = analytic.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index: i });
    }

    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => {
            if let Some(&bad) = c.iter().find(|&&i| i >= x.numel()) {
                return Err(Error::contract(format!("coordinate {bad} outside {} inputs", x.numel())));
            }
            c
        }
        None => {
            all = (0..x.numel()).collect();
            &all
        }
    };
    let analytic: Vec<f64> = coords.iter().map(|&i| analytic[i]).collect();
    let mut numeric = Vec::with_capacity(coords.len());
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = evaluate(&f, &probe, i)?;
        probe.data_mut()[i] = orig - h;
        let down = evaluate(&f, &probe, i)?;
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * h));
    }

    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .zip(coords)
        .fold((0, 0.0), |best, (e, &i)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheck { max_rel_error, worst_index, analytic, numeric })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        let r = finite_difference_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.analytic.len(), 3);
    }

    #[test]
    fn non_finite_evaluation_names_the_coordinate() {
        let x = Tensor::from_vec(vec![0.0, 0.7095]);
        let err = finite_difference_check(
            |g, x| {
                let e = g.exp(g.scale(x, 1000.0));
                Ok(g.sum(e))
            },
            &x,
            1e-3,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1 }), "{err}");
    }

    #[test]
    fn rejects_nonpositive_step() {
        let x = Tensor::from_vec(vec![1.0]);
        assert!(finite_difference_check(|g, x| Ok(g.sum(x)), &x, 0.0).is_err());
    }
}
