//! Finite-difference suites over every differentiable piece of the system:
//! graph primitives, transform parameters, losses, and the end-to-end
//! ascent objective. All checks run in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{check_coordinates, Graph, Tensor, Var, PRIMITIVES};
use crate::classifier::{forward, Architecture, ModelParams};
use crate::error::{Error, Result};
use crate::losses::{
    contrastive, cross_entropy, entropy, feature_distance, maximization_objective, minimization_loss, AscentWeights,
    Regularizers,
};
use crate::transforms::{apply_base, apply_chain, hsv_shift, BaseOpKind, Frozen, TransformChain};

/// Relative tolerance for smooth graphs.
pub const RTOL: f64 = 1e-4;
/// Relative tolerance for anything that samples through a grid.
pub const RTOL_GRID: f64 = 1e-3;
const H: f64 = 1e-6;

/// One compared gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckCase {
    pub suite: &'static str,
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub coordinates: usize,
}

impl CheckCase {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub cases: Vec<CheckCase>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CheckCase::passed)
    }

    pub fn failures(&self) -> Vec<&CheckCase> {
        self.cases.iter().filter(|c| !c.passed()).collect()
    }
}

/// Graph for the analytic side, optionally with one primitive's backward negated.
fn graph(fault: Option<&'static str>) -> Graph<f64> {
    fault.map_or_else(Graph::new, Graph::with_fault)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Scalar probe `sum(out * w)` with fixed random weights, so every output
/// coordinate contributes a distinct amount.
fn probe(g: &Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(uniform(&mut rng, &g.shape(out), -1.0, 1.0));
    Ok(g.sum(g.mul(out, w)?))
}

struct Runner {
    fault: Option<&'static str>,
    cases: Vec<CheckCase>,
}

impl Runner {
    /// Checks `f` at `x`; several calls under one name merge into one case.
    fn check(
        &mut self,
        suite: &'static str,
        name: &str,
        tolerance: f64,
        x: &Tensor<f64>,
        coords: Option<&[usize]>,
        f: impl Fn(&Graph<f64>, Var) -> Result<Var>,
    ) -> Result<()> {
        let r = check_coordinates(f, x, H, graph(self.fault), coords)?;
        let n = coords.map_or(x.numel(), <[usize]>::len);
        match self.cases.iter_mut().find(|c| c.suite == suite && c.name == name) {
            Some(c) => {
                c.max_rel_error = c.max_rel_error.max(r.max_rel_error);
                c.coordinates += n;
            }
            None => self.cases.push(CheckCase {
                suite,
                name: name.to_string(),
                max_rel_error: r.max_rel_error,
                tolerance,
                coordinates: n,
            }),
        }
        Ok(())
    }
}

/// Values at least `gap` away from zero, random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(gap..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Pairwise distinct values (no pooling ties), spaced by at least 0.01.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    Tensor::from_fn(shape, |i| order[i] as f64 * 0.02 - 0.5 + rng.gen_range(0.0..0.005))
}

fn binary(
    r: &mut Runner,
    name: &str,
    a: &Tensor<f64>,
    b: &Tensor<f64>,
    op: impl Fn(&Graph<f64>, Var, Var) -> Result<Var> + Copy,
) -> Result<()> {
    r.check("primitives", name, RTOL, a, None, |g, x| {
        let bv = g.constant(b.clone());
        probe(g, op(g, x, bv)?, 1)
    })?;
    r.check("primitives", name, RTOL, b, None, |g, x| {
        let av = g.constant(a.clone());
        probe(g, op(g, av, x)?, 1)
    })
}

fn unary(
    r: &mut Runner,
    name: &str,
    tolerance: f64,
    x: &Tensor<f64>,
    op: impl Fn(&Graph<f64>, Var) -> Result<Var>,
) -> Result<()> {
    r.check("primitives", name, tolerance, x, None, |g, x| probe(g, op(g, x)?, 2))
}

fn primitives(r: &mut Runner, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = [3, 4];
    let a = uniform(&mut rng, &s, -1.0, 1.0);
    let b = uniform(&mut rng, &s, -1.0, 1.0);
    let pos = uniform(&mut rng, &s, 0.5, 2.0);
    binary(r, "add", &a, &b, |g, x, y| g.add(x, y))?;
    binary(r, "sub", &a, &b, |g, x, y| g.sub(x, y))?;
    binary(r, "mul", &a, &b, |g, x, y| g.mul(x, y))?;
    binary(r, "div", &a, &pos, |g, x, y| g.div(x, y))?;
    unary(r, "neg", RTOL, &a, |g, x| Ok(g.neg(x)))?;
    unary(r, "exp", RTOL, &a, |g, x| Ok(g.exp(x)))?;
    unary(r, "log", RTOL, &pos, |g, x| g.log(x))?;
    unary(r, "pow", RTOL, &pos, |g, x| g.pow(x, 2.5))?;
    unary(r, "sin", RTOL, &a, |g, x| Ok(g.sin(x)))?;
    unary(r, "cos", RTOL, &a, |g, x| Ok(g.cos(x)))?;
    unary(r, "scale", RTOL, &a, |g, x| Ok(g.scale(x, -1.7)))?;
    unary(r, "offset", RTOL, &a, |g, x| Ok(g.offset(x, 0.3)))?;
    unary(r, "broadcast_to", RTOL, &uniform(&mut rng, &[1, 4], -1.0, 1.0), |g, x| g.broadcast_to(x, &[3, 4]))?;
    unary(r, "reshape", RTOL, &a, |g, x| g.reshape(x, &[2, 6]))?;
    let m = uniform(&mut rng, &[4, 2], -1.0, 1.0);
    binary(r, "matmul", &a, &m, |g, x, y| g.matmul(x, y))?;
    unary(r, "transpose", RTOL, &a, |g, x| g.transpose(x))?;

    let img = uniform(&mut rng, &[2, 2, 6, 6], -1.0, 1.0);
    let w = uniform(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let bias = uniform(&mut rng, &[3], -1.0, 1.0);
    binary(r, "conv2d", &img, &w, |g, x, k| g.conv2d(x, k, None))?;
    r.check("primitives", "conv2d", RTOL, &bias, None, |g, bv| {
        let (x, k) = (g.constant(img.clone()), g.constant(w.clone()));
        probe(g, g.conv2d(x, k, Some(bv))?, 3)
    })?;
    unary(r, "maxpool2", RTOL, &distinct(&mut rng, &[1, 2, 4, 4]), |g, x| g.maxpool2(x))?;
    unary(r, "relu", RTOL, &away_from_zero(&mut rng, &s, 0.05), |g, x| Ok(g.relu(x)))?;

    let cube = uniform(&mut rng, &[2, 3, 4], -1.0, 1.0);
    unary(r, "sum", RTOL, &a, |g, x| Ok(g.scale(g.sum(x), 1.3)))?;
    unary(r, "mean", RTOL, &a, |g, x| Ok(g.scale(g.mean(x), 1.3)))?;
    unary(r, "sum_axis", RTOL, &cube, |g, x| g.sum_axis(x, 1))?;
    unary(r, "mean_axis", RTOL, &cube, |g, x| g.mean_axis(x, 2))?;
    unary(r, "softmax", RTOL, &a, |g, x| Ok(g.softmax(x)))?;
    unary(r, "log_softmax", RTOL, &a, |g, x| Ok(g.log_softmax(x)))?;
    // keep every coordinate clear of the clamp boundaries
    let clampable = Tensor::from_fn(&s, |i| [-0.9, -0.2, 0.3, 0.8][i % 4] + rng.gen_range(-0.05..0.05));
    unary(r, "clamp", RTOL, &clampable, |g, x| Ok(g.clamp(x, -0.5, 0.5)))?;
    let other = uniform(&mut rng, &[2, 4], -1.0, 1.0);
    r.check("primitives", "concat", RTOL, &a, None, |g, x| {
        let o = g.constant(other.clone());
        probe(g, g.concat(&[x, o], 0)?, 4)
    })?;

    // sample points off the integer pixel lattice
    let (hh, ww) = (5, 6);
    let image = uniform(&mut rng, &[1, 2, hh, ww], 0.0, 1.0);
    let grid = Tensor::from_fn(&[1, 3, 3, 2], |i| {
        let extent = if i % 2 == 0 { ww } else { hh } as f64;
        let pixel = rng.gen_range(0.0..extent - 1.0).floor() + rng.gen_range(0.2..0.8);
        (2.0 * pixel + 1.0) / extent - 1.0
    });
    binary(r, "grid_sample", &image, &grid, |g, im, gr| g.grid_sample(im, gr))?;
    if let Some(c) = r.cases.iter_mut().find(|c| c.name == "grid_sample") {
        c.tolerance = RTOL_GRID;
    }
    unary(r, "l2_normalize", RTOL, &a, |g, x| Ok(g.l2_normalize(x)))?;
    unary(r, "gather", RTOL, &a, |g, x| g.gather(x, vec![0, 5, 5, 11, 3, 0], &[2, 3]))?;
    unary(r, "straight_through", RTOL, &a, |g, x| {
        let value = g.value(x).clone();
        g.straight_through(x, value)
    })?;
    Ok(())
}

/// Interior parameter point of `kind`, away from interval edges.
fn interior(kind: BaseOpKind, rng: &mut ChaCha8Rng) -> Vec<f64> {
    kind.param_specs()
        .iter()
        .map(|s| {
            let lo = s.lo + 0.2 * s.width();
            let hi = s.hi - 0.2 * s.width();
            rng.gen_range(lo..hi)
        })
        .collect()
}

fn transforms(r: &mut Runner, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = uniform(&mut rng, &[1, 3, 8, 8], 0.15, 0.85);
    for kind in BaseOpKind::ALL.into_iter().filter(|k| k.is_learnable() && k.is_differentiable()) {
        let tol = if kind.is_geometric() { RTOL_GRID } else { RTOL };
        let mut omega = interior(kind, &mut rng);
        if kind == BaseOpKind::Invert {
            // a threshold inside the image range so the mask is not saturated
            omega = vec![0.5];
        }
        let omega = Tensor::from_vec(omega);
        let name = format!("{}.params", kind.name());
        r.check("transforms", &name, tol, &omega, None, |g, p| {
            let x = g.constant(image.clone());
            probe(g, apply_base(g, kind, p, Frozen::None, x)?, 5)
        })?;
        let name = format!("{}.image", kind.name());
        r.check("transforms", &name, tol, &image, None, |g, x| {
            let p = g.constant(omega.clone());
            probe(g, apply_base(g, kind, p, Frozen::None, x)?, 6)
        })?;
    }
    let delta = Tensor::from_vec(vec![0.1, -0.15, 0.05]);
    r.check("transforms", "hsv_shift", RTOL, &delta, None, |g, d| {
        let x = g.constant(image.clone());
        probe(g, hsv_shift(g, x, d)?, 7)
    })?;
    r.check("transforms", "hsv_shift", RTOL, &image, None, |g, x| {
        let d = g.constant(delta.clone());
        probe(g, hsv_shift(g, x, d)?, 7)
    })?;

    // random three-op chain of differentiable ops, mean pixel as output
    let pool: Vec<BaseOpKind> = BaseOpKind::ALL.into_iter().filter(|k| k.is_learnable()).collect();
    for trial in 0..3 {
        let mut ops = Vec::new();
        while ops.len() < 3 {
            let k = pool[rng.gen_range(0..pool.len())];
            if !ops.contains(&k) {
                ops.push(k);
            }
        }
        let chain = TransformChain::new(ops)?;
        let omega = Tensor::from_vec(
            chain
                .ops()
                .iter()
                .flat_map(|&k| if k == BaseOpKind::Invert { vec![0.5] } else { interior(k, &mut rng) })
                .collect(),
        );
        let frozen = vec![Frozen::None; chain.len()];
        r.check("transforms", &format!("chain{trial}{chain}"), RTOL_GRID, &omega, None, |g, p| {
            let x = g.constant(image.clone());
            Ok(g.mean(apply_chain(g, &chain, p, &frozen, x)?))
        })?;
    }
    Ok(())
}

fn losses(r: &mut Runner, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = uniform(&mut rng, &[4, 5], -2.0, 2.0);
    let labels = [0usize, 3, 3, 1];
    r.check("losses", "cross_entropy", RTOL, &logits, None, |g, l| cross_entropy(g, l, &labels))?;
    r.check("losses", "entropy", RTOL, &logits, None, |g, l| entropy(g, l))?;
    let v = uniform(&mut rng, &[4, 6], -1.0, 1.0);
    let v2 = uniform(&mut rng, &[4, 6], -1.0, 1.0);
    r.check("losses", "feature_distance", RTOL, &v2, None, |g, x| {
        let c = g.constant(v.clone());
        probe(g, feature_distance(g, c, x)?, 8)
    })?;
    let z = uniform(&mut rng, &[4, 3], -1.0, 1.0);
    r.check("losses", "contrastive", RTOL, &z, None, |g, x| contrastive(g, g.l2_normalize(x), &labels))?;
    let reg = Regularizers { contrastive: true, eta: 10.0 };
    r.check("losses", "minimization_loss", RTOL, &logits, None, |g, l| {
        let u = g.l2_normalize(g.constant(z.clone()));
        Ok(minimization_loss(g, l, &labels, u, reg)?.total)
    })?;
    r.check("losses", "minimization_loss", RTOL, &z, None, |g, x| {
        let l = g.constant(logits.clone());
        Ok(minimization_loss(g, l, &labels, g.l2_normalize(x), reg)?.total)
    })?;
    let w = AscentWeights { lambda: 3.0, epsilon: 10.0 };
    r.check("losses", "maximization_objective", RTOL, &logits, None, |g, l| {
        let (a, b) = (g.constant(v.clone()), g.constant(v2.clone()));
        maximization_objective(g, l, &labels, a, b, w)
    })?;
    r.check("losses", "maximization_objective", RTOL, &v2, None, |g, x| {
        let (l, a) = (g.constant(logits.clone()), g.constant(v.clone()));
        maximization_objective(g, l, &labels, a, x, w)
    })?;
    Ok(())
}

/// Narrow network on full-size inputs: same graph as the digits model, cheap to probe.
pub fn probe_architecture() -> Architecture {
    Architecture { classes: 10, conv1: 4, conv2: 6, hidden: 16, projection: 8 }
}

fn pipeline(r: &mut Runner, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = ModelParams::<f64>::init(probe_architecture(), seed)?;
    let images = uniform(&mut rng, &[2, 3, 32, 32], 0.1, 0.9);
    let labels = [2usize, 7];

    // network loss with respect to a subset of input pixels and of each weight array
    let pixels: Vec<usize> = (0..48).map(|_| rng.gen_range(0..images.numel())).collect();
    r.check("pipeline", "network.input", RTOL, &images, Some(&pixels), |g, x| {
        let bound = model.bind(g, false);
        let out = forward(g, &bound, x)?;
        cross_entropy(g, out.logits, &labels)
    })?;
    for (k, (name, array)) in model.arrays().iter().enumerate() {
        let coords: Vec<usize> = (0..array.numel().min(12)).map(|_| rng.gen_range(0..array.numel())).collect();
        r.check("pipeline", "network.weights", RTOL, array, Some(&coords), |g, wv| {
            let bound = model.bind(g, false);
            let mut vars = bound.vars().to_vec();
            vars[k] = wv;
            let out = forward_with(g, &vars, g.constant(images.clone()))?;
            let ce = cross_entropy(g, out.logits, &labels)?;
            let sc = contrastive(g, out.projection, &labels)?;
            g.add(ce, sc)
        })
        .map_err(|e| Error::contract(format!("{name}: {e}")))?;
    }

    // end to end: ascent objective with respect to the chain parameters
    let chains = [
        TransformChain::new(vec![BaseOpKind::Rotate, BaseOpKind::Hsv, BaseOpKind::Contrast])?,
        TransformChain::new(vec![BaseOpKind::Solarize, BaseOpKind::Translate])?,
    ];
    let source = {
        let g = Graph::new();
        let bound = model.bind(&g, false);
        let out = forward(&g, &bound, g.constant(images.clone()))?;
        let v = g.value(out.embedding).clone();
        v
    };
    let w = AscentWeights { lambda: 100.0, epsilon: 10.0 };
    let offsets = [0, chains[0].num_params()];
    let omega = Tensor::from_vec(
        chains.iter().flat_map(|c| c.ops().iter().flat_map(|&k| interior(k, &mut rng)).collect::<Vec<_>>()).collect(),
    );
    r.check("pipeline", "objective.omega", RTOL_GRID, &omega, None, |g, p| {
        let bound = model.bind(g, false);
        let mut outs = Vec::new();
        for (i, chain) in chains.iter().enumerate() {
            let slice = g.gather(p, (offsets[i]..offsets[i] + chain.num_params()).collect(), &[chain.num_params()])?;
            let x = g.constant(Tensor::new(vec![1, 3, 32, 32], images.data()[i * 3072..(i + 1) * 3072].to_vec())?);
            outs.push(apply_chain(g, chain, slice, &vec![Frozen::None; chain.len()], x)?);
        }
        let out = forward(g, &bound, g.concat(&outs, 0)?)?;
        let v = g.constant(source.clone());
        maximization_objective(g, out.logits, &labels, v, out.embedding, w)
    })?;
    Ok(())
}

/// [`forward`] over explicit parameter handles (used to swap one array for a probe).
fn forward_with(g: &Graph<f64>, vars: &[Var], images: Var) -> Result<crate::classifier::ForwardOutput> {
    forward(g, &crate::classifier::BoundModel::from_vars(vars.to_vec()), images)
}

pub const SUITES: [&str; 4] = ["primitives", "transforms", "losses", "pipeline"];

/// Runs every suite. With `fault`, that primitive's backward is negated on
/// the analytic side, which must make the report fail.
pub fn run_all(fault: Option<&'static str>, seed: u64) -> Result<Report> {
    let mut r = Runner { fault, cases: Vec::new() };
    primitives(&mut r, seed)?;
    transforms(&mut r, seed.wrapping_add(1))?;
    losses(&mut r, seed.wrapping_add(2))?;
    pipeline(&mut r, seed.wrapping_add(3))?;
    Ok(Report { cases: r.cases })
}

/// Names accepted for fault injection: every primitive plus the fused HSV op.
pub fn fault_targets() -> Vec<&'static str> {
    PRIMITIVES.iter().copied().chain(["hsv_shift"]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitive_suite_covers_each_primitive_once() {
        let mut r = Runner { fault: None, cases: Vec::new() };
        primitives(&mut r, 0).unwrap();
        let names: Vec<&str> = r.cases.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, PRIMITIVES);
        for c in &r.cases {
            assert!(c.passed(), "{c:?}");
        }
    }

    #[test]
    fn negated_backward_is_caught() {
        let mut r = Runner { fault: Some("mul"), cases: Vec::new() };
        primitives(&mut r, 0).unwrap();
        assert!(r.cases.iter().any(|c| !c.passed()));
    }
}
