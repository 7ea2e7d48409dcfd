//! Maximization phase: per-sample gradient ascent on the penalized loss,
//! either over semantics-transform parameters or over additive pixel noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TrainConfig;
use crate::autodiff::{Graph, Tensor, Var};
use crate::classifier::{forward, infer, ModelParams, IMAGE_SIZE, IN_CHANNELS};
use crate::data::{Dataset, IMAGE_LEN};
use crate::error::{Error, Result};
use crate::losses::{feature_distance, maximization_objective_per_sample};
use crate::transforms::{apply_chain, clamp_params, ChainDistribution, TransformChain, TransformParams};

/// Random stream for sample `index` of generation round `round`.
pub fn sample_rng(seed: u64, round: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((round << 32) ^ index);
    rng
}

/// Per-sample diagnostics of one generated domain.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AscentStats {
    /// Objective at the initial parameters.
    pub start: Vec<f64>,
    /// Objective at the returned parameters.
    pub end: Vec<f64>,
    /// Squared embedding distance between each generated sample and its source.
    pub feature_distance: Vec<f64>,
    /// Ascent updates applied to each sample.
    pub steps: Vec<usize>,
    /// Samples whose ascent stopped on a non-finite objective or gradient.
    pub non_finite: usize,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl AscentStats {
    pub fn mean_start(&self) -> f64 {
        mean(&self.start)
    }

    pub fn mean_end(&self) -> f64 {
        mean(&self.end)
    }

    pub fn mean_feature_distance(&self) -> f64 {
        mean(&self.feature_distance)
    }

    /// Fraction of samples whose objective went up.
    pub fn fraction_improved(&self) -> f64 {
        if self.start.is_empty() {
            return 0.0;
        }
        self.start.iter().zip(&self.end).filter(|(s, e)| e > s).count() as f64 / self.start.len() as f64
    }

    fn extend(&mut self, other: AscentStats) {
        self.start.extend(other.start);
        self.end.extend(other.end);
        self.feature_distance.extend(other.feature_distance);
        self.steps.extend(other.steps);
        self.non_finite += other.non_finite;
    }
}

/// A synthetic domain and how it was reached.
#[derive(Clone, Debug)]
pub struct Generated {
    pub domain: Dataset,
    pub stats: AscentStats,
    /// Chain and final parameter values per sample (semantic generation only).
    pub chains: Vec<(TransformChain, Vec<f64>)>,
}

/// How one sample's ascent variable enters the graph.
trait Perturbation {
    /// Transformed `[1, 3, 32, 32]` image from parameters `p` and source image `x`.
    fn build(&self, g: &Graph<f32>, p: Var, x: Var) -> Result<Var>;
    fn project(&self, values: Vec<f64>) -> Vec<f64>;
    /// Natural scale of each coordinate; steps are measured in these units.
    fn widths(&self) -> Vec<f64>;
    /// Ascent direction from the gradient; `None` when there is nowhere to go.
    fn direction(&self, grad: &[f32]) -> Option<Vec<f64>> {
        direction(grad, &self.widths())
    }
}

struct Semantic {
    chain: TransformChain,
    params: TransformParams,
}

impl Perturbation for Semantic {
    fn build(&self, g: &Graph<f32>, p: Var, x: Var) -> Result<Var> {
        apply_chain(g, &self.chain, p, self.params.frozen(), x)
    }

    fn project(&self, values: Vec<f64>) -> Vec<f64> {
        clamp_params(&self.chain, &self.params.with_values(values)).values().to_vec()
    }

    fn widths(&self) -> Vec<f64> {
        self.chain.ops().iter().flat_map(|k| k.param_specs().iter().map(|s| s.width())).collect()
    }
}

struct Pixel;

impl Perturbation for Pixel {
    fn build(&self, g: &Graph<f32>, p: Var, x: Var) -> Result<Var> {
        let p = g.reshape(p, &g.shape(x))?;
        Ok(g.clamp(g.add(x, p)?, 0.0, 1.0))
    }

    fn project(&self, values: Vec<f64>) -> Vec<f64> {
        values
    }

    fn widths(&self) -> Vec<f64> {
        vec![1.0; IMAGE_LEN]
    }

    /// Pixels have no interval to normalize against, so this is the plain
    /// gradient; normalizing would move thousands of pixels by up to `beta` at once.
    fn direction(&self, grad: &[f32]) -> Option<Vec<f64>> {
        let d: Vec<f64> = grad.iter().map(|&g| g as f64).collect();
        (d.iter().all(|v| v.is_finite()) && d.iter().any(|&v| v != 0.0)).then_some(d)
    }
}

struct Evaluation {
    objective: Vec<f64>,
    distance: Vec<f64>,
    images: Vec<f32>,
    grads: Option<Vec<Tensor<f32>>>,
}

fn image_shape(b: usize) -> [usize; 4] {
    [b, IN_CHANNELS, IMAGE_SIZE, IMAGE_SIZE]
}

/// Forward (and optionally backward) pass of a batch at the given parameters.
#[allow(clippy::too_many_arguments)]
fn evaluate(
    model: &ModelParams<f32>,
    images: &Tensor<f32>,
    labels: &[usize],
    source_embedding: &Tensor<f32>,
    perturbations: &[Box<dyn Perturbation>],
    values: &[Vec<f64>],
    cfg: &TrainConfig,
    with_grads: bool,
) -> Result<Evaluation> {
    let g = Graph::new();
    let bound = model.bind(&g, false);
    let mut params = Vec::with_capacity(values.len());
    let mut outs = Vec::with_capacity(values.len());
    for (i, (pert, vals)) in perturbations.iter().zip(values).enumerate() {
        let t = Tensor::from_vec(vals.iter().map(|&v| v as f32).collect());
        let p = if with_grads { g.param(t) } else { g.constant(t) };
        let x = g.constant(Tensor::new(image_shape(1).to_vec(), images.data()[i * IMAGE_LEN..(i + 1) * IMAGE_LEN].to_vec())?);
        outs.push(pert.build(&g, p, x)?);
        params.push(p);
    }
    let x_prime = g.concat(&outs, 0)?;
    let out = forward(&g, &bound, x_prime)?;
    let v = g.constant(source_embedding.clone());
    let obj = maximization_objective_per_sample(&g, out.logits, labels, v, out.embedding, cfg.ascent_weights())?;
    let dist = feature_distance(&g, v, out.embedding)?;
    let objective = g.value(obj).data().iter().map(|&o| o as f64).collect();
    let distance = g.value(dist).data().iter().map(|&d| d as f64).collect();
    let images = g.value(x_prime).data().to_vec();
    let grads = if with_grads {
        let total = g.sum(obj);
        let mut grads = g.backward(total)?;
        Some(params.iter().map(|&p| grads.take(p).expect("parameter gradient")).collect())
    } else {
        None
    };
    Ok(Evaluation { objective, distance, images, grads })
}

/// Width-scaled ascent direction whose largest coordinate moves by one width;
/// `None` for a vanishing or non-finite gradient.
fn direction(grad: &[f32], widths: &[f64]) -> Option<Vec<f64>> {
    let scaled: Vec<f64> = grad.iter().zip(widths).map(|(&g, &w)| g as f64 * w).collect();
    let peak = scaled.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !peak.is_finite() {
        return None;
    }
    (peak > 0.0).then(|| scaled.iter().zip(widths).map(|(s, w)| s / peak * w).collect())
}

/// Iterate of one sample: the best parameters so far and what they gave.
struct Best {
    values: Vec<f64>,
    objective: f64,
    distance: f64,
    direction: Option<Vec<f64>>,
    /// Fraction of `beta` for the next trial step.
    scale: f64,
    active: bool,
}

/// Gradient ascent for one batch. Each sample steps along its own
/// normalized gradient; a step that lowers the sample's objective is
/// rejected and the sample's step length halved, so objectives never
/// decrease. Returns the final images and stats.
fn ascend_batch(
    model: &ModelParams<f32>,
    images: &Tensor<f32>,
    labels: &[usize],
    perturbations: &[Box<dyn Perturbation>],
    values: Vec<Vec<f64>>,
    cfg: &TrainConfig,
) -> Result<(Vec<f32>, AscentStats, Vec<Vec<f64>>)> {
    let b = labels.len();
    let source = infer(model, images)?.embedding;
    let mut non_finite = 0;
    let mut steps = vec![0usize; b];

    let first = evaluate(model, images, labels, &source, perturbations, &values, cfg, cfg.t_max > 0)?;
    let mut out_images = first.images;
    let start = first.objective.clone();
    let mut best: Vec<Best> = Vec::with_capacity(b);
    for (i, vals) in values.into_iter().enumerate() {
        let finite = first.objective[i].is_finite();
        non_finite += usize::from(!finite);
        let dir = first.grads.as_ref().and_then(|g| perturbations[i].direction(g[i].data()));
        best.push(Best {
            values: vals,
            objective: first.objective[i],
            distance: first.distance[i],
            active: finite && dir.is_some(),
            direction: dir,
            scale: 1.0,
        });
    }

    for t in 1..=cfg.t_max {
        if !best.iter().any(|s| s.active) {
            break;
        }
        let previous_mean = mean(&best.iter().map(|s| s.objective).collect::<Vec<_>>());
        let trial: Vec<Vec<f64>> = best
            .iter()
            .zip(perturbations)
            .map(|(s, p)| match (&s.direction, s.active) {
                (Some(d), true) => {
                    let step = cfg.beta * s.scale;
                    p.project(s.values.iter().zip(d).map(|(w, d)| w + step * d).collect())
                }
                _ => s.values.clone(),
            })
            .collect();
        let eval = evaluate(model, images, labels, &source, perturbations, &trial, cfg, t < cfg.t_max)?;
        let mut accepted = 0;
        for (i, (s, vals)) in best.iter_mut().zip(trial).enumerate() {
            if !s.active {
                continue;
            }
            let obj = eval.objective[i];
            if !obj.is_finite() {
                s.active = false;
                non_finite += 1;
            } else if obj >= s.objective {
                s.values = vals;
                s.objective = obj;
                s.distance = eval.distance[i];
                s.direction = eval.grads.as_ref().and_then(|g| perturbations[i].direction(g[i].data()));
                if s.direction.is_none() && t < cfg.t_max {
                    s.active = false;
                }
                out_images[i * IMAGE_LEN..(i + 1) * IMAGE_LEN].copy_from_slice(&eval.images[i * IMAGE_LEN..(i + 1) * IMAGE_LEN]);
                steps[i] += 1;
                accepted += 1;
            } else {
                s.scale *= 0.5;
            }
        }
        let current_mean = mean(&best.iter().map(|s| s.objective).collect::<Vec<_>>());
        // A round of pure rejections only shortened steps; it says nothing about convergence.
        if accepted > 0 && (current_mean - previous_mean).abs() < cfg.early_stop_delta {
            break;
        }
    }
    let stats = AscentStats {
        start,
        end: best.iter().map(|s| s.objective).collect(),
        feature_distance: best.iter().map(|s| s.distance).collect(),
        steps,
        non_finite,
    };
    Ok((out_images, stats, best.into_iter().map(|s| s.values).collect()))
}

fn run<F>(
    model: &ModelParams<f32>,
    source: &Dataset,
    cfg: &TrainConfig,
    name: String,
    mut make: F,
) -> Result<(Dataset, AscentStats, Vec<Vec<f64>>)>
where
    F: FnMut(usize) -> (Box<dyn Perturbation>, Vec<f64>),
{
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::contract("cannot generate from an empty source"));
    }
    let mut images = Vec::with_capacity(source.images().len());
    let mut stats = AscentStats::default();
    let mut finals = Vec::with_capacity(source.len());
    for start in (0..source.len()).step_by(cfg.batch_size) {
        let end = (start + cfg.batch_size).min(source.len());
        let (x, y) = source.range(start, end);
        let (perts, values): (Vec<_>, Vec<_>) = (start..end).map(&mut make).unzip();
        let (out, s, vals) = ascend_batch(model, &x, &y, &perts, values, cfg)?;
        images.extend(out);
        stats.extend(s);
        finals.extend(vals);
    }
    Ok((source.with_images(name, images)?, stats, finals))
}

/// Synthetic domain from per-sample semantics transforms: each sample draws
/// its own chain and initial parameters from the stream `(cfg.seed, round, index)`,
/// then takes up to `cfg.t_max` ascent steps. `model` is only read.
pub fn generate_domain(
    model: &ModelParams<f32>,
    source: &Dataset,
    dist: &ChainDistribution,
    cfg: &TrainConfig,
    round: u64,
) -> Result<Generated> {
    let mut chains = Vec::with_capacity(source.len());
    let (domain, stats, finals) = run(model, source, cfg, format!("{}@semantic{round}", source.name()), |i| {
        let mut rng = sample_rng(cfg.seed, round, i as u64);
        let chain = dist.sample_chain(&mut rng);
        let params = TransformParams::init(&chain, &mut rng);
        let values = params.values().to_vec();
        chains.push(chain.clone());
        (Box::new(Semantic { chain, params }) as Box<dyn Perturbation>, values)
    })?;
    Ok(Generated { domain, stats, chains: chains.into_iter().zip(finals).collect() })
}

/// Synthetic domain from additive pixel perturbations starting at zero, with
/// the same objective, step size and early stopping as [`generate_domain`].
pub fn generate_domain_pixel(model: &ModelParams<f32>, source: &Dataset, cfg: &TrainConfig, round: u64) -> Result<Generated> {
    let (domain, stats, _) = run(model, source, cfg, format!("{}@pixel{round}", source.name()), |_| {
        (Box::new(Pixel) as Box<dyn Perturbation>, vec![0.0; IMAGE_LEN])
    })?;
    Ok(Generated { domain, stats, chains: Vec::new() })
}
