//! The alternating min-max loop: descend on the classifier over the domain
//! pool, then ascend per-sample perturbations against the frozen classifier
//! to produce a new synthetic domain, which enters the pool.

mod ascent;
mod config;
mod log;
mod optim;

use std::collections::VecDeque;
use std::time::Instant;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use ascent::{generate_domain, generate_domain_pixel, sample_rng, AscentStats, Generated};
pub use config::{Generation, LrSchedule, TrainConfig};
pub use log::{EpochRecord, TrainLog};
pub use optim::{Optimizer, OptimizerKind};

use crate::autodiff::{Graph, Tensor};
use crate::classifier::{forward, infer, predictions, Architecture, ModelParams, IMAGE_SIZE, IN_CHANNELS};
use crate::data::{Dataset, IMAGE_LEN};
use crate::error::{Error, Result};
use crate::losses::{minimization_loss, LossBreakdown};
use crate::transforms::ChainDistribution;

/// The source domain plus a ring of at most `capacity` generated domains.
#[derive(Clone, Debug)]
pub struct DomainPool {
    source: Dataset,
    generated: VecDeque<Dataset>,
    capacity: usize,
}

impl DomainPool {
    pub fn new(source: Dataset, capacity: usize) -> Self {
        DomainPool { source, generated: VecDeque::new(), capacity }
    }

    /// Adds a domain, evicting the oldest generated one beyond capacity.
    pub fn add(&mut self, domain: Dataset) -> Result<()> {
        if domain.len() != self.source.len() || domain.labels() != self.source.labels() {
            return Err(Error::contract("generated domain must pair one-to-one with the source"));
        }
        if self.capacity == 0 {
            return Ok(());
        }
        if self.generated.len() == self.capacity {
            self.generated.pop_front();
        }
        self.generated.push_back(domain);
        Ok(())
    }

    pub fn source(&self) -> &Dataset {
        &self.source
    }

    pub fn generated(&self) -> impl Iterator<Item = &Dataset> {
        self.generated.iter()
    }

    pub fn generated_len(&self) -> usize {
        self.generated.len()
    }

    /// Samples across all stored domains.
    pub fn total(&self) -> usize {
        self.source.len() * (1 + self.generated.len())
    }

    fn sample(&self, global: usize) -> (&[f32], usize) {
        let n = self.source.len();
        let (d, i) = (global / n, global % n);
        let ds = if d == 0 { &self.source } else { &self.generated[d - 1] };
        (ds.image(i), ds.labels()[i])
    }

    /// `b` distinct samples drawn uniformly over every stored sample.
    pub fn sample_batch(&self, rng: &mut ChaCha8Rng, b: usize) -> (Tensor<f32>, Vec<usize>) {
        let picks = index::sample(rng, self.total(), b.min(self.total()));
        let mut data = Vec::with_capacity(picks.len() * IMAGE_LEN);
        let mut labels = Vec::with_capacity(picks.len());
        for g in picks.iter() {
            let (im, y) = self.sample(g);
            data.extend_from_slice(im);
            labels.push(y);
        }
        let t = Tensor::new(vec![labels.len(), IN_CHANNELS, IMAGE_SIZE, IMAGE_SIZE], data).expect("batch layout");
        (t, labels)
    }
}

/// Loss components of one minimization step.
pub fn minimize_step(
    model: &mut ModelParams<f32>,
    optimizer: &mut Optimizer,
    images: &Tensor<f32>,
    labels: &[usize],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<LossBreakdown> {
    let g = Graph::new();
    let bound = model.bind(&g, true);
    let x = g.constant(images.clone());
    let out = forward(&g, &bound, x)?;
    let loss = minimization_loss(&g, out.logits, labels, out.projection, cfg.regularizers())?;
    if !loss.breakdown.total.is_finite() {
        return Err(Error::Diverged(format!("non-finite minimization loss: {:?}", loss.breakdown)));
    }
    let mut grads = g.backward(loss.total)?;
    let grads = model.collect_grads(&bound, &mut grads);
    optimizer.apply(model, &grads, lr);
    Ok(loss.breakdown)
}

/// Runs `batches` minimization steps, returning mean loss components.
pub fn minimize_epoch(
    model: &mut ModelParams<f32>,
    optimizer: &mut Optimizer,
    pool: &DomainPool,
    cfg: &TrainConfig,
    lr: f64,
    batches: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let mut sum = LossBreakdown::default();
    for step in 0..batches {
        let (x, y) = pool.sample_batch(rng, cfg.batch_size);
        let b = minimize_step(model, optimizer, &x, &y, cfg, lr)
            .map_err(|e| match e {
                Error::Diverged(m) => Error::Diverged(format!("batch {step}: {m}")),
                other => other,
            })?;
        sum.total += b.total;
        sum.cross_entropy += b.cross_entropy;
        sum.contrastive += b.contrastive;
        sum.entropy += b.entropy;
    }
    let n = batches.max(1) as f64;
    Ok(LossBreakdown {
        total: sum.total / n,
        cross_entropy: sum.cross_entropy / n,
        contrastive: sum.contrastive / n,
        entropy: sum.entropy / n,
        feature_distance: 0.0,
    })
}

const EVAL_CHUNK: usize = 250;

/// Fraction of `data` classified correctly.
pub fn accuracy(model: &ModelParams<f32>, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::contract(format!("dataset `{}` is empty", data.name())));
    }
    if data.classes() > model.classes() {
        return Err(Error::shape("accuracy", format!("{} classes in data, {} in model", data.classes(), model.classes())));
    }
    let mut correct = 0;
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(data.len());
        let (x, y) = data.range(start, end);
        let pred = predictions(&infer(model, &x)?.logits);
        correct += pred.iter().zip(&y).filter(|(p, y)| p == y).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Embeddings of every sample, `[N, hidden]`.
pub fn embeddings(model: &ModelParams<f32>, data: &Dataset) -> Result<Tensor<f32>> {
    let hidden = model.architecture().hidden;
    let mut out = Vec::with_capacity(data.len() * hidden);
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(data.len());
        let (x, _) = data.range(start, end);
        out.extend_from_slice(infer(model, &x)?.embedding.data());
    }
    Tensor::new(vec![data.len(), hidden], out)
}

/// Stateful driver of the loop; advance with [`Trainer::run_epoch`].
pub struct Trainer<'a> {
    cfg: TrainConfig,
    dist: ChainDistribution,
    targets: &'a [Dataset],
    model: ModelParams<f32>,
    optimizer: Optimizer,
    pool: DomainPool,
    rng: ChaCha8Rng,
    log: TrainLog,
    epoch: usize,
    record_time: bool,
    last_generated: Option<Generated>,
}

/// Stream reserved for minibatch sampling; generation uses per-sample streams.
const MINIBATCH_STREAM: u64 = u64::MAX;

impl<'a> Trainer<'a> {
    /// Fresh digits-architecture model seeded by `cfg.seed`.
    pub fn new(cfg: TrainConfig, source: &Dataset, targets: &'a [Dataset]) -> Result<Self> {
        let model = ModelParams::init(Architecture::digits(source.classes()), cfg.seed)?;
        Self::with_model(cfg, source, targets, model)
    }

    pub fn with_model(cfg: TrainConfig, source: &Dataset, targets: &'a [Dataset], model: ModelParams<f32>) -> Result<Self> {
        cfg.validate()?;
        if source.is_empty() {
            return Err(Error::contract("source domain is empty"));
        }
        let dist = ChainDistribution::with_l_max(cfg.l_max)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(MINIBATCH_STREAM);
        Ok(Trainer {
            optimizer: Optimizer::new(cfg.optimizer),
            pool: DomainPool::new(source.clone(), cfg.pool_size),
            cfg,
            dist,
            targets,
            model,
            rng,
            log: TrainLog::default(),
            epoch: 0,
            record_time: true,
            last_generated: None,
        })
    }

    /// With `false`, the log's `seconds` column is written as 0 so that
    /// reruns produce byte-identical logs.
    pub fn record_time(mut self, on: bool) -> Self {
        self.record_time = on;
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &ModelParams<f32> {
        &self.model
    }

    pub fn pool(&self) -> &DomainPool {
        &self.pool
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    /// The most recent synthetic domain, if any epoch generated one.
    pub fn last_generated(&self) -> Option<&Generated> {
        self.last_generated.as_ref()
    }

    /// One minimization epoch followed by one generation round.
    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        let clock = Instant::now();
        self.epoch += 1;
        let lr = self.cfg.lr_schedule.rate(self.cfg.alpha, self.epoch, self.cfg.epochs);
        let batches = self.cfg.batches(self.pool.source().len());
        let losses = minimize_epoch(&mut self.model, &mut self.optimizer, &self.pool, &self.cfg, lr, batches, &mut self.rng)
            .map_err(|e| match e {
                Error::Diverged(m) => Error::Diverged(format!("epoch {}: {m}", self.epoch)),
                other => other,
            })?;
        let round = self.epoch as u64;
        let generated = match self.cfg.generation {
            Generation::Semantic => Some(generate_domain(&self.model, self.pool.source(), &self.dist, &self.cfg, round)?),
            Generation::Pixel => Some(generate_domain_pixel(&self.model, self.pool.source(), &self.cfg, round)?),
            Generation::None => None,
        };
        if let Some(gen) = &generated {
            self.pool.add(gen.domain.clone())?;
        }
        let accuracies = self
            .targets
            .iter()
            .map(|d| accuracy(&self.model, d).map(|a| (d.name().to_string(), a)))
            .collect::<Result<Vec<_>>>()?;
        let stats = generated.as_ref().map(|g| &g.stats);
        self.log.records.push(EpochRecord {
            epoch: self.epoch,
            learning_rate: lr,
            ce: losses.cross_entropy,
            contrastive: losses.contrastive,
            entropy: losses.entropy,
            max_obj_start: stats.map(AscentStats::mean_start),
            max_obj_end: stats.map(AscentStats::mean_end),
            mean_feat_dist: stats.map(AscentStats::mean_feature_distance),
            non_finite: stats.map_or(0, |s| s.non_finite),
            pool_len: self.pool.generated_len(),
            accuracies,
            seconds: if self.record_time { clock.elapsed().as_secs_f64() } else { 0.0 },
        });
        if generated.is_some() {
            self.last_generated = generated;
        }
        Ok(self.log.records.last().expect("just pushed"))
    }

    pub fn run(&mut self) -> Result<()> {
        while !self.is_done() {
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn into_parts(self) -> (ModelParams<f32>, TrainLog) {
        (self.model, self.log)
    }
}

/// Full run of `cfg` from a fresh model; `targets` are evaluated every epoch.
pub fn train(cfg: &TrainConfig, source: &Dataset, targets: &[Dataset]) -> Result<(ModelParams<f32>, TrainLog)> {
    let mut t = Trainer::new(cfg.clone(), source, targets)?;
    t.run()?;
    Ok(t.into_parts())
}

/// Cross-entropy-only baseline: no maximization, no pool growth, no regularizers.
pub fn train_erm(cfg: &TrainConfig, source: &Dataset, targets: &[Dataset]) -> Result<(ModelParams<f32>, TrainLog)> {
    train(&cfg.erm(), source, targets)
}
