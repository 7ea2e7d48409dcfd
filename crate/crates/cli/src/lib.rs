//! Command implementations behind the `advst` binary.

pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use advst::classifier::{ModelParams, IMAGE_SIZE, IN_CHANNELS};
use advst::data::{Dataset, IMAGE_LEN};
use advst::trainer::{accuracy, embeddings, generate_domain, TrainConfig, TrainLog, Trainer};
use advst::transforms::{preview, ChainDistribution};
use anyhow::{bail, Context, Result};

pub use config::{DataSource, Mode, RunConfig};

pub const CHECKPOINT: &str = "checkpoint.bin";
pub const LOG: &str = "log.csv";
pub const SNAPSHOT: &str = "config.txt";

/// Final accuracy on one evaluation domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainAccuracy {
    pub domain: String,
    pub accuracy: f64,
    pub n: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelParams<f32>,
    pub log: TrainLog,
    pub accuracies: Vec<DomainAccuracy>,
}

impl TrainOutcome {
    /// In-domain test accuracy.
    pub fn test_accuracy(&self) -> f64 {
        self.accuracies.first().map_or(f64::NAN, |a| a.accuracy)
    }

    /// Mean accuracy over the shifted targets (everything but the test set).
    pub fn target_accuracy(&self) -> f64 {
        let t = &self.accuracies[1.min(self.accuracies.len())..];
        t.iter().map(|a| a.accuracy).sum::<f64>() / t.len() as f64
    }
}

pub fn evaluate(model: &ModelParams<f32>, domains: &[Dataset]) -> Result<Vec<DomainAccuracy>> {
    domains
        .iter()
        .map(|d| {
            Ok(DomainAccuracy { domain: d.name().to_string(), accuracy: accuracy(model, d)?, n: d.len() })
        })
        .collect()
}

pub fn accuracy_csv(rows: &[DomainAccuracy]) -> String {
    let mut s = String::from("domain,accuracy,n\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.domain, r.accuracy, r.n));
    }
    s
}

/// Trains `cfg`. With `out`, writes the checkpoint, log and resolved config
/// there; on divergence the last model state and log are still written
/// (checkpoint as `diverged.bin`) before the error is returned.
pub fn train(cfg: &RunConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    let source = cfg.load_source()?;
    let domains = cfg.load_eval_domains()?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join(SNAPSHOT), cfg.to_string())?;
    }
    let mut trainer = Trainer::new(cfg.train.clone(), &source, &domains)?.record_time(cfg.record_time);
    if let Err(e) = trainer.run() {
        if let Some(dir) = out {
            trainer.model().save(&dir.join("diverged.bin"))?;
            fs::write(dir.join(LOG), trainer.log().to_csv())?;
        }
        return Err(e).context(format!("training stopped in epoch {}", trainer.epoch()));
    }
    let (model, log) = trainer.into_parts();
    // the last epoch already evaluated every domain; E = 0 has no record
    let accuracies = match log.last() {
        Some(r) => r
            .accuracies
            .iter()
            .zip(&domains)
            .map(|((name, a), d)| DomainAccuracy { domain: name.clone(), accuracy: *a, n: d.len() })
            .collect(),
        None => evaluate(&model, &domains)?,
    };
    if let Some(dir) = out {
        model.save(&dir.join(CHECKPOINT))?;
        fs::write(dir.join(LOG), log.to_csv())?;
    }
    Ok(TrainOutcome { model, log, accuracies })
}

/// Parses `KEY=V1,V2,...`.
pub fn parse_sweep(s: &str) -> Result<(String, Vec<String>)> {
    let (k, vs) = s.split_once('=').with_context(|| format!("sweep `{s}`: expected KEY=V1,V2,..."))?;
    let k = k.trim();
    if !RunConfig::keys().any(|key| key == k) || k == "out" {
        bail!("sweep `{s}`: `{k}` is not a sweepable key");
    }
    let values: Vec<String> = vs.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        bail!("sweep `{s}`: no values");
    }
    Ok((k.to_string(), values))
}

/// One ablation configuration: which components are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    pub id: usize,
    pub semantics: bool,
    pub contrastive: bool,
    pub entropy: bool,
}

/// The five configurations, in report order. Without semantics the ascent
/// runs in pixel space; "entropy" turns on both the ascent entropy bonus
/// and the minimization entropy term.
pub const ABLATIONS: [Ablation; 5] = [
    Ablation { id: 1, semantics: false, contrastive: false, entropy: false },
    Ablation { id: 2, semantics: true, contrastive: false, entropy: false },
    Ablation { id: 3, semantics: true, contrastive: true, entropy: false },
    Ablation { id: 4, semantics: true, contrastive: false, entropy: true },
    Ablation { id: 5, semantics: true, contrastive: true, entropy: true },
];

/// Entropy weight used by the entropy-on configurations.
pub const ABLATION_ENTROPY: f64 = 10.0;

impl Ablation {
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.mode = match (self.semantics, self.entropy) {
            (true, true) => Mode::AdvStMe,
            (true, false) => Mode::AdvSt,
            (false, _) => Mode::PixelAda,
        };
        cfg.train = TrainConfig {
            generation: if self.semantics { advst::trainer::Generation::Semantic } else { advst::trainer::Generation::Pixel },
            contrastive: self.contrastive,
            eta: if self.entropy { ABLATION_ENTROPY } else { 0.0 },
            epsilon: if self.entropy { ABLATION_ENTROPY } else { 0.0 },
            ..base.train.clone()
        };
        cfg
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub ablation: Ablation,
    /// Mean target accuracy per seed.
    pub per_seed: Vec<f64>,
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        self.per_seed.iter().sum::<f64>() / self.per_seed.len() as f64
    }

    pub fn std(&self) -> f64 {
        let m = self.mean();
        let n = self.per_seed.len();
        if n < 2 {
            return 0.0;
        }
        (self.per_seed.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("config,semantics,contrastive,entropy,mean_target_accuracy,std,per_seed\n");
    for r in rows {
        let a = r.ablation;
        let seeds: Vec<String> = r.per_seed.iter().map(|v| v.to_string()).collect();
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            a.id,
            a.semantics,
            a.contrastive,
            a.entropy,
            r.mean(),
            r.std(),
            seeds.join(";")
        ));
    }
    s
}

/// Runs every ablation for `seeds` consecutive seeds starting at the
/// config's seed; each run is written under `out/config<id>/seed<s>`.
pub fn ablate(base: &RunConfig, seeds: usize, out: Option<&Path>, mut progress: impl FnMut(&str)) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for ab in ABLATIONS {
        let mut per_seed = Vec::with_capacity(seeds);
        for k in 0..seeds as u64 {
            let mut cfg = ab.apply(base);
            cfg.train.seed = base.train.seed + k;
            let dir = out.map(|o| o.join(format!("config{}", ab.id)).join(format!("seed{}", cfg.train.seed)));
            let outcome = train(&cfg, dir.as_deref())?;
            progress(&format!("config {} seed {}: target accuracy {:.4}", ab.id, cfg.train.seed, outcome.target_accuracy()));
            per_seed.push(outcome.target_accuracy());
        }
        rows.push(AblationRow { ablation: ab, per_seed });
    }
    Ok(rows)
}

/// Writes `domain,label,v_1..v_H` rows for the first `samples` images of
/// each domain. Returns the number of rows.
pub fn write_embeddings<W: Write>(mut w: W, model: &ModelParams<f32>, domains: &[Dataset], samples: usize) -> Result<usize> {
    let hidden = model.architecture().hidden;
    write!(w, "domain,label")?;
    for i in 1..=hidden {
        write!(w, ",v_{i}")?;
    }
    writeln!(w)?;
    let mut rows = 0;
    for d in domains {
        let d = d.take(samples.min(d.len()));
        if d.is_empty() {
            continue;
        }
        let e = embeddings(model, &d)?;
        for (row, label) in e.data().chunks(hidden).zip(d.labels()) {
            write!(w, "{},{label}", d.name())?;
            for v in row {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
            rows += 1;
        }
    }
    Ok(rows)
}

/// Embeddings of the source, a freshly generated domain and every
/// evaluation domain, plus a preview grid of the generated samples.
pub struct ExportPaths {
    pub embeddings: PathBuf,
    pub preview: Option<PathBuf>,
}

pub fn export(model: &ModelParams<f32>, cfg: &RunConfig, out: &Path, samples: usize, with_preview: bool) -> Result<ExportPaths> {
    fs::create_dir_all(out)?;
    let source = cfg.load_source()?.take(samples);
    if source.is_empty() {
        bail!("source is empty");
    }
    let mut domains = vec![source.clone()];
    let mut preview_path = None;
    if cfg.train.generation != advst::trainer::Generation::None {
        let gen = match cfg.train.generation {
            advst::trainer::Generation::Pixel => advst::trainer::generate_domain_pixel(model, &source, &cfg.train, 0)?,
            _ => generate_domain(model, &source, &ChainDistribution::with_l_max(cfg.train.l_max)?, &cfg.train, 0)?,
        };
        let generated = gen.domain.with_name("generated");
        if with_preview {
            let n = generated.len().min(64);
            let path = out.join("generated.ppm");
            preview::write_grid(&path, &generated.images()[..n * IMAGE_LEN], n, IN_CHANNELS, IMAGE_SIZE, IMAGE_SIZE, 8)?;
            preview_path = Some(path);
        }
        domains.push(generated);
    }
    domains.extend(cfg.load_eval_domains()?);
    let path = out.join("embeddings.csv");
    let file = std::io::BufWriter::new(fs::File::create(&path)?);
    write_embeddings(file, model, &domains, samples)?;
    Ok(ExportPaths { embeddings: path, preview: preview_path })
}
