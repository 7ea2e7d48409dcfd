//! Flat `key = value` run configuration.
//!
//! ```text
//! # comments run to end of line
//! mode = advst                 # advst | advst-me | erm | pixel-ada
//! source = synth(100, 1000)    # or idx(<images>, <labels>[, limit])
//! test = synth(50, 9999)
//! target.inverted = invert+translate(0.15,0)
//! epochs = 10
//! ```
//!
//! Every [`TrainConfig`] field has a key of the same name. Target domains
//! are shifted copies of the test set.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use advst::data::{load_idx, make_target_domain, synth_digits, Dataset, ShiftSpec};
use advst::trainer::{Generation, TrainConfig};
use anyhow::{anyhow, bail, Context, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    AdvSt,
    /// AdvST with an entropy bonus in the ascent objective (epsilon defaults to 10).
    AdvStMe,
    Erm,
    /// Pixel-space adversarial augmentation with a cross-entropy-only minimization.
    PixelAda,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::AdvSt => "advst",
            Mode::AdvStMe => "advst-me",
            Mode::Erm => "erm",
            Mode::PixelAda => "pixel-ada",
        })
    }
}

impl FromStr for Mode {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "advst" => Mode::AdvSt,
            "advst-me" => Mode::AdvStMe,
            "erm" => Mode::Erm,
            "pixel-ada" => Mode::PixelAda,
            _ => bail!("unknown mode `{s}` (advst | advst-me | erm | pixel-ada)"),
        })
    }
}

/// Where a dataset comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synth { per_class: usize, seed: u64 },
    Idx { images: PathBuf, labels: PathBuf, limit: Option<usize> },
}

impl DataSource {
    pub fn load(&self, name: &str) -> Result<Dataset> {
        let ds = match self {
            DataSource::Synth { per_class, seed } => synth_digits(*per_class, *seed)?,
            DataSource::Idx { images, labels, limit } => {
                load_idx(images, labels, *limit).with_context(|| format!("loading {}", images.display()))?
            }
        };
        Ok(ds.with_name(name))
    }
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSource::Synth { per_class, seed } => write!(f, "synth({per_class}, {seed})"),
            DataSource::Idx { images, labels, limit: None } => write!(f, "idx({}, {})", images.display(), labels.display()),
            DataSource::Idx { images, labels, limit: Some(n) } => {
                write!(f, "idx({}, {}, {n})", images.display(), labels.display())
            }
        }
    }
}

impl FromStr for DataSource {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (kind, rest) = s.split_once('(').ok_or_else(|| anyhow!("dataset `{s}`: expected synth(..) or idx(..)"))?;
        let args: Vec<&str> = rest
            .strip_suffix(')')
            .ok_or_else(|| anyhow!("dataset `{s}`: missing `)`"))?
            .split(',')
            .map(str::trim)
            .collect();
        match (kind.trim(), args.as_slice()) {
            ("synth", [n, seed]) => Ok(DataSource::Synth {
                per_class: n.parse().with_context(|| format!("dataset `{s}`"))?,
                seed: seed.parse().with_context(|| format!("dataset `{s}`"))?,
            }),
            ("idx", [images, labels]) => Ok(DataSource::Idx { images: images.into(), labels: labels.into(), limit: None }),
            ("idx", [images, labels, limit]) => Ok(DataSource::Idx {
                images: images.into(),
                labels: labels.into(),
                limit: Some(limit.parse().with_context(|| format!("dataset `{s}`"))?),
            }),
            _ => bail!("dataset `{s}`: expected synth(PER_CLASS, SEED) or idx(IMAGES, LABELS[, LIMIT])"),
        }
    }
}

/// A fully resolved run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub train: TrainConfig,
    pub source: DataSource,
    pub test: DataSource,
    /// Named shifts of the test set, in file order.
    pub targets: Vec<(String, ShiftSpec)>,
    pub record_time: bool,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::AdvSt,
            train: TrainConfig { epsilon: 0.0, ..TrainConfig::default() },
            source: DataSource::Synth { per_class: 100, seed: 1000 },
            test: DataSource::Synth { per_class: 50, seed: 9999 },
            targets: vec![("inverted".into(), "invert+translate(0.15,0)".parse().expect("valid shift"))],
            record_time: true,
            out: None,
        }
    }
}

const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "batches_per_epoch",
    "t_max",
    "lambda",
    "beta",
    "alpha",
    "epsilon",
    "eta",
    "contrastive",
    "pool_size",
    "l_max",
    "early_stop_delta",
    "lr_schedule",
    "optimizer",
    "seed",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    v.parse().map_err(|e| anyhow!("`{key}`: cannot parse `{v}`: {e}"))
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Parses the text format. The mode supplies defaults (e.g. `advst-me`
    /// sets `epsilon = 10`) that explicit keys override; `erm` always
    /// disables generation and the regularizers.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(usize, String, String)> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("line {}: expected `key = value`", n + 1))?;
            let k = k.trim().to_string();
            if entries.iter().any(|(_, seen, _)| *seen == k) {
                bail!("line {}: duplicate key `{k}`", n + 1);
            }
            entries.push((n + 1, k, v.trim().to_string()));
        }
        let mode: Mode = match entries.iter().find(|(_, k, _)| k == "mode") {
            Some((_, _, v)) => v.parse()?,
            None => Mode::AdvSt,
        };
        let mut cfg = RunConfig { mode, ..RunConfig::default() };
        match mode {
            Mode::AdvSt | Mode::Erm => {}
            Mode::AdvStMe => cfg.train.epsilon = 10.0,
            Mode::PixelAda => {
                cfg.train.eta = 0.0;
                cfg.train.contrastive = false;
            }
        }
        let mut targets_set = false;
        for (n, k, v) in &entries {
            let at = || format!("line {n}");
            let t = &mut cfg.train;
            match k.as_str() {
                "mode" => {}
                "epochs" => t.epochs = parse(k, v).with_context(at)?,
                "batch_size" => t.batch_size = parse(k, v).with_context(at)?,
                "batches_per_epoch" => {
                    t.batches_per_epoch = if v == "auto" { None } else { Some(parse(k, v).with_context(at)?) }
                }
                "t_max" => t.t_max = parse(k, v).with_context(at)?,
                "lambda" => t.lambda = parse(k, v).with_context(at)?,
                "beta" => t.beta = parse(k, v).with_context(at)?,
                "alpha" => t.alpha = parse(k, v).with_context(at)?,
                "epsilon" => t.epsilon = parse(k, v).with_context(at)?,
                "eta" => t.eta = parse(k, v).with_context(at)?,
                "contrastive" => t.contrastive = parse(k, v).with_context(at)?,
                "pool_size" => t.pool_size = parse(k, v).with_context(at)?,
                "l_max" => t.l_max = parse(k, v).with_context(at)?,
                "early_stop_delta" => t.early_stop_delta = parse(k, v).with_context(at)?,
                "lr_schedule" => t.lr_schedule = parse(k, v).with_context(at)?,
                "optimizer" => t.optimizer = parse(k, v).with_context(at)?,
                "seed" => t.seed = parse(k, v).with_context(at)?,
                "source" => cfg.source = v.parse().with_context(at)?,
                "test" => cfg.test = v.parse().with_context(at)?,
                "record_time" => cfg.record_time = parse(k, v).with_context(at)?,
                "out" => cfg.out = Some(PathBuf::from(v)),
                other => match other.strip_prefix("target.") {
                    Some(name) if valid_name(name) => {
                        if !targets_set {
                            cfg.targets.clear();
                            targets_set = true;
                        }
                        cfg.targets.push((name.to_string(), v.parse().map_err(|e| anyhow!("{e}")).with_context(at)?));
                    }
                    Some(name) => bail!("line {n}: invalid target name `{name}`"),
                    None => bail!("line {n}: unknown key `{other}`"),
                },
            }
        }
        if mode == Mode::AdvStMe && cfg.train.epsilon <= 0.0 {
            bail!("mode advst-me needs epsilon > 0");
        }
        cfg.finish()
    }

    /// Applies the mode to the training settings and validates them.
    fn finish(mut self) -> Result<Self> {
        self.train.generation = match self.mode {
            Mode::AdvSt | Mode::AdvStMe => Generation::Semantic,
            Mode::PixelAda => Generation::Pixel,
            Mode::Erm => Generation::None,
        };
        if self.mode == Mode::Erm {
            self.train = self.train.erm();
        }
        self.train.validate()?;
        Ok(self)
    }

    /// Sets one key as if it appeared in the file (used by `--sweep` and `--seed`).
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        let text = self.to_string();
        let filtered: String = text
            .lines()
            .filter(|l| l.split_once('=').map_or(true, |(k, _)| k.trim() != key))
            .map(|l| format!("{l}\n"))
            .collect();
        Self::parse(&format!("{filtered}{key} = {value}\n"))
    }

    pub fn load_source(&self) -> Result<Dataset> {
        self.source.load("source")
    }

    /// The in-domain test set followed by each shifted target.
    pub fn load_eval_domains(&self) -> Result<Vec<Dataset>> {
        let test = self.test.load("test")?;
        let mut out = Vec::with_capacity(self.targets.len() + 1);
        for (name, spec) in &self.targets {
            out.push(make_target_domain(&test, spec, name.as_str())?);
        }
        out.insert(0, test);
        Ok(out)
    }

    pub fn keys() -> impl Iterator<Item = &'static str> {
        TRAIN_KEYS.iter().copied().chain(["mode", "source", "test", "record_time", "out"])
    }
}

fn valid_name(name: &str) -> bool {
    !name.is_empty() && name != "test" && name != "source" && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// Resolved snapshot; parsing it back gives an equal config.
impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = &self.train;
        writeln!(f, "mode = {}", self.mode)?;
        writeln!(f, "source = {}", self.source)?;
        writeln!(f, "test = {}", self.test)?;
        for (name, spec) in &self.targets {
            writeln!(f, "target.{name} = {spec}")?;
        }
        writeln!(f, "epochs = {}", t.epochs)?;
        writeln!(f, "batch_size = {}", t.batch_size)?;
        match t.batches_per_epoch {
            Some(n) => writeln!(f, "batches_per_epoch = {n}")?,
            None => writeln!(f, "batches_per_epoch = auto")?,
        }
        writeln!(f, "t_max = {}", t.t_max)?;
        writeln!(f, "lambda = {:?}", t.lambda)?;
        writeln!(f, "beta = {:?}", t.beta)?;
        writeln!(f, "alpha = {:?}", t.alpha)?;
        writeln!(f, "epsilon = {:?}", t.epsilon)?;
        writeln!(f, "eta = {:?}", t.eta)?;
        writeln!(f, "contrastive = {}", t.contrastive)?;
        writeln!(f, "pool_size = {}", t.pool_size)?;
        writeln!(f, "l_max = {}", t.l_max)?;
        writeln!(f, "early_stop_delta = {:?}", t.early_stop_delta)?;
        writeln!(f, "lr_schedule = {}", t.lr_schedule)?;
        writeln!(f, "optimizer = {}", t.optimizer)?;
        writeln!(f, "seed = {}", t.seed)?;
        writeln!(f, "record_time = {}", self.record_time)?;
        if let Some(out) = &self.out {
            writeln!(f, "out = {}", out.display())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_round_trip() {
        let cfg = RunConfig::parse("# nothing\n").unwrap();
        assert_eq!(cfg.train.generation, Generation::Semantic);
        assert_eq!(cfg.train.epsilon, 0.0);
        assert_eq!(RunConfig::parse(&cfg.to_string()).unwrap(), cfg);

        let text = "mode = advst-me\nsource = idx(a b/img, lbl, 1000)\ntarget.x = invert\ntarget.y = scale(0.8)\nlambda = 1e-3 # tiny\nbatches_per_epoch = 7\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.train.epsilon, 10.0);
        assert_eq!(cfg.targets.len(), 2);
        assert_eq!(cfg.train.batches_per_epoch, Some(7));
        assert_eq!(RunConfig::parse(&cfg.to_string()).unwrap(), cfg);
    }

    #[test]
    fn modes_set_their_defaults() {
        let erm = RunConfig::parse("mode = erm\neta = 10\n").unwrap();
        assert_eq!((erm.train.t_max, erm.train.eta, erm.train.contrastive), (0, 0.0, false));
        let ada = RunConfig::parse("mode = pixel-ada\n").unwrap();
        assert_eq!((ada.train.generation, ada.train.eta, ada.train.contrastive), (Generation::Pixel, 0.0, false));
        let ada = RunConfig::parse("mode = pixel-ada\neta = 10\n").unwrap();
        assert_eq!(ada.train.eta, 10.0);
        assert!(RunConfig::parse("mode = advst-me\nepsilon = 0\n").is_err());
    }

    #[test]
    fn bad_input_is_rejected() {
        for text in [
            "lamda = 1\n",
            "lambda = -1\n",
            "lambda = 1\nlambda = 2\n",
            "mode = ada\n",
            "no equals sign\n",
            "source = synth(10)\n",
            "target.test = invert\n",
            "target.z = rotate(3)\n",
            "batches_per_epoch = 0\n",
        ] {
            assert!(RunConfig::parse(text).is_err(), "{text:?} accepted");
        }
    }

    #[test]
    fn overrides_replace_one_key() {
        let cfg = RunConfig::parse("lambda = 5\n").unwrap();
        let c = cfg.with_override("lambda", "10").unwrap();
        assert_eq!(c.train.lambda, 10.0);
        assert_eq!(c.with_override("seed", "3").unwrap().train.seed, 3);
        assert!(cfg.with_override("bogus", "1").is_err());
    }
}
