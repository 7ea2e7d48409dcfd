//! Fixed, deterministic domain shifts used to build evaluation domains.
//!
//! Text form: operators joined by `+`, e.g. `invert+translate(0.15,0)`.

use std::fmt;
use std::str::FromStr;

use super::{Dataset, IMAGE_LEN};
use crate::autodiff::Tensor;
use crate::classifier::{IMAGE_SIZE, IN_CHANNELS};
use crate::error::{Error, Result};
use crate::transforms::{transform_images, BaseOpKind, Frozen, TransformChain, TransformParams};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ShiftOp {
    /// `1 - x`
    Invert,
    /// Offsets as fractions of width and height.
    Translate(f64, f64),
    Scale(f64),
    /// Gray level blends from a dark background hue to a bright foreground hue.
    Colorize { background: f64, foreground: f64 },
    Contrast(f64),
}

const COLOR_SATURATION: f64 = 0.8;
const BACKGROUND_VALUE: f64 = 0.4;
const FOREGROUND_VALUE: f64 = 1.0;

fn hue_rgb(h: f64, s: f64, v: f64) -> [f32; 3] {
    [5.0, 3.0, 1.0].map(|n: f64| {
        let k = (n + 6.0 * h).rem_euclid(6.0);
        (v - v * s * k.min(4.0 - k).clamp(0.0, 1.0)) as f32
    })
}

impl ShiftOp {
    fn validate(&self) -> Result<()> {
        let check = |kind: BaseOpKind, values: &[f64]| {
            for (spec, &v) in kind.param_specs().iter().zip(values) {
                if !spec.contains(v) {
                    return Err(Error::contract(format!("{self}: {v} outside [{}, {}]", spec.lo, spec.hi)));
                }
            }
            Ok(())
        };
        match *self {
            ShiftOp::Invert => Ok(()),
            ShiftOp::Translate(x, y) => check(BaseOpKind::Translate, &[x, y]),
            ShiftOp::Scale(s) => check(BaseOpKind::Scale, &[s]),
            ShiftOp::Contrast(c) => check(BaseOpKind::Contrast, &[c]),
            ShiftOp::Colorize { background, foreground } => {
                if (0.0..=1.0).contains(&background) && (0.0..=1.0).contains(&foreground) {
                    Ok(())
                } else {
                    Err(Error::contract(format!("{self}: hues must lie in [0, 1]")))
                }
            }
        }
    }

    fn through_transform(kind: BaseOpKind, values: Vec<f64>, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let chain = TransformChain::new(vec![kind])?;
        let params = TransformParams::from_parts(&chain, values, vec![Frozen::None])?;
        transform_images(&chain, &params, images)
    }

    fn apply(&self, images: Tensor<f32>) -> Result<Tensor<f32>> {
        match *self {
            ShiftOp::Invert => {
                let mut t = images;
                t.data_mut().iter_mut().for_each(|v| *v = 1.0 - *v);
                Ok(t)
            }
            ShiftOp::Translate(x, y) => Self::through_transform(BaseOpKind::Translate, vec![x, y], &images),
            ShiftOp::Scale(s) => Self::through_transform(BaseOpKind::Scale, vec![s], &images),
            ShiftOp::Contrast(c) => Self::through_transform(BaseOpKind::Contrast, vec![c], &images),
            ShiftOp::Colorize { background, foreground } => {
                let bg = hue_rgb(background, COLOR_SATURATION, BACKGROUND_VALUE);
                let fg = hue_rgb(foreground, COLOR_SATURATION, FOREGROUND_VALUE);
                let plane = IMAGE_SIZE * IMAGE_SIZE;
                let mut t = images;
                for im in t.data_mut().chunks_mut(IMAGE_LEN) {
                    for p in 0..plane {
                        let gray = (im[p] + im[plane + p] + im[2 * plane + p]) / 3.0;
                        for c in 0..3 {
                            im[c * plane + p] = (bg[c] + gray * (fg[c] - bg[c])).clamp(0.0, 1.0);
                        }
                    }
                }
                Ok(t)
            }
        }
    }
}

impl fmt::Display for ShiftOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShiftOp::Invert => write!(f, "invert"),
            ShiftOp::Translate(x, y) => write!(f, "translate({x},{y})"),
            ShiftOp::Scale(s) => write!(f, "scale({s})"),
            ShiftOp::Colorize { background, foreground } => write!(f, "colorize({background},{foreground})"),
            ShiftOp::Contrast(c) => write!(f, "contrast({c})"),
        }
    }
}

impl FromStr for ShiftOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, args) = match s.split_once('(') {
            Some((n, rest)) => {
                let inner = rest
                    .strip_suffix(')')
                    .ok_or_else(|| Error::contract(format!("shift `{s}`: missing `)`")))?;
                let args = inner
                    .split(',')
                    .map(|a| a.trim().parse::<f64>().map_err(|e| Error::contract(format!("shift `{s}`: {e}"))))
                    .collect::<Result<Vec<_>>>()?;
                (n.trim(), args)
            }
            None => (s, Vec::new()),
        };
        let op = match (name, args.as_slice()) {
            ("invert", []) => ShiftOp::Invert,
            ("translate", &[x, y]) => ShiftOp::Translate(x, y),
            ("scale", &[v]) => ShiftOp::Scale(v),
            ("contrast", &[v]) => ShiftOp::Contrast(v),
            ("colorize", &[background, foreground]) => ShiftOp::Colorize { background, foreground },
            _ => return Err(Error::contract(format!("unknown shift `{s}`"))),
        };
        op.validate()?;
        Ok(op)
    }
}

/// Ordered list of shift operators; empty means identity.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ShiftSpec(pub Vec<ShiftOp>);

impl ShiftSpec {
    pub fn new(ops: Vec<ShiftOp>) -> Result<Self> {
        ops.iter().try_for_each(ShiftOp::validate)?;
        Ok(ShiftSpec(ops))
    }

    pub fn ops(&self) -> &[ShiftOp] {
        &self.0
    }
}

impl fmt::Display for ShiftSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return write!(f, "identity");
        }
        let parts: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        write!(f, "{}", parts.join("+"))
    }
}

impl FromStr for ShiftSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s == "identity" {
            return Ok(ShiftSpec::default());
        }
        s.split('+').map(str::parse).collect::<Result<Vec<_>>>().map(ShiftSpec)
    }
}

const CHUNK: usize = 256;

/// Applies `spec` to every image of `src`; labels and size are unchanged.
pub fn make_target_domain(src: &Dataset, spec: &ShiftSpec, name: impl Into<String>) -> Result<Dataset> {
    let mut out = Vec::with_capacity(src.images().len());
    for start in (0..src.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(src.len());
        let (mut t, _) = src.range(start, end);
        for op in spec.ops() {
            t = op.apply(t)?;
        }
        out.extend_from_slice(t.data());
    }
    debug_assert_eq!(out.len(), src.len() * IN_CHANNELS * IMAGE_SIZE * IMAGE_SIZE);
    src.with_images(name, out)
}
