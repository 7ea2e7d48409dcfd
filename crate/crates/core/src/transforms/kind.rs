use std::f64::consts::PI;
use std::fmt;

/// Valid interval and neutral value of one learnable parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamSpec {
    pub lo: f64,
    pub hi: f64,
    pub neutral: f64,
    /// Wrapped into `[lo, hi)` instead of clamped (hue).
    pub wraps: bool,
}

impl ParamSpec {
    const fn new(lo: f64, hi: f64, neutral: f64) -> Self {
        ParamSpec { lo, hi, neutral, wraps: false }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn project(&self, v: f64) -> f64 {
        if self.wraps {
            let w = self.width();
            let r = self.lo + (v - self.lo).rem_euclid(w);
            // rem_euclid can round up to exactly `w` for tiny negatives
            if r >= self.hi {
                self.lo
            } else {
                r
            }
        } else {
            v.clamp(self.lo, self.hi)
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        const TOL: f64 = 1e-6;
        v >= self.lo - TOL && v <= self.hi + TOL
    }
}

const ROTATE_MAX: f64 = PI / 6.0;

const HSV: [ParamSpec; 3] = [
    ParamSpec { lo: -0.5, hi: 0.5, neutral: 0.0, wraps: true },
    ParamSpec::new(-0.5, 0.5, 0.0),
    ParamSpec::new(-0.5, 0.5, 0.0),
];
const CONTRAST: [ParamSpec; 1] = [ParamSpec::new(0.25, 4.0, 1.0)];
// neutral sits far enough above 1 that the sigmoid mask is < 1e-6 on [0, 1]
const INVERT: [ParamSpec; 1] = [ParamSpec::new(0.0, 1.3, 1.3)];
const SHARPNESS: [ParamSpec; 1] = [ParamSpec::new(-1.0, 3.0, 0.0)];
const SHEAR: [ParamSpec; 2] = [ParamSpec::new(-0.3, 0.3, 0.0), ParamSpec::new(-0.3, 0.3, 0.0)];
const TRANSLATE: [ParamSpec; 2] = [ParamSpec::new(-0.3, 0.3, 0.0), ParamSpec::new(-0.3, 0.3, 0.0)];
const ROTATE: [ParamSpec; 1] = [ParamSpec::new(-ROTATE_MAX, ROTATE_MAX, 0.0)];
const SCALE: [ParamSpec; 1] = [ParamSpec::new(0.5, 2.0, 1.0)];
const SOLARIZE: [ParamSpec; 1] = [ParamSpec::new(0.0, 1.0, 0.0)];

/// The twelve base augmentations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BaseOpKind {
    Hsv,
    Contrast,
    Invert,
    Sharpness,
    Shear,
    Translate,
    Rotate,
    Scale,
    Solarize,
    Equalize,
    Posterize,
    Cutout,
}

impl BaseOpKind {
    pub const ALL: [BaseOpKind; 12] = [
        BaseOpKind::Hsv,
        BaseOpKind::Contrast,
        BaseOpKind::Invert,
        BaseOpKind::Sharpness,
        BaseOpKind::Shear,
        BaseOpKind::Translate,
        BaseOpKind::Rotate,
        BaseOpKind::Scale,
        BaseOpKind::Solarize,
        BaseOpKind::Equalize,
        BaseOpKind::Posterize,
        BaseOpKind::Cutout,
    ];

    pub fn param_specs(self) -> &'static [ParamSpec] {
        match self {
            BaseOpKind::Hsv => &HSV,
            BaseOpKind::Contrast => &CONTRAST,
            BaseOpKind::Invert => &INVERT,
            BaseOpKind::Sharpness => &SHARPNESS,
            BaseOpKind::Shear => &SHEAR,
            BaseOpKind::Translate => &TRANSLATE,
            BaseOpKind::Rotate => &ROTATE,
            BaseOpKind::Scale => &SCALE,
            BaseOpKind::Solarize => &SOLARIZE,
            BaseOpKind::Equalize | BaseOpKind::Posterize | BaseOpKind::Cutout => &[],
        }
    }

    pub fn num_params(self) -> usize {
        self.param_specs().len()
    }

    pub fn is_learnable(self) -> bool {
        self.num_params() > 0
    }

    /// False for the ops whose backward is straight-through or a fixed mask.
    pub fn is_differentiable(self) -> bool {
        !matches!(self, BaseOpKind::Equalize | BaseOpKind::Posterize | BaseOpKind::Cutout)
    }

    pub fn is_geometric(self) -> bool {
        matches!(self, BaseOpKind::Shear | BaseOpKind::Translate | BaseOpKind::Rotate | BaseOpKind::Scale)
    }

    pub fn neutral_params(self) -> Vec<f64> {
        self.param_specs().iter().map(|s| s.neutral).collect()
    }

    pub fn name(self) -> &'static str {
        match self {
            BaseOpKind::Hsv => "hsv",
            BaseOpKind::Contrast => "contrast",
            BaseOpKind::Invert => "invert",
            BaseOpKind::Sharpness => "sharpness",
            BaseOpKind::Shear => "shear",
            BaseOpKind::Translate => "translate",
            BaseOpKind::Rotate => "rotate",
            BaseOpKind::Scale => "scale",
            BaseOpKind::Solarize => "solarize",
            BaseOpKind::Equalize => "equalize",
            BaseOpKind::Posterize => "posterize",
            BaseOpKind::Cutout => "cutout",
        }
    }
}

impl fmt::Display for BaseOpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_counts_follow_the_augmentation_table() {
        use BaseOpKind::*;
        let counts: Vec<_> = BaseOpKind::ALL.iter().map(|k| (*k, k.num_params())).collect();
        assert_eq!(
            counts,
            vec![
                (Hsv, 3),
                (Contrast, 1),
                (Invert, 1),
                (Sharpness, 1),
                (Shear, 2),
                (Translate, 2),
                (Rotate, 1),
                (Scale, 1),
                (Solarize, 1),
                (Equalize, 0),
                (Posterize, 0),
                (Cutout, 0),
            ]
        );
        let frozen: Vec<_> = BaseOpKind::ALL.iter().filter(|k| !k.is_differentiable()).collect();
        assert_eq!(frozen, vec![&Equalize, &Posterize, &Cutout]);
    }

    #[test]
    fn hue_wraps_and_others_clamp() {
        let hue = HSV[0];
        assert!((hue.project(0.7) - (-0.3)).abs() < 1e-12);
        assert_eq!(hue.project(0.5), -0.5);
        assert_eq!(hue.project(-0.5), -0.5);
        assert_eq!(SCALE[0].project(3.7), 2.0);
        assert_eq!(SCALE[0].project(0.1), 0.5);
    }
}
