//! Hue/saturation/value perturbation as a single graph primitive. The
//! per-pixel map and its 3x6 Jacobian are evaluated together with forward-mode
//! dual numbers; the reverse sweep contracts that Jacobian with the incoming
//! gradient.

use std::ops::{Add, Div, Mul, Sub};

use crate::autodiff::{CustomOp, Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Value with derivatives w.r.t. (r, g, b, dh, ds, dv).
#[derive(Clone, Copy, Debug)]
struct Dual {
    v: f64,
    d: [f64; 6],
}

impl Dual {
    fn constant(v: f64) -> Self {
        Dual { v, d: [0.0; 6] }
    }

    fn seed(v: f64, i: usize) -> Self {
        let mut d = [0.0; 6];
        d[i] = 1.0;
        Dual { v, d }
    }

    fn max(self, o: Dual) -> Dual {
        if o.v > self.v {
            o
        } else {
            self
        }
    }

    fn min(self, o: Dual) -> Dual {
        if o.v < self.v {
            o
        } else {
            self
        }
    }

    /// `self mod m` into [0, m); derivative passes through.
    fn modulo(self, m: f64) -> Dual {
        Dual { v: self.v.rem_euclid(m), d: self.d }
    }

    /// Clamp with zero derivative outside the interval.
    fn clamp01(self) -> Dual {
        if self.v < 0.0 {
            Dual::constant(0.0)
        } else if self.v > 1.0 {
            Dual::constant(1.0)
        } else {
            self
        }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual { v: self.v + o.v, d: std::array::from_fn(|i| self.d[i] + o.d[i]) }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual { v: self.v - o.v, d: std::array::from_fn(|i| self.d[i] - o.d[i]) }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual { v: self.v * o.v, d: std::array::from_fn(|i| self.d[i] * o.v + self.v * o.d[i]) }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        let inv = 1.0 / o.v;
        Dual { v: self.v * inv, d: std::array::from_fn(|i| (self.d[i] - self.v * inv * o.d[i]) * inv) }
    }
}

fn k(v: f64) -> Dual {
    Dual::constant(v)
}

/// RGB -> HSV with hue in [0, 1).
fn rgb_to_hsv(r: Dual, g: Dual, b: Dual) -> (Dual, Dual, Dual) {
    let mx = r.max(g).max(b);
    let mn = r.min(g).min(b);
    let c = mx - mn;
    let s = if mx.v > 0.0 { c / mx } else { k(0.0) };
    let h = if c.v <= 0.0 {
        k(0.0)
    } else if mx.v == r.v {
        ((g - b) / c).modulo(6.0) / k(6.0)
    } else if mx.v == g.v {
        ((b - r) / c + k(2.0)) / k(6.0)
    } else {
        ((r - g) / c + k(4.0)) / k(6.0)
    };
    (h, s, mx)
}

fn hsv_to_rgb(h: Dual, s: Dual, v: Dual) -> [Dual; 3] {
    [5.0, 3.0, 1.0].map(|n| {
        let kk = (k(n) + h * k(6.0)).modulo(6.0);
        let ramp = kk.min(k(4.0) - kk).min(k(1.0)).max(k(0.0));
        v - v * s * ramp
    })
}

fn shift_pixel(rgb: [f64; 3], delta: [f64; 3]) -> [Dual; 3] {
    let (h, s, v) = rgb_to_hsv(Dual::seed(rgb[0], 0), Dual::seed(rgb[1], 1), Dual::seed(rgb[2], 2));
    let h = (h + Dual::seed(delta[0], 3)).modulo(1.0);
    let s = (s + Dual::seed(delta[1], 4)).clamp01();
    let v = (v + Dual::seed(delta[2], 5)).clamp01();
    hsv_to_rgb(h, s, v).map(Dual::clamp01)
}

struct HsvShift;

impl<T: Real> CustomOp<T> for HsvShift {
    fn name(&self) -> &'static str {
        "hsv_shift"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (img, delta) = (inputs[0], inputs[1]);
        let dl = [0, 1, 2].map(|i| delta.data()[i].as_f64());
        let s = img.shape();
        let plane = s[2] * s[3];
        let mut dimg = needs[0].then(|| vec![T::zero(); img.numel()]);
        let mut ddelta = [0.0f64; 3];
        for b in 0..s[0] {
            let base = b * 3 * plane;
            for p in 0..plane {
                let idx = [base + p, base + plane + p, base + 2 * plane + p];
                let rgb = idx.map(|i| img.data()[i].as_f64());
                let out = shift_pixel(rgb, dl);
                let g = idx.map(|i| grad[i].as_f64());
                for (c, o) in out.iter().enumerate() {
                    if let Some(dimg) = dimg.as_mut() {
                        for (j, &i) in idx.iter().enumerate() {
                            dimg[i] += T::lit(g[c] * o.d[j]);
                        }
                    }
                    for j in 0..3 {
                        ddelta[j] += g[c] * o.d[3 + j];
                    }
                }
            }
        }
        vec![dimg, needs[1].then(|| ddelta.iter().map(|&v| T::lit(v)).collect())]
    }
}

/// Shifts hue (wrapping), saturation and value of `images: [B, 3, H, W]` by
/// `delta: [3]`, clamping the result to [0, 1].
pub fn hsv_shift<T: Real>(g: &Graph<T>, images: Var, delta: Var) -> Result<Var> {
    let out = {
        let (img, dv) = (g.value(images), g.value(delta));
        let s = img.shape();
        if s.len() != 4 || s[1] != 3 || dv.numel() != 3 {
            return Err(Error::shape("hsv_shift", format!("image {s:?} delta {:?}", dv.shape())));
        }
        let dl = [0, 1, 2].map(|i| dv.data()[i].as_f64());
        let plane = s[2] * s[3];
        let mut data = vec![T::zero(); img.numel()];
        for b in 0..s[0] {
            let base = b * 3 * plane;
            for p in 0..plane {
                let idx = [base + p, base + plane + p, base + 2 * plane + p];
                let out = shift_pixel(idx.map(|i| img.data()[i].as_f64()), dl);
                for (c, &i) in idx.iter().enumerate() {
                    data[i] = T::lit(out[c].v);
                }
            }
        }
        Tensor::new(s.to_vec(), data)?
    };
    Ok(g.custom(&[images, delta], out, Box::new(HsvShift)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn values(rgb: [f64; 3], delta: [f64; 3]) -> [f64; 3] {
        shift_pixel(rgb, delta).map(|d| d.v)
    }

    #[test]
    fn zero_shift_round_trips() {
        for rgb in [[0.2, 0.5, 0.9], [1.0, 0.0, 0.0], [0.3, 0.3, 0.3], [0.0, 0.0, 0.0], [0.7, 0.1, 0.4]] {
            let out = values(rgb, [0.0; 3]);
            for c in 0..3 {
                assert!((out[c] - rgb[c]).abs() < 1e-12, "{rgb:?} -> {out:?}");
            }
        }
    }

    #[test]
    fn third_turn_maps_red_to_green() {
        let out = values([1.0, 0.0, 0.0], [1.0 / 3.0, 0.0, 0.0]);
        assert!((out[0]).abs() < 1e-4 && (out[1] - 1.0).abs() < 1e-4 && out[2].abs() < 1e-4, "{out:?}");
    }

    #[test]
    fn full_desaturation_gives_gray_at_value() {
        let out = values([0.8, 0.2, 0.4], [0.0, -1.0, 0.0]);
        assert!(out.iter().all(|&c| (c - 0.8).abs() < 1e-12), "{out:?}");
    }
}
