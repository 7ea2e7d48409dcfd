use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::transforms::hsv::hsv_shift;
use crate::transforms::{BaseOpKind, Frozen, TransformChain, TransformParams};

/// Steepness of the sigmoid mask used by the thresholded inversion.
pub const INVERT_STEEPNESS: f64 = 50.0;

const RANGE_TOL: f64 = 1e-6;

fn image_dims(g: &Graph<impl Real>, images: Var) -> Result<[usize; 4]> {
    let s = g.shape(images);
    match s[..] {
        [b, 3, h, w] => Ok([b, 3, h, w]),
        _ => Err(Error::shape("transform", format!("expected B x 3 x H x W images, got {s:?}"))),
    }
}

fn check_range<T: Real>(g: &Graph<T>, images: Var) -> Result<()> {
    let v = g.value(images);
    if let Some(bad) = v.data().iter().find(|x| {
        let x = x.as_f64();
        !(-RANGE_TOL..=1.0 + RANGE_TOL).contains(&x)
    }) {
        return Err(Error::contract(format!("image value {bad} outside [0, 1]")));
    }
    Ok(())
}

fn scalar<T: Real>(g: &Graph<T>, params: Var, i: usize) -> Result<Var> {
    g.gather(params, vec![i], &[1])
}

fn spread<T: Real>(g: &Graph<T>, s: Var, shape: &[usize]) -> Result<Var> {
    g.broadcast_to(s, shape)
}

fn unit_range<T: Real>(g: &Graph<T>, x: Var) -> Var {
    g.clamp(x, T::zero(), T::one())
}

/// `x + m * (1 - 2x)`: blend towards the inverted image with weight `m`.
fn invert_blend<T: Real>(g: &Graph<T>, x: Var, m: Var) -> Result<Var> {
    let flipped = g.offset(g.scale(x, T::lit(-2.0)), T::one());
    g.add(x, g.mul(m, flipped)?)
}

/// Sampling grid `[B, H, W, 2]` for a 2 x 3 affine matrix acting on
/// normalized output coordinates.
fn affine_grid<T: Real>(g: &Graph<T>, theta: Var, [b, _, h, w]: [usize; 4]) -> Result<Var> {
    let mut base = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            base.push(T::lit((2 * x + 1) as f64 / w as f64 - 1.0));
            base.push(T::lit((2 * y + 1) as f64 / h as f64 - 1.0));
            base.push(T::one());
        }
    }
    let base = g.constant(Tensor::new(vec![h * w, 3], base)?);
    let coords = g.matmul(base, g.transpose(theta)?)?;
    let coords = g.reshape(coords, &[1, h, w, 2])?;
    g.broadcast_to(coords, &[b, h, w, 2])
}

fn affine_matrix<T: Real>(g: &Graph<T>, kind: BaseOpKind, params: Var) -> Result<Var> {
    let zero = g.constant(Tensor::from_vec(vec![T::zero()]));
    let one = g.constant(Tensor::from_vec(vec![T::one()]));
    let entries = match kind {
        BaseOpKind::Rotate => {
            let a = scalar(g, params, 0)?;
            let (c, s) = (g.cos(a), g.sin(a));
            [c, g.neg(s), zero, s, c, zero]
        }
        BaseOpKind::Shear => {
            let (sx, sy) = (scalar(g, params, 0)?, scalar(g, params, 1)?);
            [one, sx, zero, sy, one, zero]
        }
        BaseOpKind::Translate => {
            // fractions of the extent; the normalized span is 2
            let tx = g.scale(scalar(g, params, 0)?, T::lit(2.0));
            let ty = g.scale(scalar(g, params, 1)?, T::lit(2.0));
            [one, zero, tx, zero, one, ty]
        }
        BaseOpKind::Scale => {
            let inv = g.div(one, scalar(g, params, 0)?)?;
            [inv, zero, zero, zero, inv, zero]
        }
        other => unreachable!("{other} is not geometric"),
    };
    g.reshape(g.concat(&entries, 0)?, &[2, 3])
}

/// Separable (1, 2, 1)/4 blur with reflect padding.
fn blur<T: Real>(g: &Graph<T>, x: Var, [b, c, h, w]: [usize; 4]) -> Result<Var> {
    let planes = g.reshape(x, &[b * c, 1, h, w])?;
    let reflect = |i: isize, n: usize| -> usize {
        if i < 0 {
            (-i) as usize
        } else if i as usize >= n {
            2 * n - 2 - i as usize
        } else {
            i as usize
        }
    };
    let (ph, pw) = (h + 2, w + 2);
    let mut index = Vec::with_capacity(b * c * ph * pw);
    for p in 0..b * c {
        for y in 0..ph {
            for xx in 0..pw {
                let sy = reflect(y as isize - 1, h);
                let sx = reflect(xx as isize - 1, w);
                index.push(p * h * w + sy * w + sx);
            }
        }
    }
    let padded = g.gather(planes, index, &[b * c, 1, ph, pw])?;
    let taps = [1.0, 2.0, 1.0];
    let kernel: Vec<T> = (0..9).map(|i| T::lit(taps[i / 3] * taps[i % 3] / 16.0)).collect();
    let kernel = g.constant(Tensor::new(vec![1, 1, 3, 3], kernel)?);
    let out = g.conv2d(padded, kernel, None)?;
    g.reshape(out, &[b, c, h, w])
}

fn quantize(x: f64) -> usize {
    (x * 255.0).round().clamp(0.0, 255.0) as usize
}

/// Per-channel 256-bin histogram equalization.
fn equalize_values<T: Real>(x: &[T], planes: usize, plane: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for p in 0..planes {
        let src = &x[p * plane..(p + 1) * plane];
        let mut hist = [0usize; 256];
        for &v in src {
            hist[quantize(v.as_f64())] += 1;
        }
        let last = hist.iter().rev().find(|&&c| c > 0).copied().unwrap_or(0);
        let step = (plane - last) / 255;
        if step == 0 {
            continue;
        }
        let mut lut = [0usize; 256];
        let mut cum = 0;
        for (i, &c) in hist.iter().enumerate() {
            lut[i] = ((cum + step / 2) / step).min(255);
            cum += c;
        }
        for (o, &v) in out[p * plane..(p + 1) * plane].iter_mut().zip(src) {
            *o = T::lit(lut[quantize(v.as_f64())] as f64 / 255.0);
        }
    }
    out
}

fn posterize_values<T: Real>(x: &[T], bits: u8) -> Vec<T> {
    let mask = 0xffu8 << (8 - bits.clamp(1, 8));
    x.iter().map(|&v| T::lit((quantize(v.as_f64()) as u8 & mask) as f64 / 255.0)).collect()
}

fn cutout_mask<T: Real>([b, c, h, w]: [usize; 4], cx: f64, cy: f64, side: f64) -> Tensor<T> {
    let side_px = (side * w.min(h) as f64).round() as isize;
    let (x0, y0) = ((cx * w as f64) as isize - side_px / 2, (cy * h as f64) as isize - side_px / 2);
    let inside = |x: isize, y: isize| x >= x0 && x < x0 + side_px && y >= y0 && y < y0 + side_px;
    let plane: Vec<T> = (0..h * w)
        .map(|i| if inside((i % w) as isize, (i / w) as isize) { T::zero() } else { T::one() })
        .collect();
    let mut data = Vec::with_capacity(b * c * h * w);
    for _ in 0..b * c {
        data.extend_from_slice(&plane);
    }
    Tensor::from_parts(vec![b, c, h, w], data)
}

/// Applies one base op to `images: [B, 3, H, W]` in [0, 1]. `params` is a
/// rank-1 node holding exactly `kind.num_params()` values within the op's
/// intervals. The output is clamped to [0, 1].
pub fn apply_base<T: Real>(g: &Graph<T>, kind: BaseOpKind, params: Var, frozen: Frozen, images: Var) -> Result<Var> {
    let dims = image_dims(g, images)?;
    check_range(g, images)?;
    {
        let p = g.value(params);
        if p.numel() != kind.num_params() {
            return Err(Error::contract(format!("{kind} takes {} parameters, got {}", kind.num_params(), p.numel())));
        }
        for (v, spec) in p.data().iter().zip(kind.param_specs()) {
            if !spec.contains(v.as_f64()) {
                return Err(Error::contract(format!("{kind} parameter {v} outside [{}, {}]", spec.lo, spec.hi)));
            }
        }
    }
    let x = images;
    let out = match kind {
        BaseOpKind::Hsv => return hsv_shift(g, x, params),
        BaseOpKind::Contrast => {
            let [b, c, h, w] = dims;
            let mean = g.mean_axis(g.reshape(x, &[b, c * h * w])?, 1)?;
            let mean = spread(g, g.reshape(mean, &[b, 1, 1, 1])?, &dims)?;
            let factor = spread(g, scalar(g, params, 0)?, &dims)?;
            g.add(g.mul(g.sub(x, mean)?, factor)?, mean)?
        }
        BaseOpKind::Invert => {
            let t = spread(g, scalar(g, params, 0)?, &dims)?;
            // mask = 1 / (1 + exp(k (t - x)))
            let e = g.exp(g.scale(g.sub(t, x)?, T::lit(INVERT_STEEPNESS)));
            let ones = g.constant(Tensor::full(&dims, T::one()));
            let mask = g.div(ones, g.offset(e, T::one()))?;
            invert_blend(g, x, mask)?
        }
        BaseOpKind::Sharpness => {
            let s = spread(g, scalar(g, params, 0)?, &dims)?;
            let detail = g.sub(x, blur(g, x, dims)?)?;
            g.add(x, g.mul(s, detail)?)?
        }
        BaseOpKind::Shear | BaseOpKind::Translate | BaseOpKind::Rotate | BaseOpKind::Scale => {
            let theta = affine_matrix(g, kind, params)?;
            g.grid_sample(x, affine_grid(g, theta, dims)?)?
        }
        BaseOpKind::Solarize => {
            let w = spread(g, scalar(g, params, 0)?, &dims)?;
            invert_blend(g, x, w)?
        }
        BaseOpKind::Equalize => {
            let vals = {
                let v = g.value(x);
                equalize_values(v.data(), dims[0] * dims[1], dims[2] * dims[3])
            };
            g.straight_through(x, Tensor::new(dims.to_vec(), vals)?)?
        }
        BaseOpKind::Posterize => {
            let Frozen::PosterizeBits(bits) = frozen else {
                return Err(Error::contract("posterize needs a bit depth"));
            };
            let vals = posterize_values(g.value(x).data(), bits);
            g.straight_through(x, Tensor::new(dims.to_vec(), vals)?)?
        }
        BaseOpKind::Cutout => {
            let Frozen::Cutout { cx, cy, side } = frozen else {
                return Err(Error::contract("cutout needs a square"));
            };
            let mask = g.constant(cutout_mask(dims, cx, cy, side));
            g.mul(x, mask)?
        }
    };
    Ok(unit_range(g, out))
}

/// Applies the chain's ops in order. `params` is a rank-1 node with the
/// chain's concatenated learnable parameters; gradients flow to it and to
/// `images`.
pub fn apply_chain<T: Real>(
    g: &Graph<T>,
    chain: &TransformChain,
    params: Var,
    frozen: &[Frozen],
    images: Var,
) -> Result<Var> {
    if g.value(params).numel() != chain.num_params() || frozen.len() != chain.len() {
        return Err(Error::contract(format!("parameters do not match chain {chain}")));
    }
    let mut x = images;
    for ((&kind, offset), &fz) in chain.ops().iter().zip(chain.param_offsets()).zip(frozen) {
        let slice = g.gather(params, (offset..offset + kind.num_params()).collect(), &[kind.num_params()])?;
        x = apply_base(g, kind, slice, fz, x)?;
    }
    Ok(x)
}

/// Convenience: applies a chain with fixed parameter values, no gradients.
pub fn transform_images<T: Real>(
    chain: &TransformChain,
    params: &TransformParams,
    images: &Tensor<T>,
) -> Result<Tensor<T>> {
    let g = Graph::new();
    let p = g.constant(Tensor::from_vec(params.values().iter().map(|&v| T::lit(v)).collect()));
    let x = g.constant(images.clone());
    let out = apply_chain(&g, chain, p, params.frozen(), x)?;
    let v = g.value(out).clone();
    Ok(v)
}
