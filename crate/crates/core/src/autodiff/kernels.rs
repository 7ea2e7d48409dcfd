//! Raw numeric kernels behind the graph primitives. Shapes are validated by
//! the caller; everything here works on flat row-major slices.

use crate::autodiff::Real;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        self.height - self.kernel + 1
    }

    pub fn out_w(&self) -> usize {
        self.width - self.kernel + 1
    }

    fn patch(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn columns(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }
}

/// Unfolds `x` (B x C x H x W) into a `(C*k*k) x (B*Ho*Wo)` matrix.
fn im2col<T: Real>(x: &[T], d: ConvDims) -> Vec<T> {
    let (oh, ow, k) = (d.out_h(), d.out_w(), d.kernel);
    let cols = d.columns();
    let mut col = vec![T::zero(); d.patch() * cols];
    for c in 0..d.in_ch {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst_row = &mut col[row * cols..(row + 1) * cols];
                for b in 0..d.batch {
                    let plane = &x[(b * d.in_ch + c) * d.height * d.width..];
                    for oy in 0..oh {
                        let src = &plane[(oy + ki) * d.width + kj..][..ow];
                        let dst = (b * oh + oy) * ow;
                        dst_row[dst..dst + ow].copy_from_slice(src);
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Real>(col: &[T], d: ConvDims, dx: &mut [T]) {
    let (oh, ow, k) = (d.out_h(), d.out_w(), d.kernel);
    let cols = d.columns();
    for c in 0..d.in_ch {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src_row = &col[row * cols..(row + 1) * cols];
                for b in 0..d.batch {
                    let plane = &mut dx[(b * d.in_ch + c) * d.height * d.width..];
                    for oy in 0..oh {
                        let dst = &mut plane[(oy + ki) * d.width + kj..][..ow];
                        let src = &src_row[(b * oh + oy) * ow..][..ow];
                        for (o, &s) in dst.iter_mut().zip(src) {
                            *o += s;
                        }
                    }
                }
            }
        }
    }
}

/// Valid-padding, stride-1 convolution. Returns B x O x Ho x Wo.
pub(crate) fn conv2d_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, d: ConvDims) -> Vec<T> {
    let col = im2col(x, d);
    let cols = d.columns();
    let mut tmp = vec![T::zero(); d.out_ch * cols];
    T::gemm(d.out_ch, d.patch(), cols, T::one(), w, (d.patch(), 1), &col, (cols, 1), T::zero(), &mut tmp, (cols, 1));
    let plane = d.out_h() * d.out_w();
    let mut out = vec![T::zero(); d.batch * d.out_ch * plane];
    for o in 0..d.out_ch {
        let b_o = bias.map_or(T::zero(), |b| b[o]);
        for b in 0..d.batch {
            let src = &tmp[o * cols + b * plane..][..plane];
            let dst = &mut out[(b * d.out_ch + o) * plane..][..plane];
            for (y, &s) in dst.iter_mut().zip(src) {
                *y = s + b_o;
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    grad: &[T],
    d: ConvDims,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let cols = d.columns();
    let plane = d.out_h() * d.out_w();
    // grad is B x O x P; regroup as O x (B*P)
    let mut g = vec![T::zero(); d.out_ch * cols];
    for b in 0..d.batch {
        for o in 0..d.out_ch {
            g[o * cols + b * plane..][..plane].copy_from_slice(&grad[(b * d.out_ch + o) * plane..][..plane]);
        }
    }
    let db = need.2.then(|| (0..d.out_ch).map(|o| g[o * cols..(o + 1) * cols].iter().copied().sum()).collect());
    let dw = need.1.then(|| {
        let col = im2col(x, d);
        let mut dw = vec![T::zero(); d.out_ch * d.patch()];
        T::gemm(d.out_ch, cols, d.patch(), T::one(), &g, (cols, 1), &col, (1, cols), T::zero(), &mut dw, (d.patch(), 1));
        dw
    });
    let dx = need.0.then(|| {
        let mut dcol = vec![T::zero(); d.patch() * cols];
        T::gemm(d.patch(), d.out_ch, cols, T::one(), w, (1, d.patch()), &g, (cols, 1), T::zero(), &mut dcol, (cols, 1));
        let mut dx = vec![T::zero(); x.len()];
        col2im(&dcol, d, &mut dx);
        dx
    });
    ConvGrads { dx, dw, db }
}

/// 2x2 max pooling with stride 2 over the last two axes of an `planes x H x W`
/// array. Returns pooled values and the flat source index of each maximum.
pub(crate) fn maxpool2_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct SampleDims {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_h: usize,
    pub out_w: usize,
}

struct Corner {
    x0: isize,
    y0: isize,
    fx: f64,
    fy: f64,
}

fn locate(gx: f64, gy: f64, width: usize, height: usize) -> Corner {
    // normalized [-1, 1] spans pixel edges; pixel centers sit at (2i + 1)/W - 1
    let ix = ((gx + 1.0) * width as f64 - 1.0) / 2.0;
    let iy = ((gy + 1.0) * height as f64 - 1.0) / 2.0;
    let (x0, y0) = (ix.floor(), iy.floor());
    Corner { x0: x0 as isize, y0: y0 as isize, fx: ix - x0, fy: iy - y0 }
}

#[inline]
fn fetch<T: Real>(plane: &[T], x: isize, y: isize, w: usize, h: usize) -> T {
    if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
        T::zero()
    } else {
        plane[y as usize * w + x as usize]
    }
}

/// Bilinear sampling with zeros outside the image.
pub(crate) fn grid_sample_forward<T: Real>(image: &[T], grid: &[T], d: SampleDims) -> Vec<T> {
    let (h, w) = (d.height, d.width);
    let opl = d.out_h * d.out_w;
    let mut out = vec![T::zero(); d.batch * d.channels * opl];
    for b in 0..d.batch {
        for p in 0..opl {
            let gi = (b * opl + p) * 2;
            let cr = locate(grid[gi].as_f64(), grid[gi + 1].as_f64(), w, h);
            let (fx, fy) = (T::lit(cr.fx), T::lit(cr.fy));
            let (gx, gy) = (T::one() - fx, T::one() - fy);
            for c in 0..d.channels {
                let plane = &image[(b * d.channels + c) * h * w..][..h * w];
                let v00 = fetch(plane, cr.x0, cr.y0, w, h);
                let v01 = fetch(plane, cr.x0 + 1, cr.y0, w, h);
                let v10 = fetch(plane, cr.x0, cr.y0 + 1, w, h);
                let v11 = fetch(plane, cr.x0 + 1, cr.y0 + 1, w, h);
                out[(b * d.channels + c) * opl + p] = gy * (gx * v00 + fx * v01) + fy * (gx * v10 + fx * v11);
            }
        }
    }
    out
}

pub(crate) fn grid_sample_backward<T: Real>(
    image: &[T],
    grid: &[T],
    grad: &[T],
    d: SampleDims,
    need_image: bool,
    need_grid: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (h, w) = (d.height, d.width);
    let opl = d.out_h * d.out_w;
    let mut dimg = need_image.then(|| vec![T::zero(); image.len()]);
    let mut dgrid = need_grid.then(|| vec![T::zero(); grid.len()]);
    let half_w = T::lit(w as f64 / 2.0);
    let half_h = T::lit(h as f64 / 2.0);
    for b in 0..d.batch {
        for p in 0..opl {
            let gi = (b * opl + p) * 2;
            let cr = locate(grid[gi].as_f64(), grid[gi + 1].as_f64(), w, h);
            let (fx, fy) = (T::lit(cr.fx), T::lit(cr.fy));
            let (gx, gy) = (T::one() - fx, T::one() - fy);
            let mut dix = T::zero();
            let mut diy = T::zero();
            for c in 0..d.channels {
                let g = grad[(b * d.channels + c) * opl + p];
                if g == T::zero() {
                    continue;
                }
                let off = (b * d.channels + c) * h * w;
                if let Some(dimg) = dimg.as_mut() {
                    let plane = &mut dimg[off..off + h * w];
                    for (dx, dy, wt) in [(0, 0, gx * gy), (1, 0, fx * gy), (0, 1, gx * fy), (1, 1, fx * fy)] {
                        let (x, y) = (cr.x0 + dx, cr.y0 + dy);
                        if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                            plane[y as usize * w + x as usize] += g * wt;
                        }
                    }
                }
                if dgrid.is_some() {
                    let plane = &image[off..off + h * w];
                    let v00 = fetch(plane, cr.x0, cr.y0, w, h);
                    let v01 = fetch(plane, cr.x0 + 1, cr.y0, w, h);
                    let v10 = fetch(plane, cr.x0, cr.y0 + 1, w, h);
                    let v11 = fetch(plane, cr.x0 + 1, cr.y0 + 1, w, h);
                    dix += g * (gy * (v01 - v00) + fy * (v11 - v10));
                    diy += g * (gx * (v10 - v00) + fx * (v11 - v01));
                }
            }
            if let Some(dgrid) = dgrid.as_mut() {
                dgrid[gi] = dix * half_w;
                dgrid[gi + 1] = diy * half_h;
            }
        }
    }
    (dimg, dgrid)
}

/// For every element of an array with shape `out`, the flat index of the
/// element of `input` (right-aligned, size-1 axes repeated) it reads.
pub(crate) fn broadcast_index(input: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let pad = rank - input.len();
    let mut in_strides = vec![0usize; rank];
    let mut stride = 1;
    for ax in (0..input.len()).rev() {
        in_strides[ax + pad] = if input[ax] == 1 { 0 } else { stride };
        stride *= input[ax];
    }
    let total: usize = out.iter().product();
    let mut idx = Vec::with_capacity(total);
    let mut coord = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..total {
        idx.push(cur);
        for ax in (0..rank).rev() {
            coord[ax] += 1;
            cur += in_strides[ax];
            if coord[ax] < out[ax] {
                break;
            }
            cur -= in_strides[ax] * coord[ax];
            coord[ax] = 0;
        }
    }
    idx
}

/// Splits a shape around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_index_repeats_unit_axes() {
        assert_eq!(broadcast_index(&[3], &[2, 3]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(broadcast_index(&[2, 1], &[2, 3]), vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(broadcast_index(&[], &[2, 2]), vec![0; 4]);
    }

    #[test]
    fn conv_of_ones_sums_the_window() {
        let d = ConvDims { batch: 1, in_ch: 1, height: 3, width: 3, out_ch: 1, kernel: 2 };
        let out = conv2d_forward(&[1.0f64; 9], &[1.0; 4], None, d);
        assert_eq!(out, vec![4.0; 4]);
    }

    #[test]
    fn grid_sample_at_pixel_centers_is_exact() {
        let d = SampleDims { batch: 1, channels: 1, height: 2, width: 2, out_h: 1, out_w: 2 };
        let img = [1.0f64, 2.0, 3.0, 4.0];
        // centers of pixel (0,1) and (1,0)
        let grid = [0.5, -0.5, -0.5, 0.5];
        assert_eq!(grid_sample_forward(&img, &grid, d), vec![2.0, 3.0]);
    }
}
