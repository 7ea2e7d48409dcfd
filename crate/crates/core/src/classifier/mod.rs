//! LeNet-style digits backbone with a classification head and a normalized
//! projection head.
//!
//! ```text
//! x: B x 3 x 32 x 32
//!   conv 5x5 (64) -> maxpool 2 -> relu     B x 64 x 14 x 14
//!   conv 5x5 (128) -> maxpool 2 -> relu    B x 128 x 5 x 5
//!   flatten -> fc 1024 -> relu -> fc 1024 -> relu = v
//! logits = v W_cls + b_cls
//! u = normalize(v W_proj + b_proj)
//! ```

pub mod checkpoint;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

pub const IMAGE_SIZE: usize = 32;
pub const IN_CHANNELS: usize = 3;
pub const KERNEL: usize = 5;

/// Layer widths. [`Architecture::digits`] is the reference network; smaller
/// widths exist for fast gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub classes: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub hidden: usize,
    pub projection: usize,
}

impl Architecture {
    pub fn digits(classes: usize) -> Self {
        Architecture { classes, conv1: 64, conv2: 128, hidden: 1024, projection: 128 }
    }

    /// 128 x 5 x 5 = 3200 for the digits network.
    pub fn flat_features(&self) -> usize {
        let after1 = (IMAGE_SIZE - KERNEL + 1) / 2;
        let after2 = (after1 - KERNEL + 1) / 2;
        self.conv2 * after2 * after2
    }

    fn shapes(&self) -> [(&'static str, Vec<usize>); 12] {
        let (c1, c2, h, p, f) = (self.conv1, self.conv2, self.hidden, self.projection, self.flat_features());
        [
            ("conv1.weight", vec![c1, IN_CHANNELS, KERNEL, KERNEL]),
            ("conv1.bias", vec![c1]),
            ("conv2.weight", vec![c2, c1, KERNEL, KERNEL]),
            ("conv2.bias", vec![c2]),
            ("fc1.weight", vec![f, h]),
            ("fc1.bias", vec![h]),
            ("fc2.weight", vec![h, h]),
            ("fc2.bias", vec![h]),
            ("classifier.weight", vec![h, self.classes]),
            ("classifier.bias", vec![self.classes]),
            ("projection.weight", vec![h, p]),
            ("projection.bias", vec![p]),
        ]
    }
}

/// All learnable arrays, in checkpoint order. Linear weights are stored
/// `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    arch: Architecture,
    arrays: Vec<(&'static str, Tensor<T>)>,
}

impl<T: Real> ModelParams<T> {
    /// Kaiming-uniform weights with negative slope sqrt(5), i.e. bound
    /// 1 / sqrt(fan_in) (the customary default for conv and linear layers);
    /// zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        if arch.classes < 2 {
            return Err(Error::contract(format!("need at least 2 classes, got {}", arch.classes)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arrays = arch
            .shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else {
                    let fan_in: usize = if shape.len() == 4 { shape[1..].iter().product() } else { shape[0] };
                    let bound = (1.0 / fan_in as f64).sqrt();
                    Tensor::from_fn(&shape, |_| T::lit(rng.gen_range(-bound..bound)))
                };
                (name, t)
            })
            .collect();
        Ok(ModelParams { arch, arrays })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    pub fn arrays(&self) -> &[(&'static str, Tensor<T>)] {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> impl Iterator<Item = (&'static str, &mut Tensor<T>)> {
        self.arrays.iter_mut().map(|(n, t)| (*n, t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.arrays.iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    pub fn num_parameters(&self) -> usize {
        self.arrays.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.arrays.iter().all(|(_, t)| t.is_finite())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams { arch: self.arch, arrays: self.arrays.iter().map(|(n, t)| (*n, t.cast())).collect() }
    }

    /// Places every array on `g`, as parameters (gradients wanted) or constants.
    pub fn bind(&self, g: &Graph<T>, trainable: bool) -> BoundModel {
        let vars = self
            .arrays
            .iter()
            .map(|(_, t)| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        BoundModel { vars }
    }

    /// Gradients for each array, in order; zeros for arrays that did not reach the loss.
    pub fn collect_grads(&self, bound: &BoundModel, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        bound
            .vars
            .iter()
            .zip(&self.arrays)
            .map(|(&v, (_, t))| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

impl ModelParams<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let refs: Vec<(&str, &Tensor<f32>)> = self.arrays.iter().map(|(n, t)| (*n, t)).collect();
        checkpoint::save(path, &refs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_arrays(checkpoint::load(path)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let refs: Vec<(&str, &Tensor<f32>)> = self.arrays.iter().map(|(n, t)| (*n, t)).collect();
        let mut out = Vec::new();
        checkpoint::write_arrays(&mut out, &refs).expect("writing to memory");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_arrays(checkpoint::read_arrays(bytes)?)
    }

    fn from_arrays(loaded: Vec<(String, Tensor<f32>)>) -> Result<Self> {
        let find = |name: &str| loaded.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let dim = |name: &str, axis: usize| -> Result<usize> {
            find(name)
                .and_then(|t| t.shape().get(axis).copied())
                .ok_or_else(|| Error::contract(format!("checkpoint lacks {name}")))
        };
        let arch = Architecture {
            classes: dim("classifier.weight", 1)?,
            conv1: dim("conv1.weight", 0)?,
            conv2: dim("conv2.weight", 0)?,
            hidden: dim("fc2.weight", 0)?,
            projection: dim("projection.weight", 1)?,
        };
        let arrays = arch
            .shapes()
            .into_iter()
            .map(|(name, shape)| match find(name) {
                Some(t) if t.shape() == shape.as_slice() => Ok((name, t.clone())),
                Some(t) => Err(Error::shape("checkpoint", format!("{name}: {:?}, expected {shape:?}", t.shape()))),
                None => Err(Error::contract(format!("checkpoint lacks {name}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if loaded.len() != arrays.len() {
            return Err(Error::contract(format!("checkpoint holds {} arrays, expected {}", loaded.len(), arrays.len())));
        }
        Ok(ModelParams { arch, arrays })
    }
}

/// Graph handles of a [`ModelParams`] placed on a graph.
#[derive(Clone, Debug)]
pub struct BoundModel {
    vars: Vec<Var>,
}

impl BoundModel {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Handles in [`ModelParams::arrays`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        BoundModel { vars }
    }
}

/// Output nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// B x hidden
    pub embedding: Var,
    /// B x classes
    pub logits: Var,
    /// B x projection, unit rows
    pub projection: Var,
}

fn linear<T: Real>(g: &Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    let bias = g.broadcast_to(b, &g.shape(y))?;
    g.add(y, bias)
}

/// Forward pass of `images: [B, 3, 32, 32]`.
pub fn forward<T: Real>(g: &Graph<T>, model: &BoundModel, images: Var) -> Result<ForwardOutput> {
    let s = g.shape(images);
    if s.len() != 4 || s[1] != IN_CHANNELS || s[2] != IMAGE_SIZE || s[3] != IMAGE_SIZE {
        return Err(Error::shape("forward", format!("expected B x 3 x 32 x 32 images, got {s:?}")));
    }
    let p = &model.vars;
    let h = g.relu(g.maxpool2(g.conv2d(images, p[0], Some(p[1]))?)?);
    let h = g.relu(g.maxpool2(g.conv2d(h, p[2], Some(p[3]))?)?);
    let hs = g.shape(h);
    let flat = g.reshape(h, &[hs[0], hs[1..].iter().product()])?;
    let h = g.relu(linear(g, flat, p[4], p[5])?);
    let embedding = g.relu(linear(g, h, p[6], p[7])?);
    let logits = linear(g, embedding, p[8], p[9])?;
    let projection = g.l2_normalize(linear(g, embedding, p[10], p[11])?);
    Ok(ForwardOutput { embedding, logits, projection })
}

/// Values of one forward pass without gradient bookkeeping.
#[derive(Clone, Debug)]
pub struct Inference<T> {
    pub embedding: Tensor<T>,
    pub logits: Tensor<T>,
    pub projection: Tensor<T>,
}

pub fn infer<T: Real>(model: &ModelParams<T>, images: &Tensor<T>) -> Result<Inference<T>> {
    let g = Graph::new();
    let bound = model.bind(&g, false);
    let x = g.constant(images.clone());
    let out = forward(&g, &bound, x)?;
    let embedding = g.value(out.embedding).clone();
    let logits = g.value(out.logits).clone();
    let projection = g.value(out.projection).clone();
    Ok(Inference { embedding, logits, projection })
}

/// Row-wise argmax of a `B x C` logits tensor.
pub fn predictions<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digits_shapes() {
        let m = ModelParams::<f32>::init(Architecture::digits(10), 0).unwrap();
        assert_eq!(m.get("conv1.weight").unwrap().shape(), &[64, 3, 5, 5]);
        assert_eq!(m.get("conv2.weight").unwrap().shape(), &[128, 64, 5, 5]);
        assert_eq!(m.get("fc1.weight").unwrap().shape(), &[3200, 1024]);
        assert_eq!(m.get("fc2.weight").unwrap().shape(), &[1024, 1024]);
        assert_eq!(m.get("classifier.weight").unwrap().shape(), &[1024, 10]);
        assert_eq!(m.get("projection.weight").unwrap().shape(), &[1024, 128]);
        assert!(m.get("fc1.bias").unwrap().data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn init_is_seeded() {
        let a = ModelParams::<f32>::init(Architecture::digits(10), 5).unwrap();
        let b = ModelParams::<f32>::init(Architecture::digits(10), 5).unwrap();
        let c = ModelParams::<f32>::init(Architecture::digits(10), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(ModelParams::<f32>::init(Architecture::digits(1), 0).is_err());
    }

    #[test]
    fn zero_image_forward_is_finite_with_unit_projections() {
        let m = ModelParams::<f32>::init(Architecture::digits(10), 1).unwrap();
        let out = infer(&m, &Tensor::zeros(&[1, 3, 32, 32])).unwrap();
        assert_eq!(out.logits.shape(), &[1, 10]);
        assert_eq!(out.embedding.shape(), &[1, 1024]);
        assert!(out.logits.is_finite() && out.embedding.is_finite());
        let x = Tensor::from_fn(&[2, 3, 32, 32], |i| ((i * 7919) % 1000) as f32 / 1000.0);
        let out = infer(&m, &x).unwrap();
        for row in out.projection.data().chunks(128) {
            let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let m = ModelParams::<f32>::init(Architecture::digits(10), 1).unwrap();
        assert!(matches!(infer(&m, &Tensor::zeros(&[1, 3, 28, 28])), Err(Error::Shape { .. })));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = ModelParams::<f32>::init(Architecture { classes: 3, conv1: 2, conv2: 3, hidden: 8, projection: 4 }, 2)
            .unwrap();
        let bytes = m.to_bytes();
        let back = ModelParams::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), bytes);
    }
}
