use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Tape, Var};
use crate::error::{CganError, Result};
use crate::tensor::Tensor;

/// Zero-mean normal with this deviation initializes weights.
pub const INIT_STD: f64 = 0.02;

/// An ordered collection of named parameter tensors owned by one network.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], mean: f64, rng: &mut impl Rng) -> usize {
        let dist = Normal::new(mean, INIT_STD).expect("valid normal");
        let t = Tensor::from_fn(shape, |_| dist.sample(rng));
        self.push(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> usize {
        self.push(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every tensor as a tape leaf, in order.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), trainable))
            .collect()
    }

    /// Replaces every tensor, keeping names; shapes must agree.
    pub fn load(&mut self, mut lookup: impl FnMut(&str) -> Option<Tensor>) -> Result<()> {
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let t = lookup(name)
                .ok_or_else(|| CganError::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != slot.shape() {
                return Err(CganError::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, architecture expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(())
    }

    /// FNV-1a over the raw bits of every value; used to detect any mutation.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for t in &self.tensors {
            for v in t.data() {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

/// Indices of a convolution's weight and bias inside a [`ParamSet`].
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvParams {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct NormParams {
    pub gamma: usize,
    pub beta: usize,
}

/// Square 4×4 kernels with stride 2 and padding 1 double or halve the extent.
pub(crate) const KERNEL: usize = 4;
pub(crate) const STRIDE: usize = 2;
pub(crate) const PAD: usize = 1;

impl ConvParams {
    pub fn conv(p: &mut ParamSet, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        ConvParams {
            w: p.normal(&format!("{name}.w"), &[cout, cin, KERNEL, KERNEL], 0.0, rng),
            b: p.zeros(&format!("{name}.b"), &[cout]),
        }
    }

    pub fn conv_transpose(
        p: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut impl Rng,
    ) -> Self {
        ConvParams {
            w: p.normal(&format!("{name}.w"), &[cin, cout, KERNEL, KERNEL], 0.0, rng),
            b: p.zeros(&format!("{name}.b"), &[cout]),
        }
    }

    pub fn linear(p: &mut ParamSet, name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        ConvParams {
            w: p.normal(&format!("{name}.w"), &[outputs, inputs], 0.0, rng),
            b: p.zeros(&format!("{name}.b"), &[outputs]),
        }
    }

    pub fn apply_conv(&self, tape: &mut Tape, v: &[Var], x: Var) -> Var {
        tape.conv2d(x, v[self.w], v[self.b], STRIDE, PAD)
    }

    pub fn apply_conv_transpose(&self, tape: &mut Tape, v: &[Var], x: Var) -> Var {
        tape.conv_transpose2d(x, v[self.w], v[self.b], STRIDE, PAD)
    }

    pub fn apply_linear(&self, tape: &mut Tape, v: &[Var], x: Var) -> Var {
        tape.linear(x, v[self.w], v[self.b])
    }
}

impl NormParams {
    pub fn new(p: &mut ParamSet, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        NormParams {
            gamma: p.normal(&format!("{name}.gamma"), &[channels], 1.0, rng),
            beta: p.zeros(&format!("{name}.beta"), &[channels]),
        }
    }

    pub fn apply(&self, tape: &mut Tape, v: &[Var], x: Var) -> Var {
        tape.batch_norm(x, v[self.gamma], v[self.beta])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamSet::new();
        let w = p.normal("w", &[100, 100], 0.0, &mut rng);
        let t = &p.tensors()[w];
        let mean = t.sum() / t.len() as f64;
        let std = (t.sq_norm() / t.len() as f64 - mean * mean).sqrt();
        assert!(mean.abs() < 1e-3);
        assert!((std - INIT_STD).abs() < 1e-3);
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let mut p = ParamSet::new();
        p.zeros("a", &[2, 2]);
        let err = p.load(|_| Some(Tensor::zeros(&[3]))).unwrap_err();
        assert!(matches!(err, CganError::Checkpoint(_)));
        assert!(p.load(|_| None).is_err());
        p.load(|_| Some(Tensor::full(&[2, 2], 1.0))).unwrap();
        assert_eq!(p.tensors()[0].sum(), 4.0);
    }

    #[test]
    fn fingerprint_tracks_every_bit() {
        let mut p = ParamSet::new();
        p.zeros("a", &[4]);
        let before = p.fingerprint();
        p.tensors_mut()[0].data_mut()[3] = -0.0;
        assert_ne!(before, p.fingerprint());
    }
}
