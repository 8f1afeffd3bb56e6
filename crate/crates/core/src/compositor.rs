//! Alpha blending of RGBA layers into opaque RGB composites.
//!
//! Layers are non-premultiplied. The first layer is blended onto an implicit
//! black background, every later layer covers the running composite:
//!
//! ```text
//! O(1) = C(1).rgb * C(1).a
//! O(t) = O(t-1) * (1 - C(t).a) + C(t).rgb * C(t).a
//! ```
//!
//! Nothing is clamped here; the formulas keep values in `[0, 1]` for inputs in
//! `[0, 1]`. The [`graph`] submodule records the same math on a [`Tape`] so
//! gradients flow into the generators.
//!
//! [`Tape`]: crate::autograd::Tape

use crate::error::{CganError, Result};
use crate::tensor::Tensor;

/// A batch of RGBA layers: `rgb` is `[B, 3, H, W]`, `alpha` is `[B, 1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerImage {
    rgb: Tensor,
    alpha: Tensor,
}

/// A batch of opaque RGB images, `[B, 3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    rgb: Tensor,
}

/// Real or generated RGB images share the composite representation.
pub type ImageRgb = Composite;

fn check_unit_range(t: &Tensor, what: &str) -> Result<()> {
    match t.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
        None => Ok(()),
        Some(i) => Err(CganError::Domain(format!(
            "{what} value {} at index {i} is outside [0, 1]",
            t.data()[i]
        ))),
    }
}

fn check_channels(t: &Tensor, channels: usize, what: &str) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = t.dims4()?;
    if c != channels {
        return Err(CganError::Dimension(format!(
            "{what} needs {channels} channels, got shape {:?}",
            t.shape()
        )));
    }
    Ok((b, h, w))
}

impl LayerImage {
    pub fn new(rgb: Tensor, alpha: Tensor) -> Result<Self> {
        let layer = Self::new_unchecked_range(rgb, alpha)?;
        check_unit_range(&layer.rgb, "layer rgb")?;
        check_unit_range(&layer.alpha, "layer alpha")?;
        Ok(layer)
    }

    /// Validates shapes only.
    pub(crate) fn new_unchecked_range(rgb: Tensor, alpha: Tensor) -> Result<Self> {
        let extents = check_channels(&rgb, 3, "layer rgb")?;
        let alpha_extents = check_channels(&alpha, 1, "layer alpha")?;
        if extents != alpha_extents {
            return Err(CganError::Dimension(format!(
                "rgb {:?} and alpha {:?} extents differ",
                rgb.shape(),
                alpha.shape()
            )));
        }
        Ok(LayerImage { rgb, alpha })
    }

    /// Splits a `[B, 4, H, W]` tensor into rgb and alpha.
    pub fn from_rgba(rgba: &Tensor) -> Result<Self> {
        let (b, h, w) = check_channels(rgba, 4, "rgba layer")?;
        let plane = h * w;
        let mut rgb = Vec::with_capacity(b * 3 * plane);
        let mut alpha = Vec::with_capacity(b * plane);
        for item in 0..b {
            let src = rgba.item(item);
            rgb.extend_from_slice(&src[..3 * plane]);
            alpha.extend_from_slice(&src[3 * plane..]);
        }
        Self::new(
            Tensor::new(&[b, 3, h, w], rgb)?,
            Tensor::new(&[b, 1, h, w], alpha)?,
        )
    }

    pub fn to_rgba(&self) -> Tensor {
        let (b, h, w) = self.extents();
        let plane = h * w;
        let mut data = Vec::with_capacity(b * 4 * plane);
        for item in 0..b {
            data.extend_from_slice(self.rgb.item(item));
            data.extend_from_slice(self.alpha.item(item));
        }
        Tensor::new(&[b, 4, h, w], data).unwrap()
    }

    pub fn rgb(&self) -> &Tensor {
        &self.rgb
    }

    pub fn alpha(&self) -> &Tensor {
        &self.alpha
    }

    /// (batch, height, width)
    pub fn extents(&self) -> (usize, usize, usize) {
        let s = self.rgb.shape();
        (s[0], s[2], s[3])
    }

    /// One batch item as its own single-item layer.
    pub fn item(&self, index: usize) -> LayerImage {
        LayerImage {
            rgb: self.rgb.gather(&[index]),
            alpha: self.alpha.gather(&[index]),
        }
    }
}

impl Composite {
    pub fn new(rgb: Tensor) -> Result<Self> {
        check_channels(&rgb, 3, "composite")?;
        check_unit_range(&rgb, "composite")?;
        Ok(Composite { rgb })
    }

    pub(crate) fn new_unchecked_range(rgb: Tensor) -> Result<Self> {
        check_channels(&rgb, 3, "composite")?;
        Ok(Composite { rgb })
    }

    pub fn rgb(&self) -> &Tensor {
        &self.rgb
    }

    pub fn into_rgb(self) -> Tensor {
        self.rgb
    }

    pub fn extents(&self) -> (usize, usize, usize) {
        let s = self.rgb.shape();
        (s[0], s[2], s[3])
    }

    pub fn item(&self, index: usize) -> Composite {
        Composite {
            rgb: self.rgb.gather(&[index]),
        }
    }

    /// Views the composite as a layer with alpha ≡ 1.
    pub fn as_opaque_layer(&self) -> LayerImage {
        let (b, h, w) = self.extents();
        LayerImage {
            rgb: self.rgb.clone(),
            alpha: Tensor::full(&[b, 1, h, w], 1.0),
        }
    }
}

fn same_extents(a: (usize, usize, usize), b: (usize, usize, usize)) -> Result<()> {
    if a != b {
        return Err(CganError::Dimension(format!(
            "(batch, height, width) {a:?} vs {b:?}"
        )));
    }
    Ok(())
}

/// Covers `prev` with `next`, carrying `prev`'s own alpha. The result is opaque.
pub fn blend_translucent(prev: &LayerImage, next: &LayerImage) -> Result<LayerImage> {
    same_extents(prev.extents(), next.extents())?;
    let (b, h, w) = prev.extents();
    let plane = h * w;
    let mut rgb = Tensor::zeros(prev.rgb.shape());
    for item in 0..b {
        let (pa, na) = (prev.alpha.item(item), next.alpha.item(item));
        let (pr, nr) = (prev.rgb.item(item), next.rgb.item(item));
        let out = &mut rgb.data_mut()[item * 3 * plane..][..3 * plane];
        for (i, o) in out.iter_mut().enumerate() {
            let p = i % plane;
            *o = pr[i] * pa[p] * (1.0 - na[p]) + nr[i] * na[p];
        }
    }
    Ok(LayerImage {
        rgb,
        alpha: Tensor::full(&[b, 1, h, w], 1.0),
    })
}

/// The first layer over a black background: `rgb * alpha`.
pub fn compose_first(first: &LayerImage) -> Composite {
    let (b, h, w) = first.extents();
    let plane = h * w;
    let mut rgb = first.rgb.clone();
    for item in 0..b {
        let a = first.alpha.item(item);
        for (i, v) in rgb.data_mut()[item * 3 * plane..][..3 * plane].iter_mut().enumerate() {
            *v *= a[i % plane];
        }
    }
    Composite { rgb }
}

/// `prev * (1 - next.alpha) + next.rgb * next.alpha`
pub fn blend_step(prev: &Composite, next: &LayerImage) -> Result<Composite> {
    same_extents(prev.extents(), next.extents())?;
    let (b, h, w) = prev.extents();
    let plane = h * w;
    let mut rgb = prev.rgb.clone();
    for item in 0..b {
        let a = next.alpha.item(item);
        let nr = next.rgb.item(item);
        for (i, v) in rgb.data_mut()[item * 3 * plane..][..3 * plane].iter_mut().enumerate() {
            let ai = a[i % plane];
            *v = *v * (1.0 - ai) + nr[i] * ai;
        }
    }
    Ok(Composite { rgb })
}

/// The final composite and every intermediate `O(1)..O(n)`; the last
/// intermediate equals the final image.
#[derive(Clone, Debug)]
pub struct Stack {
    pub intermediates: Vec<Composite>,
}

impl Stack {
    pub fn final_image(&self) -> &Composite {
        self.intermediates.last().expect("stack is never empty")
    }
}

pub fn compose_stack(layers: &[LayerImage]) -> Result<Stack> {
    let (first, rest) = layers
        .split_first()
        .ok_or_else(|| CganError::Argument("compose_stack needs at least one layer".into()))?;
    let mut intermediates = Vec::with_capacity(layers.len());
    intermediates.push(compose_first(first));
    for layer in rest {
        let next = blend_step(intermediates.last().unwrap(), layer)?;
        intermediates.push(next);
    }
    Ok(Stack { intermediates })
}

pub mod graph {
    //! Compositing recorded on a tape.

    use crate::autograd::{Tape, Var};

    /// A layer on the tape: `rgb` is `[B,3,H,W]`, `alpha` is `[B,1,H,W]`.
    #[derive(Clone, Copy, Debug)]
    pub struct LayerVars {
        pub rgb: Var,
        pub alpha: Var,
    }

    pub fn compose_first(tape: &mut Tape, first: LayerVars) -> Var {
        tape.mul_broadcast(first.rgb, first.alpha)
    }

    pub fn blend_step(tape: &mut Tape, prev: Var, next: LayerVars) -> Var {
        let keep = tape.one_minus(next.alpha);
        let kept = tape.mul_broadcast(prev, keep);
        let cover = tape.mul_broadcast(next.rgb, next.alpha);
        tape.add(kept, cover)
    }

    /// Returns all intermediates; the last one is the final composite.
    pub fn compose_stack(tape: &mut Tape, layers: &[LayerVars]) -> Vec<Var> {
        assert!(!layers.is_empty(), "compose_stack needs at least one layer");
        let mut out = Vec::with_capacity(layers.len());
        out.push(compose_first(tape, layers[0]));
        for &layer in &layers[1..] {
            let next = blend_step(tape, *out.last().unwrap(), layer);
            out.push(next);
        }
        out
    }
}
