//! Dense row-major tensors and the reverse-mode tape that differentiates them.
//!
//! [`Tensor`] is a plain value: a shape and a flat `f64` buffer. Gradient
//! tracking lives on the [`Tape`], which records every operation applied to
//! its [`Var`] handles and replays them backwards once to produce
//! [`Gradients`].

pub(crate) mod kernels;
mod tape;

pub use tape::{ElementwiseOp, Gradients, Tape, Var};

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {numel} elements but {} were given",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::usage(format!(
                "item() on tensor of shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Sample `index` along the leading (batch) axis, keeping a batch axis of 1.
    pub fn batch_item(&self, index: usize) -> Result<Tensor> {
        let b = *self
            .shape
            .first()
            .ok_or_else(|| Error::dim("batch_item on a rank-0 tensor"))?;
        if index >= b {
            return Err(Error::dim(format!("batch index {index} out of {b}")));
        }
        let per = self.numel() / b;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Ok(Tensor {
            shape,
            data: self.data[index * per..(index + 1) * per].to_vec(),
        })
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::usage("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::dim(format!(
                    "stack: {:?} vs {:?}",
                    t.shape, first.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    /// Bilinear resize of the two trailing axes with half-pixel centres and
    /// edge clamping. Leading axes are treated as independent planes.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::dim(format!(
                "resize_bilinear needs rank >= 2, got {:?}",
                self.shape
            )));
        }
        let (h, w) = (self.shape[r - 2], self.shape[r - 1]);
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(Error::dim("resize_bilinear to or from an empty extent"));
        }
        let planes = self.numel() / (h * w);
        let rows = kernels::bilinear_taps(h, out_h);
        let cols = kernels::bilinear_taps(w, out_w);
        let mut out = vec![0.0; planes * out_h * out_w];
        for p in 0..planes {
            let src = &self.data[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (oy, &(y0, y1, ty)) in rows.iter().enumerate() {
                for (ox, &(x0, x1, tx)) in cols.iter().enumerate() {
                    let top = (1.0 - tx) * src[y0 * w + x0] + tx * src[y0 * w + x1];
                    let bot = (1.0 - tx) * src[y1 * w + x0] + tx * src[y1 * w + x1];
                    dst[oy * out_w + ox] = (1.0 - ty) * top + ty * bot;
                }
            }
        }
        let mut shape = self.shape.clone();
        shape[r - 2] = out_h;
        shape[r - 1] = out_w;
        Ok(Tensor { shape, data: out })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
