//! Parameter storage and the layers shared by every model component.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter {name}"
        );
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// One gradient buffer per parameter, zero-filled for parameters that did
/// not take part in the forward pass.
#[derive(Clone, Debug)]
pub struct ParamGrads(pub Vec<Vec<f64>>);

/// A captured intermediate map (attention weights, masks) for export.
#[derive(Clone, Debug)]
pub struct Recorded {
    pub label: String,
    pub value: Tensor,
}

/// Forward-pass context: a fresh tape plus lazy binding of stored
/// parameters onto it.
pub struct Ctx<'p> {
    pub tape: Tape,
    params: &'p ParamStore,
    bound: Vec<Option<Var>>,
    track: bool,
    recorded: Option<Vec<Recorded>>,
}

impl<'p> Ctx<'p> {
    /// Parameters are tracked so [`Ctx::backward`] can return their gradients.
    pub fn new(params: &'p ParamStore) -> Self {
        Self::build(params, true)
    }

    /// Parameters enter the tape as constants.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self::build(params, false)
    }

    fn build(params: &'p ParamStore, track: bool) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            track,
            recorded: None,
        }
    }

    pub fn with_recording(mut self) -> Self {
        self.recorded = Some(Vec::new());
        self
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.params.get(id).clone(), self.track);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.tape.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub fn is_recording(&self) -> bool {
        self.recorded.is_some()
    }

    /// Keeps a copy of `v` under `label` when recording is enabled.
    pub fn record(&mut self, label: impl Into<String>, v: Var) {
        if let Some(rec) = self.recorded.as_mut() {
            rec.push(Recorded {
                label: label.into(),
                value: self.tape.value(v).clone(),
            });
        }
    }

    pub fn take_recorded(&mut self) -> Vec<Recorded> {
        self.recorded.take().unwrap_or_default()
    }

    /// Back-propagates `loss` and collects per-parameter gradients.
    pub fn backward(self, loss: Var) -> Result<ParamGrads> {
        Ok(self.backward_with_inputs(loss, &[])?.0)
    }

    /// As [`Ctx::backward`], also returning the gradients of `inputs`
    /// (zeros where unreachable).
    pub fn backward_with_inputs(
        mut self,
        loss: Var,
        inputs: &[Var],
    ) -> Result<(ParamGrads, Vec<Vec<f64>>)> {
        let mut grads: Gradients = self.tape.backward(loss)?;
        let params = self
            .bound
            .iter()
            .zip(self.params.iter())
            .map(|(b, p)| {
                b.and_then(|v| grads.take(v))
                    .unwrap_or_else(|| vec![0.0; p.value.numel()])
            })
            .collect();
        let inputs = inputs
            .iter()
            .map(|&v| {
                grads
                    .take(v)
                    .unwrap_or_else(|| vec![0.0; self.tape.value(v).numel()])
            })
            .collect();
        Ok((ParamGrads(params), inputs))
    }
}

/// Weight initialisation schemes. Biases are always zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    /// `U(−√(1/fan_in), √(1/fan_in))`.
    FanInUniform,
    Zeros,
}

pub fn init_tensor<R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    scheme: InitScheme,
    rng: &mut R,
) -> Tensor {
    match scheme {
        InitScheme::Zeros => Tensor::zeros(shape),
        InitScheme::FanInUniform => {
            let bound = (1.0 / fan_in.max(1) as f64).sqrt();
            Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound))
        }
    }
}

/// Parameter registration helper carrying the RNG, scheme and name prefix.
pub struct Builder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    pub scheme: InitScheme,
    prefix: String,
}

impl<'a, R: Rng> Builder<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R) -> Self {
        Self {
            store,
            rng,
            scheme: InitScheme::FanInUniform,
            prefix: String::new(),
        }
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    /// Runs `f` with `segment` appended to the name prefix.
    pub fn scope<T>(&mut self, segment: impl AsRef<str>, f: impl FnOnce(&mut Self) -> T) -> T {
        let saved = self.prefix.clone();
        self.prefix = self.name(segment.as_ref());
        let out = f(self);
        self.prefix = saved;
        out
    }

    pub fn weight(&mut self, leaf: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let t = init_tensor(shape, fan_in, self.scheme, self.rng);
        let name = self.name(leaf);
        self.store.add(name, t)
    }

    pub fn tensor(&mut self, leaf: &str, value: Tensor) -> ParamId {
        let name = self.name(leaf);
        self.store.add(name, value)
    }

    pub fn zeros(&mut self, leaf: &str, shape: &[usize]) -> ParamId {
        let name = self.name(leaf);
        self.store.add(name, Tensor::zeros(shape))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        b.scope(name, |b| Self {
            weight: b.weight(
                "weight",
                &[c_out, c_in, kernel, kernel],
                c_in * kernel * kernel,
            ),
            bias: b.zeros("bias", &[c_out]),
            c_in,
            c_out,
            kernel,
            stride,
            padding,
        })
    }

    /// Spatial output extent for an input extent, if positive.
    pub fn out_extent(&self, input: usize) -> Option<usize> {
        (input + 2 * self.padding)
            .checked_sub(self.kernel)
            .map(|s| s / self.stride + 1)
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.param(self.weight), ctx.param(self.bias));
        ctx.tape.conv2d(x, w, b, self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose2d {
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        b.scope(name, |b| Self {
            weight: b.weight(
                "weight",
                &[c_in, c_out, kernel, kernel],
                c_out * kernel * kernel,
            ),
            bias: b.zeros("bias", &[c_out]),
            c_in,
            c_out,
            kernel,
            stride,
            padding,
        })
    }

    pub fn out_extent(&self, input: usize) -> usize {
        ((input - 1) * self.stride + self.kernel).saturating_sub(2 * self.padding)
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.param(self.weight), ctx.param(self.bias));
        ctx.tape
            .conv_transpose2d(x, w, b, self.stride, self.padding)
    }
}

/// Affine map on the last axis: `y = x·Wᵀ + b` with `W: [d_out, d_in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, d_in: usize, d_out: usize) -> Self {
        b.scope(name, |b| Self {
            weight: b.weight("weight", &[d_out, d_in], d_in),
            bias: b.zeros("bias", &[d_out]),
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        match shape.last() {
            Some(&d) if d == self.d_in => {}
            _ => {
                return Err(Error::dim(format!(
                    "linear expects last axis {}, got {shape:?}",
                    self.d_in
                )))
            }
        }
        let rows = shape.iter().product::<usize>() / self.d_in;
        let flat = ctx.tape.reshape(x, &[rows, self.d_in])?;
        let w = ctx.param(self.weight);
        let y = ctx.tape.matmul_t(flat, w, false, true)?;
        let b = ctx.param(self.bias);
        let b = ctx.tape.reshape(b, &[1, self.d_out])?;
        let y = ctx.tape.add(y, b)?;
        let mut out_shape = shape;
        *out_shape.last_mut().expect("non-empty") = self.d_out;
        ctx.tape.reshape(y, &out_shape)
    }
}

/// `linear → ReLU → linear`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
    ) -> Self {
        b.scope(name, |b| Self {
            hidden: Linear::new(b, "hidden", d_in, d_hidden),
            output: Linear::new(b, "output", d_hidden, d_out),
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(ctx, x)?;
        let h = ctx.tape.relu(h);
        self.output.forward(ctx, h)
    }
}
