//! Parameters and layers.
//!
//! Layers only hold [`ParamId`]s. Values live in a [`ParamStore`] and are
//! bound onto a fresh tape for every pass with [`ParamStore::bind`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter on `tape`, trainable or constant.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, T> {
        let vars = self
            .values
            .iter()
            .map(|v| if trainable { tape.var(v.clone()) } else { tape.constant(v.clone()) })
            .collect();
        Bound { tape, vars }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), values: self.values.iter().map(Tensor::cast).collect() }
    }
}

/// Parameters recorded on one tape.
pub struct Bound<'t, T> {
    tape: &'t Tape<T>,
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn get(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }
}

/// Deterministic parameter initialization.
pub struct Init<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Init<'_, T> {
    pub fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> ParamId {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..=bound)));
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f64) -> ParamId {
        self.store.add(name, Tensor::full(shape, T::lit(value)))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Kaiming-uniform style weights scaled by `gain`, zero bias.
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let bound = gain * (3.0 / fan_in).sqrt();
        let weight = init.uniform(format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], bound);
        let bias = Some(init.zeros(format!("{name}.bias"), &[out_ch]));
        Self { weight, bias, in_ch, out_ch, kernel, stride, pad: kernel / 2 }
    }

    pub fn without_bias<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        gain: f64,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let bound = gain * (3.0 / fan_in).sqrt();
        let weight = init.uniform(format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], bound);
        Self { weight, bias: None, in_ch, out_ch, kernel, stride: 1, pad: kernel / 2 }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.conv2d(p.get(self.weight), self.bias.map(|b| p.get(b)), self.stride, self.pad)
    }
}

/// Per-channel normalization over the spatial axes of a `[C, H, W]` map.
pub fn instance_norm<'t, T: Scalar>(x: Var<'t, T>, eps: f64) -> Var<'t, T> {
    let shape = x.shape();
    let (c, hw) = (shape[0], shape[1] * shape[2]);
    let flat = x.reshape(&[c, hw]);
    let centered = flat - flat.mean_axis_keep(1);
    let var = centered.square().mean_axis_keep(1);
    let normed = centered / var.add_scalar(T::lit(eps)).sqrt();
    normed.reshape(&shape)
}
