//! Parameter storage, initializers, and the neural layers the backbone and
//! capsule stack are built from.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a named tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    /// Stable index of this parameter in its store (creation order).
    pub fn index(&self) -> usize {
        self.0
    }
}

pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Counted and optimized; false for batch-norm running statistics.
    pub trainable: bool,
    /// Weight decay applies (conv and projection weights only).
    pub decay: bool,
}

/// Ordered, name-addressed store of model tensors. Order is creation order,
/// which fixes the optimizer update order and the checkpoint layout.
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool, decay: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
            decay,
        });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.trainable)
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    /// Total trainable scalar count.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }
}

/// Per-forward context: the graph under construction, the parameter store,
/// the train/eval mode, and the dropout RNG stream.
pub struct Fwd<'a, T: Scalar> {
    pub graph: &'a mut Graph<T>,
    pub store: &'a mut ParamStore<T>,
    pub mode: Mode,
    pub rng: Option<&'a mut ChaCha8Rng>,
    /// Bind parameters with `requires_grad`; off for eval and attacks.
    pub param_grads: bool,
    bound: HashMap<usize, Var>,
}

impl<'a, T: Scalar> Fwd<'a, T> {
    pub fn new(
        graph: &'a mut Graph<T>,
        store: &'a mut ParamStore<T>,
        mode: Mode,
        rng: Option<&'a mut ChaCha8Rng>,
        param_grads: bool,
    ) -> Self {
        Fwd {
            graph,
            store,
            mode,
            rng,
            param_grads,
            bound: HashMap::new(),
        }
    }

    /// Binds a parameter into the graph as a leaf, memoized per forward.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id.0) {
            return v;
        }
        let entry = self.store.entry(id);
        let requires = self.param_grads && entry.trainable;
        let v = self.graph.leaf(entry.value.clone(), requires);
        self.bound.insert(id.0, v);
        v
    }

    /// Leaf gradient of a bound parameter after backward.
    pub fn param_grad(&self, id: ParamId) -> Option<Tensor<T>> {
        self.bound.get(&id.0).and_then(|&v| self.graph.grad(v))
    }

    /// The (parameter, leaf) pairs bound during this forward.
    pub fn into_bindings(self) -> Vec<(ParamId, Var)> {
        let mut out: Vec<(ParamId, Var)> = self.bound.into_iter().map(|(i, v)| (ParamId(i), v)).collect();
        out.sort_by_key(|(id, _)| id.0);
        out
    }
}

// ── initializers ─────────────────────────────────────────────────────────

/// Xavier normal: std = sqrt(2 / (fan_in + fan_out)).
pub fn init_xavier_normal<T: Scalar>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::Contract("xavier init: zero fan".into()));
    }
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    normal_tensor(shape, std, rng)
}

/// Kaiming normal: std = sqrt(2 / fan_in).
pub fn init_kaiming<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    if fan_in == 0 {
        return Err(Error::Contract("kaiming init: zero fan".into()));
    }
    let std = (2.0 / fan_in as f64).sqrt();
    normal_tensor(shape, std, rng)
}

/// Samples are drawn in f64 so the stream is identical across precisions.
fn normal_tensor<T: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    let dist = Normal::new(0.0, std).map_err(|e| Error::Contract(format!("normal init: {e}")))?;
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    XavierNormal,
    Kaiming,
}

// ── layers ───────────────────────────────────────────────────────────────

pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        padding: usize,
        with_bias: bool,
        init: Init,
    ) -> Result<Self> {
        let shape = [out_ch, in_ch, k, k];
        let fan_in = in_ch * k * k;
        let fan_out = out_ch * k * k;
        let w = match init {
            Init::XavierNormal => init_xavier_normal(&shape, fan_in, fan_out, rng)?,
            Init::Kaiming => init_kaiming(&shape, fan_in, rng)?,
        };
        let weight = store.add(format!("{name}.weight"), w, true, true)?;
        let bias = if with_bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]), true, false)?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward<T: Scalar>(&self, fwd: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let w = fwd.param(self.weight);
        let b = self.bias.map(|id| fwd.param(id));
        fwd.graph.conv2d(x, w, b, self.stride, self.padding)
    }
}

pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), true, false)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true, false)?,
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false, false)?,
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&[channels]), false, false)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward<T: Scalar>(&self, fwd: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        match fwd.mode {
            Mode::Train => {
                let gamma = fwd.param(self.gamma);
                let beta = fwd.param(self.beta);
                let eps = T::from_f64(self.eps);
                let (y, stats) = fwd.graph.batch_norm_train(x, gamma, beta, eps)?;
                let mom = T::from_f64(self.momentum);
                let keep = T::one() - mom;
                let rm = fwd.store.get_mut(self.running_mean);
                for (r, &m) in rm.data_mut().iter_mut().zip(&stats.mean) {
                    *r = *r * keep + m * mom;
                }
                let rv = fwd.store.get_mut(self.running_var);
                for (r, &v) in rv.data_mut().iter_mut().zip(&stats.var_unbiased) {
                    *r = *r * keep + v * mom;
                }
                Ok(y)
            }
            Mode::Eval => {
                // y = x * scale + shift with scale/shift folded from the
                // running statistics; cheap and exactly linear for attacks.
                let c = fwd.store.get(self.gamma).numel();
                let gamma = fwd.store.get(self.gamma).data().to_vec();
                let beta = fwd.store.get(self.beta).data().to_vec();
                let rm = fwd.store.get(self.running_mean).data().to_vec();
                let rv = fwd.store.get(self.running_var).data().to_vec();
                let eps = T::from_f64(self.eps);
                let mut scale = vec![T::zero(); c];
                let mut shift = vec![T::zero(); c];
                for i in 0..c {
                    scale[i] = gamma[i] / (rv[i] + eps).sqrt();
                    shift[i] = beta[i] - rm[i] * scale[i];
                }
                let scale = fwd.graph.constant(Tensor::new(vec![1, c, 1, 1], scale)?);
                let shift = fwd.graph.constant(Tensor::new(vec![1, c, 1, 1], shift)?);
                let scaled = fwd.graph.mul(x, scale)?;
                fwd.graph.add(scaled, shift)
            }
        }
    }
}

pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim]), true, false)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), true, false)?,
            eps: 1e-5,
        })
    }

    pub fn forward<T: Scalar>(&self, fwd: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let gamma = fwd.param(self.gamma);
        let beta = fwd.param(self.beta);
        fwd.graph.layer_norm(x, gamma, beta, T::from_f64(self.eps))
    }
}

/// Inverted dropout: zero with probability `rate`, scale survivors by 1/(1-rate).
pub fn dropout<T: Scalar>(fwd: &mut Fwd<'_, T>, x: Var, rate: f64) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Contract(format!("dropout rate {rate} outside [0, 1)")));
    }
    if rate == 0.0 || fwd.mode == Mode::Eval {
        return Ok(x);
    }
    let rng = fwd
        .rng
        .as_deref_mut()
        .ok_or_else(|| Error::Contract("dropout in train mode needs an RNG".into()))?;
    let n = fwd.graph.value(x).numel();
    let shape = fwd.graph.shape(x).to_vec();
    let keep_scale = T::from_f64(1.0 / (1.0 - rate));
    // mask drawn in f64 so the stream is precision-independent
    let mask: Vec<T> = (0..n)
        .map(|_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep_scale
            }
        })
        .collect();
    let mask = fwd.graph.constant(Tensor::new(shape, mask)?);
    fwd.graph.mul(x, mask)
}
