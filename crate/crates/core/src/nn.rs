//! Parameter storage, layer builders, deterministic initialization, and
//! the adaptive-moment optimizer.
//!
//! Models keep their weights in a [`ParamStore`] and bind them onto a fresh
//! tape per forward pass, so the same parameters can be bound trainable
//! during optimization and frozen (constant, zero gradient by construction)
//! everywhere else.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Grads, Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Handle to one named array inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named, insertion-ordered collection of weight arrays.
#[derive(Clone)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            trainable: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(true);
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

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) {
        assert_eq!(
            self.values[id.0].shape(),
            value.shape(),
            "parameter {} shape change",
            self.names[id.0]
        );
        self.values[id.0] = value;
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    /// Total number of scalar weights.
    pub fn param_count(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    /// Binds every entry onto the tape in insertion order. With
    /// `trainable = false` all entries become constants regardless of
    /// their per-entry flag.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bindings {
        let vars = self
            .values
            .iter()
            .zip(self.trainable.iter())
            .map(|(v, &t)| tape.leaf(v.clone(), trainable && t))
            .collect();
        Bindings { vars }
    }

    /// Pulls this store's gradients out of a backward result, ordered to
    /// match the store.
    pub fn collect_grads(&self, bound: &Bindings, grads: &mut Grads<T>) -> Vec<Option<Tensor<T>>> {
        bound.vars.iter().map(|&v| grads.take(v)).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for ((name, value), &t) in self.iter().zip(self.trainable.iter()) {
            let id = out.add(
                name,
                Tensor::from_fn(value.shape().to_vec(), |i| U::of_f64(value.data()[i].as_f64())),
            );
            out.set_trainable(id, t);
        }
        out
    }
}

/// Tape variables for a bound [`ParamStore`].
pub struct Bindings {
    vars: Vec<Var>,
}

impl Bindings {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a stream of tags into one well-spread seed.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut state = seed;
    let mut acc = splitmix64(&mut state);
    for &t in tags {
        state ^= t;
        acc ^= splitmix64(&mut state);
    }
    acc
}

/// Deterministic generator for a (seed, tags) stream.
pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(seed, tags))
}

/// Normal(0, std) initialization drawn in f64.
pub fn normal_init<T: Scalar>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of_f64(std * rng.sample::<f64, _>(StandardNormal)))
}

/// Fully connected layer; weight is `[in_dim, out_dim]`, inputs are rows.
#[derive(Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), normal_init([in_dim, out_dim], std, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros([out_dim]));
        Self { w, b, in_dim, out_dim }
    }

    /// Zero weight and bias; the layer outputs exactly zero until trained.
    pub fn init_zero<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros([in_dim, out_dim]));
        let b = store.add(format!("{name}.b"), Tensor::zeros([out_dim]));
        Self { w, b, in_dim, out_dim }
    }

    /// `x: [.., in_dim] -> [.., out_dim]`; leading axes are flattened into
    /// rows for the product and restored afterwards.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bindings, x: Var) -> Var {
        let lead: Vec<usize> = {
            let shape = tape.value(x).shape();
            shape[..shape.len() - 1].to_vec()
        };
        let rows: usize = lead.iter().product();
        let flat = if lead.len() == 1 { x } else { tape.reshape(x, vec![rows, self.in_dim]) };
        let h = tape.matmul(flat, bound.var(self.w));
        let h = tape.add_bias_rows(h, bound.var(self.b));
        if lead.len() == 1 {
            h
        } else {
            let mut out_shape = lead;
            out_shape.push(self.out_dim);
            tape.reshape(h, out_shape)
        }
    }
}

/// 3x3-style convolution layer with bias.
#[derive(Clone, Copy)]
pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let w = store.add(format!("{name}.w"), normal_init([cout, cin, k, k], std, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros([cout]));
        Self { w, b, stride, pad }
    }

    pub fn init_zero<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros([cout, cin, k, k]));
        let b = store.add(format!("{name}.b"), Tensor::zeros([cout]));
        Self { w, b, stride, pad }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bindings, x: Var) -> Var {
        let h = tape.conv2d(x, bound.var(self.w), self.stride, self.pad);
        tape.add_bias_channels(h, bound.var(self.b))
    }
}

/// Sinusoidal features for diffusion step indices: `[cos(t f), sin(t f)]`
/// with log-spaced frequencies, max period 10000.
pub fn timestep_features<T: Scalar>(steps: &[f64], dim: usize) -> Tensor<T> {
    assert!(dim >= 2 && dim % 2 == 0, "feature dim must be even");
    let half = dim / 2;
    let ln_max = 10_000f64.ln();
    let mut out = vec![T::zero(); steps.len() * dim];
    for (i, &t) in steps.iter().enumerate() {
        for k in 0..half {
            let freq = (-ln_max * k as f64 / half as f64).exp();
            let arg = t * freq;
            out[i * dim + k] = T::of_f64(arg.cos());
            out[i * dim + half + k] = T::of_f64(arg.sin());
        }
    }
    Tensor::new(vec![steps.len(), dim], out)
}

fn sincos_1d(pos: f64, dim: usize, out: &mut [f64]) {
    let half = dim / 2;
    for k in 0..half {
        let omega = 1.0 / 10_000f64.powf(k as f64 / half as f64);
        out[k] = (pos * omega).sin();
        out[half + k] = (pos * omega).cos();
    }
}

/// Fixed 2-D sinusoidal position features over a `gh x gw` token grid,
/// row-major tokens, width split evenly between the two axes.
pub fn pos_embed_2d<T: Scalar>(gh: usize, gw: usize, dim: usize) -> Tensor<T> {
    assert!(dim % 4 == 0, "position feature width must be divisible by 4");
    let half = dim / 2;
    let mut row = vec![0.0f64; dim];
    let mut out = vec![T::zero(); gh * gw * dim];
    for i in 0..gh {
        for j in 0..gw {
            sincos_1d(i as f64, half, &mut row[..half]);
            sincos_1d(j as f64, half, &mut row[half..]);
            let base = (i * gw + j) * dim;
            for (k, &v) in row.iter().enumerate() {
                out[base + k] = T::of_f64(v);
            }
        }
    }
    Tensor::new(vec![gh * gw, dim], out)
}

/// One optimizer parameter group: a store plus its gradients for this step.
pub struct AdamGroup<'a, T: Scalar> {
    pub store: &'a mut ParamStore<T>,
    pub grads: Vec<Option<Tensor<T>>>,
}

/// Adaptive moment estimation with optional global gradient-norm clipping.
/// Moment buffers are kept in f64; parameters without a gradient in a given
/// step are left untouched.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    group_sizes: Vec<usize>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            moments: Vec::new(),
            group_sizes: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step_count
    }

    /// Applies one update across all groups. Returns the pre-clip global
    /// gradient norm.
    pub fn step<T: Scalar>(&mut self, groups: &mut [AdamGroup<'_, T>], clip: Option<f64>) -> f64 {
        if self.group_sizes.is_empty() {
            self.group_sizes = groups.iter().map(|g| g.store.len()).collect();
            let total: usize = self.group_sizes.iter().sum();
            self.moments = (0..total).map(|_| None).collect();
        }
        assert_eq!(self.group_sizes.len(), groups.len(), "optimizer group count changed");
        for (g, &n) in groups.iter().zip(self.group_sizes.iter()) {
            assert_eq!(g.store.len(), n, "optimizer group size changed");
            assert_eq!(g.grads.len(), n, "gradient list does not match store");
        }

        let mut sq = 0.0f64;
        for g in groups.iter() {
            for grad in g.grads.iter().flatten() {
                for &x in grad.data() {
                    let v = x.as_f64();
                    sq += v * v;
                }
            }
        }
        let norm = sq.sqrt();
        let factor = match clip {
            Some(c) if norm > c && norm > 0.0 => c / norm,
            _ => 1.0,
        };

        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);

        let mut slot = 0usize;
        for g in groups.iter_mut() {
            for (i, grad) in g.grads.iter().enumerate() {
                let id = ParamId(i);
                if let Some(grad) = grad {
                    let numel = g.store.get(id).numel();
                    assert_eq!(grad.numel(), numel, "gradient shape mismatch");
                    let (m, v) = self.moments[slot + i]
                        .get_or_insert_with(|| (vec![0.0; numel], vec![0.0; numel]));
                    let mut p = g.store.get(id).clone();
                    let pd = p.data_mut();
                    for e in 0..numel {
                        let ge = grad.data()[e].as_f64() * factor;
                        m[e] = self.beta1 * m[e] + (1.0 - self.beta1) * ge;
                        v[e] = self.beta2 * v[e] + (1.0 - self.beta2) * ge * ge;
                        let mh = m[e] / bc1;
                        let vh = v[e] / bc2;
                        pd[e] = T::of_f64(pd[e].as_f64() - self.lr * mh / (vh.sqrt() + self.eps));
                    }
                    g.store.set(id, p);
                }
            }
            slot += g.store.len();
        }
        norm
    }
}
