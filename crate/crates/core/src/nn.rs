//! Parameter storage and the small layers every module is built from.
//!
//! Parameters live in a [`ParamStore`] between steps. A forward pass binds
//! them onto a fresh [`Tape`] as tracked leaves ([`ParamStore::bind`]); after
//! the backward sweep [`Bound::grads`] reads their gradients back out in store
//! order.

use std::ops::Index;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::{Tape, Tensor};

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
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-a, a]`.
    Uniform(f64),
    /// Glorot uniform for a `[fan_in x fan_out]` matrix.
    Xavier,
}

#[derive(Clone, Debug)]
pub struct ParamStore {
    params: Vec<Param>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        let n: usize = shape.iter().product();
        let values = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(a) => (0..n).map(|_| self.rng.gen_range(-a..=a)).collect(),
            Init::Xavier => {
                let fan_in = shape.first().copied().unwrap_or(1);
                let fan_out = shape.last().copied().unwrap_or(1);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| self.rng.gen_range(-a..=a)).collect()
            }
        };
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            shape: shape.to_vec(),
            values,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Places every parameter on `tape` as a tracked leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            tensors: self.params.iter().map(|p| tape.leaf(p.values.clone(), &p.shape)).collect(),
        }
    }

    /// Places every parameter on `tape` untracked (inference).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            tensors: self.params.iter().map(|p| tape.constant(p.values.clone(), &p.shape)).collect(),
        }
    }
}

/// Parameters bound onto one tape.
pub struct Bound<'t> {
    tensors: Vec<Tensor<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, id: ParamId) -> Tensor<'t> {
        self.tensors[id.0]
    }

    /// Substitutes `tensor` for a parameter on this tape, e.g. a leaf for a
    /// finite-difference check against one weight.
    pub fn set(&mut self, id: ParamId, tensor: Tensor<'t>) {
        assert_eq!(tensor.shape(), self.tensors[id.0].shape(), "replacement changes the parameter shape");
        self.tensors[id.0] = tensor;
    }

    /// Gradients after a backward sweep, in store order; parameters the loss
    /// never reached get zeros.
    pub fn grads(&self) -> Vec<Vec<f64>> {
        self.tensors
            .iter()
            .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect()
    }
}

impl<'t> Index<ParamId> for Bound<'t> {
    type Output = Tensor<'t>;

    fn index(&self, id: ParamId) -> &Tensor<'t> {
        &self.tensors[id.0]
    }
}

/// `y = x W + b` on `[n x in]` rows.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        Self::with_init(store, name, fan_in, fan_out, bias, Init::Xavier)
    }

    pub fn with_init(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, init: Init) -> Self {
        let weight = store.add(format!("{name}.weight"), &[fan_in, fan_out], init);
        let bias = bias.then(|| store.add(format!("{name}.bias"), &[fan_out], Init::Zeros));
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Tensor<'t>) -> Tensor<'t> {
        let y = x.matmul(p[self.weight]);
        match self.bias {
            Some(b) => y.add_row(p[b]),
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), &[dim], Init::Ones),
            bias: store.add(format!("{name}.bias"), &[dim], Init::Zeros),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Tensor<'t>) -> Tensor<'t> {
        x.layer_norm(p[self.gain], p[self.bias])
    }
}

/// Two-layer GELU feed-forward block.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Self {
        FeedForward {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, true),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, true),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Tensor<'t>) -> Tensor<'t> {
        self.down.forward(p, self.up.forward(p, x).gelu())
    }
}

/// Fixed sinusoidal code for normalized positions in `[0, 1]`.
///
/// The first two channels carry the raw coordinates; the rest alternate
/// sine/cosine pairs at geometrically spaced frequencies.
pub fn position_code(u: f64, v: f64, dim: usize) -> Vec<f64> {
    let mut code = vec![0.0; dim];
    if dim >= 2 {
        code[0] = u - 0.5;
        code[1] = v - 0.5;
    }
    let pairs = (dim.saturating_sub(2)) / 4;
    for k in 0..pairs {
        let freq = std::f64::consts::PI * (1u64 << (k % 6)) as f64;
        let base = 2 + 4 * k;
        code[base] = (freq * u).sin();
        code[base + 1] = (freq * u).cos();
        code[base + 2] = (freq * v).sin();
        code[base + 3] = (freq * v).cos();
    }
    code
}

/// Row-major `[h, w, dim]` table of [`position_code`] at pixel centres.
pub fn position_grid(h: usize, w: usize, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w * dim);
    for y in 0..h {
        for x in 0..w {
            let u = if w > 1 { x as f64 / (w - 1) as f64 } else { 0.5 };
            let v = if h > 1 { y as f64 / (h - 1) as f64 } else { 0.5 };
            out.extend(position_code(u, v, dim));
        }
    }
    out
}
