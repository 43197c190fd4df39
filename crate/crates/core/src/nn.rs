//! Parameterized layers built from tape ops.

use rand::Rng;

use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::tape::{Mask, Tape, Var};
use crate::tensor::Tensor;

/// Xavier-uniform `[fan_in, fan_out]` weight.
pub fn xavier<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(&[fan_in, fan_out], -a, a, rng)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        frozen: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(in_dim, out_dim, rng), frozen);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]), frozen);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// All-zero weight and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, frozen: bool) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[in_dim, out_dim]), frozen);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]), frozen);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, frozen: bool) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0), frozen);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), frozen);
        Self {
            gamma,
            beta,
            eps: 1e-6,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, self.eps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

/// Stack of linear layers with an activation between them (not after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub act: Activation,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        act: Activation,
        frozen: bool,
        rng: &mut R,
    ) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], frozen, rng))
            .collect();
        Self { layers, act }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, mut x: Var) -> Result<Var> {
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, store, x)?;
            if i + 1 < n {
                x = match self.act {
                    Activation::Relu => tape.relu(x),
                    Activation::Gelu => tape.gelu(x),
                };
            }
        }
        Ok(x)
    }
}

/// Dense multi-head attention over `[T, d]` token rows.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

/// Per-head attention probabilities, kept when a caller asks for them.
pub type AttentionMaps = Vec<Tensor>;

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        frozen: bool,
        rng: &mut R,
    ) -> Self {
        assert!(dim % heads == 0, "heads must divide dim");
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, frozen, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, frozen, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, frozen, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, frozen, rng),
            heads,
        }
    }

    /// `query`/`key` carry positional terms; `value` does not.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        query: Var,
        key: Var,
        value: Var,
        mask: Option<&Mask>,
        mut maps: Option<&mut AttentionMaps>,
    ) -> Result<Var> {
        let dim = self.q.out_dim;
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.q.forward(tape, store, query)?;
        let k = self.k.forward(tape, store, key)?;
        let v = self.v.forward(tape, store, value)?;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_last(q, h * dh, dh)?;
            let kh = tape.slice_last(k, h * dh, dh)?;
            let vh = tape.slice_last(v, h * dh, dh)?;
            let logits = tape.matmul_nt(qh, kh)?;
            let logits = tape.scale(logits, scale);
            let attn = tape.masked_softmax(logits, mask)?;
            if let Some(m) = maps.as_deref_mut() {
                m.push(tape.value(attn).clone());
            }
            outs.push(tape.matmul(attn, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_last(&outs)?
        };
        self.out.forward(tape, store, cat)
    }
}

/// Sinusoidal embedding of each coordinate in `coords` (`[n, c]`, values
/// in `[0, 1]`), giving `[n, c * feats]`. Differentiable in `coords`.
pub fn sine_embed(tape: &mut Tape, coords: Var, feats: usize) -> Result<Var> {
    assert!(feats % 2 == 0);
    let shape = tape.shape(coords).to_vec();
    let (n, c) = (shape[0], shape[1]);
    let half = feats / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| 2.0 * std::f64::consts::PI / 10000f64.powf(2.0 * i as f64 / feats as f64))
        .collect();
    // [n, c] -> [n, c, 1] * [half] -> [n, c, half]
    let expanded = {
        let idx: Vec<usize> = (0..n * c).flat_map(|i| std::iter::repeat_n(i, half)).collect();
        let flat = tape.reshape(coords, &[n * c, 1])?;
        let rep = tape.gather_rows(flat, &idx)?;
        tape.reshape(rep, &[n, c, half])?
    };
    let f = tape.constant(Tensor::from_vec(freqs));
    let phase = tape.mul(expanded, f)?;
    let s = tape.sin(phase);
    let co = tape.cos(phase);
    let both = tape.concat_last(&[s, co])?;
    tape.reshape(both, &[n, c * feats])
}

/// Fixed 2-D sinusoidal encoding for normalized `(x, y)` centers, `[n, dim]`.
pub fn sine_position_table(centers: &[(f64, f64)], dim: usize) -> Tensor {
    let per = dim / 2;
    let half = per / 2;
    let mut data = Vec::with_capacity(centers.len() * dim);
    for &(x, y) in centers {
        for coord in [y, x] {
            for i in 0..half {
                let f = 2.0 * std::f64::consts::PI / 10000f64.powf(2.0 * i as f64 / per as f64);
                data.push((coord * f).sin());
            }
            for i in 0..half {
                let f = 2.0 * std::f64::consts::PI / 10000f64.powf(2.0 * i as f64 / per as f64);
                data.push((coord * f).cos());
            }
        }
        data.resize(data.len() + dim - 2 * 2 * half, 0.0);
    }
    Tensor::from_parts(vec![centers.len(), dim], data)
}
