//! Named parameter storage and the small set of layers the tracker is
//! built from.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
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
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replace every tensor by the same-named entry of `other`.
    ///
    /// Fails with the full list of differences when the two stores do not
    /// describe the same architecture.
    pub fn load_from(&mut self, other: ParamStore) -> Result<()> {
        let mut diffs = Vec::new();
        for (name, t) in self.iter() {
            match other.names.iter().position(|n| n == name) {
                None => diffs.push(format!("missing `{name}`")),
                Some(k) if other.tensors[k].shape() != t.shape() => diffs.push(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    other.tensors[k].shape(),
                    t.shape()
                )),
                Some(_) => {}
            }
        }
        for name in &other.names {
            if !self.names.contains(name) {
                diffs.push(format!("unexpected `{name}`"));
            }
        }
        if !diffs.is_empty() {
            const SHOWN: usize = 3;
            let more = diffs.len().saturating_sub(SHOWN);
            diffs.truncate(SHOWN);
            let tail = if more > 0 { format!(" and {more} more") } else { String::new() };
            return Err(Error::Format(format!(
                "checkpoint does not match the architecture: {}{tail}",
                diffs.join("; ")
            )));
        }
        for (name, t) in other.names.into_iter().zip(other.tensors) {
            let k = self.names.iter().position(|n| *n == name).expect("checked above");
            self.tensors[k] = t;
        }
        Ok(())
    }
}

/// Parameters bound as leaves on one tape.
pub struct Params {
    vars: Vec<Var>,
}

impl Params {
    pub fn bind(tape: &mut Tape, store: &ParamStore) -> Self {
        Params {
            vars: store.tensors.iter().map(|t| tape.param(t.clone())).collect(),
        }
    }

    /// Wrap leaves that are already on the tape, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Params { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients after `backward`, zero-filled for unreached parameters.
    pub fn grads(&self, tape: &mut Tape) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|v| {
                tape.take_grad(*v)
                    .unwrap_or_else(|| Tensor::zeros(tape.shape(*v)))
            })
            .collect()
    }
}

/// Kaiming-uniform draw for a weight with the given fan-in.
pub fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Affine map over rows: `x[N, in] · W[in, out] + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: store.add(format!("{name}.weight"), kaiming_uniform(&[d_in, d_out], d_in, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])),
        }
    }

    /// Both weight and bias start at zero.
    pub fn zeroed(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: store.add(format!("{name}.weight"), Tensor::zeros(&[d_in, d_out])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Params, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.weight))?;
        tape.add_row_bias(y, p.var(self.bias))
    }
}

/// 2D convolution with bias over `[C, H, W]` maps.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = c_in * k * k;
        Conv2d {
            weight: store.add(format!("{name}.weight"), kaiming_uniform(&[c_out, c_in, k, k], fan_in, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])),
            stride,
            padding: (k - 1) / 2,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Params, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, p.var(self.weight), self.stride, self.padding)?;
        tape.add_channel_bias(y, p.var(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[c], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Params, x: Var) -> Result<Var> {
        tape.layer_norm_rows(x, p.var(self.gain), p.var(self.bias))
    }
}

/// Pre-norm residual attention block:
/// `x + W_o · Attn(LN(x + pos_q) W_q, (mem + pos_k) W_k, mem W_v)`.
///
/// The output projection starts at zero, so a fresh block is the identity.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub norm: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl AttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || !c.is_multiple_of(heads) {
            return Err(Error::Config(format!("{heads} heads do not divide {c} channels")));
        }
        Ok(AttentionBlock {
            norm: LayerNorm::new(store, &format!("{name}.norm"), c),
            q: Linear::new(store, &format!("{name}.q"), c, c, rng),
            k: Linear::new(store, &format!("{name}.k"), c, c, rng),
            v: Linear::new(store, &format!("{name}.v"), c, c, rng),
            o: Linear::zeroed(store, &format!("{name}.o"), c, c),
            heads,
        })
    }

    /// Cross-attention from `x` onto `memory`. Positional terms are added to
    /// queries and keys only.
    pub fn cross(
        &self,
        tape: &mut Tape,
        p: &Params,
        x: Var,
        x_pos: Option<Var>,
        memory: Var,
        mem_pos: Option<Var>,
    ) -> Result<Var> {
        let xq = match x_pos {
            Some(pos) => tape.add(x, pos)?,
            None => x,
        };
        let qn = self.norm.forward(tape, p, xq)?;
        let mk = match mem_pos {
            Some(pos) => tape.add(memory, pos)?,
            None => memory,
        };
        self.attend(tape, p, x, qn, mk, memory)
    }

    /// Self-attention over the rows of `x`.
    pub fn self_attend(&self, tape: &mut Tape, p: &Params, x: Var) -> Result<Var> {
        let n = self.norm.forward(tape, p, x)?;
        self.attend(tape, p, x, n, n, n)
    }

    fn attend(&self, tape: &mut Tape, p: &Params, residual: Var, q_in: Var, k_in: Var, v_in: Var) -> Result<Var> {
        let q = self.q.forward(tape, p, q_in)?;
        let k = self.k.forward(tape, p, k_in)?;
        let v = self.v.forward(tape, p, v_in)?;
        let a = tape.attention(q, k, v, self.heads)?;
        let o = self.o.forward(tape, p, a)?;
        tape.add(residual, o)
    }
}

/// Pre-norm residual two-layer MLP with a zero-initialized output layer.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, rng: &mut impl Rng) -> Self {
        FeedForward {
            norm: LayerNorm::new(store, &format!("{name}.norm"), c),
            up: Linear::new(store, &format!("{name}.up"), c, 2 * c, rng),
            down: Linear::zeroed(store, &format!("{name}.down"), 2 * c, c),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Params, x: Var) -> Result<Var> {
        let n = self.norm.forward(tape, p, x)?;
        let h = self.up.forward(tape, p, n)?;
        let h = tape.relu(h);
        let o = self.down.forward(tape, p, h)?;
        tape.add(x, o)
    }
}

/// Fixed 2D sinusoidal encoding `[H·W, C]`: the first half of the channels
/// encodes the row, the second half the column.
pub fn sinusoidal_2d(h: usize, w: usize, c: usize) -> Tensor {
    let half = c / 2;
    let mut data = vec![0.0; h * w * c];
    let enc = |pos: usize, ch: usize, width: usize| -> f64 {
        let pair = (ch / 2) as f64;
        let freq = 1.0 / 100f64.powf(2.0 * pair / width.max(1) as f64);
        let a = pos as f64 * freq;
        if ch.is_multiple_of(2) {
            a.sin()
        } else {
            a.cos()
        }
    };
    for i in 0..h {
        for j in 0..w {
            let row = &mut data[(i * w + j) * c..(i * w + j + 1) * c];
            for ch in 0..half {
                row[ch] = enc(i, ch, half);
            }
            for ch in half..c {
                row[ch] = enc(j, ch - half, c - half);
            }
        }
    }
    Tensor::new(&[h * w, c], data).expect("encoding layout")
}
