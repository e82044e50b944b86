//! Transformer building blocks shared by the partition transformer and the
//! masked-diffusion baseline. All blocks are pre-norm residual blocks.

use std::sync::Arc;

use rand::{Rng, RngCore};

use crate::autodiff::{AttnLayout, Tape, Var};
use crate::params::{trunc_normal, ParamId, ParamStore, INIT_STD};
use crate::tensor::Matrix;

/// Feed-forward hidden width as a multiple of the model width.
pub const FFN_EXPANSION: usize = 4;

/// Dropout state for one forward pass. Inactive when `rng` is `None`.
pub struct Dropout<'a> {
    rate: f64,
    rng: Option<&'a mut dyn RngCore>,
}

impl<'a> Dropout<'a> {
    pub fn off() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, rng: &'a mut dyn RngCore) -> Self {
        Self {
            rate,
            rng: Some(rng),
        }
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => tape.dropout(x, self.rate, rng),
            _ => x,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), trunc_normal(rng, d_in, d_out, INIT_STD));
        let b = bias.then(|| store.add(format!("{name}.bias"), Matrix::zeros(1, d_out)));
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = self.b.map(|b| tape.param(store, b));
        tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Matrix::filled(1, dim, 1.0)),
            bias: store.add(format!("{name}.bias"), Matrix::zeros(1, dim)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, Some((g, b)))
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    norm: LayerNorm,
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            up: Linear::new(store, rng, &format!("{name}.up"), dim, FFN_EXPANSION * dim, true),
            down: Linear::new(store, rng, &format!("{name}.down"), FFN_EXPANSION * dim, dim, true),
        }
    }

    /// `x + FFN(LN(x))`
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, drop: &mut Dropout) -> Var {
        let h = self.norm.forward(tape, store, x);
        let h = self.up.forward(tape, store, h);
        let h = tape.gelu(h);
        let h = self.down.forward(tape, store, h);
        let h = drop.apply(tape, h);
        tape.add(x, h)
    }
}

/// Multi-head attention sublayer with rotary embeddings on queries and keys.
#[derive(Clone, Debug)]
pub struct Attention {
    norm: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    n_heads: usize,
}

/// Rows of the key/value side of a cross-attention call.
pub struct KeySource {
    pub x: Var,
    pub positions: Arc<Vec<usize>>,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        n_heads: usize,
    ) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim, true),
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim, true),
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim, true),
            o: Linear::new(store, rng, &format!("{name}.o"), dim, dim, true),
            n_heads,
        }
    }

    /// `x + Attn(LN(x), LN(x))`
    pub fn self_attend(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        positions: &Arc<Vec<usize>>,
        layout: &Arc<AttnLayout>,
        drop: &mut Dropout,
    ) -> Var {
        let h = self.norm.forward(tape, store, x);
        let src = KeySource {
            x: h,
            positions: positions.clone(),
        };
        let a = self.attend(tape, store, h, positions, &src, layout);
        let a = drop.apply(tape, a);
        tape.add(x, a)
    }

    /// `x + Attn(LN(x), keys)`; `keys.x` is used as-is (already normalised).
    #[allow(clippy::too_many_arguments)]
    pub fn cross_attend(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        positions: &Arc<Vec<usize>>,
        keys: &KeySource,
        layout: &Arc<AttnLayout>,
        drop: &mut Dropout,
    ) -> Var {
        let h = self.norm.forward(tape, store, x);
        let a = self.attend(tape, store, h, positions, keys, layout);
        let a = drop.apply(tape, a);
        tape.add(x, a)
    }

    fn attend(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        positions: &Arc<Vec<usize>>,
        keys: &KeySource,
        layout: &Arc<AttnLayout>,
    ) -> Var {
        let q = self.q.forward(tape, store, h);
        let q = tape.rope(q, positions.clone(), self.n_heads);
        let k = self.k.forward(tape, store, keys.x);
        let k = tape.rope(k, keys.positions.clone(), self.n_heads);
        let v = self.v.forward(tape, store, keys.x);
        let a = tape.attention(q, k, v, layout.clone());
        self.o.forward(tape, store, a)
    }
}
