//! Parameterised layers shared by the models. Each layer only stores the
//! ids of its tensors; the tensors themselves live in a `ParamStore`.

use digitwin_autodiff::{Bindings, Float, Graph, Init, ParamId, ParamStore, Tensor, Var};

use crate::error::{ModelError, Result};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Float>(store: &mut ParamStore<T>, init: &mut Init, name: &str, d_in: usize, d_out: usize) -> Self {
        Self::with_std(store, init, name, d_in, d_out, INIT_STD)
    }

    pub fn with_std<T: Float>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), init.trunc_normal(&[d_in, d_out], std));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(vec![d_out]));
        Self { w, b, d_in, d_out }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.w])?;
        Ok(g.add_broadcast(y, p[self.b])?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(vec![dim])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![dim])),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<Var> {
        Ok(g.layer_norm(x, p[self.gain], p[self.bias], T::from_f64(LN_EPS))?)
    }
}

/// Multi-head self-attention. The inner width `heads × head_dim` may differ
/// from the model width.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
    pub head_dim: usize,
}

impl Attention {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        width: usize,
        heads: usize,
        head_dim: usize,
    ) -> Self {
        let inner = heads * head_dim;
        Self {
            qkv: Linear::new(store, init, &format!("{name}.qkv"), width, 3 * inner),
            out: Linear::new(store, init, &format!("{name}.proj"), inner, width),
            heads,
            head_dim,
        }
    }

    /// `x: [B, T, D]` -> (output `[B, T, D]`, attention weights `[B·H, T, T]`).
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<(Var, Var)> {
        let s = g.shape(x).to_vec();
        let (b, t) = (s[0], s[1]);
        let (h, dh) = (self.heads, self.head_dim);
        let qkv = self.qkv.forward(g, p, x)?;
        let qkv = g.reshape(qkv, vec![b, t, 3, h, dh])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut parts = [qkv; 3];
        for (i, part) in parts.iter_mut().enumerate() {
            let one = g.narrow(qkv, 0, i, 1)?;
            *part = g.reshape(one, vec![b * h, t, dh])?;
        }
        let [q, k, v] = parts;
        let scores = g.bmm(q, k, false, true)?;
        let scores = g.scale(scores, T::from_f64(1.0 / (dh as f64).sqrt()));
        let attn = g.softmax(scores);
        let ctx = g.bmm(attn, v, false, false)?;
        let ctx = g.reshape(ctx, vec![b, h, t, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, vec![b, t, h * dh])?;
        Ok((self.out.forward(g, p, ctx)?, attn))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Float>(store: &mut ParamStore<T>, init: &mut Init, name: &str, width: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(store, init, &format!("{name}.fc1"), width, hidden),
            fc2: Linear::new(store, init, &format!("{name}.fc2"), hidden, width),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, p, h)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Copy, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockShape {
    pub width: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub mlp_hidden: usize,
}

impl Block {
    pub fn new<T: Float>(store: &mut ParamStore<T>, init: &mut Init, name: &str, shape: BlockShape) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), shape.width),
            attn: Attention::new(
                store,
                init,
                &format!("{name}.attn"),
                shape.width,
                shape.heads,
                shape.head_dim,
            ),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), shape.width),
            mlp: Mlp::new(store, init, &format!("{name}.mlp"), shape.width, shape.mlp_hidden),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<(Var, Var)> {
        let h = self.ln1.forward(g, p, x)?;
        let (a, attn) = self.attn.forward(g, p, h)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, p, x)?;
        let m = self.mlp.forward(g, p, h)?;
        Ok((g.add(x, m)?, attn))
    }
}

/// Runs a stack of blocks, checking every output for non-finite values.
/// Returns the final activations and each block's attention weights.
pub fn run_blocks<T: Float>(
    g: &mut Graph<T>,
    p: &Bindings,
    blocks: &[Block],
    mut x: Var,
    prefix: &str,
) -> Result<(Var, Vec<Var>)> {
    let mut attns = Vec::with_capacity(blocks.len());
    for (i, blk) in blocks.iter().enumerate() {
        let (y, a) = blk.forward(g, p, x)?;
        ensure_finite(g, y, || format!("{prefix} block {i}"))?;
        attns.push(a);
        x = y;
    }
    Ok((x, attns))
}

pub fn ensure_finite<T: Float>(g: &Graph<T>, v: Var, layer: impl FnOnce() -> String) -> Result<()> {
    if g.is_finite(v) {
        Ok(())
    } else {
        Err(ModelError::NonFinite { layer: layer() })
    }
}

/// Linear → ReLU → Linear, followed by L2 normalisation of the output.
#[derive(Clone, Copy, Debug)]
pub struct ProjectionHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub const NORM_EPS: f64 = 1e-12;

impl ProjectionHead {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
    ) -> Self {
        Self {
            fc1: Linear::new(store, init, &format!("{name}.fc1"), d_in, hidden),
            fc2: Linear::new(store, init, &format!("{name}.fc2"), hidden, d_out),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.relu(h);
        let z = self.fc2.forward(g, p, h)?;
        ensure_finite(g, z, || "projection head".into())?;
        Ok(g.l2_normalize(z, T::from_f64(NORM_EPS)))
    }
}
