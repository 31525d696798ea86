//! Multi-head self-attention and the post-norm encoder stack shared by the
//! time encoder and the latent entity attention.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::layers::{Linear, Norm};
use crate::params::ParamStore;
use crate::{Error, Result};

/// Scaled dot-product attention with `heads` heads over `[B, S, D]`.
///
/// The key projection carries no bias: a bias on keys shifts every logit in
/// a row equally and so never reaches the output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub width: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "width {width} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{prefix}.q"), width, width, true, rng)?,
            key: Linear::new(store, &format!("{prefix}.k"), width, width, false, rng)?,
            value: Linear::new(store, &format!("{prefix}.v"), width, width, true, rng)?,
            output: Linear::new(store, &format!("{prefix}.o"), width, width, true, rng)?,
            heads,
            width,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        key_valid: Option<&[bool]>,
    ) -> Result<Var> {
        self.forward_with_weights(g, store, x, key_valid).map(|(y, _)| y)
    }

    /// Also returns the attention weights `[B, h, S, S]`. `key_valid` has one
    /// flag per `(batch, position)`.
    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        key_valid: Option<&[bool]>,
    ) -> Result<(Var, Var)> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.width {
            return Err(Error::Shape {
                op: "multi_head_attention",
                lhs: shape,
                rhs: alloc::vec![self.width],
            });
        }
        let (b, s, h) = (shape[0], shape[1], self.heads);
        let dh = self.width / h;

        let split = |g: &mut Graph, v: Var| -> Result<Var> {
            let v = g.reshape(v, &[b, s, h, dh])?;
            g.permute(v, &[0, 2, 1, 3])
        };
        let q = self.query.forward(g, store, x)?;
        let q = split(g, q)?;
        let k = self.key.forward(g, store, x)?;
        let k = split(g, k)?;
        let v = self.value.forward(g, store, x)?;
        let v = split(g, v)?;

        let kt = g.transpose_last2(k)?;
        let logits = g.matmul(q, kt)?;
        let logits = g.scale(logits, 1.0 / crate::math::sqrt(dh as f64));
        let mask = match key_valid {
            Some(kv) => {
                if kv.len() != b * s {
                    return Err(Error::LengthMismatch {
                        left: kv.len(),
                        right: b * s,
                    });
                }
                let mut m = Vec::with_capacity(b * h * s * s);
                for bi in 0..b {
                    let row = &kv[bi * s..(bi + 1) * s];
                    for _ in 0..h * s {
                        m.extend_from_slice(row);
                    }
                }
                Some(m)
            }
            None => None,
        };
        let weights = g.softmax(logits, mask.as_deref())?;
        let ctx = g.matmul(weights, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, s, self.width])?;
        let out = self.output.forward(g, store, ctx)?;
        Ok((out, weights))
    }
}

/// Optional position-wise sublayer: `Linear(D, 4D) -> GELU -> Linear(4D, D)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
    pub norm: Norm,
}

/// `x <- LN(x + MHA(x))`, optionally followed by `x <- LN(x + FFN(x))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub norm: Norm,
    pub ffn: Option<FeedForward>,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        heads: usize,
        feed_forward: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let attn = MultiHeadAttention::new(store, prefix, width, heads, rng)?;
        let norm = Norm::new(store, &format!("{prefix}.ln"), width)?;
        let ffn = if feed_forward {
            Some(FeedForward {
                up: Linear::new(store, &format!("{prefix}.ff1"), width, 4 * width, true, rng)?,
                down: Linear::new(store, &format!("{prefix}.ff2"), 4 * width, width, true, rng)?,
                norm: Norm::new(store, &format!("{prefix}.ln2"), width)?,
            })
        } else {
            None
        };
        Ok(Self { attn, norm, ffn })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        key_valid: Option<&[bool]>,
    ) -> Result<Var> {
        let a = self.attn.forward(g, store, x, key_valid)?;
        let x = g.add(x, a)?;
        let mut x = self.norm.forward(g, store, x)?;
        if let Some(ff) = &self.ffn {
            let h = ff.up.forward(g, store, x)?;
            let h = g.gelu(h);
            let h = ff.down.forward(g, store, h)?;
            let y = g.add(x, h)?;
            x = ff.norm.forward(g, store, y)?;
        }
        Ok(x)
    }
}

/// A stack of encoder layers; an empty stack is the identity.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
}

impl Encoder {
    /// Layers are named `{prefix}.{i}`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        depth: usize,
        width: usize,
        heads: usize,
        feed_forward: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| EncoderLayer::new(store, &format!("{prefix}.{i}"), width, heads, feed_forward, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mut x: Var,
        key_valid: Option<&[bool]>,
    ) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(g, store, x, key_valid)?;
        }
        Ok(x)
    }
}
