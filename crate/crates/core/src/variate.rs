//! Cross-variate machinery: prototype diff-attention, latent entity
//! attention, the variate reassembly router and the gated residual.
//!
//! Prototype-space activations are kept as `[P, N*C, D]` (patch-major) so
//! the latent attention can run batched over patches; [`entity_major`]
//! converts to the `[N, C, P, D]` view.

use alloc::vec;

use rand::Rng;

use crate::attention::Encoder;
use crate::autodiff::{Graph, Var};
use crate::layers::{normal_tensor, Linear};
use crate::params::{ParamId, ParamStore};
use crate::preprocess::EntityLayout;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Default initial value of the differential scaling factor.
pub const LAMBDA_INIT: f64 = 0.5;

/// Shared positive/negative prototype keys and the scalar `λ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrototypeBank {
    pub k_pos: ParamId,
    pub k_neg: ParamId,
    pub lambda: ParamId,
    pub prototypes: usize,
}

impl PrototypeBank {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prototypes: usize,
        width: usize,
        lambda_init: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if prototypes == 0 {
            return Err(Error::Config("prototype count must be positive".into()));
        }
        let std = 1.0 / crate::math::sqrt(width as f64);
        Ok(Self {
            k_pos: store.add("upda.k_pos", normal_tensor(&[prototypes, width], std, rng))?,
            k_neg: store.add("upda.k_neg", normal_tensor(&[prototypes, width], std, rng))?,
            lambda: store.add("upda.lambda", Tensor::scalar(lambda_init))?,
            prototypes,
        })
    }

    pub fn lambda_value(&self, store: &ParamStore) -> f64 {
        store.value(self.lambda).data()[0]
    }
}

/// Mean over all `C x C` pairs of `|cos(K_pos[a], K_neg[b])|`.
pub fn orthogonality_loss(g: &mut Graph, store: &ParamStore, bank: &PrototypeBank) -> Result<Var> {
    let kp = g.param(store, bank.k_pos);
    let kn = g.param(store, bank.k_neg);
    let kp = g.row_normalize(kp);
    let kn = g.row_normalize(kn);
    let knt = g.transpose_last2(kn)?;
    let cos = g.matmul(kp, knt)?;
    let cos = g.abs(cos);
    Ok(g.mean(cos))
}

/// `cos(K_pos[a], K_neg[b])` as a row-major `C x C` matrix.
pub fn prototype_cosines(store: &ParamStore, bank: &PrototypeBank) -> Tensor {
    let mut g = Graph::new();
    let kp = g.param(store, bank.k_pos);
    let kn = g.param(store, bank.k_neg);
    let kp = g.row_normalize(kp);
    let kn = g.row_normalize(kn);
    let cos = g
        .transpose_last2(kn)
        .and_then(|knt| g.matmul(kp, knt))
        .expect("prototype banks share a width");
    g.value(cos).clone()
}

/// Value of [`orthogonality_loss`] without building gradients.
pub fn orthogonality_value(store: &ParamStore, bank: &PrototypeBank) -> f64 {
    let cos = prototype_cosines(store, bank);
    cos.data().iter().map(|c| c.abs()).sum::<f64>() / cos.len() as f64
}

/// Output of the prototype diff-attention.
#[derive(Clone, Copy, Debug)]
pub struct UpdaOutput {
    /// `[P, N*C, D]`.
    pub latent: Var,
    /// `A_pos - λ A_neg` per variate and patch, `[M, P, C]`.
    pub weights: Var,
}

/// Unified prototype diff-attention.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Upda {
    pub bank: PrototypeBank,
    pub query: Linear,
    pub value: Linear,
}

impl Upda {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prototypes: usize,
        width: usize,
        lambda_init: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let bank = PrototypeBank::new(store, prototypes, width, lambda_init, rng)?;
        Ok(Self {
            bank,
            query: Linear::new(store, "upda.q", width, width, true, rng)?,
            value: Linear::new(store, "upda.v", width, width, true, rng)?,
        })
    }

    /// `h_t: [M, P, D]` to prototype space. Each entity's prototypes
    /// aggregate only its own unpadded variates.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h_t: Var,
        layout: &EntityLayout,
    ) -> Result<UpdaOutput> {
        let shape = g.shape(h_t).to_vec();
        check_rows(&shape, layout, "upda_forward")?;
        let width = shape[2];
        let scale = 1.0 / crate::math::sqrt(width as f64);

        let q = self.query.forward(g, store, h_t)?;
        let attend = |g: &mut Graph, k: ParamId| -> Result<Var> {
            let k = g.param(store, k);
            let kt = g.transpose_last2(k)?;
            let logits = g.matmul(q, kt)?;
            let logits = g.scale(logits, scale);
            g.softmax(logits, None)
        };
        let a_pos = attend(g, self.bank.k_pos)?;
        let a_neg = attend(g, self.bank.k_neg)?;
        let lambda = g.param(store, self.bank.lambda);
        let a_neg = g.mul_scalar(a_neg, lambda)?;
        let weights = g.sub(a_pos, a_neg)?;

        let scatter = g.entity_scatter(weights, layout.scatter_rows(), layout.entities())?;
        let v = self.value.forward(g, store, h_t)?;
        let v = g.permute(v, &[1, 0, 2])?;
        let latent = g.matmul(scatter, v)?;
        Ok(UpdaOutput { latent, weights })
    }
}

/// `[P, N*C, D]` to `[N, C, P, D]`.
pub fn entity_major(g: &mut Graph, latent: Var, entities: usize, prototypes: usize) -> Result<Var> {
    let s = g.shape(latent).to_vec();
    let x = g.reshape(latent, &[s[0], entities, prototypes, s[2]])?;
    g.permute(x, &[1, 2, 0, 3])
}

/// `[N, C, P, D]` to `[P, N*C, D]`.
pub fn patch_major(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let y = g.permute(x, &[2, 0, 1, 3])?;
    g.reshape(y, &[s[2], s[0] * s[1], s[3]])
}

/// Latent entity attention: self-attention over the `N*C` prototype
/// sequence, batched over patches.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Lea {
    pub encoder: Encoder,
}

impl Lea {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        depth: usize,
        width: usize,
        heads: usize,
        feed_forward: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            encoder: Encoder::new(store, "lea", depth, width, heads, feed_forward, rng)?,
        })
    }

    /// `latent: [P, N*C, D]`; `key_valid` has one flag per `(patch, token)`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        latent: Var,
        key_valid: Option<&[bool]>,
    ) -> Result<Var> {
        self.encoder.forward(g, store, latent, key_valid)
    }
}

/// Output of the reassembly router.
#[derive(Clone, Copy, Debug)]
pub struct RouteOutput {
    /// `[M, P, D]`.
    pub routed: Var,
    /// `[P, M, N*C]`, zero outside each variate's own entity.
    pub weights: Var,
}

/// Variate reassembly router.
///
/// The index projection has no bias: it would add the same amount to every
/// logit of a routing row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Vrr {
    pub request: Linear,
    pub index: Linear,
    pub context: Linear,
}

impl Vrr {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, width: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            request: Linear::new(store, "vrr.req", width, width, true, rng)?,
            index: Linear::new(store, "vrr.idx", width, width, false, rng)?,
            context: Linear::new(store, "vrr.ctx", width, width, true, rng)?,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h_t: Var,
        latent: Var,
        layout: &EntityLayout,
        prototypes: usize,
    ) -> Result<RouteOutput> {
        let shape = g.shape(h_t).to_vec();
        check_rows(&shape, layout, "vrr_route")?;
        let (p, width) = (shape[1], shape[2]);
        let ls = g.shape(latent).to_vec();
        if ls != [p, layout.entities() * prototypes, width] {
            return Err(Error::Shape {
                op: "vrr_route",
                lhs: shape,
                rhs: ls,
            });
        }
        let r = self.request.forward(g, store, h_t)?;
        let r = g.permute(r, &[1, 0, 2])?;
        let idx = self.index.forward(g, store, latent)?;
        let idx = g.transpose_last2(idx)?;
        let logits = g.matmul(r, idx)?;
        let logits = g.scale(logits, 1.0 / crate::math::sqrt(width as f64));
        let mask = layout.routing_mask(p, prototypes);
        let weights = g.softmax(logits, Some(&mask))?;
        let ctx = self.context.forward(g, store, latent)?;
        let routed = g.matmul(weights, ctx)?;
        let routed = g.permute(routed, &[1, 0, 2])?;
        Ok(RouteOutput { routed, weights })
    }
}

/// `Ĥ = H_T + sigmoid(Linear(H_T)) * H_V`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gate {
    pub proj: Linear,
}

impl Gate {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, width: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(store, "gate", width, width, true, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h_t: Var, h_v: Var) -> Result<Var> {
        if g.shape(h_t) != g.shape(h_v) {
            return Err(Error::Shape {
                op: "gated_fuse",
                lhs: g.shape(h_t).to_vec(),
                rhs: g.shape(h_v).to_vec(),
            });
        }
        let z = self.proj.forward(g, store, h_t)?;
        let s = g.sigmoid(z);
        let gated = g.mul(s, h_v)?;
        g.add(h_t, gated)
    }
}

fn check_rows(shape: &[usize], layout: &EntityLayout, op: &'static str) -> Result<()> {
    if shape.len() != 3 || shape[0] != layout.rows() {
        return Err(Error::Shape {
            op,
            lhs: shape.to_vec(),
            rhs: vec![layout.rows()],
        });
    }
    Ok(())
}
