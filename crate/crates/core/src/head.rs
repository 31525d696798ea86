//! Quantile head, pinball objective and physical-scale forecasts.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::layers::Linear;
use crate::params::ParamStore;
use crate::preprocess::{denormalize_forecast, InstanceStats, NormMode};
use crate::tensor::Tensor;
use crate::variate::{orthogonality_loss, PrototypeBank};
use crate::{Error, Result};

/// Strictly increasing quantile levels in `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantileSet {
    levels: Rc<[f64]>,
}

impl QuantileSet {
    pub fn new(levels: &[f64]) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Config("quantile set is empty".into()));
        }
        if levels.iter().any(|&q| !(q > 0.0 && q < 1.0)) {
            return Err(Error::Config("quantiles must lie in (0, 1)".into()));
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("quantiles must be strictly increasing".into()));
        }
        Ok(Self {
            levels: levels.into(),
        })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Index of the level nearest the median.
    pub fn median_index(&self) -> usize {
        let mut best = 0;
        for (i, q) in self.levels.iter().enumerate() {
            if (q - 0.5).abs() < (self.levels[best] - 0.5).abs() {
                best = i;
            }
        }
        best
    }

    pub(crate) fn shared(&self) -> Rc<[f64]> {
        self.levels.clone()
    }
}

impl Default for QuantileSet {
    /// Deciles `0.1, ..., 0.9`.
    fn default() -> Self {
        let levels: Vec<f64> = (1..10).map(|i| i as f64 / 10.0).collect();
        Self::new(&levels).expect("valid deciles")
    }
}

/// Projects each horizon patch embedding to `L_p * |Q|` values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantileHead {
    pub proj: Linear,
    pub patch_len: usize,
    pub quantiles: usize,
}

impl QuantileHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        width: usize,
        patch_len: usize,
        quantiles: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(store, "head", width, patch_len * quantiles, true, rng)?,
            patch_len,
            quantiles,
        })
    }

    /// `h: [M, P, D]` to `[M, K * L_p, |Q|]` from the last `K` patches.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: Var, horizon_patches: usize) -> Result<Var> {
        let shape = g.shape(h).to_vec();
        if shape.len() != 3 || horizon_patches == 0 || horizon_patches > shape[1] {
            return Err(Error::Input(format!(
                "horizon of {horizon_patches} patches exceeds the {} available",
                shape.get(1).copied().unwrap_or(0)
            )));
        }
        let (m, p) = (shape[0], shape[1]);
        let tail = g.slice(h, 1, p - horizon_patches, horizon_patches)?;
        let out = self.proj.forward(g, store, tail)?;
        g.reshape(out, &[m, horizon_patches * self.patch_len, self.quantiles])
    }
}

/// Mean pinball loss over valid cells.
pub fn quantile_loss(
    g: &mut Graph,
    pred: Var,
    target: &[f64],
    valid: &[bool],
    quantiles: &QuantileSet,
) -> Result<Var> {
    g.pinball_loss(pred, target.into(), valid.into(), quantiles.shared())
}

/// Quantile loss plus `alpha` times the prototype orthogonality loss.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    g: &mut Graph,
    store: &ParamStore,
    pred: Var,
    target: &[f64],
    valid: &[bool],
    quantiles: &QuantileSet,
    bank: &PrototypeBank,
    alpha: f64,
) -> Result<Var> {
    if alpha < 0.0 {
        return Err(Error::Config("alpha must be non-negative".into()));
    }
    let pred_loss = quantile_loss(g, pred, target, valid, quantiles)?;
    if alpha == 0.0 {
        return Ok(pred_loss);
    }
    let orth = orthogonality_loss(g, store, bank)?;
    let orth = g.scale(orth, alpha);
    g.add(pred_loss, orth)
}

/// Physical-scale forecast `[M, T, |Q|]`, sorted along the quantile axis.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantileForecast {
    pub values: Tensor,
    pub quantiles: QuantileSet,
}

impl QuantileForecast {
    /// Sorts each `(variate, step)` cell across quantiles, then maps back to
    /// physical scale with row `j` using `stats[j]`.
    pub fn from_normalized(
        pred: &Tensor,
        stats: &[InstanceStats],
        mode: NormMode,
        quantiles: &QuantileSet,
    ) -> Result<Self> {
        if pred.rank() != 3 || pred.shape()[2] != quantiles.len() {
            return Err(Error::Shape {
                op: "quantile_forecast",
                lhs: pred.shape().to_vec(),
                rhs: alloc::vec![quantiles.len()],
            });
        }
        let mut sorted = pred.clone();
        for cell in sorted.data_mut().chunks_mut(quantiles.len()) {
            cell.sort_by(f64::total_cmp);
        }
        Ok(Self {
            values: denormalize_forecast(&sorted, stats, mode)?,
            quantiles: quantiles.clone(),
        })
    }

    pub fn variates(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn horizon(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn get(&self, variate: usize, step: usize, quantile: usize) -> f64 {
        let s = self.values.shape();
        self.values.data()[(variate * s[1] + step) * s[2] + quantile]
    }

    /// Quantile values of one `(variate, step)` cell.
    pub fn cell(&self, variate: usize, step: usize) -> &[f64] {
        let q = self.quantiles.len();
        let start = (variate * self.horizon() + step) * q;
        &self.values.data()[start..start + q]
    }

    /// Median (nearest level) path of one variate.
    pub fn median(&self, variate: usize) -> Vec<f64> {
        let mi = self.quantiles.median_index();
        (0..self.horizon()).map(|t| self.get(variate, t, mi)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::normal_tensor;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quantile_set_validation() {
        assert!(QuantileSet::new(&[0.5, 0.5]).is_err());
        assert!(QuantileSet::new(&[0.0, 0.5]).is_err());
        assert!(QuantileSet::new(&[]).is_err());
        let d = QuantileSet::default();
        assert_eq!(d.len(), 9);
        assert_eq!(d.levels()[d.median_index()], 0.5);
    }

    fn head_setup(q: usize) -> (ParamStore, QuantileHead, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut store = ParamStore::new();
        let h = QuantileHead::new(&mut store, 4, 2, q, &mut rng).unwrap();
        (store, h, rng)
    }

    #[test]
    fn head_matches_slice_project_oracle() {
        let (store, head, mut rng) = head_setup(3);
        let x = normal_tensor(&[2, 3, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = head.forward(&mut g, &store, xv, 2).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 3]);
        let w = store.value(head.proj.weight).data();
        let b = store.value(head.proj.bias.unwrap()).data();
        for m in 0..2 {
            for k in 0..2 {
                let patch = &x.data()[(m * 3 + 1 + k) * 4..][..4];
                for s in 0..2 {
                    for q in 0..3 {
                        let col = s * 3 + q;
                        let want = b[col] + (0..4).map(|i| patch[i] * w[i * 6 + col]).sum::<f64>();
                        let got = g.value(y).data()[(m * 4 + k * 2 + s) * 3 + q];
                        assert!((got - want).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_weights_emit_bias_pattern() {
        let (mut store, head, mut rng) = head_setup(1);
        store.value_mut(head.proj.weight).data_mut().fill(0.0);
        store.value_mut(head.proj.bias.unwrap()).data_mut().copy_from_slice(&[0.3, -0.7]);
        let x = normal_tensor(&[1, 2, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = head.forward(&mut g, &store, xv, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 1]);
        assert_eq!(g.value(y).data(), &[0.3, -0.7]);
        assert!(head.forward(&mut g, &store, xv, 3).is_err());
    }

    fn loss_of(pred: &[f64], target: &[f64], valid: &[bool], qs: &[f64]) -> f64 {
        let qs = QuantileSet::new(qs).unwrap();
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(vec![1, target.len(), qs.len()], pred.to_vec()).unwrap());
        let l = quantile_loss(&mut g, p, target, valid, &qs).unwrap();
        g.scalar(l)
    }

    #[test]
    fn pinball_cells() {
        assert_eq!(loss_of(&[0.0], &[1.0], &[true], &[0.5]), 0.5);
        assert!((loss_of(&[1.0], &[0.0], &[true], &[0.9]) - 0.1).abs() < 1e-15);
        assert_eq!(loss_of(&[2.0], &[2.0], &[true], &[0.3]), 0.0);
        let a = loss_of(&[0.0, 1e9], &[1.0, 0.0], &[true, false], &[0.5]);
        assert_eq!(a, 0.5);
    }

    #[test]
    fn total_loss_adds_weighted_orthogonality() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut store = ParamStore::new();
        let bank = PrototypeBank::new(&mut store, 2, 4, 0.5, &mut rng).unwrap();
        let qs = QuantileSet::default();
        let pred = normal_tensor(&[2, 2, 9], 1.0, &mut rng);
        let target = [0.1, -0.3, 0.7, 1.2];
        let valid = [true; 4];
        let mut g = Graph::new();
        let p = g.constant(pred.clone());
        let total = total_loss(&mut g, &store, p, &target, &valid, &qs, &bank, 0.1).unwrap();
        let mut g2 = Graph::new();
        let p2 = g2.constant(pred);
        let ql = quantile_loss(&mut g2, p2, &target, &valid, &qs).unwrap();
        let ol = orthogonality_loss(&mut g2, &store, &bank).unwrap();
        assert!((g.scalar(total) - (g2.scalar(ql) + 0.1 * g2.scalar(ol))).abs() < 1e-12);

        let mut g3 = Graph::new();
        let p3 = g3.constant(g2.value(p2).clone());
        let zero = total_loss(&mut g3, &store, p3, &target, &valid, &qs, &bank, 0.0).unwrap();
        assert_eq!(g3.scalar(zero), g2.scalar(ql));
    }

    #[test]
    fn forecast_sorts_and_denormalizes() {
        let qs = QuantileSet::new(&[0.1, 0.5, 0.9]).unwrap();
        let pred = Tensor::new(vec![1, 1, 3], vec![0.5, -0.5, 0.0]).unwrap();
        let st = [InstanceStats { mu: 3.0, sigma: 2.0 }];
        let f = QuantileForecast::from_normalized(&pred, &st, NormMode::Asinh, &qs).unwrap();
        assert_eq!(f.get(0, 0, 1), 3.0);
        assert!(f.cell(0, 0).windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(f.median(0), vec![3.0]);
    }

    proptest::proptest! {
        #[test]
        fn asymmetry_ratio(q in 0.01f64..0.99, e in 0.01f64..10.0) {
            let under = loss_of(&[0.0], &[e], &[true], &[q]);
            let over = loss_of(&[e], &[0.0], &[true], &[q]);
            proptest::prop_assert!((under / over - q / (1.0 - q)).abs() <= 1e-12 * (q / (1.0 - q)).max(1.0));
        }

        #[test]
        fn invalid_cells_are_ignored(junk in -1e6f64..1e6, y in -5.0f64..5.0) {
            let a = loss_of(&[0.2, 0.0], &[y, 0.0], &[true, false], &[0.3]);
            let b = loss_of(&[0.2, junk], &[y, junk], &[true, false], &[0.3]);
            proptest::prop_assert_eq!(a, b);
            proptest::prop_assert!(a >= 0.0);
        }
    }
}
