//! Synthetic series: GP kernel compositions, convex mixing and the
//! multivariatizers that inject cross-variate dependencies.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::math;
use crate::series::EntitySeries;
use crate::{Error, Result};

/// Initial diagonal jitter added to Gram matrices.
pub const JITTER: f64 = 1e-10;
/// Maximum number of jitter doublings before a kernel draw is abandoned.
pub const MAX_JITTER_DOUBLINGS: usize = 6;
/// Smallest eigenvalue accepted as numerically PSD.
pub const PSD_FLOOR: f64 = -1e-8;

/// Covariance function over step indices, possibly composite.
#[derive(Clone, Debug, PartialEq)]
pub enum KernelSpec {
    /// `variance * (x_s - offset)(x_t - offset)` with `x = step / len`.
    Linear { variance: f64, offset: f64 },
    SquaredExponential { variance: f64, length_scale: f64 },
    Periodic {
        variance: f64,
        period: f64,
        length_scale: f64,
    },
    WhiteNoise { variance: f64 },
    Sum(Box<KernelSpec>, Box<KernelSpec>),
    Product(Box<KernelSpec>, Box<KernelSpec>),
}

impl KernelSpec {
    pub fn eval(&self, s: usize, t: usize, len: usize) -> f64 {
        let d = s as f64 - t as f64;
        match self {
            KernelSpec::Linear { variance, offset } => {
                let n = len as f64;
                variance * (s as f64 / n - offset) * (t as f64 / n - offset)
            }
            KernelSpec::SquaredExponential {
                variance,
                length_scale,
            } => variance * math::exp(-d * d / (2.0 * length_scale * length_scale)),
            KernelSpec::Periodic {
                variance,
                period,
                length_scale,
            } => {
                let sn = math::sin(core::f64::consts::PI * math::abs(d) / period);
                variance * math::exp(-2.0 * sn * sn / (length_scale * length_scale))
            }
            KernelSpec::WhiteNoise { variance } => {
                if s == t {
                    *variance
                } else {
                    0.0
                }
            }
            KernelSpec::Sum(a, b) => a.eval(s, t, len) + b.eval(s, t, len),
            KernelSpec::Product(a, b) => a.eval(s, t, len) * b.eval(s, t, len),
        }
    }

    /// `len x len` covariance on the integer grid.
    pub fn gram(&self, len: usize) -> DMatrix<f64> {
        let mut k = DMatrix::zeros(len, len);
        for i in 0..len {
            for j in 0..=i {
                let v = self.eval(i, j, len);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }

    /// Random base kernel.
    pub fn random_base<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Self {
        const PERIODS: [f64; 7] = [4.0, 7.0, 12.0, 24.0, 30.0, 52.0, 96.0];
        match rng.random_range(0..4) {
            0 => KernelSpec::Linear {
                variance: rng.random_range(0.1..1.0),
                offset: rng.random_range(0.0..1.0),
            },
            1 => KernelSpec::SquaredExponential {
                variance: rng.random_range(0.1..1.0),
                length_scale: len as f64 * rng.random_range(0.02..0.3),
            },
            2 => {
                let usable: Vec<f64> = PERIODS.iter().copied().filter(|&p| 2.0 * p <= len as f64).collect();
                let period = if usable.is_empty() {
                    (len as f64 / 2.0).max(2.0)
                } else {
                    usable[rng.random_range(0..usable.len())]
                };
                KernelSpec::Periodic {
                    variance: rng.random_range(0.1..1.0),
                    period,
                    length_scale: rng.random_range(0.5..2.0),
                }
            }
            _ => KernelSpec::WhiteNoise {
                variance: rng.random_range(0.001..0.05),
            },
        }
    }

    /// `1..=max_components` random base kernels joined left to right by
    /// randomly chosen `+` or `*`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, len: usize, max_components: usize) -> Self {
        let count = rng.random_range(1..=max_components.max(1));
        let mut spec = Self::random_base(rng, len);
        for _ in 1..count {
            let next = Self::random_base(rng, len);
            spec = if rng.random_bool(0.5) {
                KernelSpec::Sum(Box::new(spec), Box::new(next))
            } else {
                KernelSpec::Product(Box::new(spec), Box::new(next))
            };
        }
        spec
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// One path from the zero-mean GP with covariance `spec` on `len` steps.
/// Jitter starts at [`JITTER`] and doubles until the smallest eigenvalue is
/// at least [`PSD_FLOOR`].
pub fn sample_gp<R: Rng + ?Sized>(spec: &KernelSpec, len: usize, rng: &mut R) -> Result<Vec<f64>> {
    let gram = spec.gram(len);
    let mut jitter = JITTER;
    for _ in 0..=MAX_JITTER_DOUBLINGS {
        let k = &gram + DMatrix::identity(len, len) * jitter;
        let eig = SymmetricEigen::new(k);
        let lowest = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        if lowest >= PSD_FLOOR && eig.eigenvalues.iter().all(|v| v.is_finite()) {
            let z: Vec<f64> = (0..len)
                .map(|i| {
                    let n: f64 = StandardNormal.sample(rng);
                    math::sqrt(eig.eigenvalues[i].max(0.0)) * n
                })
                .collect();
            let z = nalgebra::DVector::from_vec(z);
            let x = eig.eigenvectors * z;
            return Ok(x.iter().copied().collect());
        }
        jitter *= 2.0;
    }
    Err(Error::Factorization(format!("{spec:?}")))
}

/// A random kernel composition sampled once; failed draws are replaced by
/// fresh kernels.
pub fn kernel_synth<R: Rng + ?Sized>(rng: &mut R, len: usize, max_components: usize) -> Result<Vec<f64>> {
    if len < 2 || max_components == 0 {
        return Err(Error::Config("kernel_synth needs len >= 2 and max_components >= 1".into()));
    }
    let mut last = None;
    for _ in 0..32 {
        let spec = KernelSpec::random(rng, len, max_components);
        match sample_gp(&spec, len, rng) {
            Ok(x) if x.iter().all(|v| v.is_finite()) => return Ok(x),
            Ok(_) => {}
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::Factorization("non-finite sample".into())))
}

/// `w * a + (1 - w) * b`.
pub fn mix_series(a: &[f64], b: &[f64], w: f64) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Input(format!("mixing weight {w} outside [0, 1]")));
    }
    Ok(a.iter().zip(b).map(|(x, y)| w * x + (1.0 - w) * y).collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Nonlinearity {
    #[default]
    Identity,
    Tanh,
}

/// `y_t = φ(W x_t)` for bases `x` (`[k][len]`) and mixing `W` (`[m][k]`).
pub fn cotemporaneous_multivariatize(
    bases: &[Vec<f64>],
    mixing: &[Vec<f64>],
    phi: Nonlinearity,
) -> Result<Vec<Vec<f64>>> {
    let k = bases.len();
    let len = bases.first().map_or(0, Vec::len);
    if k == 0 || bases.iter().any(|b| b.len() != len) {
        return Err(Error::Input("bases must be non-empty and equally long".into()));
    }
    for row in mixing {
        if row.len() != k {
            return Err(Error::LengthMismatch {
                left: row.len(),
                right: k,
            });
        }
        if row.iter().all(|&w| w == 0.0) {
            return Err(Error::Input("mixing matrix has an all-zero row".into()));
        }
    }
    Ok(mixing
        .iter()
        .map(|row| {
            (0..len)
                .map(|t| {
                    let z: f64 = row.iter().zip(bases).map(|(w, b)| w * b[t]).sum();
                    match phi {
                        Nonlinearity::Identity => z,
                        Nonlinearity::Tanh => math::tanh(z),
                    }
                })
                .collect()
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sequential {
    /// Second variate repeats the first `lag` steps later.
    LeadLag { lag: usize, noise_std: f64 },
    /// Second variate is the first plus an AR(1) spread.
    Cointegration { reversion: f64, noise_std: f64 },
}

/// Two-variate entity `[base, follower]`.
pub fn sequential_multivariatize<R: Rng + ?Sized>(
    base: &[f64],
    kind: Sequential,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let len = base.len();
    if len == 0 {
        return Err(Error::Input("empty base series".into()));
    }
    let follower = match kind {
        Sequential::LeadLag { lag, noise_std } => {
            if lag >= len {
                return Err(Error::Input(format!("lag {lag} not below length {len}")));
            }
            let noise = normal(noise_std)?;
            (0..len)
                .map(|t| {
                    let src = if t >= lag { base[t - lag] } else { base[0] };
                    src + sample(&noise, rng)
                })
                .collect()
        }
        Sequential::Cointegration {
            reversion,
            noise_std,
        } => {
            if !(reversion > 0.0 && reversion < 1.0) {
                return Err(Error::Input(format!("reversion {reversion} outside (0, 1)")));
            }
            let noise = normal(noise_std)?;
            let mut spread = 0.0;
            base.iter()
                .map(|&b| {
                    spread = reversion * spread + sample(&noise, rng);
                    b + spread
                })
                .collect()
        }
    };
    Ok(vec![base.to_vec(), follower])
}

fn normal(std: f64) -> Result<Option<Normal<f64>>> {
    if std == 0.0 {
        return Ok(None);
    }
    Normal::new(0.0, std)
        .map(Some)
        .map_err(|_| Error::Input(format!("invalid noise std {std}")))
}

fn sample<R: Rng + ?Sized>(dist: &Option<Normal<f64>>, rng: &mut R) -> f64 {
    dist.as_ref().map_or(0.0, |d| d.sample(rng))
}

/// Gaussian random walk starting at 0.
pub fn random_walk<R: Rng + ?Sized>(rng: &mut R, len: usize, step_std: f64) -> Vec<f64> {
    let mut x = 0.0;
    (0..len)
        .map(|_| {
            let s: f64 = StandardNormal.sample(rng);
            x += step_std * s;
            x
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratorKind {
    Kernel,
    Cotemporaneous,
    CotemporaneousTanh,
    LeadLag,
    Cointegration,
}

impl GeneratorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GeneratorKind::Kernel => "kernel",
            GeneratorKind::Cotemporaneous => "cotemporaneous",
            GeneratorKind::CotemporaneousTanh => "cotemporaneous-tanh",
            GeneratorKind::LeadLag => "leadlag",
            GeneratorKind::Cointegration => "cointegration",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            GeneratorKind::Kernel,
            GeneratorKind::Cotemporaneous,
            GeneratorKind::CotemporaneousTanh,
            GeneratorKind::LeadLag,
            GeneratorKind::Cointegration,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
    }
}

/// What to generate and with which parameter ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    /// `(kind, entity count)` in output order.
    pub parts: Vec<(GeneratorKind, usize)>,
    pub length: usize,
    pub max_components: usize,
    /// Variates per cotemporaneous entity.
    pub variates: usize,
    pub lag_min: usize,
    pub lag_max: usize,
    pub noise_std: f64,
    /// Step std of the random-walk component of sequential bases; 0 disables it.
    pub walk_std: f64,
    /// Weight of the kernel component of sequential bases.
    pub kernel_weight: f64,
    pub reversion_min: f64,
    pub reversion_max: f64,
    /// Probability that a kernel entity is a convex mix of two draws.
    pub mix_prob: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            parts: vec![(GeneratorKind::LeadLag, 10)],
            length: 256,
            max_components: 5,
            variates: 3,
            lag_min: 2,
            lag_max: 6,
            noise_std: 0.02,
            walk_std: 0.1,
            kernel_weight: 0.5,
            reversion_min: 0.5,
            reversion_max: 0.95,
            mix_prob: 0.5,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.length < 2 {
            return Err(Error::Config("length must be at least 2".into()));
        }
        if self.lag_min > self.lag_max || self.lag_max >= self.length {
            return Err(Error::Config("need lag_min <= lag_max < length".into()));
        }
        if !(0.0 < self.reversion_min && self.reversion_min <= self.reversion_max && self.reversion_max < 1.0) {
            return Err(Error::Config("reversion range must lie in (0, 1)".into()));
        }
        if self.variates == 0 || self.max_components == 0 {
            return Err(Error::Config("variates and max_components must be positive".into()));
        }
        if self.noise_std < 0.0 || self.walk_std < 0.0 {
            return Err(Error::Config("noise scales must be non-negative".into()));
        }
        Ok(())
    }

    pub fn total_entities(&self) -> usize {
        self.parts.iter().map(|p| p.1).sum()
    }
}

/// A generated entity and its generator parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedEntity {
    pub series: EntitySeries,
    pub params: Vec<(String, String)>,
}

/// Stream `index` of a ChaCha generator seeded with `seed`.
pub fn entity_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Generates every entity of `spec`; entity `i` draws from its own stream.
pub fn generate_entities(spec: &CorpusSpec, seed: u64) -> Result<Vec<GeneratedEntity>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.total_entities());
    for &(kind, count) in &spec.parts {
        for _ in 0..count {
            let index = out.len();
            out.push(generate_entity(spec, kind, index, seed)?);
        }
    }
    Ok(out)
}

pub fn generate_entity(spec: &CorpusSpec, kind: GeneratorKind, index: usize, seed: u64) -> Result<GeneratedEntity> {
    let mut rng = entity_rng(seed, index as u64);
    let len = spec.length;
    let mut params = vec![
        ("kind".to_string(), kind.as_str().to_string()),
        ("seed".to_string(), seed.to_string()),
        ("stream".to_string(), index.to_string()),
    ];
    let values = match kind {
        GeneratorKind::Kernel => {
            let a = kernel_synth(&mut rng, len, spec.max_components)?;
            if rng.random_bool(spec.mix_prob.clamp(0.0, 1.0)) {
                let b = kernel_synth(&mut rng, len, spec.max_components)?;
                let w = rng.random_range(0.0..=1.0);
                params.push(("mix_weight".into(), w.to_string()));
                vec![mix_series(&a, &b, w)?]
            } else {
                vec![a]
            }
        }
        GeneratorKind::Cotemporaneous | GeneratorKind::CotemporaneousTanh => {
            let k = rng.random_range(1..=spec.variates);
            let bases = (0..k)
                .map(|_| kernel_synth(&mut rng, len, spec.max_components))
                .collect::<Result<Vec<_>>>()?;
            let mixing: Vec<Vec<f64>> = (0..spec.variates)
                .map(|_| {
                    let mut row: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
                    if row.iter().all(|&w| w == 0.0) {
                        row[0] = 1.0;
                    }
                    row
                })
                .collect();
            let phi = if kind == GeneratorKind::CotemporaneousTanh {
                Nonlinearity::Tanh
            } else {
                Nonlinearity::Identity
            };
            params.push(("bases".into(), k.to_string()));
            cotemporaneous_multivariatize(&bases, &mixing, phi)?
        }
        GeneratorKind::LeadLag | GeneratorKind::Cointegration => {
            let base = sequential_base(spec, &mut rng)?;
            let kind = if kind == GeneratorKind::LeadLag {
                let lag = rng.random_range(spec.lag_min..=spec.lag_max);
                params.push(("lag".into(), lag.to_string()));
                Sequential::LeadLag {
                    lag,
                    noise_std: spec.noise_std,
                }
            } else {
                let reversion = rng.random_range(spec.reversion_min..=spec.reversion_max);
                params.push(("reversion".into(), reversion.to_string()));
                Sequential::Cointegration {
                    reversion,
                    noise_std: spec.noise_std,
                }
            };
            params.push(("noise_std".into(), spec.noise_std.to_string()));
            sequential_multivariatize(&base, kind, &mut rng)?
        }
    };
    let series = EntitySeries::new(format!("{}_{index:05}", kind.as_str()), values)?;
    Ok(GeneratedEntity { series, params })
}

fn sequential_base<R: Rng + ?Sized>(spec: &CorpusSpec, rng: &mut R) -> Result<Vec<f64>> {
    let mut base = if spec.kernel_weight > 0.0 {
        let k = kernel_synth(rng, spec.length, spec.max_components)?;
        k.into_iter().map(|v| v * spec.kernel_weight).collect()
    } else {
        vec![0.0; spec.length]
    };
    if spec.walk_std > 0.0 {
        for (b, w) in base.iter_mut().zip(random_walk(rng, spec.length, spec.walk_std)) {
            *b += w;
        }
    }
    Ok(base)
}
