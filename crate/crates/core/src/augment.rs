//! Parametric factorized augmentation.
//!
//! A view is built as `v* = (g ⊙ h) ⊙ x`, where the factorization mask `h`
//! selects the informative timestamps and the strictly non-zero transform
//! mask `g` rescales them invertibly. `h` is drawn from a hard (stretched and
//! clipped) binary concrete distribution so that it stays differentiable with
//! respect to its location parameters `pi`.

use candle_core::{DType, Tensor};
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ensure_finite, sigmoid, tensor_from_f64, tensor_to_f64, DilatedConvStack, Linear, Params};

/// Location parameters are clamped to `[PI_EPS, 1 - PI_EPS]` before taking logits.
pub const PI_EPS: f64 = 1e-6;

/// Lower bound on `|g_t|`.
pub const G_FLOOR: f64 = 0.05;

/// Temperature and stretch interval of the hard concrete distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HardConcreteParams {
    pub tau: f64,
    pub gamma: f64,
    pub zeta: f64,
}

impl Default for HardConcreteParams {
    fn default() -> Self {
        Self {
            tau: 0.5,
            gamma: -0.1,
            zeta: 1.1,
        }
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_open_unit(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} = {v} must lie strictly inside (0, 1)")))
    }
}

impl HardConcreteParams {
    pub fn validate(&self) -> Result<()> {
        if self.tau > 0.0 && self.gamma < 0.0 && self.zeta > 1.0 {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "hard concrete parameters {self:?} must satisfy tau > 0, gamma < 0 < 1 < zeta"
            )))
        }
    }

    /// `tau * log(-gamma / zeta)`, the offset shared by every zero-probability term.
    pub fn zero_offset(&self) -> f64 {
        self.tau * (-self.gamma / self.zeta).ln()
    }

    /// CDF of the stretched (unclipped) variable at `u ∈ (gamma, zeta)` for
    /// location logit `alpha`.
    pub fn stretched_cdf(&self, u: f64, alpha: f64) -> f64 {
        logistic(self.tau * ((u - self.gamma).ln() - (self.zeta - u).ln()) - alpha)
    }

    /// `P(h = 0)` after clipping.
    pub fn prob_zero(&self, pi: f64) -> f64 {
        logistic(self.zero_offset() - logit(pi))
    }

    /// `P(h = 1)` after clipping.
    pub fn prob_one(&self, pi: f64) -> f64 {
        1.0 - self.stretched_cdf(1.0, logit(pi))
    }

    /// `E[h] = ∫_0^1 P(h > u) du`, by composite Simpson quadrature.
    pub fn mean(&self, pi: f64) -> f64 {
        let alpha = logit(pi);
        let n = 4000;
        let step = 1.0 / n as f64;
        let f = |u: f64| 1.0 - self.stretched_cdf(u, alpha);
        let mut acc = f(0.0) + f(1.0);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(i as f64 * step);
        }
        acc * step / 3.0
    }
}

/// `log(pi / (1 - pi))` after clamping `pi` into `[PI_EPS, 1 - PI_EPS]`.
pub fn logit(pi: f64) -> f64 {
    let p = pi.clamp(PI_EPS, 1.0 - PI_EPS);
    p.ln() - (1.0 - p).ln()
}

/// One hard-concrete draw for location `pi` and uniform noise `eps`.
pub fn concrete_sample(pi: f64, eps: f64, p: &HardConcreteParams) -> Result<f64> {
    check_open_unit("pi", pi)?;
    check_open_unit("eps", eps)?;
    let s = logistic((eps.ln() - (1.0 - eps).ln() + (pi.ln() - (1.0 - pi).ln())) / p.tau);
    Ok((s * (p.zeta - p.gamma) + p.gamma).clamp(0.0, 1.0))
}

/// Expected number of non-zero mask entries, `Σ_t σ(α_t − τ·log(−γ/ζ))`.
pub fn expected_l0(pi: &[f64], p: &HardConcreteParams) -> Result<f64> {
    let off = p.zero_offset();
    pi.iter()
        .map(|&v| {
            check_open_unit("pi", v)?;
            Ok(logistic(logit(v) - off))
        })
        .sum()
}

/// Differentiable [`expected_l0`] over a `(B, T)` logit tensor; returns `(B,)`.
pub fn expected_l0_tensor(alpha: &Tensor, p: &HardConcreteParams) -> Result<Tensor> {
    Ok(sigmoid(&(alpha - p.zero_offset())?)?.sum(1)?)
}

/// Draws open-interval uniform noise.
pub fn uniform_open<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let e: f64 = rng.random();
        if e > 0.0 {
            return e;
        }
    }
}

/// Masks for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPair {
    pub pi: Vec<f64>,
    pub h: Vec<f64>,
    pub g: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl MaskPair {
    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }

    /// Masks that leave the input untouched.
    pub fn identity(t: usize) -> Self {
        let pi = vec![1.0 - PI_EPS; t];
        Self {
            alpha: pi.iter().map(|&p| logit(p)).collect(),
            pi,
            h: vec![1.0; t],
            g: vec![1.0; t],
        }
    }

    fn from_hg(h: Vec<f64>, g: Vec<f64>) -> Self {
        let pi: Vec<f64> = h.iter().map(|&v| v.clamp(PI_EPS, 1.0 - PI_EPS)).collect();
        Self {
            alpha: pi.iter().map(|&p| logit(p)).collect(),
            pi,
            h,
            g,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedView {
    /// `T x F` view passed to the encoder.
    pub v: Array2<f64>,
    /// `T x F` informative part after the transform, before any noise.
    pub v_star: Array2<f64>,
    pub masks: MaskPair,
    pub noise_seed: u64,
}

impl AugmentedView {
    /// `v* / g`, which equals `h ⊙ x`.
    pub fn informative_part(&self) -> Array2<f64> {
        let mut out = self.v_star.clone();
        for (t, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let g = self.masks.g[t];
            row.mapv_inplace(|v| v / g);
        }
        out
    }
}

fn check_masks(t: usize, masks: &MaskPair) -> Result<()> {
    if masks.h.len() != t || masks.g.len() != t || masks.pi.len() != t {
        return Err(Error::Validation(format!(
            "mask length {} does not match series length {t}",
            masks.h.len()
        )));
    }
    if let Some((i, g)) = masks.g.iter().enumerate().find(|(_, g)| !(g.abs() >= G_FLOOR)) {
        return Err(Error::Invariant(format!(
            "transform mask entry g[{i}] = {g} is below the floor {G_FLOOR}"
        )));
    }
    Ok(())
}

/// `v* = (g ⊙ h) ⊙ x` broadcast over channels; noise is injected later by the encoder.
pub fn compose_view(x: &Array2<f64>, masks: MaskPair) -> Result<AugmentedView> {
    check_masks(x.nrows(), &masks)?;
    let mut v_star = x.clone();
    for (t, mut row) in v_star.axis_iter_mut(Axis(0)).enumerate() {
        let w = masks.g[t] * masks.h[t];
        row.mapv_inplace(|v| w * v);
    }
    Ok(AugmentedView {
        v: v_star.clone(),
        v_star,
        masks,
        noise_seed: 0,
    })
}

/// Tensor form of [`compose_view`]: `x` is `(B, T, F)`, masks are `(B, T)`.
pub fn compose_tensor(x: &Tensor, h: &Tensor, g: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_mul(&(g * h)?.unsqueeze(2)?)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StaticPolicy {
    Cutout { l_frac: f64 },
    Jitter { sigma: f64 },
    Scaling { s: f64 },
    /// Cutout with fraction in [0.3, 0.8] or jitter with std in [0.3, 1.0], chosen per call.
    RandomAug,
}

/// Range of cutout fractions and jitter deviations sampled by `RandomAug`.
pub const RANDOM_CUTOUT_RANGE: (f64, f64) = (0.3, 0.8);
pub const RANDOM_JITTER_RANGE: (f64, f64) = (0.3, 1.0);

/// Fixed augmentations expressed in the `(h, g)` mask algebra.
pub fn static_augment<R: Rng>(x: &Array2<f64>, policy: StaticPolicy, rng: &mut R) -> Result<AugmentedView> {
    let t = x.nrows();
    let policy = match policy {
        StaticPolicy::RandomAug => {
            if rng.random_bool(0.5) {
                StaticPolicy::Cutout {
                    l_frac: rng.random_range(RANDOM_CUTOUT_RANGE.0..=RANDOM_CUTOUT_RANGE.1),
                }
            } else {
                StaticPolicy::Jitter {
                    sigma: rng.random_range(RANDOM_JITTER_RANGE.0..=RANDOM_JITTER_RANGE.1),
                }
            }
        }
        other => other,
    };
    match policy {
        StaticPolicy::Cutout { l_frac } => {
            if !(l_frac > 0.0 && l_frac < 1.0) {
                return Err(Error::Domain(format!("cutout fraction {l_frac} must lie in (0, 1)")));
            }
            let len = ((l_frac * t as f64).round() as usize).min(t);
            let start = rng.random_range(0..=t - len);
            let mut h = vec![1.0; t];
            h[start..start + len].iter_mut().for_each(|v| *v = 0.0);
            compose_view(x, MaskPair::from_hg(h, vec![1.0; t]))
        }
        StaticPolicy::Scaling { s } => {
            if !(s.abs() >= G_FLOOR) || !s.is_finite() {
                return Err(Error::Invariant(format!(
                    "scaling factor {s} would give a transform mask below {G_FLOOR}"
                )));
            }
            compose_view(x, MaskPair::from_hg(vec![1.0; t], vec![s; t]))
        }
        StaticPolicy::Jitter { sigma } => {
            if !(sigma >= 0.0) {
                return Err(Error::Domain(format!("jitter std {sigma} must be non-negative")));
            }
            let noise_seed: u64 = rng.random();
            let mut view = compose_view(x, MaskPair::from_hg(vec![1.0; t], vec![1.0; t]))?;
            view.noise_seed = noise_seed;
            if sigma > 0.0 {
                let normal = Normal::new(0.0, sigma).expect("positive std");
                let mut noise_rng = ChaCha8Rng::seed_from_u64(noise_seed);
                view.v.mapv_inplace(|v| v + normal.sample(&mut noise_rng));
            }
            Ok(view)
        }
        StaticPolicy::RandomAug => unreachable!("resolved above"),
    }
}

/// Architecture of the augmentation network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugConfig {
    pub depth: usize,
    pub hidden_dim: usize,
    pub hard_concrete: HardConcreteParams,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            hidden_dim: 64,
            hard_concrete: HardConcreteParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// Stochastic hard-concrete sampling.
    Train,
    /// Deterministic `pi >= 0.5` threshold.
    Eval,
}

/// Batched masks, each `(B, T)`.
#[derive(Debug, Clone)]
pub struct MaskTensors {
    pub pi: Tensor,
    pub alpha: Tensor,
    pub h: Tensor,
    pub g: Tensor,
}

impl MaskTensors {
    /// Splits the batch into per-instance [`MaskPair`]s.
    pub fn to_pairs(&self) -> Result<Vec<MaskPair>> {
        let (b, t) = self.h.dims2()?;
        let pi = tensor_to_f64(&self.pi)?;
        let alpha = tensor_to_f64(&self.alpha)?;
        let h = tensor_to_f64(&self.h)?;
        let g = tensor_to_f64(&self.g)?;
        Ok((0..b)
            .map(|i| MaskPair {
                pi: pi[i * t..(i + 1) * t].to_vec(),
                h: h[i * t..(i + 1) * t].to_vec(),
                g: g[i * t..(i + 1) * t].to_vec(),
                alpha: alpha[i * t..(i + 1) * t].to_vec(),
            })
            .collect())
    }
}

/// Shared dilated-convolution trunk with a factorization head (`pi`) and a
/// transformation head (`g`).
#[derive(Debug, Clone)]
pub struct AugNet {
    cfg: AugConfig,
    params: Params,
    input: Linear,
    trunk: DilatedConvStack,
    factor_head: Linear,
    transform_head: Linear,
}

impl AugNet {
    pub fn new<R: Rng>(cfg: &AugConfig, n_features: usize, dtype: DType, rng: &mut R) -> Result<Self> {
        cfg.hard_concrete.validate()?;
        let mut params = Params::new(dtype);
        let input = Linear::new(&mut params, "aug.input", n_features, cfg.hidden_dim, rng)?;
        let trunk = DilatedConvStack::new(&mut params, "aug.trunk", cfg.hidden_dim, cfg.depth, rng)?;
        let factor_head = Linear::new(&mut params, "aug.factor_head", cfg.hidden_dim, 1, rng)?;
        let transform_head = Linear::new(&mut params, "aug.transform_head", cfg.hidden_dim, 1, rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            params,
            input,
            trunk,
            factor_head,
            transform_head,
        })
    }

    pub fn config(&self) -> &AugConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    /// Masks for a `(B, T, F)` batch. Layer indices in numerical errors count
    /// the input projection as 0, trunk blocks from 1, and the heads last.
    pub fn forward<R: Rng>(&self, x: &Tensor, mode: MaskMode, rng: &mut R) -> Result<MaskTensors> {
        let (b, t, _) = x.dims3()?;
        let hc = self.cfg.hard_concrete;
        let h0 = self.input.forward(x)?;
        ensure_finite(&h0, Some(0), "augmentation activations")?;
        let z = self
            .trunk
            .forward_with(&h0.transpose(1, 2)?, |l, out| {
                ensure_finite(out, Some(l + 1), "augmentation activations")
            })?
            .transpose(1, 2)?
            .contiguous()?;
        let head_layer = Some(self.trunk.depth() + 1);
        let logits = self.factor_head.forward(&z)?.squeeze(2)?;
        let pi = sigmoid(&logits)?.clamp(PI_EPS, 1.0 - PI_EPS)?;
        let alpha = (pi.log()? - (1.0 - &pi)?.log()?)?;
        let r = self.transform_head.forward(&z)?.squeeze(2)?;
        let g = (r.tanh()?.affine(1.0 - G_FLOOR, 0.0)? + 1.0)?;
        ensure_finite(&pi, head_layer, "factorization head output")?;
        ensure_finite(&g, head_layer, "transformation head output")?;

        let h = match mode {
            MaskMode::Train => {
                let eps: Vec<f64> = (0..b * t).map(|_| uniform_open(rng)).collect();
                let eps = tensor_from_f64(eps, &[b, t], x.dtype())?;
                let noise = (eps.log()? - (1.0 - &eps)?.log()?)?;
                let s = sigmoid(&((noise + &alpha)? / hc.tau)?)?;
                s.affine(hc.zeta - hc.gamma, hc.gamma)?.clamp(0.0, 1.0)?
            }
            MaskMode::Eval => pi.ge(0.5)?.to_dtype(x.dtype())?,
        };
        Ok(MaskTensors { pi, alpha, h, g })
    }

    /// Single-instance convenience wrapper around [`AugNet::forward`].
    pub fn aug_forward<R: Rng>(&self, x: &Array2<f64>, mode: MaskMode, rng: &mut R) -> Result<MaskPair> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(Some(0), "non-finite input series"));
        }
        let (t, f) = x.dim();
        let xt = tensor_from_f64(x.iter().copied().collect(), &[1, t, f], self.params.dtype())?;
        let masks = self.forward(&xt, mode, rng)?;
        Ok(masks.to_pairs()?.remove(0))
    }
}

/// Converts a `T x F` array into a `(1, T, F)` tensor.
pub fn series_tensor(x: &Array2<f64>, dtype: DType) -> Result<Tensor> {
    let (t, f) = x.dim();
    tensor_from_f64(x.iter().copied().collect(), &[1, t, f], dtype)
}

/// Mean length of maximal runs of ones (entries ≥ 0.5) in a mask;
/// `None` when the mask has no ones.
pub fn mean_one_run_length(h: &[f64]) -> Option<f64> {
    let mut runs = Vec::new();
    let mut cur = 0usize;
    for &v in h {
        if v >= 0.5 {
            cur += 1;
        } else if cur > 0 {
            runs.push(cur);
            cur = 0;
        }
    }
    if cur > 0 {
        runs.push(cur);
    }
    if runs.is_empty() {
        None
    } else {
        Some(runs.iter().sum::<usize>() as f64 / runs.len() as f64)
    }
}
