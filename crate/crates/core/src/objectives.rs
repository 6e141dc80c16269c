//! Loss functions for the augmentation network and the encoder.
//!
//! Every loss takes candle tensors and returns a scalar tensor so gradients
//! flow back to whichever network produced the inputs.

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{expected_l0_tensor, HardConcreteParams};
use crate::encoder::{Encoder, Pass};
use crate::error::{Error, Result};
use crate::nn::{l2_normalize_last, log_softmax_last};

/// Per-step (or per-epoch mean) loss values. Augmentation terms are absent
/// on steps that did not update the augmentation network.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_pri: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_t: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_aug: Option<f64>,
    pub l_g: f64,
    pub l_l: f64,
    pub l_con: f64,
    pub batch_size: usize,
}

/// Reads a scalar tensor of any float dtype.
pub fn to_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// `β · mean_x(‖h‖₀ / T) + ‖mean f(x) − mean f(v*)‖²` from precomputed
/// pooled embeddings `(B, D)` and mask logits `alpha` `(B, T)`.
pub fn pri_loss_from_embeddings(
    z_x: &Tensor,
    z_vstar: &Tensor,
    alpha: &Tensor,
    beta: f64,
    hc: &HardConcreteParams,
) -> Result<Tensor> {
    let (b, t) = alpha.dims2()?;
    if b == 0 || z_x.dim(0)? != b || z_vstar.dim(0)? != b {
        return Err(Error::Validation(format!(
            "PRI loss needs matching non-empty batches (got {}, {}, {b})",
            z_x.dim(0)?,
            z_vstar.dim(0)?
        )));
    }
    if beta < 0.0 {
        return Err(Error::Validation(format!("beta = {beta} must be non-negative")));
    }
    let l0 = (expected_l0_tensor(alpha, hc)? / t as f64)?.mean(0)?;
    let gap = (z_x.mean(0)? - z_vstar.mean(0)?)?;
    let mmd = gap.sqr()?.sum_all()?;
    Ok(((l0 * beta)? + mmd)?)
}

/// PRI loss with clean (unmasked) encoder embeddings of `x` and `v*`, both `(B, T, F)`.
pub fn pri_loss<R: Rng>(
    encoder: &Encoder,
    x: &Tensor,
    v_star: &Tensor,
    alpha: &Tensor,
    beta: f64,
    hc: &HardConcreteParams,
    rng: &mut R,
) -> Result<Tensor> {
    if x.dim(0)? == 0 {
        return Err(Error::Validation("empty batch".into()));
    }
    let z_x = encoder.forward(x, Pass::Clean, rng)?.pooled;
    let z_v = encoder.forward(v_star, Pass::Clean, rng)?.pooled;
    pri_loss_from_embeddings(&z_x, &z_v, alpha, beta, hc)
}

/// Anchor, positive and negative timestamps for one instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Samples one triplet per instance: a uniform anchor, a neighbouring
/// positive, and a negative uniformly among timestamps farther than `T/4`.
pub fn sample_triplets<R: Rng>(batch: usize, t: usize, rng: &mut R) -> Result<Vec<Triplet>> {
    if t < 3 {
        return Err(Error::Validation(format!(
            "mask length {t} is too short for a temporal triplet (need at least 3)"
        )));
    }
    let far = t as f64 / 4.0;
    (0..batch)
        .map(|_| {
            let anchor = rng.random_range(0..t);
            let positive = if anchor == 0 {
                1
            } else if anchor == t - 1 {
                t - 2
            } else if rng.random_bool(0.5) {
                anchor - 1
            } else {
                anchor + 1
            };
            let candidates: Vec<usize> = (0..t)
                .filter(|&n| (n as f64 - anchor as f64).abs() > far)
                .collect();
            if candidates.is_empty() {
                return Err(Error::Validation(format!("no negative for anchor {anchor} with T = {t}")));
            }
            let negative = candidates[rng.random_range(0..candidates.len())];
            Ok(Triplet {
                anchor,
                positive,
                negative,
            })
        })
        .collect()
}

/// `mean_x (|h_a − h_p| − |h_a − h_n|)` over a `(B, T)` mask batch.
pub fn temporal_triplet_loss(h: &Tensor, triplets: &[Triplet]) -> Result<Tensor> {
    let (b, t) = h.dims2()?;
    if b == 0 || triplets.len() != b {
        return Err(Error::Validation(format!("{} triplets for a batch of {b}", triplets.len())));
    }
    if t < 3 {
        return Err(Error::Validation(format!("mask length {t} is too short")));
    }
    let pick = |f: fn(&Triplet) -> usize| -> Result<Tensor> {
        let idx: Vec<u32> = triplets.iter().map(|tr| f(tr) as u32).collect();
        let idx = Tensor::from_vec(idx, (b, 1), h.device())?;
        Ok(h.gather(&idx, 1)?)
    };
    let ha = pick(|t| t.anchor)?;
    let hp = pick(|t| t.positive)?;
    let hn = pick(|t| t.negative)?;
    let diff = ((&ha - hp)?.abs()? - (ha - hn)?.abs()?)?;
    Ok(diff.mean_all()?)
}

/// `L_PRI + λ · L_t`.
pub fn aug_loss(l_pri: &Tensor, l_t: &Tensor, lambda: f64) -> Result<Tensor> {
    Ok((l_pri + (l_t * lambda)?)?)
}

/// In-batch InfoNCE over cosine similarities divided by `temperature`. The
/// positive for row `i` of `z_x` is row `i` of `z_v`; the denominator sums over
/// every view in the batch, positive included.
pub fn global_contrast_loss(z_x: &Tensor, z_v: &Tensor, temperature: f64) -> Result<Tensor> {
    let (b, _) = z_x.dims2()?;
    if b == 0 || z_v.dims2()?.0 != b {
        return Err(Error::Validation("global contrast needs matching non-empty batches".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::Validation(format!("temperature {temperature} must be positive")));
    }
    let zx = l2_normalize_last(z_x)?;
    let zv = l2_normalize_last(z_v)?;
    let sim = (zx.matmul(&zv.t()?)? / temperature)?;
    let eye = Tensor::eye(b, sim.dtype(), sim.device())?;
    let diag = (log_softmax_last(&sim)? * eye)?.sum(1)?;
    Ok(diag.mean(0)?.neg()?)
}

/// Subsequence-level contrast on per-timestamp view embeddings `(B, T, D)`.
///
/// Each view is cut into `⌊T/L⌋` segments embedded by max pooling. The
/// positive of segment `s` is `s + 1` (`s − 1` for the last segment); every
/// other segment is a negative. Returns the batch mean of the per-view losses.
pub fn local_contrast_loss(per_step: &Tensor, seg_len: usize, temperature: f64) -> Result<Tensor> {
    let (b, t, d) = per_step.dims3()?;
    if b == 0 {
        return Err(Error::Validation("empty batch".into()));
    }
    if seg_len == 0 || t < 3 * seg_len {
        return Err(Error::Validation(format!(
            "local contrast needs T >= 3L (T = {t}, L = {seg_len})"
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::Validation(format!("temperature {temperature} must be positive")));
    }
    let k = t / seg_len;
    let segs = per_step
        .narrow(1, 0, k * seg_len)?
        .reshape((b, k, seg_len, d))?
        .max(2)?;
    let segs = l2_normalize_last(&segs)?;
    let sim = (segs.matmul(&segs.transpose(1, 2)?.contiguous()?)? / temperature)?;
    // remove self-similarity from every softmax
    let mut self_mask = vec![0f64; k * k];
    for s in 0..k {
        self_mask[s * k + s] = -1e30;
    }
    let self_mask = Tensor::from_vec(self_mask, (k, k), &Device::Cpu)?.to_dtype(sim.dtype())?;
    let logp = log_softmax_last(&sim.broadcast_add(&self_mask)?)?;
    let pos: Vec<u32> = (0..k)
        .map(|s| if s + 1 < k { s as u32 + 1 } else { s as u32 - 1 })
        .collect();
    let pos = Tensor::from_vec(pos, (1, k, 1), &Device::Cpu)?.broadcast_as((b, k, 1))?.contiguous()?;
    let picked = logp.gather(&pos, D::Minus1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// `L_g + α · L_l`.
pub fn contrastive_loss(l_g: &Tensor, l_l: &Tensor, alpha: f64) -> Result<Tensor> {
    Ok((l_g + (l_l * alpha)?)?)
}
