//! Dilated-convolution representation network.

use candle_core::{DType, Tensor};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::series_tensor;
use crate::error::{Error, Result};
use crate::nn::{ensure_finite, tensor_from_f64, tensor_to_f64, DilatedConvStack, Linear, Params, KERNEL_SIZE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub depth: usize,
    pub hidden_dim: usize,
    pub repr_dim: usize,
    /// Dropout on the trunk output during training passes.
    pub dropout: f64,
    /// Probability that a timestamp of the first hidden layer is zeroed.
    pub mask_prob: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            depth: 10,
            hidden_dim: 64,
            repr_dim: 320,
            dropout: 0.1,
            mask_prob: 0.5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("encoder.depth", "must be at least 1"));
        }
        if self.hidden_dim == 0 {
            return Err(Error::config("encoder.hidden_dim", "must be at least 1"));
        }
        if self.repr_dim == 0 {
            return Err(Error::config("encoder.repr_dim", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("encoder.dropout", "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::config("encoder.mask_prob", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Number of input timestamps that can influence one output timestamp.
pub fn receptive_field(cfg: &EncoderConfig) -> usize {
    1 + (0..cfg.depth).map(|l| (KERNEL_SIZE - 1) << l).sum::<usize>()
}

/// How a forward pass treats its stochastic parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    /// No masking, no dropout.
    Clean,
    /// Training pass: dropout is active; `eta` toggles random timestamp masking.
    Train { eta: bool },
}

/// Batched encoder output.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `(B, T, D)`.
    pub per_step: Tensor,
    /// `(B, D)`, max over time.
    pub pooled: Tensor,
}

/// Per-instance encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct Representation {
    pub per_step: Array2<f64>,
    pub pooled: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    params: Params,
    input: Linear,
    trunk: DilatedConvStack,
    head: Linear,
}

fn bernoulli_keep<R: Rng>(n: usize, drop_prob: f64, scale: f64, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| if rng.random::<f64>() < drop_prob { 0.0 } else { scale })
        .collect()
}

impl Encoder {
    pub fn new<R: Rng>(cfg: &EncoderConfig, n_features: usize, dtype: DType, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut params = Params::new(dtype);
        let input = Linear::new(&mut params, "enc.input", n_features, cfg.hidden_dim, rng)?;
        let trunk = DilatedConvStack::new(&mut params, "enc.trunk", cfg.hidden_dim, cfg.depth, rng)?;
        let head = Linear::new(&mut params, "enc.head", cfg.hidden_dim, cfg.repr_dim, rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            params,
            input,
            trunk,
            head,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    /// Encodes a `(B, T, F)` batch.
    pub fn forward<R: Rng>(&self, x: &Tensor, pass: Pass, rng: &mut R) -> Result<Encoded> {
        let (b, t, _) = x.dims3()?;
        let dtype = x.dtype();
        let mut hidden = self.input.forward(x)?;
        if let Pass::Train { eta: true } = pass {
            if self.cfg.mask_prob > 0.0 {
                let keep = bernoulli_keep(b * t, self.cfg.mask_prob, 1.0, rng);
                let keep = tensor_from_f64(keep, &[b, t, 1], dtype)?;
                hidden = hidden.broadcast_mul(&keep)?;
            }
        }
        let mut z = self
            .trunk
            .forward(&hidden.transpose(1, 2)?)?
            .transpose(1, 2)?
            .contiguous()?;
        if matches!(pass, Pass::Train { .. }) && self.cfg.dropout > 0.0 {
            let h = self.cfg.hidden_dim;
            let keep = bernoulli_keep(b * t * h, self.cfg.dropout, 1.0 / (1.0 - self.cfg.dropout), rng);
            z = (z * tensor_from_f64(keep, &[b, t, h], dtype)?)?;
        }
        let per_step = self.head.forward(&z)?;
        let pooled = per_step.max(1)?;
        Ok(Encoded { per_step, pooled })
    }

    /// Encodes one `T x F` series. With `apply_eta` the pass is a training
    /// pass (timestamp masking and dropout); otherwise it is deterministic.
    pub fn encode<R: Rng>(&self, x: &Array2<f64>, apply_eta: bool, rng: &mut R) -> Result<Representation> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(None, "non-finite input series"));
        }
        let pass = if apply_eta { Pass::Train { eta: true } } else { Pass::Clean };
        let out = self.forward(&series_tensor(x, self.params.dtype())?, pass, rng)?;
        ensure_finite(&out.per_step, None, "encoder output")?;
        let (t, d) = (x.nrows(), self.cfg.repr_dim);
        let per_step = Array2::from_shape_vec((t, d), tensor_to_f64(&out.per_step)?).expect("T x D");
        Ok(Representation {
            per_step,
            pooled: tensor_to_f64(&out.pooled)?,
        })
    }

    /// Timestamp keep-mask that a training pass would draw for a `(B, T)` batch.
    /// Exposed so masking statistics can be checked independently of the network.
    pub fn sample_eta_mask<R: Rng>(&self, b: usize, t: usize, rng: &mut R) -> Vec<f64> {
        bernoulli_keep(b * t, self.cfg.mask_prob, 1.0, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(depth: usize, d: usize) -> EncoderConfig {
        EncoderConfig {
            depth,
            hidden_dim: 8,
            repr_dim: d,
            dropout: 0.0,
            mask_prob: 0.5,
        }
    }

    #[test]
    fn receptive_field_examples() {
        assert_eq!(receptive_field(&small(1, 4)), 3);
        assert_eq!(receptive_field(&small(3, 4)), 15);
        let independent: usize = 1 + (0..10).map(|l| 2usize * 2usize.pow(l)).sum::<usize>();
        assert_eq!(receptive_field(&small(10, 4)), independent);
        assert_eq!(independent, 2047);
    }

    #[test]
    fn shape_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::new(&small(3, 16), 7, DType::F32, &mut rng).unwrap();
        let x = Array2::from_shape_fn((50, 7), |(i, j)| ((i * 7 + j) as f64).sin());
        let r = enc.encode(&x, false, &mut rng).unwrap();
        assert_eq!(r.per_step.dim(), (50, 16));
        assert_eq!(r.pooled.len(), 16);
        // pooled is the max over time
        for d in 0..16 {
            let m = r.per_step.column(d).iter().cloned().fold(f64::MIN, f64::max);
            assert_eq!(m, r.pooled[d]);
        }
    }

    #[test]
    fn clean_pass_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoder::new(&small(2, 4), 2, DType::F64, &mut rng).unwrap();
        let x = Array2::from_shape_fn((12, 2), |(i, j)| (i as f64 - j as f64).cos());
        let a = enc.encode(&x, false, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = enc.encode(&x, false, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_mask_prob_makes_eta_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = EncoderConfig {
            mask_prob: 0.0,
            ..small(2, 4)
        };
        let enc = Encoder::new(&cfg, 3, DType::F64, &mut rng).unwrap();
        let x = Array2::from_shape_fn((9, 3), |(i, j)| (i * j) as f64 * 0.1);
        let masked = enc.encode(&x, true, &mut rng).unwrap();
        let clean = enc.encode(&x, false, &mut rng).unwrap();
        assert_eq!(masked, clean);
    }

    #[test]
    fn eta_changes_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = Encoder::new(&small(2, 4), 1, DType::F64, &mut rng).unwrap();
        let x = Array2::from_shape_fn((16, 1), |(i, _)| i as f64 / 4.0);
        let masked = enc.encode(&x, true, &mut rng).unwrap();
        let clean = enc.encode(&x, false, &mut rng).unwrap();
        assert_ne!(masked, clean);
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = Encoder::new(&small(1, 2), 1, DType::F64, &mut rng).unwrap();
        let mut x = Array2::zeros((5, 1));
        x[[2, 0]] = f64::NAN;
        assert!(matches!(enc.encode(&x, false, &mut rng), Err(Error::Numerical { .. })));
    }

    #[test]
    fn invalid_config_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for cfg in [
            EncoderConfig { depth: 0, ..small(1, 2) },
            EncoderConfig { repr_dim: 0, ..small(1, 2) },
            EncoderConfig { dropout: 1.0, ..small(1, 2) },
        ] {
            assert!(matches!(Encoder::new(&cfg, 1, DType::F64, &mut rng), Err(Error::Config { .. })));
        }
    }
}
