//! Minimal layer and optimizer plumbing on top of candle's autograd.

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A named array of weights, widened to f64 for storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(with = "b64")]
    pub data: Vec<f64>,
}

/// Serializes `Vec<f64>` as base64 of the little-endian bytes, so values
/// survive a JSON round trip bit for bit.
pub(crate) mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = STANDARD.decode(text).map_err(D::Error::custom)?;
        if bytes.len() % 8 != 0 {
            return Err(D::Error::custom(format!("{} bytes is not a whole number of f64 values", bytes.len())));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub(crate) fn tensor_to_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub(crate) fn tensor_from_f64(data: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Ordered collection of trainable variables of one network.
#[derive(Debug, Clone)]
pub struct Params {
    dtype: DType,
    entries: Vec<(String, Var)>,
}

impl Params {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            entries: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Registers a variable initialized uniformly in `[-bound, bound]`.
    pub fn uniform<R: Rng>(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut R) -> Result<Var> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        let var = Var::from_tensor(&tensor_from_f64(data, shape, self.dtype)?)?;
        self.entries.push((name.to_string(), var.clone()));
        Ok(var)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    /// Overwrites one variable from f64 data of the same element count.
    pub fn set(&self, name: &str, data: Vec<f64>) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::Validation(format!("no parameter named `{name}`")))?;
        let shape = var.dims().to_vec();
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Validation(format!(
                "parameter `{name}` has shape {shape:?}, got {} values",
                data.len()
            )));
        }
        var.set(&tensor_from_f64(data, &shape, self.dtype)?)?;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn export(&self) -> Result<Vec<NamedArray>> {
        self.entries
            .iter()
            .map(|(name, var)| {
                Ok(NamedArray {
                    name: name.clone(),
                    shape: var.dims().to_vec(),
                    data: tensor_to_f64(var.as_tensor())?,
                })
            })
            .collect()
    }

    pub fn import(&self, arrays: &[NamedArray]) -> Result<()> {
        if arrays.len() != self.entries.len() {
            return Err(Error::Validation(format!(
                "expected {} parameter arrays, found {}",
                self.entries.len(),
                arrays.len()
            )));
        }
        for ((name, var), arr) in self.entries.iter().zip(arrays) {
            if *name != arr.name || var.dims() != arr.shape.as_slice() {
                return Err(Error::Validation(format!(
                    "parameter mismatch: `{name}` {:?} vs `{}` {:?}",
                    var.dims(),
                    arr.name,
                    arr.shape
                )));
            }
            var.set(&tensor_from_f64(arr.data.clone(), &arr.shape, self.dtype)?)?;
        }
        Ok(())
    }

    /// SHA-256 over the bit patterns of every weight.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.entries {
            h.update(name.as_bytes());
            for v in tensor_to_f64(var.as_tensor())? {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// Per-timestamp affine map `(B, T, in) -> (B, T, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new<R: Rng>(params: &mut Params, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        Ok(Self {
            weight: params.uniform(&format!("{name}.weight"), &[d_in, d_out], bound, rng)?,
            bias: params.uniform(&format!("{name}.bias"), &[d_out], bound, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d_in) = x.dims3()?;
        let d_out = self.weight.dim(1)?;
        let y = x
            .reshape((b * t, d_in))?
            .matmul(self.weight.as_tensor())?
            .broadcast_add(self.bias.as_tensor())?;
        Ok(y.reshape((b, t, d_out))?)
    }
}

/// Residual block `x + conv_d(gelu(x))` with kernel 3 and "same" padding.
#[derive(Debug, Clone)]
struct DilatedBlock {
    weight: Var,
    bias: Var,
    dilation: usize,
}

pub const KERNEL_SIZE: usize = 3;

/// Same-padded dilated convolution of `(B, C, T)` with a `(C_out, C, K)` kernel,
/// as shifted slices and one matmul.
fn dilated_conv(x: &Tensor, weight: &Tensor, dilation: usize) -> Result<Tensor> {
    let (b, c, t) = x.dims3()?;
    let (c_out, _, k) = weight.dims3()?;
    let pad = dilation * (k - 1) / 2;
    let padded = x.pad_with_zeros(2, pad, pad)?;
    let taps = (0..k)
        .map(|j| padded.narrow(2, j * dilation, t))
        .collect::<candle_core::Result<Vec<_>>>()?;
    let cols = Tensor::stack(&taps, 2)?.reshape((b, c * k, t))?;
    Ok(weight.reshape((1, c_out, c * k))?.broadcast_matmul(&cols)?)
}

/// Stack of residual dilated convolutions with dilation `2^l` at block `l`.
/// Operates on channel-major tensors `(B, C, T)`.
#[derive(Debug, Clone)]
pub struct DilatedConvStack {
    blocks: Vec<DilatedBlock>,
}

impl DilatedConvStack {
    pub fn new<R: Rng>(params: &mut Params, name: &str, channels: usize, depth: usize, rng: &mut R) -> Result<Self> {
        let bound = 1.0 / ((channels * KERNEL_SIZE) as f64).sqrt();
        let blocks = (0..depth)
            .map(|l| {
                Ok(DilatedBlock {
                    weight: params.uniform(
                        &format!("{name}.{l}.weight"),
                        &[channels, channels, KERNEL_SIZE],
                        bound,
                        rng,
                    )?,
                    bias: params.uniform(&format!("{name}.{l}.bias"), &[1, channels, 1], bound, rng)?,
                    dilation: 1 << l,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Runs the stack, calling `inspect(block_index, output)` after each block.
    pub fn forward_with(
        &self,
        x: &Tensor,
        mut inspect: impl FnMut(usize, &Tensor) -> Result<()>,
    ) -> Result<Tensor> {
        let mut h = x.clone();
        for (l, blk) in self.blocks.iter().enumerate() {
            let y = dilated_conv(&h.gelu_erf()?, blk.weight.as_tensor(), blk.dilation)?
                .broadcast_add(blk.bias.as_tensor())?;
            h = (h + y)?;
            inspect(l, &h)?;
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with(x, |_, _| Ok(()))
    }
}

/// Fails with a numerical error if `t` holds a NaN or infinity.
pub(crate) fn ensure_finite(t: &Tensor, layer: Option<usize>, what: &str) -> Result<()> {
    let s = t.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::numerical(layer, format!("non-finite {what}")))
    }
}

/// Logistic sigmoid written through `tanh` so both tails stay finite.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

/// Row-wise log-softmax over the last dimension.
pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Divides each row (last dimension) by its Euclidean norm.
/// Fails if any row has zero norm.
pub fn l2_normalize_last(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let min = norm
        .flatten_all()?
        .min(0)?
        .to_dtype(DType::F64)?
        .to_scalar::<f64>()?;
    if !(min > 0.0) || !min.is_finite() {
        return Err(Error::numerical(None, "zero-norm embedding in cosine similarity"));
    }
    Ok(x.broadcast_div(&norm)?)
}

#[derive(Debug, Clone)]
struct AdamSlot {
    m: Tensor,
    v: Tensor,
    steps: u64,
}

/// Serializable optimizer moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// One entry per parameter; `None` for parameters never updated.
    pub slots: Vec<Option<AdamSlotState>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamSlotState {
    pub steps: u64,
    #[serde(with = "b64")]
    pub m: Vec<f64>,
    #[serde(with = "b64")]
    pub v: Vec<f64>,
}

/// Adaptive moment estimation over a fixed set of variables.
///
/// Variables without a gradient in a step are left untouched, including
/// their moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    vars: Vec<Var>,
    slots: Vec<Option<AdamSlot>>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(vars: Vec<Var>, lr: f64) -> Self {
        let slots = vec![None; vars.len()];
        Self {
            vars,
            slots,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        for (var, slot) in self.vars.iter().zip(self.slots.iter_mut()) {
            let Some(g) = grads.get(var) else { continue };
            let g = &g.detach();
            let s = match slot {
                Some(s) => s,
                None => slot.insert(AdamSlot {
                    m: g.zeros_like()?,
                    v: g.zeros_like()?,
                    steps: 0,
                }),
            };
            s.steps += 1;
            s.m = ((&s.m * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            s.v = ((&s.v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let bc1 = 1.0 - self.beta1.powi(s.steps as i32);
            let bc2 = 1.0 - self.beta2.powi(s.steps as i32);
            let m_hat = (&s.m / bc1)?;
            let v_hat = (&s.v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor().detach() - (update * self.lr)?)?)?;
        }
        Ok(())
    }

    pub fn state(&self) -> Result<AdamState> {
        let slots = self
            .slots
            .iter()
            .map(|s| {
                s.as_ref()
                    .map(|s| {
                        Ok(AdamSlotState {
                            steps: s.steps,
                            m: tensor_to_f64(&s.m)?,
                            v: tensor_to_f64(&s.v)?,
                        })
                    })
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AdamState {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            slots,
        })
    }

    pub fn restore(&mut self, state: &AdamState) -> Result<()> {
        if state.slots.len() != self.vars.len() {
            return Err(Error::Validation(format!(
                "optimizer state has {} slots for {} parameters",
                state.slots.len(),
                self.vars.len()
            )));
        }
        self.lr = state.lr;
        self.beta1 = state.beta1;
        self.beta2 = state.beta2;
        self.eps = state.eps;
        for ((var, slot), saved) in self.vars.iter().zip(self.slots.iter_mut()).zip(&state.slots) {
            *slot = match saved {
                None => None,
                Some(s) => {
                    let shape = var.dims();
                    Some(AdamSlot {
                        m: tensor_from_f64(s.m.clone(), shape, var.dtype())?,
                        v: tensor_from_f64(s.v.clone(), shape, var.dtype())?,
                        steps: s.steps,
                    })
                }
            };
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sigmoid_matches_logistic() {
        let xs: [f64; 5] = [-40.0, -3.0, 0.0, 0.7, 25.0];
        let t = Tensor::new(&xs, &Device::Cpu).unwrap();
        let s = sigmoid(&t).unwrap().to_vec1::<f64>().unwrap();
        for (x, y) in xs.iter().zip(s) {
            assert!((y - 1.0 / (1.0 + (-x).exp())).abs() < 1e-15);
        }
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let t = Tensor::new(&[[1.0f64, 2.0, 3.0], [1000.0, 1000.0, 1000.0]], &Device::Cpu).unwrap();
        let ls = log_softmax_last(&t).unwrap().exp().unwrap().sum(1).unwrap();
        for v in ls.to_vec1::<f64>().unwrap() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_norm_is_numerical_error() {
        let t = Tensor::new(&[[0.0f64, 0.0], [1.0, 0.0]], &Device::Cpu).unwrap();
        assert!(matches!(l2_normalize_last(&t), Err(Error::Numerical { .. })));
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = Params::new(DType::F64);
        let w = p.uniform("w", &[3], 1.0, &mut rng).unwrap();
        let mut opt = Adam::new(p.vars(), 0.05);
        let target = Tensor::new(&[1.0f64, -2.0, 0.5], &Device::Cpu).unwrap();
        for _ in 0..600 {
            let loss = (w.as_tensor() - &target).unwrap().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
        }
        let got = w.as_tensor().to_vec1::<f64>().unwrap();
        for (g, t) in got.iter().zip([1.0, -2.0, 0.5]) {
            assert!((g - t).abs() < 1e-3, "{got:?}");
        }
    }

    #[test]
    fn adam_state_roundtrip_continues_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = Params::new(DType::F64);
        let w = p.uniform("w", &[4], 1.0, &mut rng).unwrap();
        let mut a = Adam::new(p.vars(), 0.01);
        let loss = |w: &Var| w.as_tensor().sqr().unwrap().sum_all().unwrap();
        for _ in 0..3 {
            a.step(&loss(&w).backward().unwrap()).unwrap();
        }
        let saved_w = p.export().unwrap();
        let saved_opt = a.state().unwrap();
        a.step(&loss(&w).backward().unwrap()).unwrap();
        let expected = p.checksum().unwrap();

        p.import(&saved_w).unwrap();
        let mut b = Adam::new(p.vars(), 0.5);
        b.restore(&saved_opt).unwrap();
        b.step(&loss(&w).backward().unwrap()).unwrap();
        assert_eq!(p.checksum().unwrap(), expected);
    }
}
