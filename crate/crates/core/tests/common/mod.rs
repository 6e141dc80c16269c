//! Independent reference implementations used as test oracles. The loss and
//! law oracles work on plain `f64` slices and never call into the library.

#![allow(dead_code)]

use candle_core::{Device, Tensor, Var};
use rand::Rng;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Hard-concrete law with CDF `σ(τ(log(u−γ) − log(ζ−u)) − α)`.
pub struct ConcreteLaw {
    pub tau: f64,
    pub gamma: f64,
    pub zeta: f64,
}

impl ConcreteLaw {
    pub fn cdf(&self, u: f64, pi: f64) -> f64 {
        sigmoid(self.tau * ((u - self.gamma).ln() - (self.zeta - u).ln()) - logit(pi))
    }

    pub fn p_zero(&self, pi: f64) -> f64 {
        self.cdf(0.0, pi)
    }

    pub fn p_one(&self, pi: f64) -> f64 {
        1.0 - self.cdf(1.0, pi)
    }

    /// `E[h] = ∫₀¹ (1 − F(u)) du` by the midpoint rule.
    pub fn mean(&self, pi: f64) -> f64 {
        let n = 200_000;
        let w = 1.0 / n as f64;
        (0..n).map(|i| 1.0 - self.cdf((i as f64 + 0.5) * w, pi)).sum::<f64>() * w
    }

    /// `E[h²] = ∫₀¹ 2u (1 − F(u)) du`.
    pub fn second_moment(&self, pi: f64) -> f64 {
        let n = 200_000;
        let w = 1.0 / n as f64;
        (0..n)
            .map(|i| {
                let u = (i as f64 + 0.5) * w;
                2.0 * u * (1.0 - self.cdf(u, pi))
            })
            .sum::<f64>()
            * w
    }

    /// One draw by inverting the logistic noise directly.
    pub fn draw<R: Rng>(&self, pi: f64, rng: &mut R) -> f64 {
        let eps: f64 = loop {
            let e: f64 = rng.random();
            if e > 0.0 {
                break e;
            }
        };
        let s = sigmoid((logit(eps) + logit(pi)) / self.tau);
        (s * (self.zeta - self.gamma) + self.gamma).clamp(0.0, 1.0)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// `-log(exp(s_pos) / Σ exp(s_j))` over the given candidate similarities.
fn nce_term(pos: f64, all: &[f64]) -> f64 {
    let m = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + all.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
    lse - pos
}

/// Rows of `zx` and `zv` are `(B, D)`.
pub fn global_infonce(zx: &[Vec<f64>], zv: &[Vec<f64>], temp: f64) -> f64 {
    let b = zx.len();
    let mut total = 0.0;
    for i in 0..b {
        let sims: Vec<f64> = (0..b).map(|j| cosine(&zx[i], &zv[j]) / temp).collect();
        total += nce_term(sims[i], &sims);
    }
    total / b as f64
}

/// `per_step[b][t][d]`. Segment `s` is contrasted against every other
/// segment, with `s + 1` (or `s − 1` for the last one) as the positive.
pub fn local_contrast(per_step: &[Vec<Vec<f64>>], seg_len: usize, temp: f64) -> f64 {
    let mut total = 0.0;
    let mut count = 0.0;
    for view in per_step {
        let t = view.len();
        let d = view[0].len();
        let k = t / seg_len;
        let segs: Vec<Vec<f64>> = (0..k)
            .map(|s| {
                (0..d)
                    .map(|c| {
                        (s * seg_len..(s + 1) * seg_len)
                            .map(|i| view[i][c])
                            .fold(f64::NEG_INFINITY, f64::max)
                    })
                    .collect()
            })
            .collect();
        for s in 0..k {
            let pos = if s + 1 < k { s + 1 } else { s - 1 };
            let others: Vec<f64> = (0..k).filter(|&j| j != s).map(|j| cosine(&segs[s], &segs[j]) / temp).collect();
            total += nce_term(cosine(&segs[s], &segs[pos]) / temp, &others);
            count += 1.0;
        }
    }
    total / count
}

/// `(anchor, positive, negative)` per row of `h`.
pub fn triplet(h: &[Vec<f64>], idx: &[(usize, usize, usize)]) -> f64 {
    h.iter()
        .zip(idx)
        .map(|(row, &(a, p, n))| (row[a] - row[p]).abs() - (row[a] - row[n]).abs())
        .sum::<f64>()
        / h.len() as f64
}

/// `β · mean_b(Σ_t σ(α_bt − τ log(−γ/ζ)) / T) + ‖mean zx − mean zv‖²`.
pub fn pri(zx: &[Vec<f64>], zv: &[Vec<f64>], alpha: &[Vec<f64>], beta: f64, law: &ConcreteLaw) -> f64 {
    let b = zx.len() as f64;
    let off = law.tau * (-law.gamma / law.zeta).ln();
    let l0: f64 = alpha
        .iter()
        .map(|row| row.iter().map(|a| 1.0 - sigmoid(off - a)).sum::<f64>() / row.len() as f64)
        .sum::<f64>()
        / b;
    let d = zx[0].len();
    let mmd: f64 = (0..d)
        .map(|c| {
            let mx: f64 = zx.iter().map(|r| r[c]).sum::<f64>() / b;
            let mv: f64 = zv.iter().map(|r| r[c]).sum::<f64>() / b;
            (mx - mv).powi(2)
        })
        .sum();
    beta * l0 + mmd
}

/// Central finite difference of `f` at every coordinate of `x`.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a − n| / max(|a|, |n|, floor)` over paired gradients.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn rows(flat: &[f64], cols: usize) -> Vec<Vec<f64>> {
    flat.chunks(cols).map(|c| c.to_vec()).collect()
}

pub fn var(flat: &[f64], shape: &[usize]) -> Var {
    Var::from_tensor(&Tensor::from_vec(flat.to_vec(), shape, &Device::Cpu).unwrap()).unwrap()
}

pub fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

pub fn random_vec<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Ridge by Gauss-Jordan elimination on the normal equations of the
/// bias-augmented design, with the bias column unpenalized.
pub fn ridge_normal_equations(x: &[Vec<f64>], y: &[Vec<f64>], l2: f64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = x.len();
    let p = x[0].len() + 1;
    let k = y[0].len();
    let design: Vec<Vec<f64>> = x.iter().map(|r| r.iter().copied().chain([1.0]).collect()).collect();
    let mut a = vec![vec![0.0; p + k]; p];
    for i in 0..p {
        for j in 0..p {
            a[i][j] = (0..n).map(|r| design[r][i] * design[r][j]).sum();
        }
        if i + 1 < p {
            a[i][i] += l2;
        }
        for c in 0..k {
            a[i][p + c] = (0..n).map(|r| design[r][i] * y[r][c]).sum();
        }
    }
    for col in 0..p {
        let piv = (col..p).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        let d = a[col][col];
        for v in a[col].iter_mut() {
            *v /= d;
        }
        for r in 0..p {
            if r != col {
                let f = a[r][col];
                let pivot_row = a[col].clone();
                for (v, pv) in a[r].iter_mut().zip(pivot_row) {
                    *v -= f * pv;
                }
            }
        }
    }
    let weights: Vec<Vec<f64>> = (0..p - 1).map(|i| a[i][p..].to_vec()).collect();
    let bias = a[p - 1][p..].to_vec();
    (weights, bias)
}

/// Mean length of maximal runs of entries equal to 1.
pub fn mean_run_of_ones(h: &[f64]) -> Option<f64> {
    let mut runs = Vec::new();
    let mut cur = 0;
    for &v in h.iter().chain([0.0].iter()) {
        if v == 1.0 {
            cur += 1;
        } else if cur > 0 {
            runs.push(cur as f64);
            cur = 0;
        }
    }
    (!runs.is_empty()).then(|| runs.iter().sum::<f64>() / runs.len() as f64)
}

/// Checks the autograd gradient of `loss` against central differences for
/// every named parameter accepted by `select`. Returns the worst relative error.
pub fn param_grad_error(
    params: &autotcl::nn::Params,
    select: impl Fn(&str) -> bool,
    loss: impl Fn() -> Tensor,
) -> f64 {
    let value = |l: Tensor| l.to_scalar::<f64>().unwrap();
    let grads = loss().backward().unwrap();
    let names: Vec<String> = params.names().filter(|n| select(n)).map(String::from).collect();
    assert!(!names.is_empty());
    let mut worst: f64 = 0.0;
    for name in names {
        let var = params.get(&name).unwrap().clone();
        let base = flat(var.as_tensor());
        let analytic = flat(grads.get(&var).unwrap());
        let numeric = numeric_grad(&base, 1e-6, |p| {
            params.set(&name, p.to_vec()).unwrap();
            value(loss())
        });
        params.set(&name, base).unwrap();
        worst = worst.max(max_rel_err(&analytic, &numeric, 1e-5));
    }
    worst
}
