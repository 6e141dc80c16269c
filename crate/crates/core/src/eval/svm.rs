//! RBF-kernel support vector classifier (SMO, one-vs-one).

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const TOL: f64 = 1e-3;
const TAU: f64 = 1e-12;

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `1 / median` of the pairwise squared distances (1.0 if the median is 0).
pub fn median_gamma(x: ArrayView2<'_, f64>) -> f64 {
    let n = x.nrows();
    let mut d: Vec<f64> = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(sq_dist(x.row(i), x.row(j)));
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    let median = if d.len() % 2 == 0 { 0.5 * (d[mid - 1] + d[mid]) } else { d[mid] };
    if median > 0.0 && median.is_finite() {
        1.0 / median
    } else {
        1.0
    }
}

fn rbf(x: ArrayView2<'_, f64>, gamma: f64) -> Array2<f64> {
    let n = x.nrows();
    Array2::from_shape_fn((n, n), |(i, j)| (-gamma * sq_dist(x.row(i), x.row(j))).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Binary {
    pos: usize,
    neg: usize,
    /// Indices into the training set, with `y_i α_i`.
    support: Vec<(usize, f64)>,
    rho: f64,
}

/// Dual coordinate ascent with maximal-violating-pair selection.
fn smo(k: &Array2<f64>, idx: &[usize], y: &[f64], c: f64) -> (Vec<f64>, f64) {
    let n = idx.len();
    let q = |a: usize, b: usize| y[a] * y[b] * k[[idx[a], idx[b]]];
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let max_iter = 10_000_000usize.min(100 * n.max(1) * n.max(1)).max(1000);
    for _ in 0..max_iter {
        let mut i = usize::MAX;
        let mut gmax = f64::NEG_INFINITY;
        let mut j = usize::MAX;
        let mut gmin = f64::INFINITY;
        for t in 0..n {
            let v = -y[t] * grad[t];
            let up = (y[t] > 0.0 && alpha[t] < c) || (y[t] < 0.0 && alpha[t] > 0.0);
            let low = (y[t] > 0.0 && alpha[t] > 0.0) || (y[t] < 0.0 && alpha[t] < c);
            if up && v > gmax {
                gmax = v;
                i = t;
            }
            if low && v < gmin {
                gmin = v;
                j = t;
            }
        }
        if i == usize::MAX || j == usize::MAX || gmax - gmin < TOL {
            break;
        }
        let (old_i, old_j) = (alpha[i], alpha[j]);
        if y[i] != y[j] {
            let quad = (q(i, i) + q(j, j) + 2.0 * q(i, j)).max(TAU);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = (q(i, i) + q(j, j) - 2.0 * q(i, j)).max(TAU);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..n {
            grad[t] += q(t, i) * di + q(t, j) * dj;
        }
    }
    // offset
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut free, mut sum) = (0usize, 0.0);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 { ub = ub.min(yg) } else { lb = lb.max(yg) }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 { ub = ub.min(yg) } else { lb = lb.max(yg) }
        } else {
            free += 1;
            sum += yg;
        }
    }
    let rho = if free > 0 { sum / free as f64 } else { 0.5 * (ub + lb) };
    (alpha, rho)
}

/// Multi-class RBF SVM trained one-vs-one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Svm {
    pub gamma: f64,
    pub c: f64,
    n_classes: usize,
    train: Array2<f64>,
    machines: Vec<Binary>,
}

impl Svm {
    pub fn fit(x: ArrayView2<'_, f64>, labels: &[usize], c: f64, gamma: f64) -> Result<Svm> {
        if x.nrows() != labels.len() {
            return Err(Error::Validation(format!("{} embeddings for {} labels", x.nrows(), labels.len())));
        }
        let n_classes = labels.iter().max().map_or(0, |m| m + 1);
        let present: Vec<usize> = (0..n_classes).filter(|k| labels.contains(k)).collect();
        if present.len() < 2 {
            return Err(Error::Validation("classifier needs at least two classes in the training set".into()));
        }
        let kernel = rbf(x, gamma);
        let mut machines = Vec::new();
        for (a, &pos) in present.iter().enumerate() {
            for &neg in &present[a + 1..] {
                let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == pos || labels[i] == neg).collect();
                let y: Vec<f64> = idx.iter().map(|&i| if labels[i] == pos { 1.0 } else { -1.0 }).collect();
                let (alpha, rho) = smo(&kernel, &idx, &y, c);
                let support = idx
                    .iter()
                    .zip(alpha.iter().zip(&y))
                    .filter(|(_, (a, _))| **a > 0.0)
                    .map(|(&i, (a, yy))| (i, a * yy))
                    .collect();
                machines.push(Binary { pos, neg, support, rho });
            }
        }
        Ok(Svm {
            gamma,
            c,
            n_classes,
            train: x.to_owned(),
            machines,
        })
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Vec<usize> {
        x.rows()
            .into_iter()
            .map(|row| {
                let mut votes = vec![0usize; self.n_classes];
                for m in &self.machines {
                    let f: f64 = m
                        .support
                        .iter()
                        .map(|&(i, ya)| ya * (-self.gamma * sq_dist(self.train.row(i), row)).exp())
                        .sum::<f64>()
                        - m.rho;
                    votes[if f > 0.0 { m.pos } else { m.neg }] += 1;
                }
                // ties go to the lowest class index
                let best = *votes.iter().max().expect("at least one class");
                votes.iter().position(|&v| v == best).expect("max exists")
            })
            .collect()
    }
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

/// Picks `C` on a held-out fold (every fifth instance of each class), then
/// refits on all training data with the median-heuristic bandwidth.
pub fn fit_svm_selected(x: ArrayView2<'_, f64>, labels: &[usize], grid: &[f64]) -> Result<Svm> {
    if grid.is_empty() {
        return Err(Error::Validation("empty penalty grid".into()));
    }
    let gamma = median_gamma(x);
    let mut seen = std::collections::HashMap::new();
    let mut fit_idx = Vec::new();
    let mut hold_idx = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        let k = seen.entry(l).or_insert(0usize);
        if *k % 5 == 4 { hold_idx.push(i) } else { fit_idx.push(i) }
        *k += 1;
    }
    let mut fit_classes: Vec<usize> = fit_idx.iter().map(|&i| labels[i]).collect();
    fit_classes.sort_unstable();
    fit_classes.dedup();
    let mut c_best = grid[0];
    if !hold_idx.is_empty() && fit_classes.len() >= 2 {
        let xf = x.select(ndarray::Axis(0), &fit_idx);
        let yf: Vec<usize> = fit_idx.iter().map(|&i| labels[i]).collect();
        let xh = x.select(ndarray::Axis(0), &hold_idx);
        let yh: Vec<usize> = hold_idx.iter().map(|&i| labels[i]).collect();
        let mut best = f64::NEG_INFINITY;
        for &c in grid {
            let acc = accuracy(&Svm::fit(xf.view(), &yf, c, gamma)?.predict(xh.view()), &yh);
            if acc > best {
                best = acc;
                c_best = c;
            }
        }
    }
    Svm::fit(x, labels, c_best, gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn separable_two_class() {
        let x = array![[0.0, 0.0], [0.1, 0.2], [0.2, 0.1], [3.0, 3.0], [3.1, 2.9], [2.8, 3.2]];
        let y = [0, 0, 0, 1, 1, 1];
        let svm = Svm::fit(x.view(), &y, 10.0, median_gamma(x.view())).unwrap();
        assert_eq!(svm.predict(x.view()), y);
        let test = array![[0.05, 0.05], [2.9, 3.1]];
        assert_eq!(svm.predict(test.view()), vec![0, 1]);
    }

    #[test]
    fn three_classes() {
        let centers = [[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]];
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for (k, c) in centers.iter().enumerate() {
            for i in 0..6 {
                let d = i as f64 * 0.1;
                rows.extend([c[0] + d, c[1] - d]);
                y.push(k);
            }
        }
        let x = Array2::from_shape_vec((18, 2), rows).unwrap();
        let svm = fit_svm_selected(x.view(), &y, &[0.1, 1.0, 10.0, 100.0]).unwrap();
        assert_eq!(accuracy(&svm.predict(x.view()), &y), 1.0);
    }

    #[test]
    fn single_class_rejected() {
        let x = array![[0.0], [1.0]];
        assert!(matches!(Svm::fit(x.view(), &[1, 1], 1.0, 1.0), Err(Error::Validation(_))));
    }
}
